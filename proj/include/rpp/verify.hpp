#pragma once

// Falsification suite: finite-difference gradient checks, exact identity
// checks, margin unbiasedness, and the desk-scale trend experiments
// (lambda sweep, underfitting, zero-shot transfer under distillation).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rpp/config.hpp"
#include "rpp/encoder.hpp"
#include "rpp/synthdata.hpp"
#include "rpp/teacher.hpp"
#include "rpp/trainer.hpp"

namespace rpp {

// ---- gradient check --------------------------------------------------------

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  double lambda = 2.0;
  double distill_temp = 1.0;
  std::uint64_t seed = 0;
  // Non-empty: corrupt this op's backward rule for the duration (negative control).
  std::string fault_op;
};

struct GradCheckReport {
  double eps = 0.0;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::vector<std::pair<std::string, double>> per_parameter;  // max rel err per tensor
  bool pass = false;

  std::string to_json() const;
};

// d=8, h=2, L=3, M=2 unshared prompts at layers {2, 3}; 2x2 patch grid.
EncoderConfig tiny_encoder();

// Central differences over every prompt scalar of the tiny model under
// ce + lambda * kd (C=6, N=3, K=4, random frozen teacher).
// rel err = |analytic - numeric| / max(1, |numeric|).
GradCheckReport grad_check_model(const GradCheckOptions& opts = {});

// ---- identity checks -------------------------------------------------------

struct IdentityCheck {
  std::string name;
  double value = 0.0;      // observed error or value
  double tolerance = 0.0;  // pass bound
  bool pass = false;
  std::string detail;
};

// K == C local contrast equals full-softmax clip probabilities.
IdentityCheck reduction_check(std::size_t instances, std::uint64_t seed);
// kd(p, p) ~ 0 and kd >= 0 over random distributions.
IdentityCheck kd_self_check(std::size_t instances, std::uint64_t seed);
IdentityCheck kd_nonnegative_check(std::size_t instances, std::uint64_t seed);
// N=1, K=2, teacher (0.5, 0.5), student (0.25, 0.75) -> 0.07192.
IdentityCheck kd_worked_value_check();
// SAPL with P_Q = P_K = P_V equals the shared-prompt block bitwise.
IdentityCheck degenerate_equivalence_check(std::size_t seeds);
// HM(0.8426, 0.7610) rounds to 0.7997.
IdentityCheck hm_spot_check();

std::vector<IdentityCheck> identity_checks(std::uint64_t seed);
std::string to_json(const std::vector<IdentityCheck>& checks);

// ---- margin unbiasedness ---------------------------------------------------

struct UnbiasednessReport {
  std::size_t c = 0;
  std::size_t k = 0;
  bool exact = false;
  std::size_t trials = 0;  // subsets enumerated or sampled
  double true_mass = 0.0;
  double estimate = 0.0;
  double rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  std::string to_json() const;
};

// E[e^m * sum_{j in S} exp(z_j)] vs sum_j exp(z_j) over the C-1 negatives of
// class 0. Exact enumeration for C <= 8, otherwise `trials` draws from
// sample_classes. Tolerances: 1e-12 exact, 1e-2 Monte Carlo.
UnbiasednessReport unbiasedness_check(std::size_t c, std::size_t k, std::size_t trials, std::uint64_t seed);

// ---- trend experiments -----------------------------------------------------

// Shared state of the trend experiments: corpus, frozen teacher and the
// frozen student backbone.
struct Workbench {
  RunConfig cfg;
  Corpus corpus;
  Dataset train;
  Dataset val;
  Dataset transfer;
  Dataset shifted;
  TeacherModel teacher;
  TeacherTargets targets;
  Backbone student_backbone;
  double teacher_ce = 0.0;  // teacher full-softmax CE on train
};

using Progress = std::function<void(const std::string&)>;

Workbench make_workbench(const RunConfig& cfg, const Progress& progress = {});
Workbench make_workbench(const RunConfig& cfg, Corpus corpus, TeacherModel teacher, Backbone student_backbone);

struct RunOutcome {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  bool diverged = false;
  std::string error;
  double final_kd = 0.0;  // mean over the last epoch's steps
  double final_ce = 0.0;
  double train_top1 = 0.0;
  double heldout_top1 = 0.0;
  double transfer_top1 = 0.0;
  double shifted_top1 = 0.0;
};

// One prompt-training run on the workbench; divergence is captured, not thrown.
RunOutcome run_student(const Workbench& wb, const EncoderConfig& student, TrainConfig cfg, std::uint64_t seed,
                       bool transfer_eval);

struct BoundRow {
  double lambda = 0.0;
  std::size_t runs = 0;  // non-diverged
  double final_kd = 0.0;
  double final_ce = 0.0;
  double train_error = 0.0;
  double heldout_error = 0.0;
  double lambda_kd = 0.0;
  double ce_gap = 0.0;  // teacher CE proxy minus student CE
};

struct BoundReport {
  std::vector<BoundRow> rows;
  std::vector<RunOutcome> runs;
  double teacher_ce = 0.0;
  double slack = 0.0;
  std::size_t diverged = 0;
  bool asserted = false;  // false for single-lambda sweeps
  bool monotone = true;
  bool pass = false;

  std::string to_json() const;
};

// Seed-mean final KD must be non-increasing in lambda within `slack`; the
// sweep fails when more than a third of the runs diverge.
BoundReport lambda_sweep(const Workbench& wb, std::span<const double> lambdas, std::span<const std::uint64_t> seeds,
                         const TrainConfig& base, double slack, const Progress& progress = {});

struct VariantResult {
  std::string name;
  EncoderConfig encoder;
  std::size_t prompt_parameters = 0;
  std::size_t replacement_parameters = 0;
  std::vector<double> train_top1;
  std::vector<double> heldout_top1;

  double mean_train() const;
  double mean_heldout() const;
};

struct UnderfitReport {
  std::vector<VariantResult> variants;  // input_only, shared_qkv, unshared
  std::vector<std::uint64_t> seeds;
  double slack = 0.0;
  double shared_gap = 0.0;  // unshared minus shared, train top-1
  bool pass = false;

  std::string to_json() const;
};

// The three prompt placements over the student encoder: input layer only;
// shared prompts of length 3M at layers {2..L}; unshared SAPL at {2..L}.
std::vector<std::pair<std::string, EncoderConfig>> underfit_variants(const EncoderConfig& student);

// Setup error if the shared and unshared replacement budgets differ by > 1%.
UnderfitReport underfit_experiment(const Workbench& wb, std::span<const std::uint64_t> seeds, const TrainConfig& base,
                                   double slack, const Progress& progress = {});

struct TransferReport {
  double lambda_off = 0.0;
  double lambda_on = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> off;  // transfer top-1 per seed
  std::vector<double> on;
  std::vector<double> shifted_off;
  std::vector<double> shifted_on;
  double prompt_free = 0.0;
  double teacher_top1 = 0.0;
  double mean_off = 0.0;
  double mean_on = 0.0;
  bool pass = false;

  std::string to_json() const;
};

// Seed-mean zero-shot transfer top-1 with distillation must be at least
// the undistilled value.
TransferReport transfer_experiment(const Workbench& wb, std::span<const std::uint64_t> seeds, const TrainConfig& base,
                                   double lambda_on, const Progress& progress = {});

}  // namespace rpp
