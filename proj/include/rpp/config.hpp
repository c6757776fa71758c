#pragma once

// Resolved run configuration. Keys are flat "section.name" strings; the
// file format is INI with one section per module:
//
//   seed = 0
//   [data]            SynthSpec fields (classes, noise, ...)
//   [student]         EncoderConfig fields (depth, dim, replace_layers, ...)
//   [student_backbone] pretraining of the frozen student backbone
//   [teacher]         TeacherConfig scalars (templates, tau, lr, ...)
//   [teacher_encoder] EncoderConfig fields of the teacher
//   [train]           TrainConfig fields (lr0, epochs, lambda, kd_norm, ...)
//   [eval]            evaluation protocol knobs
//   [verify]          verification suite knobs
//
// Grid, vocab and name-length fields of both encoders follow [data]; the
// per-module seeds follow the top-level seed.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rpp/encoder.hpp"
#include "rpp/synthdata.hpp"
#include "rpp/teacher.hpp"
#include "rpp/trainer.hpp"

namespace rpp {

using KeyValues = std::map<std::string, std::string>;

struct EvalConfig {
  double base_fraction = 0.5;
  std::size_t shots = 16;
  std::size_t finetune_epochs = 20;
  std::vector<std::size_t> shot_grid{1, 2, 4, 8, 16};
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct VerifyConfig {
  double grad_eps = 1e-5;
  double grad_tol = 1e-4;
  std::vector<double> lambdas{0.0, 0.5, 1.0, 2.0, 4.0};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::uint64_t> transfer_seeds{1, 2, 3, 4, 5};
  double transfer_lambda = 2.0;
  double kd_slack = 1e-3;
  double acc_slack = 0.01;
  std::size_t underfit_epochs = 0;  // 0 follows train.epochs
  double trend_lr0 = 0.001;         // lr0 of the sweep, underfit and transfer runs; 0 follows train.lr0
  std::size_t mc_trials = 100000;
};

struct RunConfig {
  std::uint64_t seed = 0;
  SynthSpec data;
  EncoderConfig student;
  BackboneConfig student_backbone;
  TeacherConfig teacher;
  TrainConfig train;
  EvalConfig eval;
  VerifyConfig verify;

  // Copies data geometry into both encoders and derives module seeds.
  void finalize();
  void validate() const;
  // Seed of the frozen random student backbone.
  std::uint64_t backbone_seed() const { return seed + 1; }
};

// Every key with its current value.
KeyValues to_kv(const RunConfig& cfg);
// Unknown key -> kConfig; unparsable value -> kConfig naming the key.
void set_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string to_ini(const RunConfig& cfg);

// Merges an INI file into `cfg` (throws kConfig / kIo).
void merge_config_file(RunConfig& cfg, const std::string& path);

// defaults < file (if non-empty) < overrides, then finalize + validate.
RunConfig resolve_config(const std::string& file, const std::vector<std::pair<std::string, std::string>>& overrides);

KeyValues encoder_to_kv(const EncoderConfig& cfg, const std::string& prefix);
EncoderConfig encoder_from_kv(const KeyValues& kv, const std::string& prefix);
KeyValues train_to_kv(const TrainConfig& cfg, const std::string& prefix);
TrainConfig train_from_kv(const KeyValues& kv, const std::string& prefix);
KeyValues synth_to_kv(const SynthSpec& spec, const std::string& prefix);
SynthSpec synth_from_kv(const KeyValues& kv, const std::string& prefix);

}  // namespace rpp
