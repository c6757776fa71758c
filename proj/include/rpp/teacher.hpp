#pragma once

// Frozen teacher: a larger dual encoder trained with full-parameter tuning
// on the pretraining split, then queried for zero-shot class
// probabilities. Class prototypes are ensembled over text templates.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rpp/encoder.hpp"
#include "rpp/io.hpp"
#include "rpp/objective.hpp"
#include "rpp/synthdata.hpp"

namespace rpp {

// 2x wider, 2 layers deeper than the default student; no prompts.
EncoderConfig default_teacher_encoder();

struct TeacherConfig {
  EncoderConfig encoder = default_teacher_encoder();
  std::size_t templates = 8;
  double tau = 0.07;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 30;
  std::size_t patience = 3;
  bool resample_templates = false;  // fresh template set each epoch
  std::uint64_t seed = 7;

  void validate() const;
};

struct TeacherModel {
  DualEncoder encoder;
  std::vector<int> templates;  // [count, text_prefix_len]
  double tau = 0.07;

  std::size_t template_count() const;
  std::span<const int> template_tokens(std::size_t t) const;
  bool frozen() const;
};

struct ClassPrototypeCache {
  Tensor prototypes;  // [C, e], unit-norm rows

  std::size_t classes() const { return prototypes.defined() ? prototypes.dim(0) : 0; }
};

// Average of unit rows, re-normalized. Numeric error if the average's
// norm falls below 1e-8 (e.g. antipodal rows).
Tensor ensemble_rows(const Tensor& rows);

// Encodes `name` under every template and ensembles -> [e].
Tensor ensemble_class_embedding(const TeacherModel& teacher, std::span<const int> name);
ClassPrototypeCache build_prototype_cache(const TeacherModel& teacher, const Dataset& classes);

Tensor teacher_image_embeddings(const TeacherModel& teacher, const Split& split, std::size_t patch_count);

// Constant [N, K] targets: local contrast over cached prototypes with
// similarities divided by tau_teacher * distill_temp; same margin as the
// student.
Tensor teacher_probs(const Tensor& teacher_image_embeds, const SampledClassSet& set, const ClassPrototypeCache& cache,
                     double tau_teacher, double distill_temp);

// Teacher-side state the student loop reads each step.
struct TeacherTargets {
  Tensor image_embeds;  // [N_train, e_T], aligned with the training split
  ClassPrototypeCache cache;
  double tau = 0.07;
};
TeacherTargets make_teacher_targets(const TeacherModel& teacher, const Dataset& train);

struct TeacherEpochRecord {
  std::size_t epoch;
  double train_loss;
  double val_top1;
};

TeacherModel pretrain_teacher(const Dataset& train, const Dataset& val, const TeacherConfig& cfg,
                              const std::function<void(const TeacherEpochRecord&)>& on_epoch = {});

double teacher_top1(const TeacherModel& teacher, const Dataset& data);
// Mean full-softmax cross-entropy of the teacher on `data` (C0 proxy).
double teacher_cross_entropy(const TeacherModel& teacher, const Dataset& data);

ParamFile teacher_to_file(const TeacherModel& teacher);
TeacherModel teacher_from_file(const ParamFile& file);

}  // namespace rpp
