#pragma once

// Prompt pretraining: frozen backbone, trainable PromptBank, SGD with
// momentum under a cosine-annealed learning rate, per-step class sampling
// and the combined CE + lambda * KD objective.

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
#include "rpp/teacher.hpp"

namespace rpp {

struct TrainConfig {
  double lr0 = 0.016;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  std::size_t k = 16;  // min(C, 16) at desk scale; clamped to C at run time
  double lambda = 2.0;
  double distill_temp = 1.0;
  double tau = 0.07;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double max_grad_norm = 0.0;  // 0 disables clipping
  KdNormalization kd_norm = KdNormalization::kBatchTimesClasses;
  std::uint64_t seed = 0;

  void validate() const;  // throws kConfig
};

// lr0 * (1 + cos(pi * step / total)) / 2
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

// p <- p - lr * v, v <- momentum * v + g + weight_decay * p.
class SgdMomentum {
 public:
  SgdMomentum(double momentum = 0.9, double weight_decay = 0.0);

  void step(std::span<Tensor> params, double lr);
  std::vector<std::vector<double>>& velocity() { return velocity_; }
  const std::vector<std::vector<double>>& velocity() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

struct MetricRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
  double batch_top1 = 0.0;
};

inline constexpr int kMetricsSchemaVersion = 1;
// One JSON object per line: {"schema":1,"step":..,"epoch":..,"lr":..,"ce":..,
// "kd":..,"lambda":..,"total":..,"distill_temp":..,"top1":..}
std::string to_json_line(const MetricRecord& r);

struct TrainOptions {
  std::function<void(const MetricRecord&)> on_record;
  // Directory for per-epoch checkpoints (epoch_<n>.ckpt); empty disables.
  std::string checkpoint_dir;
  // Stop after this many total steps and write a checkpoint to stop_checkpoint.
  std::optional<std::size_t> stop_after_step;
  std::string stop_checkpoint;
  // Resume from a checkpoint written by this loop.
  const ParamFile* resume = nullptr;
};

struct TrainResult {
  PromptBank prompts;
  std::vector<MetricRecord> records;
  std::size_t steps_done = 0;
  std::size_t total_steps = 0;
};

// Short contrastive pretraining of the prompt-free student encoder, which
// leaves a weak, frozen backbone for prompt tuning. epochs == 0 keeps the
// random initialization.
struct BackboneConfig {
  std::size_t epochs = 2;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  double tau = 0.07;
};

Backbone pretrain_student_backbone(const Dataset& train, const Dataset& val, const EncoderConfig& student,
                                   const BackboneConfig& cfg, std::uint64_t seed);

// Prompt initialization for a given run seed.
PromptBank initial_prompts(const EncoderConfig& student, std::uint64_t seed);

// Differentiable pieces of one step over a sampled class set. Class names
// come from `classes`; teacher rows index teacher->image_embeds.
struct StepLoss {
  Tensor probs;  // [N, K] at tau
  Tensor ce;
  Tensor kd;     // constant 0 without a teacher
  Tensor total;  // ce + lambda * kd
};
StepLoss step_loss(const DualEncoder& student, const PromptBank& prompts, std::span<const int> patches,
                   const SampledClassSet& set, const Dataset& classes, const TeacherTargets* teacher,
                   std::span<const int> teacher_rows, const TrainConfig& cfg);

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size);

// `teacher` may be null only when lambda == 0 (KD is then reported as 0).
// With cfg.epochs == 0 the initial prompts come back unchanged.
TrainResult train(const DualEncoder& student, const PromptBank& init, const TeacherTargets* teacher,
                  const Dataset& data, const TrainConfig& cfg, const TrainOptions& opts = {});

}  // namespace rpp
