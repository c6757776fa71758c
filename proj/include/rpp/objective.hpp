#pragma once

// Sampled-class training objective: local contrast over K of C classes
// with the local-correction margin on negatives, KL distillation against
// teacher probabilities, cross-entropy on the ground truth, and their
// weighted sum.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "rpp/tensor.hpp"

namespace rpp {

// m = -ln((K-1)/(C-1)); 0 when K == C. Domain error for K < 2 or K > C.
double local_margin(std::size_t k, std::size_t c);

struct SampledClassSet {
  std::vector<int> gt;         // one per batch sample
  std::vector<int> negatives;  // K-1 shared ids, disjoint from gt (sampled mode)
  std::size_t k = 0;
  std::size_t c = 0;
  double margin = 0.0;
  // K == C: every sample contrasts against all other classes, so its
  // negatives are "every class but my own gt" rather than the shared list.
  bool full = false;

  std::size_t batch() const { return gt.size(); }
  // Class ids for sample i, ordered [gt, negatives...], length K.
  std::vector<int> classes_for(std::size_t i) const;
};

SampledClassSet sample_classes(std::span<const int> batch_gt, std::size_t c, std::size_t k, std::mt19937_64& rng);

// Columns into a compact class table: `needed` lists the distinct class ids
// the batch touches; `columns` is [N, K] positions into `needed`.
struct ClassIndex {
  std::vector<int> needed;
  std::vector<int> columns;
};
ClassIndex index_classes(const SampledClassSet& set);

// logits[i][j] = x_i . y_{class(i,j)} / tau + (j > 0 ? m : 0), as [N, K].
// class_embeds rows are addressed by `columns`.
Tensor local_contrast_logits(const Tensor& image_embeds, const Tensor& class_embeds, std::span<const int> columns,
                             std::size_t k, double margin, double tau);
Tensor local_contrast_probs(const Tensor& image_embeds, const Tensor& class_embeds, std::span<const int> columns,
                            std::size_t k, double margin, double tau);

// Convenience form over a full table indexed by class id.
Tensor local_contrast_probs(const Tensor& image_embeds, const SampledClassSet& set, const Tensor& all_class_embeds,
                            double tau);

enum class KdNormalization {
  kBatchTimesClasses,  // 1/(N*K), as printed
  kBatch,              // 1/N, per-sample mean KL
};

inline constexpr double kProbFloor = 1e-12;

// (1/(N*K)) sum_i sum_k t_ik * ln(t_ik / max(s_ik, 1e-12)). Teacher is a
// constant; zero teacher entries contribute 0.
Tensor kd_loss(const Tensor& student, const Tensor& teacher,
               KdNormalization norm = KdNormalization::kBatchTimesClasses);

// mean_i -ln(max(p_i[gt_i], 1e-12))
Tensor ce_loss(const Tensor& probs, std::span<const int> gt_positions);

struct LossBreakdown {
  double ce = 0.0;
  double kd = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  double distill_temp = 1.0;
};

LossBreakdown total_loss(double ce, double kd, double lambda, double distill_temp = 1.0);
// Differentiable ce + lambda * kd; config error for lambda < 0.
Tensor combine_loss(const Tensor& ce, const Tensor& kd, double lambda);

}  // namespace rpp
