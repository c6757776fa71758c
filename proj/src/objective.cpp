#include "rpp/objective.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "rpp/error.hpp"

namespace rpp {

double local_margin(std::size_t k, std::size_t c) {
  require(k >= 2, ErrorKind::kDomain, "local margin undefined for K=" + std::to_string(k) + " < 2");
  require(k <= c, ErrorKind::kDomain, "K=" + std::to_string(k) + " exceeds C=" + std::to_string(c));
  if (k == c) return 0.0;
  return -std::log(static_cast<double>(k - 1) / static_cast<double>(c - 1));
}

std::vector<int> SampledClassSet::classes_for(std::size_t i) const {
  std::vector<int> out{gt[i]};
  if (full) {
    for (std::size_t cls = 0; cls < c; ++cls)
      if (static_cast<int>(cls) != gt[i]) out.push_back(static_cast<int>(cls));
  } else {
    out.insert(out.end(), negatives.begin(), negatives.end());
  }
  return out;
}

SampledClassSet sample_classes(std::span<const int> batch_gt, std::size_t c, std::size_t k, std::mt19937_64& rng) {
  require(!batch_gt.empty(), ErrorKind::kUsage, "sample_classes on an empty batch");
  const std::set<int> unique(batch_gt.begin(), batch_gt.end());
  for (int g : unique)
    require(g >= 0 && static_cast<std::size_t>(g) < c, ErrorKind::kInput, "gt class " + std::to_string(g) + " >= C");
  require(k >= 2 && k <= c, ErrorKind::kDomain,
          "K=" + std::to_string(k) + " infeasible for C=" + std::to_string(c));

  SampledClassSet set;
  set.gt.assign(batch_gt.begin(), batch_gt.end());
  set.k = k;
  set.c = c;
  std::vector<int> eligible;
  for (std::size_t cls = 0; cls < c; ++cls)
    if (!unique.count(static_cast<int>(cls))) eligible.push_back(static_cast<int>(cls));

  if (k == c) {
    set.full = true;
    set.negatives = eligible;
    set.margin = 0.0;
    return set;
  }
  require(k - 1 <= eligible.size(), ErrorKind::kDomain,
          "K-1=" + std::to_string(k - 1) + " negatives requested but only " + std::to_string(eligible.size()) +
              " classes lie outside the batch's ground truth");
  // Partial Fisher-Yates: the first K-1 slots are a uniform draw without replacement.
  for (std::size_t i = 0; i + 1 < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  set.negatives.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(k - 1));
  set.margin = local_margin(k, c);
  return set;
}

ClassIndex index_classes(const SampledClassSet& set) {
  ClassIndex idx;
  std::map<int, int> pos;
  auto column = [&](int cls) {
    auto [it, inserted] = pos.emplace(cls, static_cast<int>(idx.needed.size()));
    if (inserted) idx.needed.push_back(cls);
    return it->second;
  };
  for (std::size_t i = 0; i < set.batch(); ++i)
    for (int cls : set.classes_for(i)) idx.columns.push_back(column(cls));
  return idx;
}

Tensor local_contrast_logits(const Tensor& image_embeds, const Tensor& class_embeds, std::span<const int> columns,
                             std::size_t k, double margin, double tau) {
  require(tau > 0.0, ErrorKind::kConfig, "temperature must be positive");
  require(k >= 1, ErrorKind::kDomain, "local contrast over zero classes");
  const Tensor sims = scale(matmul(image_embeds, transpose(class_embeds)), 1.0 / tau);
  const Tensor picked = gather_columns(sims, columns, k);
  if (margin == 0.0) return picked;
  std::vector<double> shift(k, margin);
  shift[0] = 0.0;
  return add(picked, Tensor::from({k}, std::move(shift)));
}

Tensor local_contrast_probs(const Tensor& image_embeds, const Tensor& class_embeds, std::span<const int> columns,
                            std::size_t k, double margin, double tau) {
  return softmax(local_contrast_logits(image_embeds, class_embeds, columns, k, margin, tau));
}

Tensor local_contrast_probs(const Tensor& image_embeds, const SampledClassSet& set, const Tensor& all_class_embeds,
                            double tau) {
  std::vector<int> columns;
  for (std::size_t i = 0; i < set.batch(); ++i) {
    auto cls = set.classes_for(i);
    columns.insert(columns.end(), cls.begin(), cls.end());
  }
  return local_contrast_probs(image_embeds, all_class_embeds, columns, set.k, set.margin, tau);
}

Tensor kd_loss(const Tensor& student, const Tensor& teacher, KdNormalization norm) {
  require(student.rank() == 2 && student.shape() == teacher.shape(), ErrorKind::kDimension,
          "kd_loss: student " + shape_str(student.shape()) + " vs teacher " + shape_str(teacher.shape()));
  const std::size_t n = student.dim(0), k = student.dim(1);
  double entropy_term = 0.0;  // sum t ln t
  for (double t : teacher.data()) {
    require(t >= 0.0 && std::isfinite(t), ErrorKind::kNumeric, "kd_loss: invalid teacher probability");
    if (t > 0.0) entropy_term += t * std::log(t);
  }
  const Tensor cross = sum(mul(log(student, kProbFloor), teacher.detach()));
  const double denom = norm == KdNormalization::kBatch ? static_cast<double>(n) : static_cast<double>(n * k);
  return scale(add_scalar(scale(cross, -1.0), entropy_term), 1.0 / denom);
}

Tensor ce_loss(const Tensor& probs, std::span<const int> gt_positions) {
  return scale(mean(log(pick(probs, gt_positions), kProbFloor)), -1.0);
}

LossBreakdown total_loss(double ce, double kd, double lambda, double distill_temp) {
  require(lambda >= 0.0, ErrorKind::kConfig, "lambda must be >= 0");
  return LossBreakdown{ce, kd, lambda, ce + lambda * kd, distill_temp};
}

Tensor combine_loss(const Tensor& ce, const Tensor& kd, double lambda) {
  require(lambda >= 0.0, ErrorKind::kConfig, "lambda must be >= 0");
  return add(ce, scale(kd, lambda));
}

}  // namespace rpp
