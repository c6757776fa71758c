#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "rpp/encoder.hpp"
#include "rpp/error.hpp"
#include "rpp/objective.hpp"

using namespace rpp;

namespace {

Tensor random_distribution(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  return softmax(Tensor::randn({n, k}, 2.0, rng));
}

}  // namespace

TEST_CASE("local margin values") {
  CHECK(local_margin(16, 16) == 0.0);
  CHECK(local_margin(3, 6) == doctest::Approx(-std::log(2.0 / 5.0)).epsilon(1e-15));
  CHECK(local_margin(16, 64) == doctest::Approx(std::log(63.0 / 15.0)).epsilon(1e-15));
  CHECK_THROWS_AS(local_margin(1, 6), Error);
  CHECK_THROWS_AS(local_margin(7, 6), Error);
}

TEST_CASE("sampled class sets respect their invariants") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> gt(6);
    for (int& g : gt) g = static_cast<int>(rng() % 20);
    const SampledClassSet set = sample_classes(gt, 20, 8, rng);
    REQUIRE(set.negatives.size() == 7);
    std::set<int> uniq(set.negatives.begin(), set.negatives.end());
    CHECK(uniq.size() == 7);
    for (int n : set.negatives) {
      CHECK(std::find(gt.begin(), gt.end(), n) == gt.end());
      CHECK((n >= 0 && n < 20));
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const auto cls = set.classes_for(i);
      CHECK(cls.size() == 8);
      CHECK(cls[0] == gt[i]);
    }
  }
}

TEST_CASE("full mode contrasts each sample against every other class") {
  std::mt19937_64 rng(2);
  const std::vector<int> gt{0, 3, 3};
  const SampledClassSet set = sample_classes(gt, 5, 5, rng);
  CHECK(set.full);
  CHECK(set.margin == 0.0);
  const auto cls = set.classes_for(1);
  CHECK(cls == std::vector<int>{3, 0, 1, 2, 4});
}

TEST_CASE("infeasible sampling requests are rejected") {
  std::mt19937_64 rng(3);
  const std::vector<int> gt{0, 1, 2, 3};
  CHECK_THROWS_AS(sample_classes(gt, 6, 4, rng), Error);
}

TEST_CASE("local contrast with K = C reduces to clip probabilities") {
  std::mt19937_64 rng(4);
  for (int inst = 0; inst < 100; ++inst) {
    const Tensor img = l2_normalize(Tensor::randn({3, 5}, 1.0, rng));
    const Tensor cls = l2_normalize(Tensor::randn({6, 5}, 1.0, rng));
    std::vector<int> gt{static_cast<int>(rng() % 6), static_cast<int>(rng() % 6), static_cast<int>(rng() % 6)};
    const SampledClassSet set = sample_classes(gt, 6, 6, rng);
    const Tensor local = local_contrast_probs(img, set, cls, 0.07);
    const Tensor full = clip_probs(img, cls, 0.07);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto order = set.classes_for(i);
      for (std::size_t j = 0; j < 6; ++j)
        CHECK(std::abs(local.data()[i * 6 + j] - full.data()[i * 6 + order[j]]) <= 1e-12);
    }
  }
}

TEST_CASE("local contrast rows are distributions with margin on negatives only") {
  const Tensor img = l2_normalize(Tensor::from({1, 2}, {1, 0}));
  const Tensor cls = l2_normalize(Tensor::from({3, 2}, {1, 0, 0, 1, -1, 0}));
  const std::vector<int> cols{0, 1, 2};
  const double m = 0.5, tau = 1.0;
  const Tensor p = local_contrast_probs(img, cls, cols, 3, m, tau);
  const double z0 = std::exp(1.0), z1 = std::exp(0.0 + m), z2 = std::exp(-1.0 + m);
  CHECK(p.data()[0] == doctest::Approx(z0 / (z0 + z1 + z2)).epsilon(1e-14));
  CHECK(p.data()[2] == doctest::Approx(z2 / (z0 + z1 + z2)).epsilon(1e-14));
}

TEST_CASE("kd loss identities") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    const Tensor p = random_distribution(2, 4, rng);
    CHECK(kd_loss(p, p).item() <= 1e-12);
    const Tensor q = random_distribution(2, 4, rng);
    CHECK(kd_loss(q, p).item() >= -1e-12);
  }
}

TEST_CASE("kd worked value") {
  const Tensor teacher = Tensor::from({1, 2}, {0.5, 0.5});
  const Tensor student = Tensor::from({1, 2}, {0.25, 0.75});
  const double want = 0.5 * (0.5 * std::log(2.0) + 0.5 * std::log(0.5 / 0.75));
  CHECK(std::abs(kd_loss(student, teacher).item() - want) < 1e-12);
  CHECK(std::abs(kd_loss(student, teacher).item() - 0.07192) < 1e-5);
  CHECK(std::abs(kd_loss(student, teacher, KdNormalization::kBatch).item() - 2 * want) < 1e-12);
}

TEST_CASE("kd loss flows gradient only into the student") {
  Tensor s = Tensor::from({1, 2}, {0.25, 0.75}, true);
  Tensor t = Tensor::from({1, 2}, {0.5, 0.5}, true);
  backward(kd_loss(s, t));
  CHECK(s.has_grad());
  CHECK(s.grad()[0] == doctest::Approx(-0.5 / 0.25 / 2).epsilon(1e-12));
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("cross-entropy picks the ground-truth column") {
  const Tensor p = Tensor::from({2, 3}, {0.7, 0.2, 0.1, 0.5, 0.25, 0.25});
  const std::vector<int> gt{0, 0};
  CHECK(ce_loss(p, gt).item() == doctest::Approx(-(std::log(0.7) + std::log(0.5)) / 2).epsilon(1e-14));
}

TEST_CASE("total loss composition") {
  const LossBreakdown b = total_loss(1.5, 0.25, 2.0);
  CHECK(b.total == 2.0);
  const LossBreakdown z = total_loss(1.5, 0.25, 0.0);
  CHECK(z.total == 1.5);
  CHECK(combine_loss(Tensor::scalar(1.0), Tensor::scalar(0.5), 2.0).item() == 2.0);
}

TEST_CASE("margin makes the sampled negative mass unbiased (exact)") {
  std::mt19937_64 rng(6);
  const std::size_t c = 6, k = 3;
  std::vector<double> z(c);
  for (double& v : z) v = std::normal_distribution<double>(0, 1)(rng);
  double truth = 0.0;
  for (std::size_t j = 1; j < c; ++j) truth += std::exp(z[j]);
  std::vector<int> pick(c - 1, 0);
  std::fill(pick.begin(), pick.begin() + (k - 1), 1);
  std::sort(pick.begin(), pick.end());
  double acc = 0.0;
  std::size_t subsets = 0;
  do {
    double mass = 0.0;
    for (std::size_t j = 0; j < c - 1; ++j)
      if (pick[j]) mass += std::exp(z[j + 1] + local_margin(k, c));
    acc += mass;
    ++subsets;
  } while (std::next_permutation(pick.begin(), pick.end()));
  CHECK(subsets == 10);
  CHECK(std::abs(acc / subsets - truth) / truth < 1e-12);
}
