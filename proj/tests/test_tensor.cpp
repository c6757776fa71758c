#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "rpp/error.hpp"
#include "rpp/tensor.hpp"

using namespace rpp;

namespace {

// Central-difference check of d(sum(w * f(x)))/dx for a random weighting w.
double max_grad_error(const std::function<Tensor(const Tensor&)>& f, Tensor x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor y0 = f(x.detach());
  const Tensor w = Tensor::randn(y0.shape(), 1.0, rng);
  auto objective = [&](const Tensor& in) { return sum(mul(f(in), w)); };
  x.set_requires_grad(true);
  x.zero_grad();
  backward(objective(x));
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());
  double worst = 0.0;
  const double eps = 1e-6;
  NoGradGuard guard;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x.data()[i];
    x.mutable_data()[i] = orig + eps;
    const double up = objective(x).item();
    x.mutable_data()[i] = orig - eps;
    const double down = objective(x).item();
    x.mutable_data()[i] = orig;
    const double numeric = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul matches hand-computed product") {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.data()[0] == 58);
  CHECK(c.data()[1] == 64);
  CHECK(c.data()[2] == 139);
  CHECK(c.data()[3] == 154);
}

TEST_CASE("shape mismatch raises a dimension error") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    (void)matmul(a, b);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDimension);
  }
}

TEST_CASE("softmax rows are distributions and stable for large logits") {
  const Tensor x = Tensor::from({2, 3}, {1000, 1001, 1002, -5, 0, 5});
  const Tensor p = softmax(x);
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(std::isfinite(p.data()[r * 3 + c]));
      s += p.data()[r * 3 + c];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
  const double e1 = std::exp(1.0), e2 = std::exp(2.0);
  CHECK(p.data()[2] == doctest::Approx(e2 / (1 + e1 + e2)).epsilon(1e-14));
}

TEST_CASE("layer_norm output has zero mean and unit variance") {
  std::mt19937_64 rng(1);
  const Tensor x = Tensor::randn({4, 16}, 3.0, rng);
  const Tensor y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}), 1e-12);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y.data()[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += std::pow(y.data()[r * 16 + c] - m, 2);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 16 == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("l2_normalize yields unit rows") {
  std::mt19937_64 rng(2);
  const Tensor y = l2_normalize(Tensor::randn({5, 7}, 1.0, rng));
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) s += y.data()[r * 7 + c] * y.data()[r * 7 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("gelu matches the erf form") {
  const Tensor y = gelu(Tensor::from({3}, {-1.0, 0.0, 2.0}));
  CHECK(y.data()[0] == doctest::Approx(-1.0 * 0.5 * (1 + std::erf(-1 / std::sqrt(2.0)))).epsilon(1e-15));
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == doctest::Approx(2.0 * 0.5 * (1 + std::erf(2 / std::sqrt(2.0)))).epsilon(1e-15));
}

TEST_CASE("replace_rows overwrites the prompt slots only") {
  const Tensor x = Tensor::from({1, 4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const Tensor p = Tensor::from({2, 2}, {-1, -2, -3, -4});
  const Tensor y = replace_rows(x, 1, p);
  const std::vector<double> want{1, 2, -1, -2, -3, -4, 7, 8};
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) == want);
}

TEST_CASE("op gradients agree with central differences") {
  std::mt19937_64 rng(3);
  const Tensor other = Tensor::randn({3, 4}, 1.0, rng);
  const Tensor gamma = Tensor::randn({4}, 1.0, rng);
  const Tensor beta = Tensor::randn({4}, 1.0, rng);
  const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&)>>> ops = {
      {"matmul", [&](const Tensor& x) { return matmul(x, transpose(other)); }},
      {"softmax", [](const Tensor& x) { return softmax(x); }},
      {"layer_norm", [&](const Tensor& x) { return layer_norm(x, gamma, beta); }},
      {"gelu", [](const Tensor& x) { return gelu(x); }},
      {"l2_normalize", [](const Tensor& x) { return l2_normalize(x); }},
      {"exp", [](const Tensor& x) { return exp(x); }},
      {"mul", [&](const Tensor& x) { return mul(x, other); }},
      {"sum_last", [](const Tensor& x) { return sum_last(x); }},
      {"slice", [](const Tensor& x) { return slice(x, 1, 1, 2); }},
      {"concat", [&](const Tensor& x) { return concat({x, other}, 0); }},
  };
  for (const auto& [name, f] : ops) {
    CAPTURE(name);
    CHECK(max_grad_error(f, Tensor::randn({3, 4}, 1.0, rng), 17) < 1e-7);
  }
}

TEST_CASE("NoGradGuard suppresses graph construction") {
  Tensor x = Tensor::full({2}, 1.0, true);
  NoGradGuard guard;
  const Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("backward fault injection corrupts the named op only") {
  std::mt19937_64 rng(4);
  const Tensor x0 = Tensor::randn({2, 3}, 1.0, rng);
  auto f = [](const Tensor& x) { return softmax(x); };
  set_backward_fault("softmax", 1.5);
  const double faulty = max_grad_error(f, x0.detach(), 9);
  set_backward_fault("", 1.0);
  const double clean = max_grad_error(f, x0.detach(), 9);
  CHECK(faulty > 1e-3);
  CHECK(clean < 1e-7);
}
