#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "rpp/encoder.hpp"
#include "rpp/error.hpp"
#include "rpp/verify.hpp"

using namespace rpp;

TEST_CASE("encoder outputs are unit-norm rows") {
  const SynthSpec spec = fixtures::small_spec();
  const DualEncoder enc = fixtures::small_student(spec);
  std::mt19937_64 rng(1);
  const PromptBank prompts = PromptBank::init(enc.config(), rng);
  const std::vector<int> patches{0, 1, 2, 3, 4, 5, 6, 7};
  const std::vector<int> names{1, 2, 3, 4, 5, 6};
  const Tensor img = enc.encode_images(patches, 2, &prompts);
  const Tensor txt = enc.encode_texts(names, 3, &prompts);
  CHECK(img.shape() == Shape{2, 8});
  CHECK(txt.shape() == Shape{3, 8});
  for (const Tensor* t : {&img, &txt}) {
    for (std::size_t r = 0; r < t->dim(0); ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 8; ++c) s += std::pow(t->data()[r * 8 + c], 2);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("prompt parameter count matches the closed form") {
  EncoderConfig e = tiny_encoder();
  std::mt19937_64 rng(2);
  CHECK(PromptBank::init(e, rng).parameter_count() == expected_prompt_parameters(e));
  CHECK(expected_prompt_parameters(e) == 2 * (2 * 8 + 2 * 3 * 2 * 8));
  e.shared_qkv = true;
  CHECK(PromptBank::init(e, rng).parameter_count() == expected_prompt_parameters(e));
  CHECK(expected_prompt_parameters(e) == 2 * (2 * 8 + 2 * 2 * 8));
}

TEST_CASE("encoder config invariants") {
  EncoderConfig e = tiny_encoder();
  CHECK_NOTHROW(e.validate());
  e.dim = 9;
  CHECK_THROWS_AS(e.validate(), Error);
  e = tiny_encoder();
  e.replace_layers = {1};
  CHECK_THROWS_AS(e.validate(), Error);
  e = tiny_encoder();
  e.replace_layers = {4};
  CHECK_THROWS_AS(e.validate(), Error);
  CHECK(EncoderConfig::all_deep_layers(4) == std::vector<std::size_t>{2, 3, 4});
}

TEST_CASE("a frozen backbone receives no gradient while prompts do") {
  const SynthSpec spec = fixtures::small_spec();
  const DualEncoder enc = fixtures::small_student(spec);
  std::mt19937_64 rng(3);
  PromptBank prompts = PromptBank::init(enc.config(), rng);
  const std::vector<int> patches{0, 1, 2, 3};
  const std::vector<int> names{1, 2};
  const Tensor loss = sum(mul(enc.encode_images(patches, 1, &prompts), enc.encode_texts(names, 1, &prompts)));
  backward(loss);
  for (const auto& [name, t] : enc.backbone().named()) {
    CAPTURE(name);
    CHECK_FALSE(t.has_grad());
  }
  bool any = false;
  for (const auto& [name, t] : prompts.named())
    if (t.has_grad())
      for (double g : t.grad()) any = any || g != 0.0;
  CHECK(any);
}

TEST_CASE("Rep places the prompt after CLS for images and before tokens for text") {
  const Tensor x = Tensor::from({1, 4, 1}, {10, 0, 0, 20});
  const Tensor p = Tensor::from({2, 1}, {1, 2});
  const SequenceState img{x, 1, 2};
  const SequenceState txt{x, 0, 2};
  const Tensor ri = rep(img, p).x;
  const Tensor rt = rep(txt, p).x;
  CHECK(std::vector<double>(ri.data().begin(), ri.data().end()) == std::vector<double>{10, 1, 2, 20});
  CHECK(std::vector<double>(rt.data().begin(), rt.data().end()) == std::vector<double>{1, 2, 0, 20});
}

TEST_CASE("equal query, key and value prompts reproduce the shared block bitwise") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const EncoderConfig e = tiny_encoder();
    const Backbone bb = Backbone::init(e, rng);
    const Tensor x = Tensor::randn({2, 1 + e.patches() + e.prompt_len, e.dim}, 1.0, rng);
    const Tensor p = Tensor::randn({e.prompt_len, e.dim}, 1.0, rng);
    const SequenceState s{x, 1, e.prompt_len};
    const Tensor a = sapl_block_forward(s, p, p, p, bb.image.blocks[1], e.heads, e.ln_eps).x;
    const Tensor b = shared_block_forward(s, p, bb.image.blocks[1], e.heads, e.ln_eps).x;
    REQUIRE(a.numel() == b.numel());
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0);
  }
}
