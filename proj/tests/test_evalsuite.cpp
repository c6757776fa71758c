#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "json.hpp"
#include "rpp/error.hpp"
#include "rpp/evalsuite.hpp"

using namespace rpp;

TEST_CASE("harmonic mean") {
  CHECK(harmonic_mean(0.8426, 0.7610) == doctest::Approx(2 * 0.8426 * 0.7610 / (0.8426 + 0.7610)).epsilon(1e-15));
  CHECK(std::round(harmonic_mean(0.8426, 0.7610) * 1e4) / 1e4 == doctest::Approx(0.7997).epsilon(1e-12));
  CHECK(harmonic_mean(0.0, 0.0) == 0.0);
  CHECK(harmonic_mean(1.0, 0.0) == 0.0);
  CHECK(harmonic_mean(0.5, 0.5) == doctest::Approx(0.5));
  CHECK_THROWS_AS(harmonic_mean(1.5, 0.5), Error);
  CHECK_THROWS_AS(harmonic_mean(0.5, -0.1), Error);
}

TEST_CASE("harmonic mean never exceeds the arithmetic mean") {
  for (double b = 0.05; b <= 1.0; b += 0.1)
    for (double n = 0.05; n <= 1.0; n += 0.1) CHECK(harmonic_mean(b, n) <= (b + n) / 2 + 1e-15);
}

TEST_CASE("argmax takes the first maximum") {
  const std::vector<double> row{0.1, 0.7, 0.7, 0.2};
  CHECK(argmax(row) == 1);
}

TEST_CASE("top-1 from embeddings") {
  const Tensor img = Tensor::from({3, 2}, {1, 0, 0, 1, 0.6, 0.8});
  const Tensor cls = Tensor::from({2, 2}, {1, 0, 0, 1});
  const std::vector<int> labels{0, 1, 0};
  CHECK(top1_from_embeddings(img, cls, labels) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("report statistics") {
  EvalReport r{"demo", {"a", "b"}, {1, 2}, {{0.5, 1.0}, {0.7, 0.0}}};
  CHECK(r.mean("a") == doctest::Approx(0.6));
  CHECK(r.spread(0) == doctest::Approx(0.1));
  CHECK(r.index("b") == 1);
  CHECK_THROWS_AS(r.index("c"), Error);
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["protocol"] == "demo");
  CHECK(r.render_table().find("60.00") != std::string::npos);
}

TEST_CASE("evaluation protocols on a small model") {
  const SynthSpec spec = fixtures::small_spec();
  const Corpus c = generate(spec);
  const DualEncoder enc = fixtures::small_student(spec);
  const PromptBank prompts = initial_prompts(enc.config(), 2);
  FinetuneConfig ft;
  ft.train = fixtures::small_train();
  ft.epochs = 1;
  ft.shots = 2;
  const std::vector<std::uint64_t> seeds{1, 2};

  SUBCASE("base-to-new reports hm = 2bn/(b+n) per seed") {
    const EvalReport r = base_to_new_eval(enc, prompts, c.train_set(), c.val_set(), ft, 0.5, seeds);
    REQUIRE(r.values.size() == 2);
    for (const auto& row : r.values) {
      const double b = row[r.index("base")], n = row[r.index("novel")];
      CHECK(row[r.index("hm")] == doctest::Approx(harmonic_mean(b, n)).epsilon(1e-15));
      CHECK((b >= 0 && b <= 1 && n >= 0 && n <= 1));
    }
    CHECK(hm_of_means(r) == doctest::Approx(harmonic_mean(r.mean("base"), r.mean("novel"))));
    const EvalReport again = base_to_new_eval(enc, prompts, c.train_set(), c.val_set(), ft, 0.5, seeds);
    CHECK(again.values == r.values);
  }

  SUBCASE("zero-shot transfer metrics") {
    const EvalReport r = zero_shot_transfer(enc, prompts, c.transfer_set(), c.shifted_set());
    CHECK(r.metrics == std::vector<std::string>{"transfer", "shifted", "transfer_prompt_free", "shifted_prompt_free"});
    CHECK(r.mean("transfer_prompt_free") == doctest::Approx(top1(prompt_free(enc), nullptr, c.transfer_set())));
  }

  SUBCASE("few-shot grid has one column per shot count") {
    const std::vector<std::size_t> shots{1, 2};
    const EvalReport r = few_shot_grid(enc, prompts, c.train_set(), c.val_set(), ft, shots, seeds);
    CHECK(r.metrics == std::vector<std::string>{"shots_1", "shots_2"});
    const std::string plot = plot_data(r, shots);
    CHECK(plot.find("1 ") != std::string::npos);
  }
}

TEST_CASE("top1 on an empty split is a usage error") {
  const SynthSpec spec = fixtures::small_spec();
  Dataset empty = generate(spec).val_set();
  empty.split = {};
  CHECK_THROWS_AS(top1(fixtures::small_student(spec), nullptr, empty), Error);
}
