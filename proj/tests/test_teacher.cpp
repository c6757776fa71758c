#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fixtures.hpp"
#include "rpp/error.hpp"
#include "rpp/objective.hpp"
#include "rpp/teacher.hpp"

using namespace rpp;

TEST_CASE("ensembling averages then renormalizes") {
  const Tensor rows = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor e = ensemble_rows(rows);
  CHECK(e.data()[0] == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(e.data()[1] == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK_THROWS_AS(ensemble_rows(Tensor::from({2, 2}, {1, 0, -1, 0})), Error);
}

TEST_CASE("a pretrained teacher is frozen and reproducible") {
  const SynthSpec spec = fixtures::small_spec();
  const Corpus c = generate(spec);
  const TeacherConfig cfg = fixtures::small_teacher(spec);
  std::vector<TeacherEpochRecord> epochs;
  const TeacherModel t = pretrain_teacher(c.train_set(), c.val_set(), cfg,
                                          [&](const TeacherEpochRecord& r) { epochs.push_back(r); });
  CHECK(t.frozen());
  CHECK(!epochs.empty());
  CHECK(t.template_count() == 2);
  const TeacherModel again = pretrain_teacher(c.train_set(), c.val_set(), cfg);
  CHECK(tensors_hash(teacher_to_file(t).params) == tensors_hash(teacher_to_file(again).params));

  SUBCASE("prototype cache rows are unit norm") {
    const ClassPrototypeCache cache = build_prototype_cache(t, c.train_set());
    CHECK(cache.classes() == spec.classes);
    for (std::size_t r = 0; r < cache.classes(); ++r) {
      double s = 0;
      for (std::size_t k = 0; k < cache.prototypes.dim(1); ++k) s += std::pow(cache.prototypes.data()[r * cache.prototypes.dim(1) + k], 2);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  SUBCASE("teacher probabilities over a sampled set are distributions") {
    const TeacherTargets targets = make_teacher_targets(t, c.train_set());
    std::mt19937_64 rng(1);
    const std::vector<int> gt{0, 1, 2};
    const SampledClassSet set = sample_classes(gt, spec.classes, 4, rng);
    const std::vector<int> rows{0, 1, 2};
    const Tensor p = teacher_probs(embedding(targets.image_embeds, rows), set, targets.cache, targets.tau, 1.0);
    CHECK(p.shape() == Shape{3, 4});
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += p.data()[i * 4 + k];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  SUBCASE("teacher files round-trip") {
    const auto path = std::filesystem::temp_directory_path() / "rpp_test_teacher.bin";
    save_params(path.string(), teacher_to_file(t));
    const TeacherModel back = teacher_from_file(load_params(path.string()));
    CHECK(back.templates == t.templates);
    CHECK(teacher_top1(back, c.val_set()) == teacher_top1(t, c.val_set()));
    std::filesystem::remove(path);
  }
}

TEST_CASE("template prefixes require a prefix length") {
  const SynthSpec spec = fixtures::small_spec();
  TeacherConfig cfg = fixtures::small_teacher(spec);
  cfg.encoder.text_prefix_len = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.templates = 1;
  CHECK_NOTHROW(cfg.validate());
}
