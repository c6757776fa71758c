#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "fixtures.hpp"
#include "json.hpp"
#include "rpp/error.hpp"
#include "rpp/trainer.hpp"

using namespace rpp;

namespace {

struct Setup {
  SynthSpec spec = fixtures::small_spec();
  Corpus corpus = generate(spec);
  Dataset train = corpus.train_set();
  DualEncoder student = fixtures::small_student(spec);
  TeacherModel teacher = pretrain_teacher(train, corpus.val_set(), fixtures::small_teacher(spec));
  TeacherTargets targets = make_teacher_targets(teacher, train);
  PromptBank init = initial_prompts(student.config(), 1);
};

Setup& setup() {
  static Setup s;
  return s;
}

std::vector<std::string> lines(const TrainResult& r) {
  std::vector<std::string> out;
  for (const MetricRecord& m : r.records) out.push_back(to_json_line(m));
  return out;
}

}  // namespace

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_lr(0, 100, 0.016) == doctest::Approx(0.016).epsilon(1e-15));
  CHECK(cosine_lr(50, 100, 0.016) == doctest::Approx(0.008).epsilon(1e-15));
  CHECK(std::abs(cosine_lr(100, 100, 0.016)) < 1e-18);
  CHECK(cosine_lr(25, 100, 1.0) == doctest::Approx((1 + std::cos(std::numbers::pi / 4)) / 2).epsilon(1e-15));
}

TEST_CASE("cosine schedule is non-increasing") {
  double prev = cosine_lr(0, 37, 0.5);
  for (std::size_t s = 1; s <= 37; ++s) {
    const double lr = cosine_lr(s, 37, 0.5);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("plain SGD step") {
  Tensor p = Tensor::from({1}, {1.0}, true);
  p.mutable_grad()[0] = 1.0;
  SgdMomentum opt(0.0, 0.0);
  std::vector<Tensor> params{p};
  opt.step(params, 0.2);
  CHECK(p.data()[0] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("momentum recurrence") {
  Tensor p = Tensor::from({1}, {1.0}, true);
  SgdMomentum opt(0.9, 0.0);
  std::vector<Tensor> params{p};
  p.mutable_grad()[0] = 1.0;
  opt.step(params, 0.2);
  p.mutable_grad()[0] = 1.0;
  opt.step(params, 0.2);
  // v1 = 1, v2 = 0.9 + 1 = 1.9
  CHECK(opt.velocity()[0][0] == doctest::Approx(1.9).epsilon(1e-15));
  CHECK(p.data()[0] == doctest::Approx(1.0 - 0.2 - 0.2 * 1.9).epsilon(1e-15));
}

TEST_CASE("weight decay adds to the gradient") {
  Tensor p = Tensor::from({1}, {2.0}, true);
  SgdMomentum opt(0.0, 0.5);
  std::vector<Tensor> params{p};
  p.mutable_grad()[0] = 0.0;
  opt.step(params, 0.1);
  CHECK(p.data()[0] == doctest::Approx(2.0 - 0.1 * 1.0).epsilon(1e-15));
}

TEST_CASE("steps per epoch rounds up") {
  CHECK(steps_per_epoch(64, 32) == 2);
  CHECK(steps_per_epoch(65, 32) == 3);
  CHECK(steps_per_epoch(1, 32) == 1);
}

TEST_CASE("config validation") {
  TrainConfig c = fixtures::small_train();
  CHECK_NOTHROW(c.validate());
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = fixtures::small_train();
  c.lambda = -1;
  CHECK_THROWS_AS(c.validate(), Error);
  c = fixtures::small_train();
  c.k = 1;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("zero epochs returns the initial prompts") {
  Setup& s = setup();
  TrainConfig c = fixtures::small_train();
  c.epochs = 0;
  const TrainResult r = train(s.student, s.init, &s.targets, s.train, c);
  CHECK(r.records.empty());
  CHECK(tensors_hash(r.prompts.named()) == tensors_hash(s.init.named()));
}

TEST_CASE("metrics lines carry the schema") {
  Setup& s = setup();
  const TrainResult r = train(s.student, s.init, &s.targets, s.train, fixtures::small_train());
  REQUIRE(!r.records.empty());
  CHECK(r.records.size() == r.total_steps);
  const auto j = nlohmann::json::parse(to_json_line(r.records.front()));
  for (const char* key : {"schema", "step", "epoch", "lr", "ce", "kd", "lambda", "total", "distill_temp", "top1"})
    CHECK(j.contains(key));
  CHECK(j["schema"] == kMetricsSchemaVersion);
  CHECK(j["step"] == 1);
  for (const MetricRecord& m : r.records) {
    CHECK(m.loss.kd >= -1e-12);
    CHECK(m.loss.total == doctest::Approx(m.loss.ce + m.loss.lambda * m.loss.kd).epsilon(1e-12));
  }
}

TEST_CASE("training is deterministic") {
  Setup& s = setup();
  const TrainConfig c = fixtures::small_train();
  const TrainResult a = train(s.student, s.init, &s.targets, s.train, c);
  const TrainResult b = train(s.student, s.init, &s.targets, s.train, c);
  CHECK(lines(a) == lines(b));
  CHECK(tensors_hash(a.prompts.named()) == tensors_hash(b.prompts.named()));
}

TEST_CASE("the backbone and initial prompts are untouched by training") {
  Setup& s = setup();
  const std::string bb = tensors_hash(s.student.backbone().named());
  const std::string init = tensors_hash(s.init.named());
  const TrainResult r = train(s.student, s.init, &s.targets, s.train, fixtures::small_train());
  CHECK(tensors_hash(s.student.backbone().named()) == bb);
  CHECK(tensors_hash(s.init.named()) == init);
  CHECK(tensors_hash(r.prompts.named()) != init);
}

TEST_CASE("resuming from a mid-run checkpoint reproduces the uninterrupted run") {
  Setup& s = setup();
  TrainConfig c = fixtures::small_train();
  c.epochs = 3;
  const TrainResult full = train(s.student, s.init, &s.targets, s.train, c);
  const auto ckpt = std::filesystem::temp_directory_path() / "rpp_test_resume.ckpt";
  TrainOptions stop;
  stop.stop_after_step = 5;
  stop.stop_checkpoint = ckpt.string();
  const TrainResult first = train(s.student, s.init, &s.targets, s.train, c, stop);
  CHECK(first.records.size() == 5);
  const ParamFile file = load_params(ckpt.string());
  TrainOptions resume;
  resume.resume = &file;
  const TrainResult rest = train(s.student, s.init, &s.targets, s.train, c, resume);
  std::vector<std::string> joined = lines(first);
  for (const std::string& l : lines(rest)) joined.push_back(l);
  CHECK(joined == lines(full));
  CHECK(tensors_hash(rest.prompts.named()) == tensors_hash(full.prompts.named()));
  std::filesystem::remove(ckpt);
}

TEST_CASE("resuming under a different config is rejected") {
  Setup& s = setup();
  const TrainConfig c = fixtures::small_train();
  const auto ckpt = std::filesystem::temp_directory_path() / "rpp_test_mismatch.ckpt";
  TrainOptions stop;
  stop.stop_after_step = 2;
  stop.stop_checkpoint = ckpt.string();
  (void)train(s.student, s.init, &s.targets, s.train, c, stop);
  const ParamFile file = load_params(ckpt.string());
  TrainOptions resume;
  resume.resume = &file;
  TrainConfig other = c;
  other.lambda = 1.0;
  CHECK_THROWS_AS(train(s.student, s.init, &s.targets, s.train, other, resume), Error);
  std::filesystem::remove(ckpt);
}

TEST_CASE("distillation without a teacher is a usage error") {
  Setup& s = setup();
  CHECK_THROWS_AS(train(s.student, s.init, nullptr, s.train, fixtures::small_train()), Error);
  TrainConfig c = fixtures::small_train();
  c.lambda = 0.0;
  const TrainResult r = train(s.student, s.init, nullptr, s.train, c);
  for (const MetricRecord& m : r.records) CHECK(m.loss.kd == 0.0);
}

TEST_CASE("a diverging run raises a training error") {
  Setup& s = setup();
  TrainConfig c = fixtures::small_train();
  c.tau = 1e-320;
  CHECK_THROWS_AS(train(s.student, s.init, &s.targets, s.train, c), Error);
}

TEST_CASE("per-epoch checkpoints are written") {
  Setup& s = setup();
  const auto dir = std::filesystem::temp_directory_path() / "rpp_test_ckpts";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  TrainOptions o;
  o.checkpoint_dir = dir.string();
  (void)train(s.student, s.init, &s.targets, s.train, fixtures::small_train(), o);
  CHECK(std::filesystem::exists(dir / "epoch_1.ckpt"));
  CHECK(std::filesystem::exists(dir / "epoch_2.ckpt"));
  std::filesystem::remove_all(dir);
}
