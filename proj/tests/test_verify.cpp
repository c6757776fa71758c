#include "doctest.h"
#include "json.hpp"
#include "rpp/tensor.hpp"
#include "rpp/verify.hpp"

using namespace rpp;

TEST_CASE("gradient check passes on the tiny model") {
  const GradCheckReport r = grad_check_model();
  CHECK(r.pass);
  CHECK(r.max_rel_error <= 1e-4);
  CHECK(r.checked == expected_prompt_parameters(tiny_encoder()));
}

TEST_CASE("gradient check passes without distillation and at another temperature") {
  GradCheckOptions o;
  o.lambda = 0.0;
  CHECK(grad_check_model(o).pass);
  o.lambda = 2.0;
  o.distill_temp = 2.0;
  CHECK(grad_check_model(o).pass);
}

TEST_CASE("gradient check catches corrupted backward rules") {
  for (const char* op : {"softmax", "layer_norm", "matmul", "replace_rows", "gelu"}) {
    CAPTURE(op);
    GradCheckOptions o;
    o.fault_op = op;
    CHECK_FALSE(grad_check_model(o).pass);
  }
  CHECK(grad_check_model().pass);
}

TEST_CASE("identity checks all pass") {
  const auto checks = identity_checks(1);
  CHECK(checks.size() >= 6);
  for (const IdentityCheck& c : checks) {
    CAPTURE(c.name);
    CHECK(c.pass);
  }
  const auto j = nlohmann::json::parse(to_json(checks));
  CHECK(j.is_object());
}

TEST_CASE("margin unbiasedness") {
  const UnbiasednessReport exact = unbiasedness_check(6, 3, 0, 1);
  CHECK(exact.exact);
  CHECK(exact.trials == 10);
  CHECK(exact.rel_error <= 1e-12);
  const UnbiasednessReport mc = unbiasedness_check(64, 16, 100000, 1);
  CHECK_FALSE(mc.exact);
  CHECK(mc.rel_error <= 1e-2);
}

TEST_CASE("underfit variants share the replacement budget") {
  EncoderConfig student;
  const auto variants = underfit_variants(student);
  REQUIRE(variants.size() == 3);
  CHECK(variants[0].second.replace_layers.empty());
  CHECK(variants[1].second.shared_qkv);
  CHECK(variants[1].second.prompt_len == 3 * student.prompt_len);
  CHECK(replacement_prompt_parameters(variants[1].second) == replacement_prompt_parameters(variants[2].second));
}
