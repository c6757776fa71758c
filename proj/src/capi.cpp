#include "rpp/rpp.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"

#include "rpp/config.hpp"
#include "rpp/error.hpp"
#include "rpp/evalsuite.hpp"
#include "rpp/io.hpp"
#include "rpp/synthdata.hpp"
#include "rpp/teacher.hpp"
#include "rpp/trainer.hpp"
#include "rpp/verify.hpp"

struct rpp_config {
  rpp::RunConfig cfg;
};

struct rpp_corpus {
  rpp::Corpus corpus;
};

struct rpp_teacher {
  rpp::TeacherModel model;
};

struct rpp_student {
  rpp::EncoderConfig encoder;
  rpp::Backbone backbone;
  rpp::PromptBank prompts;
};

namespace {

constexpr const char* kVersion = "1.0.0";
constexpr const char* kStudentRole = "student";
constexpr const char* kBackbonePrefix = "backbone.";
constexpr const char* kPromptPrefix = "prompt.";

thread_local std::string g_last_error;

template <class F>
rpp_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return RPP_OK;
  } catch (const rpp::Error& e) {
    g_last_error = e.what();
    return static_cast<rpp_status>(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return RPP_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return RPP_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  rpp::require(p != nullptr, rpp::ErrorKind::kUsage, std::string(what) + " must not be NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

// The config with corpus geometry copied in, so encoders match the data.
rpp::RunConfig for_corpus(const rpp::RunConfig& base, const rpp::Corpus& corpus) {
  rpp::RunConfig cfg = base;
  cfg.data = corpus.spec;
  cfg.finalize();
  return cfg;
}

rpp::Progress progress(rpp_log_fn log, void* user) {
  if (!log) return {};
  return [log, user](const std::string& line) { log(line.c_str(), user); };
}

rpp::ParamFile student_to_file(const rpp_student& s) {
  rpp::ParamFile f;
  f.meta = rpp::encoder_to_kv(s.encoder, "encoder.");
  f.meta["role"] = kStudentRole;
  for (const auto& [name, t] : s.backbone.named()) f.params.emplace_back(kBackbonePrefix + name, t);
  for (const auto& [name, t] : s.prompts.named()) f.params.emplace_back(kPromptPrefix + name, t);
  return f;
}

std::vector<std::pair<std::string, rpp::Tensor>> prefixed(std::vector<std::pair<std::string, rpp::Tensor>> named,
                                                          const std::string& prefix) {
  for (auto& [name, t] : named) name = prefix + name;
  return named;
}

rpp::FinetuneConfig finetune_config(const rpp::RunConfig& cfg) {
  rpp::FinetuneConfig ft;
  ft.train = cfg.train;
  ft.epochs = cfg.eval.finetune_epochs;
  ft.shots = cfg.eval.shots;
  return ft;
}

}  // namespace

extern "C" {

const char* rpp_version(void) { return kVersion; }

const char* rpp_last_error(void) { return g_last_error.c_str(); }

const char* rpp_status_name(rpp_status status) {
  if (status == RPP_OK) return "ok";
  return rpp::to_string(static_cast<rpp::ErrorKind>(status));
}

void rpp_string_free(char* s) { std::free(s); }

rpp_status rpp_config_new(rpp_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new rpp_config{};
  });
}

void rpp_config_free(rpp_config* cfg) { delete cfg; }

rpp_status rpp_config_load_file(rpp_config* cfg, const char* path) {
  return guarded([&] {
    need(cfg, "cfg");
    need(path, "path");
    rpp::require(std::ifstream(path).good(), rpp::ErrorKind::kConfig, std::string("cannot open config file ") + path);
    rpp::merge_config_file(cfg->cfg, path);
  });
}

rpp_status rpp_config_set(rpp_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    need(cfg, "cfg");
    need(key, "key");
    need(value, "value");
    rpp::set_value(cfg->cfg, key, value);
  });
}

rpp_status rpp_config_get(const rpp_config* cfg, const char* key, char** value) {
  return guarded([&] {
    need(cfg, "cfg");
    need(key, "key");
    need(value, "value");
    const rpp::KeyValues kv = rpp::to_kv(cfg->cfg);
    const auto it = kv.find(key);
    rpp::require(it != kv.end(), rpp::ErrorKind::kConfig, std::string("unknown config key '") + key + "'");
    *value = dup(it->second);
  });
}

rpp_status rpp_config_finalize(rpp_config* cfg) {
  return guarded([&] {
    need(cfg, "cfg");
    cfg->cfg.finalize();
    cfg->cfg.validate();
  });
}

rpp_status rpp_config_to_ini(const rpp_config* cfg, char** ini) {
  return guarded([&] {
    need(cfg, "cfg");
    need(ini, "ini");
    *ini = dup(rpp::to_ini(cfg->cfg));
  });
}

rpp_status rpp_config_to_json(const rpp_config* cfg, char** json) {
  return guarded([&] {
    need(cfg, "cfg");
    need(json, "json");
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [k, v] : rpp::to_kv(cfg->cfg)) j[k] = v;
    *json = dup(j.dump(2));
  });
}

rpp_status rpp_corpus_generate(const rpp_config* cfg, rpp_corpus** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = new rpp_corpus{rpp::generate(cfg->cfg.data)};
  });
}

rpp_status rpp_corpus_load(const char* path, rpp_corpus** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new rpp_corpus{rpp::load_corpus(path)};
  });
}

rpp_status rpp_corpus_save(const rpp_corpus* corpus, const char* path) {
  return guarded([&] {
    need(corpus, "corpus");
    need(path, "path");
    rpp::save_corpus(path, corpus->corpus);
  });
}

rpp_status rpp_corpus_hash(const rpp_corpus* corpus, char** hash) {
  return guarded([&] {
    need(corpus, "corpus");
    need(hash, "hash");
    *hash = dup(rpp::corpus_hash(corpus->corpus));
  });
}

void rpp_corpus_free(rpp_corpus* corpus) { delete corpus; }

rpp_status rpp_teacher_pretrain(const rpp_config* cfg, const rpp_corpus* corpus, rpp_log_fn log, void* user,
                                rpp_teacher** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(corpus, "corpus");
    need(out, "out");
    const rpp::RunConfig rc = for_corpus(cfg->cfg, corpus->corpus);
    auto say = progress(log, user);
    rpp::TeacherModel model = rpp::pretrain_teacher(
        corpus->corpus.train_set(), corpus->corpus.val_set(), rc.teacher, [&](const rpp::TeacherEpochRecord& r) {
          if (!say) return;
          nlohmann::ordered_json j{{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_top1", r.val_top1}};
          say(j.dump());
        });
    *out = new rpp_teacher{std::move(model)};
  });
}

rpp_status rpp_teacher_load(const char* path, rpp_teacher** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new rpp_teacher{rpp::teacher_from_file(rpp::load_params(path))};
  });
}

rpp_status rpp_teacher_save(const rpp_teacher* teacher, const char* path) {
  return guarded([&] {
    need(teacher, "teacher");
    need(path, "path");
    rpp::save_params(path, rpp::teacher_to_file(teacher->model));
  });
}

void rpp_teacher_free(rpp_teacher* teacher) { delete teacher; }

rpp_status rpp_student_create(const rpp_config* cfg, const rpp_corpus* corpus, rpp_student** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(corpus, "corpus");
    need(out, "out");
    const rpp::RunConfig rc = for_corpus(cfg->cfg, corpus->corpus);
    rpp::Backbone bb = rpp::pretrain_student_backbone(corpus->corpus.train_set(), corpus->corpus.val_set(), rc.student,
                                                      rc.student_backbone, rc.backbone_seed());
    *out = new rpp_student{rc.student, std::move(bb), rpp::initial_prompts(rc.student, rc.train.seed)};
  });
}

rpp_status rpp_student_load(const char* path, rpp_student** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    const rpp::ParamFile f = rpp::load_params(path);
    rpp::require(f.get("role") == kStudentRole, rpp::ErrorKind::kIo,
                 "file role is '" + f.get("role") + "', not " + kStudentRole);
    const rpp::EncoderConfig ec = rpp::encoder_from_kv(f.meta, "encoder.");
    std::mt19937_64 rng(0);
    auto s = std::make_unique<rpp_student>(rpp_student{ec, rpp::Backbone::init(ec, rng), rpp::PromptBank::zeros(ec)});
    rpp::assign_params(f, prefixed(s->backbone.named(), kBackbonePrefix));
    rpp::assign_params(f, prefixed(s->prompts.named(), kPromptPrefix));
    s->backbone.set_trainable(false);
    *out = s.release();
  });
}

rpp_status rpp_student_save(const rpp_student* student, const char* path) {
  return guarded([&] {
    need(student, "student");
    need(path, "path");
    rpp::save_params(path, student_to_file(*student));
  });
}

rpp_status rpp_student_hash(const rpp_student* student, char** backbone_hash, char** prompt_hash) {
  return guarded([&] {
    need(student, "student");
    if (backbone_hash) *backbone_hash = dup(rpp::tensors_hash(student->backbone.named()));
    if (prompt_hash) *prompt_hash = dup(rpp::tensors_hash(student->prompts.named()));
  });
}

void rpp_student_free(rpp_student* student) { delete student; }

rpp_status rpp_student_train(rpp_student* student, const rpp_config* cfg, const rpp_corpus* corpus,
                             const rpp_teacher* teacher, const rpp_train_options* options) {
  return guarded([&] {
    need(student, "student");
    need(cfg, "cfg");
    need(corpus, "corpus");
    const rpp::RunConfig rc = for_corpus(cfg->cfg, corpus->corpus);
    const rpp::Dataset train = corpus->corpus.train_set();
    std::optional<rpp::TeacherTargets> targets;
    if (teacher) targets = rpp::make_teacher_targets(teacher->model, train);

    rpp::TrainOptions opts;
    std::ofstream metrics;
    std::optional<rpp::ParamFile> resume;
    if (options) {
      if (options->metrics_path) {
        metrics.open(options->metrics_path, std::ios::binary | std::ios::trunc);
        rpp::require(metrics.good(), rpp::ErrorKind::kIo, std::string("cannot write ") + options->metrics_path);
      }
      if (options->checkpoint_dir) opts.checkpoint_dir = options->checkpoint_dir;
      if (options->resume_path) {
        resume = rpp::load_params(options->resume_path);
        opts.resume = &*resume;
      }
      if (options->stop_after_step) opts.stop_after_step = options->stop_after_step;
      if (options->stop_checkpoint) opts.stop_checkpoint = options->stop_checkpoint;
      auto say = progress(options->log, options->user);
      opts.on_record = [&metrics, say](const rpp::MetricRecord& r) {
        const std::string line = rpp::to_json_line(r);
        if (metrics.is_open()) metrics << line << '\n';
        if (say) say(line);
      };
    }
    const rpp::DualEncoder enc(student->encoder, student->backbone);
    rpp::TrainResult result = rpp::train(enc, student->prompts, targets ? &*targets : nullptr, train, rc.train, opts);
    if (metrics.is_open()) {
      metrics.flush();
      rpp::require(metrics.good(), rpp::ErrorKind::kIo, "failed writing metrics");
    }
    student->prompts = std::move(result.prompts);
  });
}

rpp_status rpp_eval(const rpp_student* student, const rpp_config* cfg, const rpp_corpus* corpus, const char* protocol,
                    char** report_json, char** table, char** plot) {
  return guarded([&] {
    need(student, "student");
    need(cfg, "cfg");
    need(corpus, "corpus");
    need(protocol, "protocol");
    need(report_json, "report_json");
    const rpp::RunConfig rc = for_corpus(cfg->cfg, corpus->corpus);
    const rpp::DualEncoder enc(student->encoder, student->backbone);
    const rpp::Corpus& c = corpus->corpus;
    const std::string p = protocol;
    rpp::EvalReport report;
    if (p == "top1") {
      report = {"top1", {"train", "val"}, {0}, {}};
      report.values.push_back({rpp::top1(enc, &student->prompts, c.train_set()), rpp::top1(enc, &student->prompts, c.val_set())});
    } else if (p == "zero-shot") {
      report = rpp::zero_shot_transfer(enc, student->prompts, c.transfer_set(), c.shifted_set());
    } else if (p == "base-to-new") {
      report = rpp::base_to_new_eval(enc, student->prompts, c.train_set(), c.val_set(), finetune_config(rc),
                                     rc.eval.base_fraction, rc.eval.seeds);
    } else if (p == "few-shot") {
      report = rpp::few_shot_grid(enc, student->prompts, c.train_set(), c.val_set(), finetune_config(rc),
                                  rc.eval.shot_grid, rc.eval.seeds);
      if (plot) *plot = dup(rpp::plot_data(report, rc.eval.shot_grid));
    } else {
      rpp::fail(rpp::ErrorKind::kUsage, "unknown protocol '" + p + "'");
    }
    *report_json = dup(report.to_json());
    if (table) *table = dup(report.render_table());
  });
}

rpp_status rpp_verify(const rpp_config* cfg, const char* check, const rpp_corpus* corpus, const rpp_teacher* teacher,
                      const rpp_student* student, rpp_log_fn log, void* user, char** report_json) {
  bool passed = true;
  const rpp_status status = guarded([&] {
    need(cfg, "cfg");
    need(check, "check");
    need(report_json, "report_json");
    const rpp::RunConfig& rc = cfg->cfg;
    const rpp::VerifyConfig& vc = rc.verify;
    const std::string name = check;
    auto say = progress(log, user);
    std::string report;
    if (name == "grad-check") {
      rpp::GradCheckOptions o;
      o.eps = vc.grad_eps;
      o.tolerance = vc.grad_tol;
      o.lambda = rc.train.lambda;
      o.distill_temp = rc.train.distill_temp;
      o.seed = rc.seed;
      const rpp::GradCheckReport r = rpp::grad_check_model(o);
      passed = r.pass;
      report = r.to_json();
    } else if (name == "identities") {
      const auto checks = rpp::identity_checks(rc.seed);
      for (const auto& c : checks) passed = passed && c.pass;
      report = rpp::to_json(checks);
    } else if (name == "unbiasedness") {
      const rpp::UnbiasednessReport exact = rpp::unbiasedness_check(6, 3, 0, rc.seed);
      const rpp::UnbiasednessReport mc = rpp::unbiasedness_check(64, 16, vc.mc_trials, rc.seed);
      passed = exact.pass && mc.pass;
      nlohmann::ordered_json j{{"check", "unbiasedness"},
                               {"exact", nlohmann::ordered_json::parse(exact.to_json())},
                               {"monte_carlo", nlohmann::ordered_json::parse(mc.to_json())},
                               {"pass", passed}};
      report = j.dump(2);
    } else if (name == "underfit" || name == "transfer" || name == "sweep") {
      rpp::RunConfig wcfg = rc;
      std::optional<rpp::Corpus> owned_corpus;
      if (!corpus) owned_corpus = rpp::generate(rc.data);
      const rpp::Corpus& cp = corpus ? corpus->corpus : *owned_corpus;
      wcfg = for_corpus(rc, cp);
      rpp::TeacherModel tm = teacher ? teacher->model
                                     : rpp::pretrain_teacher(cp.train_set(), cp.val_set(), wcfg.teacher,
                                                             [&](const rpp::TeacherEpochRecord& r) {
                                                               if (say)
                                                                 say("teacher epoch " + std::to_string(r.epoch) +
                                                                     " val top-1 " + std::to_string(r.val_top1));
                                                             });
      if (student) wcfg.student = student->encoder;
      rpp::Backbone bb = student ? student->backbone
                                 : rpp::pretrain_student_backbone(cp.train_set(), cp.val_set(), wcfg.student,
                                                                  wcfg.student_backbone, wcfg.backbone_seed());
      const rpp::Workbench wb = rpp::make_workbench(wcfg, cp, std::move(tm), std::move(bb));
      rpp::TrainConfig tc = wcfg.train;
      if (vc.trend_lr0 > 0.0) tc.lr0 = vc.trend_lr0;
      if (name == "underfit") {
        if (vc.underfit_epochs) tc.epochs = vc.underfit_epochs;
        const rpp::UnderfitReport r = rpp::underfit_experiment(wb, vc.seeds, tc, vc.acc_slack, say);
        passed = r.pass;
        report = r.to_json();
      } else if (name == "transfer") {
        const rpp::TransferReport r = rpp::transfer_experiment(wb, vc.transfer_seeds, tc, vc.transfer_lambda, say);
        passed = r.pass;
        report = r.to_json();
      } else {
        const rpp::BoundReport r = rpp::lambda_sweep(wb, vc.lambdas, vc.seeds, tc, vc.kd_slack, say);
        passed = r.pass;
        report = r.to_json();
      }
    } else {
      rpp::fail(rpp::ErrorKind::kUsage, "unknown check '" + name + "'");
    }
    *report_json = dup(report);
  });
  if (status != RPP_OK) return status;
  if (!passed) {
    g_last_error = std::string(check) + " failed";
    return RPP_ERR_ASSERTION;
  }
  return RPP_OK;
}

rpp_status rpp_file_hash(const char* path, char** hash) {
  return guarded([&] {
    need(path, "path");
    need(hash, "hash");
    *hash = dup(rpp::content_hash(rpp::read_file(path)));
  });
}

}  // extern "C"
