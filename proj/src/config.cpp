#include "rpp/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>

#include "rpp/error.hpp"

namespace rpp {

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  fail(ErrorKind::kConfig, "config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::string format(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format(std::size_t v) { return std::to_string(v); }
std::string format(bool v) { return v ? "true" : "false"; }
std::string format(KdNormalization v) { return v == KdNormalization::kBatch ? "batch" : "batch_classes"; }

template <class T>
std::string format(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format(v[i]);
  return out;
}

void parse(const std::string& key, const std::string& raw, std::size_t& out) {
  const std::string s = trim(raw);
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size()) bad_value(key, raw, "a non-negative integer");
}

void parse(const std::string& key, const std::string& raw, double& out) {
  const std::string s = trim(raw);
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size()) bad_value(key, raw, "a number");
}

void parse(const std::string& key, const std::string& raw, bool& out) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1") {
    out = true;
  } else if (s == "false" || s == "0") {
    out = false;
  } else {
    bad_value(key, raw, "true or false");
  }
}

void parse(const std::string& key, const std::string& raw, KdNormalization& out) {
  const std::string s = trim(raw);
  if (s == "batch") {
    out = KdNormalization::kBatch;
  } else if (s == "batch_classes") {
    out = KdNormalization::kBatchTimesClasses;
  } else {
    bad_value(key, raw, "batch or batch_classes");
  }
}

template <class T>
void parse(const std::string& key, const std::string& raw, std::vector<T>& out) {
  std::vector<T> v;
  if (!trim(raw).empty()) {
    std::stringstream ss(raw);
    for (std::string item; std::getline(ss, item, ',');) {
      T x{};
      parse(key, item, x);
      v.push_back(x);
    }
  }
  out = std::move(v);
}

// Calls f(name, field&) for every configurable field.
template <class F>
void visit(EncoderConfig& c, F&& f, bool geometry) {
  f("depth", c.depth);
  f("dim", c.dim);
  f("heads", c.heads);
  f("mlp_ratio", c.mlp_ratio);
  f("embed_dim", c.embed_dim);
  f("prompt_len", c.prompt_len);
  f("replace_layers", c.replace_layers);
  f("shared_qkv", c.shared_qkv);
  f("text_prefix_len", c.text_prefix_len);
  f("ln_eps", c.ln_eps);
  f("prompt_init_std", c.prompt_init_std);
  if (geometry) {
    f("grid_h", c.grid_h);
    f("grid_w", c.grid_w);
    f("patch_vocab", c.patch_vocab);
    f("text_vocab", c.text_vocab);
    f("name_len", c.name_len);
  }
}

template <class F>
void visit(SynthSpec& s, F&& f, bool with_seed) {
  f("classes", s.classes);
  f("grid_h", s.grid_h);
  f("grid_w", s.grid_w);
  f("patch_vocab", s.patch_vocab);
  f("name_len", s.name_len);
  f("text_vocab", s.text_vocab);
  f("noise", s.noise);
  f("train_per_class", s.train_per_class);
  f("val_per_class", s.val_per_class);
  f("transfer_classes", s.transfer_classes);
  f("transfer_per_class", s.transfer_per_class);
  f("shift_noise", s.shift_noise);
  if (with_seed) f("seed", s.seed);
}

template <class F>
void visit(TrainConfig& t, F&& f, bool with_seed) {
  f("lr0", t.lr0);
  f("epochs", t.epochs);
  f("batch_size", t.batch_size);
  f("k", t.k);
  f("lambda", t.lambda);
  f("distill_temp", t.distill_temp);
  f("tau", t.tau);
  f("momentum", t.momentum);
  f("weight_decay", t.weight_decay);
  f("max_grad_norm", t.max_grad_norm);
  f("kd_norm", t.kd_norm);
  if (with_seed) f("seed", t.seed);
}

template <class F>
void visit(TeacherConfig& t, F&& f) {
  f("templates", t.templates);
  f("tau", t.tau);
  f("lr", t.lr);
  f("batch_size", t.batch_size);
  f("max_epochs", t.max_epochs);
  f("patience", t.patience);
  f("resample_templates", t.resample_templates);
}

template <class F>
void visit(BackboneConfig& b, F&& f) {
  f("epochs", b.epochs);
  f("lr", b.lr);
  f("batch_size", b.batch_size);
  f("tau", b.tau);
}

template <class F>
void visit(EvalConfig& e, F&& f) {
  f("base_fraction", e.base_fraction);
  f("shots", e.shots);
  f("finetune_epochs", e.finetune_epochs);
  f("shot_grid", e.shot_grid);
  f("seeds", e.seeds);
}

template <class F>
void visit(VerifyConfig& v, F&& f) {
  f("grad_eps", v.grad_eps);
  f("grad_tol", v.grad_tol);
  f("lambdas", v.lambdas);
  f("seeds", v.seeds);
  f("transfer_seeds", v.transfer_seeds);
  f("transfer_lambda", v.transfer_lambda);
  f("kd_slack", v.kd_slack);
  f("acc_slack", v.acc_slack);
  f("underfit_epochs", v.underfit_epochs);
  f("trend_lr0", v.trend_lr0);
  f("mc_trials", v.mc_trials);
}

// f(flat_key, field&) over the whole run config.
template <class F>
void visit(RunConfig& c, F&& f) {
  f("seed", c.seed);
  auto in = [&](const std::string& section) {
    return [&f, section](const char* name, auto& field) { f(section + "." + name, field); };
  };
  visit(c.data, in("data"), false);
  visit(c.student, in("student"), false);
  visit(c.student_backbone, in("student_backbone"));
  visit(c.teacher, in("teacher"));
  visit(c.teacher.encoder, in("teacher_encoder"), false);
  visit(c.train, in("train"), false);
  visit(c.eval, in("eval"));
  visit(c.verify, in("verify"));
}

template <class T, class V>
KeyValues dump(T& obj, const std::string& prefix, V&& visitor) {
  KeyValues kv;
  visitor(obj, [&](const std::string& name, auto& field) { kv[prefix + name] = format(field); });
  return kv;
}

template <class T, class V>
void load(T& obj, const KeyValues& kv, const std::string& prefix, V&& visitor) {
  visitor(obj, [&](const std::string& name, auto& field) {
    const auto it = kv.find(prefix + name);
    require(it != kv.end(), ErrorKind::kIo, "missing config echo key '" + prefix + name + "'");
    parse(it->first, it->second, field);
  });
}

}  // namespace

void RunConfig::finalize() {
  for (EncoderConfig* e : {&student, &teacher.encoder}) {
    e->grid_h = data.grid_h;
    e->grid_w = data.grid_w;
    e->patch_vocab = data.patch_vocab;
    e->text_vocab = data.text_vocab;
    e->name_len = data.name_len;
  }
  data.seed = seed;
  teacher.seed = seed + 2;
  train.seed = seed + 3;
}

void RunConfig::validate() const {
  data.validate();
  student.validate();
  teacher.validate();
  train.validate();
  require(student_backbone.lr > 0.0 && student_backbone.batch_size >= 1 && student_backbone.tau > 0.0,
          ErrorKind::kConfig, "student_backbone: lr, batch_size and tau must be positive");
  require(eval.base_fraction > 0.0 && eval.base_fraction < 1.0, ErrorKind::kConfig,
          "eval.base_fraction must lie in (0, 1)");
  require(!eval.seeds.empty(), ErrorKind::kConfig, "eval.seeds must not be empty");
  require(verify.trend_lr0 >= 0.0, ErrorKind::kConfig, "verify.trend_lr0 must be >= 0");
  require(verify.grad_eps > 0.0 && verify.grad_tol > 0.0, ErrorKind::kConfig, "verify tolerances must be positive");
  for (std::size_t i = 1; i < verify.lambdas.size(); ++i)
    require(verify.lambdas[i] > verify.lambdas[i - 1], ErrorKind::kConfig, "verify.lambdas must be strictly increasing");
  for (double l : verify.lambdas) require(l >= 0.0, ErrorKind::kConfig, "verify.lambdas must be >= 0");
}

KeyValues to_kv(const RunConfig& cfg) {
  RunConfig copy = cfg;
  KeyValues kv;
  visit(copy, [&](const std::string& key, auto& field) { kv[key] = format(field); });
  return kv;
}

void set_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  bool found = false;
  visit(cfg, [&](const std::string& k, auto& field) {
    if (k == key) {
      parse(key, value, field);
      found = true;
    }
  });
  require(found, ErrorKind::kConfig, "unknown config key '" + key + "'");
}

std::string to_ini(const RunConfig& cfg) {
  std::string out, section;
  for (const auto& [key, value] : to_kv(cfg)) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) continue;
    const std::string s = key.substr(0, dot);
    if (s != section) out += (out.empty() ? "" : "\n") + ("[" + s + "]\n");
    section = s;
    out += key.substr(dot + 1) + " = " + value + "\n";
  }
  return "seed = " + std::to_string(cfg.seed) + "\n\n" + out;
}

void merge_config_file(RunConfig& cfg, const std::string& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(path, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorKind::kConfig, std::string("config file: ") + e.what());
  }
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      set_value(cfg, name, node.data());
      continue;
    }
    for (const auto& [key, leaf] : node) set_value(cfg, name + "." + key, leaf.data());
  }
}

RunConfig resolve_config(const std::string& file, const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg;
  if (!file.empty()) merge_config_file(cfg, file);
  for (const auto& [key, value] : overrides) set_value(cfg, key, value);
  cfg.finalize();
  cfg.validate();
  return cfg;
}

KeyValues encoder_to_kv(const EncoderConfig& cfg, const std::string& prefix) {
  EncoderConfig copy = cfg;
  return dump(copy, prefix, [](EncoderConfig& c, auto&& f) { visit(c, f, true); });
}

EncoderConfig encoder_from_kv(const KeyValues& kv, const std::string& prefix) {
  EncoderConfig cfg;
  load(cfg, kv, prefix, [](EncoderConfig& c, auto&& f) { visit(c, f, true); });
  cfg.validate();
  return cfg;
}

KeyValues train_to_kv(const TrainConfig& cfg, const std::string& prefix) {
  TrainConfig copy = cfg;
  return dump(copy, prefix, [](TrainConfig& c, auto&& f) { visit(c, f, true); });
}

TrainConfig train_from_kv(const KeyValues& kv, const std::string& prefix) {
  TrainConfig cfg;
  load(cfg, kv, prefix, [](TrainConfig& c, auto&& f) { visit(c, f, true); });
  return cfg;
}

KeyValues synth_to_kv(const SynthSpec& spec, const std::string& prefix) {
  SynthSpec copy = spec;
  return dump(copy, prefix, [](SynthSpec& s, auto&& f) { visit(s, f, true); });
}

SynthSpec synth_from_kv(const KeyValues& kv, const std::string& prefix) {
  SynthSpec spec;
  load(spec, kv, prefix, [](SynthSpec& s, auto&& f) { visit(s, f, true); });
  return spec;
}

}  // namespace rpp
