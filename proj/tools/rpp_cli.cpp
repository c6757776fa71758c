// rpp: command-line front end over the C API.
//
//   rpp gen-data       --out DIR
//   rpp train-teacher  [--corpus FILE]
//   rpp train          [--corpus FILE] [--teacher FILE] [--student FILE] [--resume CKPT]
//   rpp eval PROTOCOL  [--student FILE]          (top1 | zero-shot | base-to-new | few-shot)
//   rpp verify CHECK                             (grad-check | identities | unbiasedness |
//                                                 underfit | transfer | sweep)
//   rpp sweep          [--lambdas 0,0.5,1] [--seeds 1,2,3]
//
// Exit codes: 0 success, 1 a verification check failed, 2 usage or config
// error, 3 any other runtime error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rpp/rpp.h"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitAssertion = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

constexpr const char* kCorpusFile = "corpus.bin";
constexpr const char* kTeacherFile = "teacher.bin";
constexpr const char* kStudentFile = "student.bin";
constexpr const char* kMetricsFile = "metrics.jsonl";
constexpr const char* kManifestFile = "manifest.jsonl";
constexpr const char* kCheckpointDir = "checkpoints";

int exit_code(rpp_status s) {
  switch (s) {
    case RPP_OK:
      return kExitOk;
    case RPP_ERR_ASSERTION:
      return kExitAssertion;
    case RPP_ERR_USAGE:
    case RPP_ERR_CONFIG:
      return kExitUsage;
    default:
      return kExitRuntime;
  }
}

struct Failure {
  rpp_status status;
  std::string message;
};

void check(rpp_status s) {
  if (s != RPP_OK) throw Failure{s, rpp_last_error()};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  rpp_string_free(s);
  return out;
}

template <class T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using Config = std::unique_ptr<rpp_config, Deleter<rpp_config, rpp_config_free>>;
using Corpus = std::unique_ptr<rpp_corpus, Deleter<rpp_corpus, rpp_corpus_free>>;
using Teacher = std::unique_ptr<rpp_teacher, Deleter<rpp_teacher, rpp_teacher_free>>;
using Student = std::unique_ptr<rpp_student, Deleter<rpp_student, rpp_student_free>>;

void log_line(const char* line, void*) { std::fprintf(stderr, "%s\n", line); }

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string file_hash(const fs::path& p) {
  char* h = nullptr;
  check(rpp_file_hash(p.c_str(), &h));
  return take(h);
}

struct Options {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
  std::map<std::string, std::string> mirrors;  // config key -> flag value
  std::string corpus;
  std::string teacher;
  std::string student;
  std::string resume;
  std::size_t stop_after_step = 0;
  std::string stop_checkpoint;
  std::string protocol;
  std::string check_name;
  std::string plot;
  std::string lambdas;
  std::string seeds;
  bool verbose = false;
};

class Session {
 public:
  Session(Options opts, std::string command_line) : o_(std::move(opts)), command_line_(std::move(command_line)) {
    rpp_config* c = nullptr;
    check(rpp_config_new(&c));
    cfg_.reset(c);
    if (!o_.config_file.empty()) check(rpp_config_load_file(cfg_.get(), o_.config_file.c_str()));
    for (const std::string& kv : o_.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw Failure{RPP_ERR_USAGE, "--set expects key=value, got '" + kv + "'"};
      set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    for (const auto& [key, value] : o_.mirrors) set(key, value);
    if (o_.seed) set("seed", std::to_string(*o_.seed));
    check(rpp_config_finalize(cfg_.get()));
    out_ = o_.out;
    fs::create_directories(out_);
  }

  int run(const std::string& sub) {
    const auto t0 = std::chrono::steady_clock::now();
    int code = kExitOk;
    if (sub == "gen-data") {
      gen_data();
    } else if (sub == "train-teacher") {
      train_teacher();
    } else if (sub == "train") {
      train();
    } else if (sub == "eval") {
      eval();
    } else if (sub == "verify") {
      code = verify(o_.check_name);
    } else if (sub == "sweep") {
      code = verify("sweep");
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(sub, code, wall);
    return code;
  }

 private:
  void set(const std::string& key, const std::string& value) { check(rpp_config_set(cfg_.get(), key.c_str(), value.c_str())); }

  std::string get(const std::string& key) const {
    char* v = nullptr;
    check(rpp_config_get(cfg_.get(), key.c_str(), &v));
    return take(v);
  }

  // Explicit path, else the file in the output directory when present.
  std::optional<fs::path> locate(const std::string& flag, const char* name) const {
    if (!flag.empty()) return fs::path(flag);
    const fs::path p = out_ / name;
    if (fs::exists(p)) return p;
    return std::nullopt;
  }

  rpp_corpus* corpus(bool create) {
    if (corpus_) return corpus_.get();
    rpp_corpus* c = nullptr;
    if (const auto p = locate(o_.corpus, kCorpusFile)) {
      check(rpp_corpus_load(p->c_str(), &c));
      corpus_.reset(c);
      artifacts_["corpus"] = *p;
    } else if (create) {
      check(rpp_corpus_generate(cfg_.get(), &c));
      corpus_.reset(c);
      save_corpus();
    } else {
      return nullptr;
    }
    char* h = nullptr;
    check(rpp_corpus_hash(corpus_.get(), &h));
    corpus_hash_ = take(h);
    return corpus_.get();
  }

  void save_corpus() {
    const fs::path p = out_ / kCorpusFile;
    check(rpp_corpus_save(corpus_.get(), p.c_str()));
    artifacts_["corpus"] = p;
  }

  rpp_teacher* teacher(bool create) {
    if (teacher_) return teacher_.get();
    rpp_teacher* t = nullptr;
    if (const auto p = locate(o_.teacher, kTeacherFile)) {
      check(rpp_teacher_load(p->c_str(), &t));
      teacher_.reset(t);
      artifacts_["teacher"] = *p;
    } else if (create) {
      pretrain_teacher();
    }
    return teacher_.get();
  }

  void pretrain_teacher() {
    rpp_teacher* t = nullptr;
    check(rpp_teacher_pretrain(cfg_.get(), corpus(true), log_line, nullptr, &t));
    teacher_.reset(t);
    const fs::path p = out_ / kTeacherFile;
    check(rpp_teacher_save(teacher_.get(), p.c_str()));
    artifacts_["teacher"] = p;
  }

  rpp_student* student(bool create) {
    if (student_) return student_.get();
    rpp_student* s = nullptr;
    if (const auto p = locate(o_.student, kStudentFile)) {
      check(rpp_student_load(p->c_str(), &s));
      student_.reset(s);
      artifacts_["student"] = *p;
    } else if (create) {
      check(rpp_student_create(cfg_.get(), corpus(true), &s));
      student_.reset(s);
    } else {
      throw Failure{RPP_ERR_USAGE, "no student: pass --student or run `train` into " + out_.string()};
    }
    return student_.get();
  }

  void gen_data() {
    rpp_corpus* c = nullptr;
    check(rpp_corpus_generate(cfg_.get(), &c));
    corpus_.reset(c);
    char* h = nullptr;
    check(rpp_corpus_hash(c, &h));
    corpus_hash_ = take(h);
    save_corpus();
    std::printf("corpus %s -> %s\n", corpus_hash_.c_str(), (out_ / kCorpusFile).c_str());
  }

  void train_teacher() {
    corpus(true);
    pretrain_teacher();
    std::printf("teacher -> %s\n", (out_ / kTeacherFile).c_str());
  }

  void train() {
    rpp_corpus* c = corpus(true);
    const bool distill = std::stod(get("train.lambda")) != 0.0;
    rpp_teacher* t = distill ? teacher(true) : nullptr;
    rpp_student* s = student(true);
    const fs::path metrics = out_ / kMetricsFile;
    const fs::path ckpt_dir = out_ / kCheckpointDir;
    fs::create_directories(ckpt_dir);
    const std::string stop_ckpt =
        o_.stop_checkpoint.empty() ? (out_ / ("step_" + std::to_string(o_.stop_after_step) + ".ckpt")).string()
                                   : o_.stop_checkpoint;
    rpp_train_options opts{};
    opts.metrics_path = metrics.c_str();
    opts.checkpoint_dir = ckpt_dir.c_str();
    opts.resume_path = o_.resume.empty() ? nullptr : o_.resume.c_str();
    opts.stop_after_step = o_.stop_after_step;
    opts.stop_checkpoint = o_.stop_after_step ? stop_ckpt.c_str() : nullptr;
    opts.log = o_.verbose ? log_line : nullptr;
    check(rpp_student_train(s, cfg_.get(), c, t, &opts));
    const fs::path out = out_ / kStudentFile;
    check(rpp_student_save(s, out.c_str()));
    artifacts_["metrics"] = metrics;
    artifacts_["student"] = out;
    if (o_.stop_after_step && fs::exists(stop_ckpt)) artifacts_["stop_checkpoint"] = stop_ckpt;
    if (!o_.resume.empty()) artifacts_["resume"] = o_.resume;
    for (const auto& e : fs::directory_iterator(ckpt_dir)) artifacts_["checkpoints/" + e.path().filename().string()] = e.path();
    std::printf("student -> %s\nmetrics -> %s\n", out.c_str(), metrics.c_str());
  }

  void eval() {
    rpp_student* s = student(false);
    rpp_corpus* c = corpus(true);
    char* report = nullptr;
    char* table = nullptr;
    char* plot = nullptr;
    check(rpp_eval(s, cfg_.get(), c, o_.protocol.c_str(), &report, &table, &plot));
    const std::string r = take(report);
    const std::string tbl = take(table);
    const std::string pl = take(plot);
    const fs::path p = out_ / ("eval_" + o_.protocol + ".json");
    std::ofstream(p) << r << '\n';
    artifacts_["report"] = p;
    if (!pl.empty() && !o_.plot.empty()) {
      std::ofstream(o_.plot) << pl;
      artifacts_["plot"] = o_.plot;
    }
    std::printf("%s", tbl.c_str());
  }

  int verify(const std::string& name) {
    if (!o_.lambdas.empty()) set("verify.lambdas", o_.lambdas);
    if (!o_.seeds.empty()) set("verify.seeds", o_.seeds);
    const bool trend = name == "underfit" || name == "transfer" || name == "sweep";
    rpp_corpus* c = trend ? corpus(false) : nullptr;
    rpp_teacher* t = trend ? teacher(false) : nullptr;
    rpp_student* s = nullptr;
    if (trend && !o_.student.empty()) s = student(false);
    char* report = nullptr;
    const rpp_status st = rpp_verify(cfg_.get(), name.c_str(), c, t, s, log_line, nullptr, &report);
    if (st != RPP_OK && st != RPP_ERR_ASSERTION) throw Failure{st, rpp_last_error()};
    const std::string r = take(report);
    const fs::path p = out_ / ("verify_" + name + ".json");
    std::ofstream(p) << r << '\n';
    artifacts_["report"] = p;
    std::printf("%s\n%s: %s\n", r.c_str(), name.c_str(), st == RPP_OK ? "PASS" : "FAIL");
    return exit_code(st);
  }

  void write_manifest(const std::string& sub, int code, double wall) {
    char* cfg_json = nullptr;
    check(rpp_config_to_json(cfg_.get(), &cfg_json));
    json hashes = json::object();
    for (const auto& [name, path] : artifacts_)
      if (fs::is_regular_file(path)) hashes[name] = {{"path", path.string()}, {"hash", file_hash(path)}};
    json m{{"command", command_line_},
           {"subcommand", sub},
           {"config", json::parse(take(cfg_json))},
           {"seed", std::stoull(get("seed"))},
           {"corpus_hash", corpus_hash_.empty() ? json(nullptr) : json(corpus_hash_)},
           {"artifacts", hashes},
           {"versions", {{"rpp", rpp_version()}, {"metrics_schema", 1}, {"param_file", 1}, {"corpus_file", 1}}},
           {"started_utc", started_},
           {"wall_clock_s", wall},
           {"exit_code", code}};
    std::ofstream(out_ / kManifestFile, std::ios::app) << m.dump() << '\n';
  }

  Options o_;
  std::string command_line_;
  std::string started_ = utc_now();
  fs::path out_;
  Config cfg_;
  Corpus corpus_;
  Teacher teacher_;
  Student student_;
  std::string corpus_hash_;
  std::map<std::string, fs::path> artifacts_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt pretraining with self-attention prompts and distillation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(rpp_version()));

  Options o;
  const char* env_out = std::getenv("RPP_OUT_ROOT");
  o.out = env_out && *env_out ? env_out : "runs";
  app.add_option("--config", o.config_file, "INI config file (flags override it)");
  app.add_option("--seed", o.seed, "Run seed; derives data, teacher and training seeds");
  app.add_option("--out", o.out, "Output directory (default $RPP_OUT_ROOT or ./runs)");
  app.add_option("--set", o.sets, "Override any config key, e.g. --set teacher.max_epochs=5");
  app.add_flag("-v,--verbose", o.verbose, "Print per-step metrics to stderr");

  const std::vector<std::pair<std::string, std::string>> mirror_flags = {
      {"--lr0", "train.lr0"},
      {"--epochs", "train.epochs"},
      {"--batch-size", "train.batch_size"},
      {"--k", "train.k"},
      {"--lambda", "train.lambda"},
      {"--distill-temp", "train.distill_temp"},
      {"--tau", "train.tau"},
      {"--momentum", "train.momentum"},
      {"--weight-decay", "train.weight_decay"},
      {"--max-grad-norm", "train.max_grad_norm"},
      {"--kd-norm", "train.kd_norm"},
      {"--prompt-len", "student.prompt_len"},
  };
  std::map<std::string, std::optional<std::string>> mirror_values;
  for (const auto& [flag, key] : mirror_flags) app.add_option(flag, mirror_values[key], "Sets " + key);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  auto* teach = app.add_subcommand("train-teacher", "Pretrain the frozen teacher");
  auto* train = app.add_subcommand("train", "Train the student's prompts");
  auto* eval = app.add_subcommand("eval", "Evaluate a trained student");
  auto* verify = app.add_subcommand("verify", "Run a verification check");
  auto* sweep = app.add_subcommand("sweep", "Lambda sweep of the final distillation loss");

  for (CLI::App* sub : {gen, teach, train, eval, verify, sweep}) sub->fallthrough();
  for (CLI::App* sub : {teach, train, eval, verify, sweep}) sub->add_option("--corpus", o.corpus, "Corpus file");
  for (CLI::App* sub : {train, verify, sweep}) sub->add_option("--teacher", o.teacher, "Teacher file");
  for (CLI::App* sub : {train, eval, verify, sweep}) sub->add_option("--student", o.student, "Student file");
  train->add_option("--resume", o.resume, "Resume from a checkpoint");
  train->add_option("--stop-after-step", o.stop_after_step, "Stop after this many steps and checkpoint");
  train->add_option("--stop-checkpoint", o.stop_checkpoint, "Checkpoint path when stopping early");
  eval->add_option("protocol", o.protocol, "top1 | zero-shot | base-to-new | few-shot")
      ->required()
      ->check(CLI::IsMember({"top1", "zero-shot", "base-to-new", "few-shot"}));
  eval->add_option("--plot", o.plot, "Write few-shot plot data here");
  verify->add_option("check", o.check_name, "Check to run")
      ->required()
      ->check(CLI::IsMember({"grad-check", "identities", "unbiasedness", "underfit", "transfer", "sweep"}));
  for (CLI::App* sub : {verify, sweep}) {
    sub->add_option("--lambdas", o.lambdas, "Comma-separated lambda grid");
    sub->add_option("--seeds", o.seeds, "Comma-separated seeds");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (const auto& [key, value] : mirror_values)
    if (value) o.mirrors[key] = *value;

  std::string command_line;
  for (int i = 0; i < argc; ++i) command_line += (i ? " " : "") + std::string(argv[i]);

  try {
    Session session(std::move(o), command_line);
    return session.run(app.get_subcommands().front()->get_name());
  } catch (const Failure& f) {
    std::fprintf(stderr, "error (%s): %s\n", rpp_status_name(f.status), f.message.c_str());
    return exit_code(f.status);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}
