// Acceptance run: one PASS/FAIL line per criterion. argv[1] is the rpp
// executable; argv[2] (optional) a scratch directory.
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rpp/rpp.h"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string take(char* s) {
  std::string out = s ? s : "";
  rpp_string_free(s);
  return out;
}

void progress(const char* line, void*) { std::fprintf(stderr, "    %s\n", line); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string read(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int shell(const std::string& cmd) {
  const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

struct Config {
  rpp_config* cfg = nullptr;
  Config() {
    if (rpp_config_new(&cfg) != RPP_OK) throw std::runtime_error(rpp_last_error());
  }
  ~Config() { rpp_config_free(cfg); }
  void set(const char* k, const std::string& v) {
    if (rpp_config_set(cfg, k, v.c_str()) != RPP_OK) throw std::runtime_error(rpp_last_error());
  }
  void finalize() {
    if (rpp_config_finalize(cfg) != RPP_OK) throw std::runtime_error(rpp_last_error());
  }
};

void ok(rpp_status s) {
  if (s != RPP_OK) throw std::runtime_error(std::string(rpp_status_name(s)) + ": " + rpp_last_error());
}

json verify(const Config& c, const char* check, const rpp_corpus* corpus = nullptr, const rpp_teacher* teacher = nullptr,
            const rpp_student* student = nullptr, rpp_status* status = nullptr) {
  char* report = nullptr;
  const rpp_status s = rpp_verify(c.cfg, check, corpus, teacher, student, progress, nullptr, &report);
  if (s != RPP_OK && s != RPP_ERR_ASSERTION) throw std::runtime_error(rpp_last_error());
  if (status) *status = s;
  return json::parse(take(report));
}

// The small model used for the determinism and base-to-new runs.
const char* kSmallIni = R"([data]
classes = 8
grid_h = 2
grid_w = 2
patch_vocab = 8
name_len = 2
text_vocab = 16
train_per_class = 4
val_per_class = 2
transfer_classes = 4
transfer_per_class = 2

[student]
depth = 2
dim = 8
heads = 2
embed_dim = 8
prompt_len = 2
replace_layers = 2

[student_backbone]
epochs = 1

[teacher]
templates = 2
max_epochs = 2

[teacher_encoder]
depth = 2
dim = 8
heads = 2
embed_dim = 8
text_prefix_len = 1

[train]
epochs = 3
batch_size = 4
k = 4

[eval]
finetune_epochs = 2
shots = 2
seeds = 1,2,3
)";

struct Trend {
  Config cfg;
  rpp_corpus* corpus = nullptr;
  rpp_teacher* teacher = nullptr;
  rpp_student* student = nullptr;

  Trend() {
    cfg.finalize();
    ok(rpp_corpus_generate(cfg.cfg, &corpus));
    std::fprintf(stderr, "    pretraining teacher\n");
    ok(rpp_teacher_pretrain(cfg.cfg, corpus, progress, nullptr, &teacher));
    std::fprintf(stderr, "    pretraining student backbone\n");
    ok(rpp_student_create(cfg.cfg, corpus, &student));
  }
  ~Trend() {
    rpp_student_free(student);
    rpp_teacher_free(teacher);
    rpp_corpus_free(corpus);
  }
};

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: rpp_acceptance <rpp executable> [scratch dir]\n");
    return 2;
  }
  const std::string cli = argv[1];
  const fs::path scratch = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "rpp_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);
  const fs::path small_ini = scratch / "small.ini";
  std::ofstream(small_ini) << kSmallIni;

  std::unique_ptr<Trend> trend;
  auto workbench = [&]() -> Trend& {
    if (!trend) trend = std::make_unique<Trend>();
    return *trend;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient gate",
       [] {
         Config c;
         const auto t0 = std::chrono::steady_clock::now();
         const json r = verify(c, "grad-check");
         const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
         const double err = r["max_rel_error"];
         return Outcome{r["pass"] && err <= 1e-4 && r["eps"] == 1e-5 && secs < 60.0,
                        "max rel err " + fmt(err) + " over " + std::to_string(r["checked"].get<int>()) +
                            " scalars in " + fmt(secs) + " s"};
       }},
      {"sampled-objective reduction",
       [] {
         Config c;
         const json r = verify(c, "identities")["checks"][0];
         return Outcome{r["pass"] && r["value"] <= 1e-12, "max |diff| " + fmt(r["value"]) + " on 100 instances"};
       }},
      {"margin unbiasedness",
       [] {
         Config c;
         const json r = verify(c, "unbiasedness");
         const double ex = r["exact"]["rel_error"], mc = r["monte_carlo"]["rel_error"];
         return Outcome{r["pass"] && ex <= 1e-12 && mc <= 0.01 && r["monte_carlo"]["trials"] == 100000,
                        "exact C=6,K=3 rel err " + fmt(ex) + "; Monte Carlo C=64,K=16 rel err " + fmt(mc)};
       }},
      {"KD identities",
       [] {
         Config c;
         const json r = verify(c, "identities")["checks"];
         const bool pass = r[1]["pass"] && r[1]["value"] <= 1e-12 && r[2]["pass"] && r[2]["value"] >= -1e-12 &&
                           r[3]["pass"] && r[3]["value"] <= 1e-6;
         return Outcome{pass, "max kd(p,p) " + fmt(r[1]["value"]) + ", min kd " + fmt(r[2]["value"]) +
                                  ", worked value err " + fmt(r[3]["value"])};
       }},
      {"lambda monotonicity",
       [&] {
         Trend& w = workbench();
         const auto t0 = std::chrono::steady_clock::now();
         const json r = verify(w.cfg, "sweep", w.corpus, w.teacher, w.student);
         const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
         std::string kd;
         for (const json& row : r["rows"]) kd += (kd.empty() ? "" : " ") + fmt(row["lambda"]) + ":" + fmt(row["final_kd"]);
         return Outcome{r["pass"] && r["asserted"] && secs < 1800.0,
                        "final KD by lambda " + kd + " (" + fmt(secs) + " s)"};
       }},
      {"underfitting trend",
       [&] {
         Trend& w = workbench();
         const json r = verify(w.cfg, "underfit", w.corpus, w.teacher, w.student);
         std::string acc;
         for (const json& v : r["variants"])
           acc += (acc.empty() ? "" : ", ") + v["name"].get<std::string>() + " " + fmt(v["mean_train_top1"]);
         return Outcome{r["pass"], "train top-1 " + acc};
       }},
      {"generalization trend",
       [&] {
         Trend& w = workbench();
         const json r = verify(w.cfg, "transfer", w.corpus, w.teacher, w.student);
         return Outcome{r["pass"] && r["seeds"].size() == 5,
                        "transfer top-1 lambda=0 " + fmt(r["mean_off"]) + ", lambda=2 " + fmt(r["mean_on"])};
       }},
      {"harmonic-mean identity",
       [&] {
         Config c;
         const json spot = verify(c, "identities")["checks"][5];
         const std::string out = (scratch / "hm").string();
         if (shell(cli + " --config " + small_ini.string() + " --out " + out + " --lambda 0 train") != 0)
           return Outcome{false, "train failed"};
         if (shell(cli + " --config " + small_ini.string() + " --out " + out + " eval base-to-new") != 0)
           return Outcome{false, "eval failed"};
         const json r = json::parse(read(fs::path(out) / "eval_base-to-new.json"));
         const auto& metrics = r["metrics"];
         std::size_t ib = 0, in = 0, ih = 0;
         for (std::size_t i = 0; i < metrics.size(); ++i) {
           if (metrics[i] == "base") ib = i;
           if (metrics[i] == "novel") in = i;
           if (metrics[i] == "hm") ih = i;
         }
         double worst = 0.0;
         for (const json& row : r["values"]) {
           const double b = row[ib], n = row[in];
           const double hm = b + n > 0 ? 2 * b * n / (b + n) : 0.0;
           worst = std::max(worst, std::abs(hm - row[ih].get<double>()));
         }
         const double spot_hm = 2 * 0.8426 * 0.7610 / (0.8426 + 0.7610);
         const bool rounds = std::abs(std::round(spot_hm * 1e4) / 1e4 - 0.7997) < 1e-12;
         return Outcome{spot["pass"] && rounds && worst <= 1e-12,
                        "spot HM " + std::to_string(spot_hm) + ", per-seed max |hm - 2bn/(b+n)| " + fmt(worst)};
       }},
      {"determinism",
       [&] {
         const std::string base = cli + " --config " + small_ini.string() + " --seed 5 train --out ";
         const fs::path a = scratch / "det_a", b = scratch / "det_b", c = scratch / "det_c", d = scratch / "det_d";
         if (shell(base + a.string()) != 0 || shell(base + b.string()) != 0) return Outcome{false, "train failed"};
         const std::string ma = read(a / "metrics.jsonl"), mb = read(b / "metrics.jsonl");
         const bool same = !ma.empty() && ma == mb && read(a / "student.bin") == read(b / "student.bin");
         const fs::path ckpt = c / "stop.ckpt";
         if (shell(base + c.string() + " --stop-after-step 5 --stop-checkpoint " + ckpt.string()) != 0 ||
             shell(base + d.string() + " --resume " + ckpt.string()) != 0)
           return Outcome{false, "stop/resume run failed"};
         const bool resumed = read(c / "metrics.jsonl") + read(d / "metrics.jsonl") == ma &&
                              read(d / "student.bin") == read(a / "student.bin");
         std::size_t lines = 0;
         for (char ch : ma) lines += ch == '\n';
         return Outcome{same && resumed, std::string("repeat run ") + (same ? "byte-identical" : "differs") +
                                             ", resume after step 5 " + (resumed ? "identical" : "differs") + " (" +
                                             std::to_string(lines) + " records)"};
       }},
      {"degenerate equivalence",
       [] {
         Config c;
         const json r = verify(c, "identities")["checks"][4];
         return Outcome{r["pass"] && r["value"] == 0.0, r["detail"].get<std::string>()};
       }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& [name, run] = criteria[i];
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("%s  %2zu %-28s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", i + 1, name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures ? 1 : 0;
}
