#include "rpp/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>

#include "json.hpp"

#include "rpp/error.hpp"
#include "rpp/evalsuite.hpp"

namespace rpp {

namespace {

using Json = nlohmann::ordered_json;

class FaultScope {
 public:
  explicit FaultScope(const std::string& op) : active_(!op.empty()) {
    if (active_) set_backward_fault(op);
  }
  ~FaultScope() {
    if (active_) set_backward_fault("", 1.0);
  }
  FaultScope(const FaultScope&) = delete;
  FaultScope& operator=(const FaultScope&) = delete;

 private:
  bool active_;
};

std::vector<int> random_ids(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(vocab) - 1);
  std::vector<int> out(n);
  for (int& v : out) v = pick(rng);
  return out;
}

Tensor random_unit_rows(std::size_t n, std::size_t e, std::mt19937_64& rng) {
  NoGradGuard no_grad;
  return l2_normalize(Tensor::randn({n, e}, 1.0, rng));
}

Tensor random_distributions(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> spread(0.1, 5.0);
  NoGradGuard no_grad;
  return softmax(scale(Tensor::randn({n, k}, 1.0, rng), spread(rng)));
}

IdentityCheck make_check(std::string name, double value, double tolerance, bool pass, std::string detail) {
  return {std::move(name), value, tolerance, pass, std::move(detail)};
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? std::numeric_limits<double>::quiet_NaN()
                   : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

struct Fit {
  double top1 = 0.0;
  double ce = 0.0;
};

// Full-softmax top-1 and cross-entropy on a labelled dataset.
Fit full_fit(const DualEncoder& model, const PromptBank* prompts, const Dataset& data, double tau) {
  const Tensor img = encode_split_images(model, prompts, data.split, data.patch_count);
  const Tensor cls = encode_class_names(model, prompts, data);
  NoGradGuard no_grad;
  return {top1_from_embeddings(img, cls, data.split.labels), ce_loss(clip_probs(img, cls, tau), data.split.labels).item()};
}

}  // namespace

// ---- gradient check --------------------------------------------------------

std::string GradCheckReport::to_json() const {
  Json j;
  j["check"] = "grad-check";
  j["eps"] = eps;
  j["tolerance"] = tolerance;
  j["max_rel_error"] = max_rel_error;
  j["checked"] = checked;
  Json per = Json::object();
  for (const auto& [name, err] : per_parameter) per[name] = err;
  j["per_parameter"] = per;
  j["pass"] = pass;
  return j.dump(2);
}

EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.depth = 3;
  e.dim = 8;
  e.heads = 2;
  e.mlp_ratio = 2;
  e.embed_dim = 8;
  e.prompt_len = 2;
  e.replace_layers = {2, 3};
  e.grid_h = 2;
  e.grid_w = 2;
  e.patch_vocab = 8;
  e.text_vocab = 16;
  e.name_len = 2;
  return e;
}

GradCheckReport grad_check_model(const GradCheckOptions& opts) {
  require(opts.eps > 0.0 && opts.tolerance > 0.0, ErrorKind::kConfig, "grad check needs positive eps and tolerance");
  constexpr std::size_t kClasses = 6, kBatch = 3, kSampled = 4;
  std::mt19937_64 rng(opts.seed);
  const EncoderConfig ec = tiny_encoder();
  Backbone bb = Backbone::init(ec, rng);
  const DualEncoder student(ec, bb);
  PromptBank prompts = PromptBank::init(ec, rng);

  EncoderConfig tec = ec;
  tec.depth = 2;
  tec.prompt_len = 0;
  tec.replace_layers.clear();
  tec.text_prefix_len = 1;
  const TeacherModel teacher{DualEncoder(tec, Backbone::init(tec, rng)), random_ids(2, ec.text_vocab, rng), 0.07};

  Dataset data{ec.name_len, ec.patches(), random_ids(kClasses * ec.name_len, ec.text_vocab, rng), {}};
  data.split.patches = random_ids(kBatch * ec.patches(), ec.patch_vocab, rng);
  data.split.labels = random_ids(kBatch, kClasses, rng);
  const SampledClassSet set = sample_classes(data.split.labels, kClasses, kSampled, rng);
  const TeacherTargets targets{teacher_image_embeddings(teacher, data.split, data.patch_count),
                               build_prototype_cache(teacher, data), teacher.tau};
  const std::vector<int> rows{0, 1, 2};

  TrainConfig cfg;
  cfg.lambda = opts.lambda;
  cfg.distill_temp = opts.distill_temp;
  auto loss = [&] {
    return step_loss(student, prompts, data.split.patches, set, data, &targets, rows, cfg).total;
  };
  double base = 0.0;
  {
    NoGradGuard no_grad;
    base = loss().item();
  }
  require(std::isfinite(base), ErrorKind::kConfig, "grad check: non-finite loss at the base point");
  {
    FaultScope fault(opts.fault_op);
    backward(loss());
  }

  GradCheckReport report;
  report.eps = opts.eps;
  report.tolerance = opts.tolerance;
  NoGradGuard no_grad;
  for (auto& [name, t] : prompts.named()) {
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end()) : std::vector<double>(t.numel(), 0.0);
    Tensor param = t;
    double worst = 0.0;
    for (std::size_t i = 0; i < param.numel(); ++i) {
      const double saved = param.data()[i];
      param.mutable_data()[i] = saved + opts.eps;
      const double up = loss().item();
      param.mutable_data()[i] = saved - opts.eps;
      const double down = loss().item();
      param.mutable_data()[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, std::isfinite(err) ? err : std::numeric_limits<double>::infinity());
      ++report.checked;
    }
    report.per_parameter.emplace_back(name, worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  report.pass = report.max_rel_error <= report.tolerance;
  return report;
}

// ---- identity checks -------------------------------------------------------

IdentityCheck reduction_check(std::size_t instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> n_dist(1, 6), c_dist(2, 10), e_dist(2, 8);
  std::uniform_real_distribution<double> tau_dist(0.02, 1.0);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t inst = 0; inst < instances; ++inst) {
    const std::size_t n = n_dist(rng), c = c_dist(rng), e = e_dist(rng);
    const double tau = tau_dist(rng);
    const Tensor img = random_unit_rows(n, e, rng), cls = random_unit_rows(c, e, rng);
    const SampledClassSet set = sample_classes(random_ids(n, c, rng), c, c, rng);
    const Tensor local = local_contrast_probs(img, set, cls, tau);
    const Tensor full = clip_probs(img, cls, tau);
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<int> order = set.classes_for(i);
      for (std::size_t j = 0; j < c; ++j)
        worst = std::max(worst, std::abs(local.data()[i * c + j] - full.data()[i * c + static_cast<std::size_t>(order[j])]));
    }
  }
  return make_check("sampled-objective reduction (K = C)", worst, 1e-12, worst <= 1e-12,
                    std::to_string(instances) + " random instances, max abs difference");
}

IdentityCheck kd_self_check(std::size_t instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> n_dist(1, 8), k_dist(2, 16);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < instances; ++i) {
    const Tensor p = random_distributions(n_dist(rng), k_dist(rng), rng);
    worst = std::max(worst, std::abs(kd_loss(p, p).item()));
  }
  return make_check("kd_loss(p, p) = 0", worst, 1e-12, worst <= 1e-12,
                    std::to_string(instances) + " random distributions, max |kd|");
}

IdentityCheck kd_nonnegative_check(std::size_t instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> n_dist(1, 8), k_dist(2, 16);
  double lowest = std::numeric_limits<double>::infinity();
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t n = n_dist(rng), k = k_dist(rng);
    const Tensor s = random_distributions(n, k, rng), t = random_distributions(n, k, rng);
    lowest = std::min({lowest, kd_loss(s, t).item(), kd_loss(s, t, KdNormalization::kBatch).item()});
  }
  return make_check("kd_loss >= 0", lowest, -1e-12, lowest >= -1e-12,
                    std::to_string(instances) + " random pairs, minimum value");
}

IdentityCheck kd_worked_value_check() {
  NoGradGuard no_grad;
  const double kd = kd_loss(Tensor::from({1, 2}, {0.25, 0.75}), Tensor::from({1, 2}, {0.5, 0.5})).item();
  const double err = std::abs(kd - 0.07192);
  return make_check("kd worked value 0.07192", err, 1e-6, err <= 1e-6, "kd = " + std::to_string(kd));
}

IdentityCheck degenerate_equivalence_check(std::size_t seeds) {
  std::size_t mismatches = 0, compared = 0;
  NoGradGuard no_grad;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(seed);
    EncoderConfig unshared;
    unshared.depth = 3;
    unshared.dim = 16;
    unshared.heads = 2;
    unshared.prompt_len = 3;
    unshared.replace_layers = {2, 3};
    EncoderConfig shared = unshared;
    shared.shared_qkv = true;
    const Backbone bb = Backbone::init(unshared, rng);

    const Tensor x = Tensor::randn({2, unshared.image_seq_len(), unshared.dim}, 1.0, rng);
    const Tensor p = Tensor::randn({unshared.prompt_len, unshared.dim}, 0.5, rng);
    const SequenceState state{x, 1 + unshared.patches(), unshared.prompt_len};
    const BlockParams& block = bb.image.blocks[1];
    const Tensor a = sapl_block_forward(state, p, p, p, block, unshared.heads, unshared.ln_eps).x;
    const Tensor b = shared_block_forward(state, p, block, unshared.heads, unshared.ln_eps).x;
    compared += a.numel();
    for (std::size_t i = 0; i < a.numel(); ++i)
      mismatches += std::memcmp(&a.data()[i], &b.data()[i], sizeof(double)) != 0;

    PromptBank shared_bank = PromptBank::init(shared, rng);
    PromptBank tied = PromptBank::zeros(unshared);
    for (Branch br : {Branch::kImage, Branch::kText}) {
      tied.branch(br).p1 = shared_bank.branch(br).p1;
      for (auto& [layer, lp] : tied.branch(br).layers) {
        const Tensor& s = shared_bank.branch(br).layers.at(layer).shared;
        lp.q = lp.k = lp.v = s;
      }
    }
    const std::vector<int> patches = random_ids(2 * unshared.patches(), unshared.patch_vocab, rng);
    const std::vector<int> names = random_ids(2 * unshared.text_tokens(), unshared.text_vocab, rng);
    const DualEncoder enc_u(unshared, bb), enc_s(shared, bb);
    for (const auto& [u, s] : {std::pair{enc_u.encode_images(patches, 2, &tied), enc_s.encode_images(patches, 2, &shared_bank)},
                               std::pair{enc_u.encode_texts(names, 2, &tied), enc_s.encode_texts(names, 2, &shared_bank)}}) {
      compared += u.numel();
      for (std::size_t i = 0; i < u.numel(); ++i)
        mismatches += std::memcmp(&u.data()[i], &s.data()[i], sizeof(double)) != 0;
    }
  }
  return make_check("P_Q = P_K = P_V matches shared prompts bitwise", static_cast<double>(mismatches), 0.0,
                    mismatches == 0,
                    std::to_string(seeds) + " seeds, " + std::to_string(compared) + " values compared (block and encoder)");
}

IdentityCheck hm_spot_check() {
  const double hm = harmonic_mean(0.8426, 0.7610);
  const double err = std::abs(hm - 0.7997);
  return make_check("harmonic mean spot value 0.7997", err, 5e-5, err < 5e-5, "hm = " + std::to_string(hm));
}

std::vector<IdentityCheck> identity_checks(std::uint64_t seed) {
  return {reduction_check(100, seed),        kd_self_check(1000, seed + 1), kd_nonnegative_check(1000, seed + 2),
          kd_worked_value_check(),           degenerate_equivalence_check(10), hm_spot_check()};
}

std::string to_json(const std::vector<IdentityCheck>& checks) {
  Json j;
  j["check"] = "identities";
  Json list = Json::array();
  bool pass = true;
  for (const auto& c : checks) {
    list.push_back({{"name", c.name}, {"value", c.value}, {"tolerance", c.tolerance}, {"pass", c.pass}, {"detail", c.detail}});
    pass = pass && c.pass;
  }
  j["checks"] = list;
  j["pass"] = pass;
  return j.dump(2);
}

// ---- margin unbiasedness ---------------------------------------------------

std::string UnbiasednessReport::to_json() const {
  Json j;
  j["check"] = "unbiasedness";
  j["C"] = c;
  j["K"] = k;
  j["mode"] = exact ? "exact" : "monte_carlo";
  j["trials"] = trials;
  j["true_mass"] = true_mass;
  j["estimate"] = estimate;
  j["rel_error"] = rel_error;
  j["tolerance"] = tolerance;
  j["pass"] = pass;
  return j.dump(2);
}

UnbiasednessReport unbiasedness_check(std::size_t c, std::size_t k, std::size_t trials, std::uint64_t seed) {
  const double m = local_margin(k, c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<double> mass(c, 0.0);  // exp(z_j) for negatives 1..C-1 of class 0
  for (std::size_t j = 1; j < c; ++j) mass[j] = std::exp(z(rng));

  UnbiasednessReport r;
  r.c = c;
  r.k = k;
  r.exact = c <= 8;
  r.true_mass = std::accumulate(mass.begin(), mass.end(), 0.0);
  double total = 0.0;
  if (r.exact) {
    // Every (K-1)-subset of the C-1 negatives, via a selection mask.
    std::vector<char> pick(c - 1, 0);
    std::fill(pick.end() - static_cast<std::ptrdiff_t>(k - 1), pick.end(), 1);
    do {
      double s = 0.0;
      for (std::size_t j = 0; j + 1 < c; ++j)
        if (pick[j]) s += mass[j + 1];
      total += std::exp(m) * s;
      ++r.trials;
    } while (std::next_permutation(pick.begin(), pick.end()));
    r.tolerance = 1e-12;
  } else {
    require(trials >= 1, ErrorKind::kConfig, "Monte Carlo check needs trials >= 1");
    const std::vector<int> gt{0};
    for (std::size_t t = 0; t < trials; ++t) {
      const SampledClassSet set = sample_classes(gt, c, k, rng);
      double s = 0.0;
      for (int j : set.negatives) s += mass[static_cast<std::size_t>(j)];
      total += std::exp(m) * s;
    }
    r.trials = trials;
    r.tolerance = 1e-2;
  }
  r.estimate = total / static_cast<double>(r.trials);
  r.rel_error = std::abs(r.estimate - r.true_mass) / r.true_mass;
  r.pass = r.rel_error <= r.tolerance;
  return r;
}

// ---- trend experiments -----------------------------------------------------

Workbench make_workbench(const RunConfig& cfg, const Progress& progress) {
  Corpus corpus = generate(cfg.data);
  const Dataset train = corpus.train_set(), val = corpus.val_set();
  TeacherModel teacher = pretrain_teacher(train, val, cfg.teacher, [&](const TeacherEpochRecord& r) {
    if (progress)
      progress("teacher epoch " + std::to_string(r.epoch) + " loss " + std::to_string(r.train_loss) + " val top-1 " +
               std::to_string(r.val_top1));
  });
  if (progress) progress("pretraining student backbone");
  Backbone bb = pretrain_student_backbone(train, val, cfg.student, cfg.student_backbone, cfg.backbone_seed());
  return make_workbench(cfg, std::move(corpus), std::move(teacher), std::move(bb));
}

Workbench make_workbench(const RunConfig& cfg, Corpus corpus, TeacherModel teacher, Backbone student_backbone) {
  require(teacher.frozen(), ErrorKind::kUsage, "teacher must be frozen");
  Dataset train = corpus.train_set();
  TeacherTargets targets = make_teacher_targets(teacher, train);
  const double teacher_ce = teacher_cross_entropy(teacher, train);
  Dataset val = corpus.val_set(), transfer = corpus.transfer_set(), shifted = corpus.shifted_set();
  return Workbench{cfg,
                   std::move(corpus),
                   std::move(train),
                   std::move(val),
                   std::move(transfer),
                   std::move(shifted),
                   std::move(teacher),
                   std::move(targets),
                   std::move(student_backbone),
                   teacher_ce};
}

RunOutcome run_student(const Workbench& wb, const EncoderConfig& student, TrainConfig cfg, std::uint64_t seed,
                       bool transfer_eval) {
  RunOutcome out;
  out.lambda = cfg.lambda;
  out.seed = seed;
  cfg.seed = seed;
  const DualEncoder enc(student, wb.student_backbone);
  TrainResult result;
  try {
    result = train(enc, initial_prompts(student, seed), &wb.targets, wb.train, cfg);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kTraining) throw;
    out.diverged = true;
    out.error = e.what();
    return out;
  }
  std::vector<double> kd, ce;
  for (const MetricRecord& r : result.records) {
    if (r.epoch != cfg.epochs) continue;
    kd.push_back(r.loss.kd);
    ce.push_back(r.loss.ce);
  }
  out.final_kd = mean_of(kd);
  out.final_ce = mean_of(ce);
  const Fit fit = full_fit(enc, &result.prompts, wb.train, cfg.tau);
  out.train_top1 = fit.top1;
  out.heldout_top1 = top1(enc, &result.prompts, wb.val);
  if (transfer_eval) {
    out.transfer_top1 = top1(enc, &result.prompts, wb.transfer);
    out.shifted_top1 = top1(enc, &result.prompts, wb.shifted);
  }
  return out;
}

std::string BoundReport::to_json() const {
  Json j;
  j["check"] = "lambda-sweep";
  j["slack"] = slack;
  j["teacher_ce_proxy"] = teacher_ce;
  Json rows_j = Json::array();
  for (const auto& r : rows)
    rows_j.push_back({{"lambda", r.lambda},
                      {"runs", r.runs},
                      {"final_kd", r.final_kd},
                      {"final_ce", r.final_ce},
                      {"train_error", r.train_error},
                      {"heldout_error", r.heldout_error},
                      {"lambda_kd", r.lambda_kd},
                      {"ce_gap", r.ce_gap},
                      {"budget_holds", r.lambda_kd <= r.ce_gap}});
  j["rows"] = rows_j;
  Json runs_j = Json::array();
  for (const auto& r : runs)
    runs_j.push_back({{"lambda", r.lambda},
                      {"seed", r.seed},
                      {"diverged", r.diverged},
                      {"final_kd", r.final_kd},
                      {"final_ce", r.final_ce},
                      {"train_top1", r.train_top1},
                      {"heldout_top1", r.heldout_top1}});
  j["runs"] = runs_j;
  j["diverged"] = diverged;
  j["asserted"] = asserted;
  j["monotone"] = monotone;
  j["pass"] = pass;
  return j.dump(2);
}

BoundReport lambda_sweep(const Workbench& wb, std::span<const double> lambdas, std::span<const std::uint64_t> seeds,
                         const TrainConfig& base, double slack, const Progress& progress) {
  require(!lambdas.empty() && !seeds.empty(), ErrorKind::kUsage, "sweep needs lambdas and seeds");
  for (std::size_t i = 1; i < lambdas.size(); ++i)
    require(lambdas[i] > lambdas[i - 1], ErrorKind::kConfig, "sweep lambdas must be strictly increasing");
  BoundReport report;
  report.slack = slack;
  report.teacher_ce = wb.teacher_ce;
  report.asserted = lambdas.size() > 1;
  if (report.asserted)
    require(lambdas.size() >= 3 && lambdas.front() == 0.0 && seeds.size() >= 3, ErrorKind::kUsage,
            "an asserted sweep needs >= 3 lambdas starting at 0 and >= 3 seeds");

  for (double lambda : lambdas) {
    TrainConfig cfg = base;
    cfg.lambda = lambda;
    BoundRow row;
    row.lambda = lambda;
    std::vector<double> kd, ce, tr, ho, full_ce;
    for (std::uint64_t seed : seeds) {
      RunOutcome run = run_student(wb, wb.cfg.student, cfg, seed, false);
      if (progress)
        progress("lambda " + std::to_string(lambda) + " seed " + std::to_string(seed) +
                 (run.diverged ? " diverged" : " final kd " + std::to_string(run.final_kd)));
      if (run.diverged) {
        ++report.diverged;
      } else {
        kd.push_back(run.final_kd);
        ce.push_back(run.final_ce);
        tr.push_back(1.0 - run.train_top1);
        ho.push_back(1.0 - run.heldout_top1);
      }
      report.runs.push_back(std::move(run));
    }
    row.runs = kd.size();
    row.final_kd = mean_of(kd);
    row.final_ce = mean_of(ce);
    row.train_error = mean_of(tr);
    row.heldout_error = mean_of(ho);
    row.lambda_kd = lambda * row.final_kd;
    row.ce_gap = wb.teacher_ce - row.final_ce;
    report.rows.push_back(row);
  }
  const BoundRow* prev = nullptr;
  for (const BoundRow& r : report.rows) {
    if (r.runs == 0) continue;
    if (prev && r.final_kd > prev->final_kd + slack) report.monotone = false;
    prev = &r;
  }
  const bool healthy = report.diverged * 3 <= report.runs.size();
  report.pass = healthy && (!report.asserted || report.monotone);
  return report;
}

double VariantResult::mean_train() const { return mean_of(train_top1); }
double VariantResult::mean_heldout() const { return mean_of(heldout_top1); }

std::string UnderfitReport::to_json() const {
  Json j;
  j["check"] = "underfit";
  j["seeds"] = seeds;
  j["slack"] = slack;
  Json vs = Json::array();
  for (const auto& v : variants)
    vs.push_back({{"name", v.name},
                  {"prompt_len", v.encoder.prompt_len},
                  {"shared_qkv", v.encoder.shared_qkv},
                  {"replace_layers", v.encoder.replace_layers},
                  {"prompt_parameters", v.prompt_parameters},
                  {"replacement_parameters", v.replacement_parameters},
                  {"train_top1", v.train_top1},
                  {"heldout_top1", v.heldout_top1},
                  {"mean_train_top1", v.mean_train()},
                  {"mean_heldout_top1", v.mean_heldout()}});
  j["variants"] = vs;
  j["unshared_minus_shared_train_top1"] = shared_gap;
  j["pass"] = pass;
  return j.dump(2);
}

std::vector<std::pair<std::string, EncoderConfig>> underfit_variants(const EncoderConfig& student) {
  EncoderConfig input_only = student;
  input_only.replace_layers.clear();
  input_only.shared_qkv = false;
  EncoderConfig shared = student;
  shared.replace_layers = EncoderConfig::all_deep_layers(student.depth);
  shared.shared_qkv = true;
  shared.prompt_len = 3 * student.prompt_len;
  EncoderConfig unshared = student;
  unshared.replace_layers = EncoderConfig::all_deep_layers(student.depth);
  unshared.shared_qkv = false;
  return {{"input_only", input_only}, {"shared_qkv", shared}, {"unshared", unshared}};
}

UnderfitReport underfit_experiment(const Workbench& wb, std::span<const std::uint64_t> seeds, const TrainConfig& base,
                                   double slack, const Progress& progress) {
  require(!seeds.empty(), ErrorKind::kUsage, "underfit experiment needs seeds");
  UnderfitReport report;
  report.seeds.assign(seeds.begin(), seeds.end());
  report.slack = slack;
  for (auto& [name, enc] : underfit_variants(wb.cfg.student)) {
    enc.validate();
    report.variants.push_back({name, enc, expected_prompt_parameters(enc), replacement_prompt_parameters(enc), {}, {}});
  }
  const double shared_budget = static_cast<double>(report.variants[1].replacement_parameters);
  const double unshared_budget = static_cast<double>(report.variants[2].replacement_parameters);
  require(std::abs(shared_budget - unshared_budget) <= 0.01 * unshared_budget, ErrorKind::kConfig,
          "shared and unshared prompt budgets differ by more than 1%");

  TrainConfig cfg = base;
  cfg.lambda = 0.0;
  for (VariantResult& v : report.variants) {
    for (std::uint64_t seed : seeds) {
      const RunOutcome run = run_student(wb, v.encoder, cfg, seed, false);
      require(!run.diverged, ErrorKind::kTraining, v.name + " diverged: " + run.error);
      v.train_top1.push_back(run.train_top1);
      v.heldout_top1.push_back(run.heldout_top1);
      if (progress)
        progress(v.name + " seed " + std::to_string(seed) + " train top-1 " + std::to_string(run.train_top1));
    }
  }
  report.shared_gap = report.variants[2].mean_train() - report.variants[1].mean_train();
  report.pass = report.variants[2].mean_train() >= report.variants[0].mean_train() - slack;
  return report;
}

std::string TransferReport::to_json() const {
  Json j;
  j["check"] = "transfer";
  j["lambda_off"] = lambda_off;
  j["lambda_on"] = lambda_on;
  j["seeds"] = seeds;
  j["transfer_top1_off"] = off;
  j["transfer_top1_on"] = on;
  j["shifted_top1_off"] = shifted_off;
  j["shifted_top1_on"] = shifted_on;
  j["mean_off"] = mean_off;
  j["mean_on"] = mean_on;
  j["prompt_free_top1"] = prompt_free;
  j["teacher_top1"] = teacher_top1;
  j["pass"] = pass;
  return j.dump(2);
}

TransferReport transfer_experiment(const Workbench& wb, std::span<const std::uint64_t> seeds, const TrainConfig& base,
                                   double lambda_on, const Progress& progress) {
  require(!seeds.empty(), ErrorKind::kUsage, "transfer experiment needs seeds");
  require(lambda_on > 0.0, ErrorKind::kConfig, "distilled arm needs lambda > 0");
  TransferReport report;
  report.lambda_on = lambda_on;
  report.seeds.assign(seeds.begin(), seeds.end());
  for (std::uint64_t seed : seeds) {
    for (double lambda : {0.0, lambda_on}) {
      TrainConfig cfg = base;
      cfg.lambda = lambda;
      const RunOutcome run = run_student(wb, wb.cfg.student, cfg, seed, true);
      require(!run.diverged, ErrorKind::kTraining, "transfer run diverged: " + run.error);
      (lambda == 0.0 ? report.off : report.on).push_back(run.transfer_top1);
      (lambda == 0.0 ? report.shifted_off : report.shifted_on).push_back(run.shifted_top1);
      if (progress)
        progress("lambda " + std::to_string(lambda) + " seed " + std::to_string(seed) + " transfer top-1 " +
                 std::to_string(run.transfer_top1));
    }
  }
  report.mean_off = mean_of(report.off);
  report.mean_on = mean_of(report.on);
  report.prompt_free = top1(prompt_free(DualEncoder(wb.cfg.student, wb.student_backbone)), nullptr, wb.transfer);
  report.teacher_top1 = teacher_top1(wb.teacher, wb.transfer);
  report.pass = report.mean_on >= report.mean_off;
  return report;
}

}  // namespace rpp
