#include "rpp/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "rpp/config.hpp"
#include "rpp/error.hpp"

namespace rpp {

EncoderConfig default_teacher_encoder() {
  EncoderConfig e;
  e.depth = 6;
  e.dim = 64;
  e.heads = 4;
  e.embed_dim = 32;
  e.prompt_len = 0;
  e.replace_layers.clear();
  e.text_prefix_len = 2;
  return e;
}

void TeacherConfig::validate() const {
  encoder.validate();
  require(encoder.prompt_len == 0, ErrorKind::kConfig, "teacher encoder takes no prompts");
  require(templates >= 1, ErrorKind::kConfig, "teacher needs at least one template");
  require(encoder.text_prefix_len >= 1 || templates == 1, ErrorKind::kConfig,
          "several templates need text_prefix_len >= 1");
  require(tau > 0.0 && lr > 0.0 && batch_size >= 1 && max_epochs >= 1, ErrorKind::kConfig,
          "teacher: tau, lr, batch_size and max_epochs must be positive");
}

std::size_t TeacherModel::template_count() const {
  const std::size_t len = encoder.config().text_prefix_len;
  return len ? templates.size() / len : 1;
}

std::span<const int> TeacherModel::template_tokens(std::size_t t) const {
  const std::size_t len = encoder.config().text_prefix_len;
  return std::span<const int>(templates).subspan(t * len, len);
}

bool TeacherModel::frozen() const {
  for (const auto& [name, t] : encoder.backbone().named())
    if (t.requires_grad()) return false;
  return true;
}

Tensor ensemble_rows(const Tensor& rows) {
  require(rows.rank() == 2 && rows.dim(0) >= 1, ErrorKind::kDimension, "ensemble needs at least one row");
  const std::size_t t = rows.dim(0), e = rows.dim(1);
  std::vector<double> avg(e, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < e; ++j) avg[j] += rows.data()[i * e + j];
  double norm = 0.0;
  for (double& v : avg) {
    v /= static_cast<double>(t);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  require(norm >= 1e-8, ErrorKind::kNumeric, "template ensemble averages to a near-zero vector (antipodal embeddings)");
  for (double& v : avg) v /= norm;
  return Tensor::from({e}, std::move(avg));
}

namespace {

std::vector<int> templated_tokens(const TeacherModel& teacher, std::span<const int> name, std::size_t t) {
  auto prefix = teacher.template_tokens(t);
  std::vector<int> seq(prefix.begin(), prefix.end());
  seq.insert(seq.end(), name.begin(), name.end());
  return seq;
}

std::vector<int> draw_templates(std::size_t count, std::size_t len, std::size_t vocab, std::mt19937_64& rng) {
  std::set<std::vector<int>> seen;
  std::vector<int> out;
  std::uniform_int_distribution<int> tok(0, static_cast<int>(vocab) - 1);
  require(std::pow(static_cast<double>(vocab), static_cast<double>(len)) >= static_cast<double>(count),
          ErrorKind::kConfig, "too many templates for the prefix space");
  while (seen.size() < count) {
    std::vector<int> t(len);
    for (int& v : t) v = tok(rng);
    if (seen.insert(t).second) out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

class Adam {
 public:
  explicit Adam(double lr) : lr_(lr) {}
  void step(std::vector<Tensor>& params) {
    if (m_.empty()) {
      for (const Tensor& p : params) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) continue;
      auto w = params[i].mutable_data();
      auto g = params[i].grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = kBeta1 * m_[i][j] + (1.0 - kBeta1) * g[j];
        v_[i][j] = kBeta2 * v_[i][j] + (1.0 - kBeta2) * g[j] * g[j];
        w[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + 1e-8);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  double lr_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace

Tensor ensemble_class_embedding(const TeacherModel& teacher, std::span<const int> name) {
  NoGradGuard no_grad;
  const std::size_t count = teacher.template_count();
  require(count >= 1, ErrorKind::kConfig, "teacher has no templates");
  std::vector<int> tokens;
  for (std::size_t t = 0; t < count; ++t) {
    auto seq = templated_tokens(teacher, name, t);
    tokens.insert(tokens.end(), seq.begin(), seq.end());
  }
  return ensemble_rows(teacher.encoder.encode_texts(tokens, count, nullptr));
}

ClassPrototypeCache build_prototype_cache(const TeacherModel& teacher, const Dataset& classes) {
  const std::size_t c = classes.classes();
  std::vector<double> rows;
  std::size_t e = 0;
  for (std::size_t cls = 0; cls < c; ++cls) {
    const Tensor emb = ensemble_class_embedding(teacher, classes.name(cls));
    e = emb.numel();
    rows.insert(rows.end(), emb.data().begin(), emb.data().end());
  }
  return {Tensor::from({c, e}, std::move(rows))};
}

Tensor teacher_image_embeddings(const TeacherModel& teacher, const Split& split, std::size_t patch_count) {
  NoGradGuard no_grad;
  constexpr std::size_t kChunk = 128;
  std::vector<Tensor> parts;
  for (std::size_t start = 0; start < split.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, split.size() - start);
    parts.push_back(teacher.encoder.encode_images(
        std::span<const int>(split.patches).subspan(start * patch_count, n * patch_count), n, nullptr));
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

Tensor teacher_probs(const Tensor& teacher_image_embeds, const SampledClassSet& set, const ClassPrototypeCache& cache,
                     double tau_teacher, double distill_temp) {
  require(distill_temp > 0.0, ErrorKind::kConfig, "distillation temperature must be positive");
  for (int g : set.gt)
    require(static_cast<std::size_t>(g) < cache.classes(), ErrorKind::kInput,
            "class " + std::to_string(g) + " missing from teacher prototype cache");
  for (int g : set.negatives)
    require(static_cast<std::size_t>(g) < cache.classes(), ErrorKind::kInput,
            "class " + std::to_string(g) + " missing from teacher prototype cache");
  NoGradGuard no_grad;
  return local_contrast_probs(teacher_image_embeds.detach(), set, cache.prototypes, tau_teacher * distill_temp);
}

TeacherTargets make_teacher_targets(const TeacherModel& teacher, const Dataset& train) {
  return {teacher_image_embeddings(teacher, train.split, train.patch_count), build_prototype_cache(teacher, train),
          teacher.tau};
}

double teacher_top1(const TeacherModel& teacher, const Dataset& data) {
  require(data.split.size() > 0, ErrorKind::kUsage, "top-1 on an empty split");
  const ClassPrototypeCache cache = build_prototype_cache(teacher, data);
  const Tensor img = teacher_image_embeddings(teacher, data.split, data.patch_count);
  NoGradGuard no_grad;
  const Tensor sims = matmul(img, transpose(cache.prototypes));
  const std::size_t c = cache.classes();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.split.size(); ++i) {
    auto row = sims.data().subspan(i * c, c);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    hits += best == data.split.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(data.split.size());
}

double teacher_cross_entropy(const TeacherModel& teacher, const Dataset& data) {
  const ClassPrototypeCache cache = build_prototype_cache(teacher, data);
  const Tensor img = teacher_image_embeddings(teacher, data.split, data.patch_count);
  NoGradGuard no_grad;
  return ce_loss(clip_probs(img, cache.prototypes, teacher.tau), data.split.labels).item();
}

TeacherModel pretrain_teacher(const Dataset& train, const Dataset& val, const TeacherConfig& cfg,
                              const std::function<void(const TeacherEpochRecord&)>& on_epoch) {
  cfg.validate();
  require(train.split.size() > 0, ErrorKind::kUsage, "teacher pretraining on an empty split");
  std::mt19937_64 rng(cfg.seed);
  Backbone backbone = Backbone::init(cfg.encoder, rng);
  backbone.set_trainable(true);
  const EncoderConfig& ec = cfg.encoder;
  TeacherModel model{DualEncoder(ec, std::move(backbone)),
                     draw_templates(cfg.templates, ec.text_prefix_len, ec.text_vocab, rng), cfg.tau};

  std::vector<Tensor> params;
  for (auto& [name, t] : model.encoder.backbone().named()) params.push_back(t);
  Adam adam(cfg.lr);

  const std::size_t n = train.split.size(), c = train.classes(), pc = train.patch_count;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::uniform_int_distribution<std::size_t> pick_template(0, cfg.templates - 1);

  double best = -1.0;
  std::vector<std::vector<double>> best_weights;
  std::size_t since_best = 0, step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (cfg.resample_templates && epoch > 1)
      model.templates = draw_templates(cfg.templates, ec.text_prefix_len, ec.text_vocab, rng);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const std::size_t b = std::min(cfg.batch_size, n - start);
      std::vector<int> patches, labels;
      for (std::size_t i = start; i < start + b; ++i) {
        auto s = train.split.sample(order[i], pc);
        patches.insert(patches.end(), s.begin(), s.end());
        labels.push_back(train.split.labels[order[i]]);
      }
      std::vector<int> tokens;
      for (std::size_t cls = 0; cls < c; ++cls) {
        auto seq = templated_tokens(model, train.name(cls), pick_template(rng));
        tokens.insert(tokens.end(), seq.begin(), seq.end());
      }
      const Tensor img = model.encoder.encode_images(patches, b, nullptr);
      const Tensor txt = model.encoder.encode_texts(tokens, c, nullptr);
      const Tensor loss = ce_loss(clip_probs(img, txt, cfg.tau), labels);
      require(std::isfinite(loss.item()), ErrorKind::kTraining,
              "teacher loss diverged at step " + std::to_string(step));
      backward(loss);
      adam.step(params);
      zero_grads(params);
      loss_sum += loss.item();
      ++batches;
    }
    const double acc = val.split.size() ? teacher_top1(model, val) : 0.0;
    if (on_epoch) on_epoch({epoch, loss_sum / static_cast<double>(batches), acc});
    if (acc > best) {
      best = acc;
      since_best = 0;
      best_weights.clear();
      for (const Tensor& p : params) best_weights.emplace_back(p.data().begin(), p.data().end());
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(best_weights[i].begin(), best_weights[i].end(), params[i].mutable_data().begin());
    params[i].zero_grad();
  }
  model.encoder.backbone().set_trainable(false);
  return model;
}

ParamFile teacher_to_file(const TeacherModel& teacher) {
  ParamFile f;
  f.meta = encoder_to_kv(teacher.encoder.config(), "encoder.");
  f.meta["role"] = "teacher";
  std::ostringstream tau;
  tau.precision(17);
  tau << teacher.tau;
  f.meta["tau"] = tau.str();
  std::string tpl;
  for (std::size_t i = 0; i < teacher.templates.size(); ++i) tpl += (i ? "," : "") + std::to_string(teacher.templates[i]);
  f.meta["templates"] = tpl;
  f.params = teacher.encoder.backbone().named();
  return f;
}

TeacherModel teacher_from_file(const ParamFile& file) {
  require(file.get("role") == "teacher", ErrorKind::kIo, "checkpoint role is '" + file.get("role") + "', not teacher");
  const EncoderConfig ec = encoder_from_kv(file.meta, "encoder.");
  std::mt19937_64 rng(0);
  Backbone bb = Backbone::init(ec, rng);
  assign_params(file, bb.named());
  bb.set_trainable(false);
  std::vector<int> templates;
  std::stringstream ss(file.get("templates"));
  for (std::string tok; std::getline(ss, tok, ',');) templates.push_back(std::stoi(tok));
  return TeacherModel{DualEncoder(ec, std::move(bb)), std::move(templates), std::stod(file.get("tau"))};
}

}  // namespace rpp
