#include "rpp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "rpp/config.hpp"
#include "rpp/error.hpp"

namespace rpp {

void TrainConfig::validate() const {
  require(lr0 > 0.0, ErrorKind::kConfig, "train.lr0 must be > 0");
  require(epochs >= 1, ErrorKind::kConfig, "train.epochs must be >= 1");
  require(batch_size >= 1, ErrorKind::kConfig, "train.batch_size must be >= 1");
  require(k >= 2, ErrorKind::kConfig, "train.k must be >= 2");
  require(lambda >= 0.0, ErrorKind::kConfig, "train.lambda must be >= 0");
  require(distill_temp > 0.0, ErrorKind::kConfig, "train.distill_temp must be > 0");
  require(tau > 0.0, ErrorKind::kConfig, "train.tau must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, ErrorKind::kConfig, "train.momentum must lie in [0, 1)");
  require(weight_decay >= 0.0 && max_grad_norm >= 0.0, ErrorKind::kConfig,
          "train.weight_decay and train.max_grad_norm must be >= 0");
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  require(total_steps > 0, ErrorKind::kConfig, "cosine schedule needs total_steps > 0");
  require(step <= total_steps, ErrorKind::kUsage, "cosine schedule step past the end");
  return lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps))) / 2.0;
}

SgdMomentum::SgdMomentum(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

void SgdMomentum::step(std::span<Tensor> params, double lr) {
  if (velocity_.empty())
    for (const Tensor& p : params) velocity_.emplace_back(p.numel(), 0.0);
  require(velocity_.size() == params.size(), ErrorKind::kInternal, "optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    auto w = params[i].mutable_data();
    auto g = params[i].grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j] + weight_decay_ * w[j];
      w[j] -= lr * v[j];
    }
  }
}

std::string to_json_line(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["schema"] = kMetricsSchemaVersion;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["ce"] = r.loss.ce;
  j["kd"] = r.loss.kd;
  j["lambda"] = r.loss.lambda;
  j["total"] = r.loss.total;
  j["distill_temp"] = r.loss.distill_temp;
  j["top1"] = r.batch_top1;
  return j.dump();
}

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  return (samples + batch_size - 1) / batch_size;
}

Backbone pretrain_student_backbone(const Dataset& train, const Dataset& val, const EncoderConfig& student,
                                   const BackboneConfig& cfg, std::uint64_t seed) {
  if (cfg.epochs == 0) {
    std::mt19937_64 rng(seed);
    Backbone bb = Backbone::init(student, rng);
    bb.set_trainable(false);
    return bb;
  }
  TeacherConfig tc;
  tc.encoder = student;
  tc.encoder.prompt_len = 0;
  tc.encoder.replace_layers.clear();
  tc.encoder.shared_qkv = false;
  tc.templates = 1;
  tc.tau = cfg.tau;
  tc.lr = cfg.lr;
  tc.batch_size = cfg.batch_size;
  tc.max_epochs = cfg.epochs;
  tc.patience = cfg.epochs;
  tc.seed = seed;
  return pretrain_teacher(train, val, tc).encoder.backbone();
}

PromptBank initial_prompts(const EncoderConfig& student, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return PromptBank::init(student, rng);
}

StepLoss step_loss(const DualEncoder& student, const PromptBank& prompts, std::span<const int> patches,
                   const SampledClassSet& set, const Dataset& classes, const TeacherTargets* teacher,
                   std::span<const int> teacher_rows, const TrainConfig& cfg) {
  const std::size_t n = set.batch(), k = set.k;
  const ClassIndex idx = index_classes(set);
  std::vector<int> tokens;
  for (int cls : idx.needed) {
    auto name = classes.name(static_cast<std::size_t>(cls));
    tokens.insert(tokens.end(), name.begin(), name.end());
  }
  const Tensor img = student.encode_images(patches, n, &prompts);
  const Tensor txt = student.encode_texts(tokens, idx.needed.size(), &prompts);
  StepLoss out;
  out.probs = local_contrast_probs(img, txt, idx.columns, k, set.margin, cfg.tau);
  const std::vector<int> gt_column(n, 0);
  out.ce = ce_loss(out.probs, gt_column);
  out.kd = Tensor::scalar(0.0);
  if (teacher) {
    const Tensor s_t = cfg.distill_temp == 1.0
                           ? out.probs
                           : local_contrast_probs(img, txt, idx.columns, k, set.margin, cfg.tau * cfg.distill_temp);
    Tensor t_img;
    {
      NoGradGuard no_grad;
      t_img = embedding(teacher->image_embeds, teacher_rows);
    }
    out.kd = kd_loss(s_t, teacher_probs(t_img, set, teacher->cache, teacher->tau, cfg.distill_temp), cfg.kd_norm);
  }
  out.total = cfg.lambda == 0.0 ? out.ce : combine_loss(out.ce, out.kd, cfg.lambda);
  return out;
}

namespace {

constexpr const char* kCheckpointRole = "checkpoint";
constexpr const char* kVelocityPrefix = "velocity.";

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x0badu};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::mt19937_64 sampler_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5a3du};
  return std::mt19937_64(seq);
}

ParamFile make_checkpoint(const PromptBank& prompts, const SgdMomentum& opt, const std::mt19937_64& sampler,
                          std::size_t step, const TrainConfig& cfg, const EncoderConfig& ecfg) {
  ParamFile f;
  f.meta = train_to_kv(cfg, "train.");
  for (auto& [k, v] : encoder_to_kv(ecfg, "encoder.")) f.meta[k] = v;
  f.meta["role"] = kCheckpointRole;
  f.meta["step"] = std::to_string(step);
  std::ostringstream rng;
  rng << sampler;
  f.meta["rng"] = rng.str();
  f.params = prompts.named();
  const auto& vel = opt.velocity();
  for (std::size_t i = 0; i < f.params.size() && i < vel.size(); ++i)
    f.params.emplace_back(kVelocityPrefix + f.params[i].first, Tensor::from(f.params[i].second.shape(), vel[i]));
  return f;
}

void check_frozen(const Backbone& backbone) {
  for (const auto& [name, t] : backbone.named()) {
    if (!t.has_grad()) continue;
    for (double g : t.grad())
      require(g == 0.0, ErrorKind::kInternal, "gradient reached frozen backbone parameter '" + name + "'");
  }
}

void clip_grads(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& p : params)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double s = max_norm / norm;
  for (Tensor& p : params)
    if (p.has_grad())
      for (double& g : p.mutable_grad()) g *= s;
}

}  // namespace

TrainResult train(const DualEncoder& student, const PromptBank& init, const TeacherTargets* teacher,
                  const Dataset& data, const TrainConfig& cfg, const TrainOptions& opts) {
  TrainResult result{init.clone(), {}, 0, 0};
  if (cfg.epochs == 0) return result;
  cfg.validate();
  const std::size_t n = data.split.size(), c = data.classes(), pc = data.patch_count;
  require(n > 0, ErrorKind::kUsage, "training split is empty");
  require(cfg.lambda == 0.0 || teacher != nullptr, ErrorKind::kUsage, "lambda > 0 requires a teacher");
  if (teacher) {
    require(teacher->image_embeds.dim(0) == n, ErrorKind::kDimension, "teacher embeddings do not match the split");
    require(teacher->cache.classes() == c, ErrorKind::kDimension, "teacher prototypes do not match the class set");
  }
  const std::size_t k = std::min(cfg.k, c);
  const EncoderConfig& ecfg = student.config();
  require(pc == ecfg.patches() && data.name_len == ecfg.name_len, ErrorKind::kDimension,
          "dataset geometry does not match the student encoder");

  PromptBank& prompts = result.prompts;
  std::vector<Tensor> params = prompts.tensors();
  SgdMomentum opt(cfg.momentum, cfg.weight_decay);
  std::mt19937_64 sampler = sampler_rng(cfg.seed);
  const std::size_t spe = steps_per_epoch(n, cfg.batch_size);
  const std::size_t total = cfg.epochs * spe;
  result.total_steps = total;

  std::size_t done = 0;
  if (opts.resume) {
    const ParamFile& f = *opts.resume;
    require(f.get("role") == kCheckpointRole, ErrorKind::kIo, "not a training checkpoint");
    const KeyValues echo = train_to_kv(cfg, "train.");
    for (const auto& [key, value] : echo)
      require(f.get(key) == value, ErrorKind::kConfig, "checkpoint was written with " + key + "=" + f.get(key));
    done = std::stoull(f.get("step"));
    require(done <= total, ErrorKind::kConfig, "checkpoint step beyond this schedule");
    assign_params(f, prompts.named());
    auto& vel = opt.velocity();
    for (const auto& [name, t] : prompts.named()) {
      const Tensor& v = f.param(kVelocityPrefix + name);
      vel.emplace_back(v.data().begin(), v.data().end());
    }
    std::istringstream rng(f.get("rng"));
    rng >> sampler;
    require(!rng.fail(), ErrorKind::kIo, "corrupt sampler state in checkpoint");
  }

  MetricRecord last{};
  for (std::size_t epoch = done / spe; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(n, cfg.seed, epoch);
    for (std::size_t b = (epoch == done / spe ? done % spe : 0); b < spe; ++b) {
      const std::size_t step = epoch * spe + b;
      const double lr = cosine_lr(step, total, cfg.lr0);
      const std::size_t start = b * cfg.batch_size, bs = std::min(cfg.batch_size, n - start);
      std::vector<int> patches, gt, rows;
      for (std::size_t i = start; i < start + bs; ++i) {
        auto s = data.split.sample(order[i], pc);
        patches.insert(patches.end(), s.begin(), s.end());
        gt.push_back(data.split.labels[order[i]]);
        rows.push_back(static_cast<int>(order[i]));
      }
      const SampledClassSet set = sample_classes(gt, c, k, sampler);
      const StepLoss sl = step_loss(student, prompts, patches, set, data, teacher, rows, cfg);
      const LossBreakdown parts = total_loss(sl.ce.item(), sl.kd.item(), cfg.lambda, cfg.distill_temp);
      if (!std::isfinite(parts.total))
        fail(ErrorKind::kTraining, "non-finite loss at step " + std::to_string(step + 1) + "; last finite record: " +
                                       (last.step ? to_json_line(last) : std::string("none")));
      backward(sl.total);
      check_frozen(student.backbone());
      if (cfg.max_grad_norm > 0.0) clip_grads(params, cfg.max_grad_norm);
      opt.step(params, lr);
      zero_grads(params);

      std::size_t hits = 0;
      for (std::size_t i = 0; i < bs; ++i) {
        auto row = sl.probs.data().subspan(i * k, k);
        hits += std::max_element(row.begin(), row.end()) == row.begin();
      }
      last = MetricRecord{step + 1, epoch + 1, lr, parts, static_cast<double>(hits) / static_cast<double>(bs)};
      result.records.push_back(last);
      if (opts.on_record) opts.on_record(last);
      result.steps_done = step + 1;

      if (opts.stop_after_step && step + 1 == *opts.stop_after_step) {
        if (!opts.stop_checkpoint.empty())
          save_params(opts.stop_checkpoint, make_checkpoint(prompts, opt, sampler, step + 1, cfg, ecfg));
        return result;
      }
    }
    if (!opts.checkpoint_dir.empty()) {
      std::filesystem::create_directories(opts.checkpoint_dir);
      const auto path = std::filesystem::path(opts.checkpoint_dir) / ("epoch_" + std::to_string(epoch + 1) + ".ckpt");
      save_params(path.string(), make_checkpoint(prompts, opt, sampler, (epoch + 1) * spe, cfg, ecfg));
    }
  }
  return result;
}

}  // namespace rpp
