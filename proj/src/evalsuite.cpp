#include "rpp/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "json.hpp"

#include "rpp/error.hpp"

namespace rpp {

namespace {

constexpr std::size_t kEvalChunk = 256;

FinetuneConfig checked(const FinetuneConfig& cfg) {
  require(cfg.epochs >= 1, ErrorKind::kConfig, "fine-tuning needs epochs >= 1");
  require(cfg.shots >= 1, ErrorKind::kConfig, "fine-tuning needs shots >= 1");
  return cfg;
}

PromptBank finetune(const DualEncoder& model, const PromptBank& pretrained, const Dataset& data,
                    const FinetuneConfig& cfg, std::uint64_t seed) {
  TrainConfig tc = cfg.train;
  tc.lambda = 0.0;
  tc.k = data.classes();
  tc.epochs = cfg.epochs;
  tc.seed = seed;
  return train(model, pretrained, nullptr, data, tc).prompts;
}

}  // namespace

std::size_t argmax(std::span<const double> row) {
  require(!row.empty(), ErrorKind::kUsage, "argmax of an empty row");
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

Tensor encode_class_names(const DualEncoder& model, const PromptBank* prompts, const Dataset& data) {
  NoGradGuard no_grad;
  require(data.name_len == model.config().name_len, ErrorKind::kInput, "class names do not match the text encoder");
  const std::size_t prefix = model.config().text_prefix_len;
  if (prefix == 0) return model.encode_texts(data.names, data.classes(), prompts);
  std::vector<int> tokens;
  for (std::size_t c = 0; c < data.classes(); ++c) {
    tokens.insert(tokens.end(), prefix, 0);
    auto nm = data.name(c);
    tokens.insert(tokens.end(), nm.begin(), nm.end());
  }
  return model.encode_texts(tokens, data.classes(), prompts);
}

Tensor encode_split_images(const DualEncoder& model, const PromptBank* prompts, const Split& split,
                           std::size_t patch_count) {
  NoGradGuard no_grad;
  std::vector<Tensor> parts;
  for (std::size_t start = 0; start < split.size(); start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, split.size() - start);
    parts.push_back(model.encode_images(
        std::span<const int>(split.patches).subspan(start * patch_count, n * patch_count), n, prompts));
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

double top1_from_embeddings(const Tensor& image_embeds, const Tensor& class_embeds, std::span<const int> labels) {
  require(!labels.empty(), ErrorKind::kUsage, "top-1 on an empty split");
  require(image_embeds.dim(0) == labels.size(), ErrorKind::kDimension, "labels do not match image embeddings");
  NoGradGuard no_grad;
  const Tensor sims = matmul(image_embeds, transpose(class_embeds));
  const std::size_t c = class_embeds.dim(0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    hits += argmax(sims.data().subspan(i * c, c)) == static_cast<std::size_t>(labels[i]);
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double top1(const DualEncoder& model, const PromptBank* prompts, const Dataset& data) {
  require(data.split.size() > 0, ErrorKind::kUsage, "top-1 on an empty split");
  return top1_from_embeddings(encode_split_images(model, prompts, data.split, data.patch_count),
                              encode_class_names(model, prompts, data), data.split.labels);
}

double harmonic_mean(double base, double novel) {
  require(base >= 0.0 && base <= 1.0 && novel >= 0.0 && novel <= 1.0, ErrorKind::kDomain,
          "accuracies must lie in [0, 1]");
  if (base + novel == 0.0) return 0.0;
  return 2.0 * base * novel / (base + novel);
}

DualEncoder prompt_free(const DualEncoder& model) {
  EncoderConfig cfg = model.config();
  cfg.prompt_len = 0;
  cfg.replace_layers.clear();
  cfg.shared_qkv = false;
  return DualEncoder(cfg, model.backbone());
}

double EvalReport::mean(std::size_t metric) const {
  require(!values.empty(), ErrorKind::kUsage, "report has no rows");
  double s = 0.0;
  for (const auto& row : values) s += row.at(metric);
  return s / static_cast<double>(values.size());
}

double EvalReport::spread(std::size_t metric) const {
  const double m = mean(metric);
  double s = 0.0;
  for (const auto& row : values) s += (row.at(metric) - m) * (row.at(metric) - m);
  return std::sqrt(s / static_cast<double>(values.size()));
}

std::size_t EvalReport::index(const std::string& metric) const {
  const auto it = std::find(metrics.begin(), metrics.end(), metric);
  require(it != metrics.end(), ErrorKind::kUsage, "report has no metric '" + metric + "'");
  return static_cast<std::size_t>(it - metrics.begin());
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["protocol"] = protocol;
  j["seeds"] = seeds;
  j["metrics"] = metrics;
  j["values"] = values;
  nlohmann::ordered_json mean_j, spread_j;
  for (std::size_t m = 0; m < metrics.size(); ++m) {
    mean_j[metrics[m]] = mean(m);
    spread_j[metrics[m]] = spread(m);
  }
  j["mean"] = mean_j;
  j["spread"] = spread_j;
  if (protocol == "base-to-new") j["hm_of_means"] = hm_of_means(*this);
  return j.dump(2);
}

std::string EvalReport::render_table() const {
  std::ostringstream out;
  char buf[64];
  out << protocol << "\n" << "seed    ";
  for (const auto& m : metrics) {
    std::snprintf(buf, sizeof buf, " %12s", m.c_str());
    out << buf;
  }
  out << "\n";
  auto row = [&](const std::string& label, auto value) {
    std::snprintf(buf, sizeof buf, "%-8s", label.c_str());
    out << buf;
    for (std::size_t m = 0; m < metrics.size(); ++m) {
      std::snprintf(buf, sizeof buf, " %12.2f", 100.0 * value(m));
      out << buf;
    }
    out << "\n";
  };
  for (std::size_t s = 0; s < values.size(); ++s)
    row(std::to_string(seeds.at(s)), [&](std::size_t m) { return values[s][m]; });
  row("mean", [&](std::size_t m) { return mean(m); });
  row("spread", [&](std::size_t m) { return spread(m); });
  return out.str();
}

EvalReport base_to_new_eval(const DualEncoder& model, const PromptBank& pretrained, const Dataset& train,
                            const Dataset& val, const FinetuneConfig& cfg, double base_fraction,
                            std::span<const std::uint64_t> seeds) {
  checked(cfg);
  require(!seeds.empty(), ErrorKind::kUsage, "base-to-new needs at least one seed");
  const ClassPartition part = base_new_split(train.classes(), base_fraction);
  std::set<int> base_set(part.base.begin(), part.base.end());
  for (int c : part.novel)
    require(!base_set.count(c), ErrorKind::kAssertion, "class " + std::to_string(c) + " is both base and novel");

  const Dataset base_train = restrict_classes(train, part.base);
  const Dataset base_val = restrict_classes(val, part.base);
  const Dataset novel_val = restrict_classes(val, part.novel);
  EvalReport report{"base-to-new", {"base", "novel", "hm"}, {seeds.begin(), seeds.end()}, {}};
  for (std::uint64_t seed : seeds) {
    const Dataset shots = few_shot_subset(base_train, cfg.shots, seed);
    const PromptBank tuned = finetune(model, pretrained, shots, cfg, seed);
    const double b = top1(model, &tuned, base_val);
    const double n = top1(model, &tuned, novel_val);
    report.values.push_back({b, n, harmonic_mean(b, n)});
  }
  return report;
}

double hm_of_means(const EvalReport& report) {
  return harmonic_mean(report.mean("base"), report.mean("novel"));
}

EvalReport zero_shot_transfer(const DualEncoder& model, const PromptBank& prompts, const Dataset& transfer,
                              const Dataset& shifted) {
  const DualEncoder bare = prompt_free(model);
  EvalReport report{"zero-shot", {"transfer", "shifted", "transfer_prompt_free", "shifted_prompt_free"}, {0}, {}};
  report.values.push_back({top1(model, &prompts, transfer), top1(model, &prompts, shifted),
                           top1(bare, nullptr, transfer), top1(bare, nullptr, shifted)});
  return report;
}

EvalReport few_shot_grid(const DualEncoder& model, const PromptBank& pretrained, const Dataset& train,
                         const Dataset& val, const FinetuneConfig& cfg, std::span<const std::size_t> shots,
                         std::span<const std::uint64_t> seeds) {
  checked(cfg);
  require(!shots.empty() && !seeds.empty(), ErrorKind::kUsage, "few-shot grid needs shots and seeds");
  EvalReport report{"few-shot", {}, {seeds.begin(), seeds.end()}, {}};
  for (std::size_t s : shots) report.metrics.push_back("shots_" + std::to_string(s));
  for (std::uint64_t seed : seeds) {
    std::vector<double> row;
    for (std::size_t s : shots) {
      const Dataset subset = few_shot_subset(train, s, seed);
      const PromptBank tuned = finetune(model, pretrained, subset, cfg, seed);
      row.push_back(top1(model, &tuned, val));
    }
    report.values.push_back(std::move(row));
  }
  return report;
}

std::string plot_data(const EvalReport& grid, std::span<const std::size_t> shots) {
  require(grid.metrics.size() == shots.size(), ErrorKind::kUsage, "plot data needs one metric per shot count");
  std::ostringstream out;
  out.precision(17);
  out << "# shots mean spread\n";
  for (std::size_t i = 0; i < shots.size(); ++i) out << shots[i] << " " << grid.mean(i) << " " << grid.spread(i) << "\n";
  return out.str();
}

}  // namespace rpp
