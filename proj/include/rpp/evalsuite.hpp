#pragma once

// Evaluation protocols: full-class-set top-1, zero-shot transfer with a
// prompt-free baseline, few-shot fine-tuning grids and base-to-new with the
// harmonic mean. Evaluation never samples classes and never adds a margin.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rpp/encoder.hpp"
#include "rpp/synthdata.hpp"
#include "rpp/trainer.hpp"

namespace rpp {

// First maximal index.
std::size_t argmax(std::span<const double> row);

Tensor encode_class_names(const DualEncoder& model, const PromptBank* prompts, const Dataset& data);
Tensor encode_split_images(const DualEncoder& model, const PromptBank* prompts, const Split& split,
                           std::size_t patch_count);

// Fraction of rows whose argmax over class similarities equals the label.
double top1_from_embeddings(const Tensor& image_embeds, const Tensor& class_embeds, std::span<const int> labels);
// Usage error on an empty split.
double top1(const DualEncoder& model, const PromptBank* prompts, const Dataset& data);

// 2bn/(b+n); 0 when b + n == 0. Domain error outside [0, 1].
double harmonic_mean(double base, double novel);

// Same backbone with the prompt slots removed.
DualEncoder prompt_free(const DualEncoder& model);

struct EvalReport {
  std::string protocol;
  std::vector<std::string> metrics;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> values;  // [seed][metric]

  double mean(std::size_t metric) const;
  double spread(std::size_t metric) const;  // population std-dev over seeds
  std::size_t index(const std::string& metric) const;
  double mean(const std::string& metric) const { return mean(index(metric)); }

  std::string to_json() const;
  // Seeds as rows, metrics as columns, then mean and spread rows.
  std::string render_table() const;
};

struct FinetuneConfig {
  TrainConfig train;  // lambda forced to 0, K forced to the class count
  std::size_t epochs = 20;
  std::size_t shots = 16;
};

// Fine-tunes on a few-shot base subset per seed; base accuracy within the
// base classes, novel accuracy zero-shot within the novel classes.
// Metrics: base, novel, hm. The summary HM of the means is hm_of_means().
EvalReport base_to_new_eval(const DualEncoder& model, const PromptBank& pretrained, const Dataset& train,
                            const Dataset& val, const FinetuneConfig& cfg, double base_fraction,
                            std::span<const std::uint64_t> seeds);
double hm_of_means(const EvalReport& report);

// Metrics: transfer, shifted, transfer_prompt_free, shifted_prompt_free.
EvalReport zero_shot_transfer(const DualEncoder& model, const PromptBank& prompts, const Dataset& transfer,
                              const Dataset& shifted);

// Metrics: one "shots_<n>" column per entry of `shots`.
EvalReport few_shot_grid(const DualEncoder& model, const PromptBank& pretrained, const Dataset& train,
                         const Dataset& val, const FinetuneConfig& cfg, std::span<const std::size_t> shots,
                         std::span<const std::uint64_t> seeds);
// "shots mean spread" lines for external plotting.
std::string plot_data(const EvalReport& grid, std::span<const std::size_t> shots);

}  // namespace rpp
