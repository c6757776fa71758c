#pragma once

// Deterministic synthetic corpus: classes are short token "names", and a
// class's prototype patch grid is rendered from its name through a shared
// codebook (name token j paints grid region j). Samples copy the
// prototype and resample each patch with probability `noise`.
//
// Rendering through a shared codebook is what makes zero-shot transfer to
// unseen name combinations learnable at all.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rpp/io.hpp"

namespace rpp {

struct SynthSpec {
  std::size_t classes = 64;
  std::size_t grid_h = 6;
  std::size_t grid_w = 6;
  std::size_t patch_vocab = 32;
  std::size_t name_len = 3;
  std::size_t text_vocab = 64;
  double noise = 0.3;
  std::size_t train_per_class = 32;
  std::size_t val_per_class = 8;
  std::size_t transfer_classes = 32;
  std::size_t transfer_per_class = 8;
  double shift_noise = 0.5;  // cross-domain copy of the val split
  std::uint64_t seed = 0;

  std::size_t patches() const { return grid_h * grid_w; }
  void validate() const;  // throws kConfig
};

struct Split {
  std::vector<int> patches;  // [size, H*W]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const int> sample(std::size_t i, std::size_t patch_count) const {
    return std::span<const int>(patches).subspan(i * patch_count, patch_count);
  }
};

// A labelled dataset: class names plus a split.
struct Dataset {
  std::size_t name_len = 0;
  std::size_t patch_count = 0;
  std::vector<int> names;  // [classes, name_len]
  Split split;

  std::size_t classes() const { return name_len ? names.size() / name_len : 0; }
  std::span<const int> name(std::size_t c) const {
    return std::span<const int>(names).subspan(c * name_len, name_len);
  }
};

struct Corpus {
  SynthSpec spec;
  std::vector<int> names;           // pretraining classes [C, n]
  std::vector<int> transfer_names;  // disjoint classes [C_t, n]
  Split train;
  Split val;
  Split transfer;  // over transfer classes
  Split shifted;   // pretraining classes at shift_noise

  Dataset train_set() const;
  Dataset val_set() const;
  Dataset transfer_set() const;
  Dataset shifted_set() const;
};

Corpus generate(const SynthSpec& spec);

struct ClassPartition {
  std::vector<int> base;
  std::vector<int> novel;
};

// Classes sorted by id; the first ceil(C * fraction) are base.
ClassPartition base_new_split(std::size_t classes, double fraction = 0.5);

// Keeps `classes` only and relabels them 0..k-1 in the given order.
Dataset restrict_classes(const Dataset& data, std::span<const int> classes);

// Uniform per-class subsample of `shots` samples, deterministic per seed.
Dataset few_shot_subset(const Dataset& data, std::size_t shots, std::uint64_t seed);

ArrayFile corpus_to_file(const Corpus& corpus);
Corpus corpus_from_file(const ArrayFile& file);
void save_corpus(const std::string& path, const Corpus& corpus);
Corpus load_corpus(const std::string& path);
std::string corpus_hash(const Corpus& corpus);

}  // namespace rpp
