#include "rpp/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "rpp/error.hpp"

namespace rpp {

void SynthSpec::validate() const {
  require(classes >= 2, ErrorKind::kConfig, "synth: classes must be >= 2");
  require(noise >= 0.0 && noise < 1.0, ErrorKind::kConfig, "synth: noise must lie in [0, 1)");
  require(shift_noise >= 0.0 && shift_noise < 1.0, ErrorKind::kConfig, "synth: shift_noise must lie in [0, 1)");
  require(train_per_class >= 1, ErrorKind::kConfig, "synth: train_per_class must be >= 1");
  require(grid_h >= 1 && grid_w >= 1 && patch_vocab >= 2, ErrorKind::kConfig, "synth: bad grid or patch vocab");
  require(name_len >= 1 && name_len <= patches(), ErrorKind::kConfig,
          "synth: name_len must lie in [1, grid patches]");
  require(text_vocab >= 2, ErrorKind::kConfig, "synth: text_vocab must be >= 2");
}

namespace {

using Rng = std::mt19937_64;

int uniform_int(Rng& rng, std::size_t n) {
  return static_cast<int>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
}

// Region j of the grid is patches [j*P/n, (j+1)*P/n).
struct Codebook {
  std::size_t name_len, patch_count;
  std::vector<std::vector<int>> patterns;  // [slot * text_vocab + token] -> region patches

  std::size_t region_begin(std::size_t slot) const { return slot * patch_count / name_len; }
  std::size_t region_end(std::size_t slot) const { return (slot + 1) * patch_count / name_len; }

  std::vector<int> render(std::span<const int> name, std::size_t text_vocab) const {
    std::vector<int> grid(patch_count);
    for (std::size_t j = 0; j < name_len; ++j) {
      const auto& pat = patterns[j * text_vocab + static_cast<std::size_t>(name[j])];
      std::copy(pat.begin(), pat.end(), grid.begin() + static_cast<std::ptrdiff_t>(region_begin(j)));
    }
    return grid;
  }
};

Codebook make_codebook(const SynthSpec& s, Rng& rng) {
  Codebook cb{s.name_len, s.patches(), {}};
  for (std::size_t j = 0; j < s.name_len; ++j) {
    for (std::size_t t = 0; t < s.text_vocab; ++t) {
      std::vector<int> pat(cb.region_end(j) - cb.region_begin(j));
      for (int& p : pat) p = uniform_int(rng, s.patch_vocab);
      cb.patterns.push_back(std::move(pat));
    }
  }
  return cb;
}

double name_space(const SynthSpec& s) { return std::pow(static_cast<double>(s.text_vocab), double(s.name_len)); }

std::vector<int> draw_names(std::size_t count, const SynthSpec& s, const std::vector<std::vector<int>>& slot_tokens,
                            std::set<std::vector<int>>& taken, Rng& rng, const char* what) {
  double capacity = 1.0;
  for (const auto& st : slot_tokens) capacity *= static_cast<double>(st.size());
  require(static_cast<double>(taken.size() + count) <= capacity, ErrorKind::kConfig,
          std::string("synth: name space exhausted drawing ") + what + " names (" + std::to_string(count) +
              " requested, vocab too small)");
  std::vector<int> out;
  while (out.size() < count * s.name_len) {
    std::vector<int> name(s.name_len);
    for (std::size_t j = 0; j < s.name_len; ++j) name[j] = slot_tokens[j][static_cast<std::size_t>(uniform_int(rng, slot_tokens[j].size()))];
    if (taken.insert(name).second) out.insert(out.end(), name.begin(), name.end());
  }
  return out;
}

void add_samples(Split& split, const std::vector<int>& proto, int label, std::size_t count, double noise,
                 std::size_t vocab, Rng& rng) {
  std::bernoulli_distribution flip(noise);
  for (std::size_t i = 0; i < count; ++i) {
    for (int p : proto) split.patches.push_back(flip(rng) ? uniform_int(rng, vocab) : p);
    split.labels.push_back(label);
  }
}

Dataset make_dataset(const std::vector<int>& names, std::size_t name_len, std::size_t patch_count, const Split& s) {
  return Dataset{name_len, patch_count, names, s};
}

}  // namespace

Dataset Corpus::train_set() const { return make_dataset(names, spec.name_len, spec.patches(), train); }
Dataset Corpus::val_set() const { return make_dataset(names, spec.name_len, spec.patches(), val); }
Dataset Corpus::transfer_set() const {
  return make_dataset(transfer_names, spec.name_len, spec.patches(), transfer);
}
Dataset Corpus::shifted_set() const { return make_dataset(names, spec.name_len, spec.patches(), shifted); }

Corpus generate(const SynthSpec& spec) {
  spec.validate();
  require(static_cast<double>(spec.classes) <= name_space(spec), ErrorKind::kConfig,
          "synth: name space exhausted (text_vocab^name_len < classes)");
  Rng rng(spec.seed);
  const Codebook codebook = make_codebook(spec, rng);

  Corpus c;
  c.spec = spec;
  std::vector<int> all_tokens(spec.text_vocab);
  std::iota(all_tokens.begin(), all_tokens.end(), 0);
  std::set<std::vector<int>> taken;
  c.names = draw_names(spec.classes, spec, std::vector<std::vector<int>>(spec.name_len, all_tokens), taken, rng,
                       "pretraining");

  // Transfer names recombine tokens seen at the same slot during pretraining.
  std::vector<std::vector<int>> seen(spec.name_len);
  for (std::size_t j = 0; j < spec.name_len; ++j) {
    std::set<int> s;
    for (std::size_t cls = 0; cls < spec.classes; ++cls) s.insert(c.names[cls * spec.name_len + j]);
    seen[j].assign(s.begin(), s.end());
  }
  if (spec.transfer_classes > 0) {
    c.transfer_names = draw_names(spec.transfer_classes, spec, seen, taken, rng, "transfer");
  }

  const std::size_t n = spec.name_len;
  for (std::size_t cls = 0; cls < spec.classes; ++cls) {
    const auto proto = codebook.render(std::span<const int>(c.names).subspan(cls * n, n), spec.text_vocab);
    add_samples(c.train, proto, static_cast<int>(cls), spec.train_per_class, spec.noise, spec.patch_vocab, rng);
    add_samples(c.val, proto, static_cast<int>(cls), spec.val_per_class, spec.noise, spec.patch_vocab, rng);
    add_samples(c.shifted, proto, static_cast<int>(cls), spec.val_per_class, spec.shift_noise, spec.patch_vocab, rng);
  }
  for (std::size_t cls = 0; cls < spec.transfer_classes; ++cls) {
    const auto proto = codebook.render(std::span<const int>(c.transfer_names).subspan(cls * n, n), spec.text_vocab);
    add_samples(c.transfer, proto, static_cast<int>(cls), spec.transfer_per_class, spec.noise, spec.patch_vocab, rng);
  }
  return c;
}

ClassPartition base_new_split(std::size_t classes, double fraction) {
  require(fraction > 0.0 && fraction < 1.0, ErrorKind::kConfig, "base fraction must lie in (0, 1)");
  const auto base = static_cast<std::size_t>(std::ceil(static_cast<double>(classes) * fraction));
  require(base >= 1 && base < classes, ErrorKind::kConfig,
          "base/new split of " + std::to_string(classes) + " classes leaves an empty side");
  ClassPartition p;
  for (std::size_t c = 0; c < classes; ++c) (c < base ? p.base : p.novel).push_back(static_cast<int>(c));
  return p;
}

Dataset restrict_classes(const Dataset& data, std::span<const int> classes) {
  std::map<int, int> relabel;
  Dataset out{data.name_len, data.patch_count, {}, {}};
  for (int c : classes) {
    require(c >= 0 && static_cast<std::size_t>(c) < data.classes(), ErrorKind::kInput,
            "class " + std::to_string(c) + " not in dataset");
    require(relabel.emplace(c, static_cast<int>(relabel.size())).second, ErrorKind::kInput,
            "class " + std::to_string(c) + " listed twice");
    auto nm = data.name(static_cast<std::size_t>(c));
    out.names.insert(out.names.end(), nm.begin(), nm.end());
  }
  for (std::size_t i = 0; i < data.split.size(); ++i) {
    auto it = relabel.find(data.split.labels[i]);
    if (it == relabel.end()) continue;
    auto s = data.split.sample(i, data.patch_count);
    out.split.patches.insert(out.split.patches.end(), s.begin(), s.end());
    out.split.labels.push_back(it->second);
  }
  return out;
}

Dataset few_shot_subset(const Dataset& data, std::size_t shots, std::uint64_t seed) {
  require(shots >= 1, ErrorKind::kConfig, "shots must be >= 1");
  std::vector<std::vector<std::size_t>> by_class(data.classes());
  for (std::size_t i = 0; i < data.split.size(); ++i)
    by_class[static_cast<std::size_t>(data.split.labels[i])].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    require(idx.size() >= shots, ErrorKind::kConfig,
            "class " + std::to_string(c) + " has " + std::to_string(idx.size()) + " samples, " +
                std::to_string(shots) + " shots requested");
    std::shuffle(idx.begin(), idx.end(), rng);
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shots));
  }
  std::sort(keep.begin(), keep.end());
  Dataset out{data.name_len, data.patch_count, data.names, {}};
  for (std::size_t i : keep) {
    auto s = data.split.sample(i, data.patch_count);
    out.split.patches.insert(out.split.patches.end(), s.begin(), s.end());
    out.split.labels.push_back(data.split.labels[i]);
  }
  return out;
}

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

ArrayFile corpus_to_file(const Corpus& c) {
  const SynthSpec& s = c.spec;
  ArrayFile f;
  f.meta = {{"classes", std::to_string(s.classes)},
            {"grid_h", std::to_string(s.grid_h)},
            {"grid_w", std::to_string(s.grid_w)},
            {"patch_vocab", std::to_string(s.patch_vocab)},
            {"name_len", std::to_string(s.name_len)},
            {"text_vocab", std::to_string(s.text_vocab)},
            {"noise", fmt_double(s.noise)},
            {"train_per_class", std::to_string(s.train_per_class)},
            {"val_per_class", std::to_string(s.val_per_class)},
            {"transfer_classes", std::to_string(s.transfer_classes)},
            {"transfer_per_class", std::to_string(s.transfer_per_class)},
            {"shift_noise", fmt_double(s.shift_noise)},
            {"seed", std::to_string(s.seed)}};
  f.arrays = {{"names", c.names},
              {"transfer_names", c.transfer_names},
              {"train.patches", c.train.patches},
              {"train.labels", c.train.labels},
              {"val.patches", c.val.patches},
              {"val.labels", c.val.labels},
              {"transfer.patches", c.transfer.patches},
              {"transfer.labels", c.transfer.labels},
              {"shifted.patches", c.shifted.patches},
              {"shifted.labels", c.shifted.labels}};
  return f;
}

Corpus corpus_from_file(const ArrayFile& f) {
  Corpus c;
  SynthSpec& s = c.spec;
  auto u = [&](const char* k) { return static_cast<std::size_t>(std::stoull(f.get(k))); };
  s.classes = u("classes");
  s.grid_h = u("grid_h");
  s.grid_w = u("grid_w");
  s.patch_vocab = u("patch_vocab");
  s.name_len = u("name_len");
  s.text_vocab = u("text_vocab");
  s.noise = std::stod(f.get("noise"));
  s.train_per_class = u("train_per_class");
  s.val_per_class = u("val_per_class");
  s.transfer_classes = u("transfer_classes");
  s.transfer_per_class = u("transfer_per_class");
  s.shift_noise = std::stod(f.get("shift_noise"));
  s.seed = std::stoull(f.get("seed"));
  c.names = f.array("names");
  c.transfer_names = f.array("transfer_names");
  c.train = {f.array("train.patches"), f.array("train.labels")};
  c.val = {f.array("val.patches"), f.array("val.labels")};
  c.transfer = {f.array("transfer.patches"), f.array("transfer.labels")};
  c.shifted = {f.array("shifted.patches"), f.array("shifted.labels")};
  return c;
}

void save_corpus(const std::string& path, const Corpus& corpus) { save_arrays(path, corpus_to_file(corpus)); }
Corpus load_corpus(const std::string& path) { return corpus_from_file(load_arrays(path)); }
std::string corpus_hash(const Corpus& corpus) { return content_hash(serialize(corpus_to_file(corpus))); }

}  // namespace rpp
