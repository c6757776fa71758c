#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "rpp/error.hpp"
#include "rpp/synthdata.hpp"

using namespace rpp;

TEST_CASE("generation is deterministic per seed") {
  const SynthSpec s = fixtures::small_spec(3);
  CHECK(corpus_hash(generate(s)) == corpus_hash(generate(s)));
  CHECK(corpus_hash(generate(s)) != corpus_hash(generate(fixtures::small_spec(4))));
}

TEST_CASE("corpus shapes and label ranges") {
  const SynthSpec s = fixtures::small_spec();
  const Corpus c = generate(s);
  CHECK(c.names.size() == s.classes * s.name_len);
  CHECK(c.transfer_names.size() == s.transfer_classes * s.name_len);
  CHECK(c.train.size() == s.classes * s.train_per_class);
  CHECK(c.val.size() == s.classes * s.val_per_class);
  CHECK(c.transfer.size() == s.transfer_classes * s.transfer_per_class);
  CHECK(c.shifted.size() == c.val.size());
  CHECK(c.train.patches.size() == c.train.size() * s.patches());
  std::map<int, std::size_t> per_class;
  for (int y : c.train.labels) ++per_class[y];
  CHECK(per_class.size() == s.classes);
  for (const auto& [y, n] : per_class) CHECK(n == s.train_per_class);
  for (int p : c.train.patches) CHECK((p >= 0 && p < static_cast<int>(s.patch_vocab)));
}

TEST_CASE("class names are unique and transfer names are disjoint") {
  const Corpus c = generate(fixtures::small_spec());
  const Dataset train = c.train_set();
  const Dataset transfer = c.transfer_set();
  std::set<std::vector<int>> seen;
  for (std::size_t k = 0; k < train.classes(); ++k) {
    const auto n = train.name(k);
    CHECK(seen.insert({n.begin(), n.end()}).second);
  }
  for (std::size_t k = 0; k < transfer.classes(); ++k) {
    const auto n = transfer.name(k);
    CHECK(seen.insert({n.begin(), n.end()}).second);
  }
}

TEST_CASE("exhausted name space is a config error") {
  SynthSpec s = fixtures::small_spec();
  s.text_vocab = 2;
  s.name_len = 2;
  s.classes = 5;
  CHECK_THROWS_AS(generate(s), Error);
}

TEST_CASE("base/new split partitions classes") {
  const ClassPartition p = base_new_split(7, 0.5);
  CHECK(p.base == std::vector<int>{0, 1, 2, 3});
  CHECK(p.novel == std::vector<int>{4, 5, 6});
}

TEST_CASE("restrict_classes relabels in the given order") {
  const Corpus c = generate(fixtures::small_spec());
  const std::vector<int> keep{5, 2};
  const Dataset full = c.train_set();
  const Dataset d = restrict_classes(full, keep);
  CHECK(d.classes() == 2);
  CHECK(std::vector<int>(d.name(0).begin(), d.name(0).end()) ==
        std::vector<int>(full.name(5).begin(), full.name(5).end()));
  CHECK(d.split.size() == 2 * fixtures::small_spec().train_per_class);
  for (int y : d.split.labels) CHECK((y == 0 || y == 1));
}

TEST_CASE("few-shot subsets are per-class and deterministic") {
  const Corpus c = generate(fixtures::small_spec());
  const Dataset a = few_shot_subset(c.train_set(), 2, 9);
  const Dataset b = few_shot_subset(c.train_set(), 2, 9);
  CHECK(a.split.labels == b.split.labels);
  CHECK(a.split.patches == b.split.patches);
  std::map<int, int> per;
  for (int y : a.split.labels) ++per[y];
  for (const auto& [y, n] : per) CHECK(n == 2);
}

TEST_CASE("corpus files round-trip") {
  const Corpus c = generate(fixtures::small_spec());
  const auto path = std::filesystem::temp_directory_path() / "rpp_test_corpus.bin";
  save_corpus(path.string(), c);
  const Corpus back = load_corpus(path.string());
  CHECK(corpus_hash(back) == corpus_hash(c));
  CHECK(back.spec.seed == c.spec.seed);
  std::filesystem::remove(path);
}
