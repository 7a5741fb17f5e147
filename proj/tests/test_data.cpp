#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "headmask/data.hpp"
#include "headmask/errors.hpp"

using namespace headmask;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("headmask_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

}  // namespace

TEST_CASE("vocab basics") {
  Vocab v;
  CHECK(v.size() == kNumReserved);
  const int a = v.add("a");
  CHECK(a == kNumReserved);
  CHECK(v.add("a") == a);
  CHECK(v.id("zzz") == kUnkId);
  CHECK(v.token(a) == "a");
  CHECK(v.decode(std::vector<int>{kBosId, a, kEosId, kPadId}) == std::vector<std::string>{"a"});
}

TEST_CASE("reversal task maps the reversed source through a bijection") {
  const ParallelCorpus c = gen_reversal_task(16, 3, 6, 200, 7);
  CHECK(c.train.size() + c.dev.size() + c.test.size() == 200);
  CHECK(c.train.size() == 180);
  CHECK(c.dev.size() == 10);
  // Recover the mapping from the data and check it is a consistent bijection.
  std::map<int, int> m;
  for (const auto& p : c.train) {
    REQUIRE(p.src.size() == p.tgt.size());
    CHECK(p.src.size() >= 3);
    CHECK(p.src.size() <= 6);
    for (std::size_t i = 0; i < p.src.size(); ++i) {
      const int s = p.src[i], t = p.tgt[p.src.size() - 1 - i];
      CHECK(s >= kNumReserved);
      CHECK(t >= kNumReserved);
      auto [it, fresh] = m.emplace(s, t);
      CHECK(it->second == t);
    }
  }
  std::set<int> images;
  for (auto [s, t] : m) images.insert(t);
  CHECK(images.size() == m.size());
}

TEST_CASE("copy task keeps order") {
  const ParallelCorpus c = gen_copy_task(16, 3, 6, 100, 7);
  std::map<int, int> m;
  for (const auto& p : c.train) {
    for (std::size_t i = 0; i < p.src.size(); ++i) {
      auto [it, fresh] = m.emplace(p.src[i], p.tgt[i]);
      CHECK(it->second == p.tgt[i]);
    }
  }
}

TEST_CASE("generation is deterministic and splits are disjoint") {
  const ParallelCorpus a = gen_reversal_task(64, 5, 12, 2000, 3);
  const ParallelCorpus b = gen_reversal_task(64, 5, 12, 2000, 3);
  const ParallelCorpus c = gen_reversal_task(64, 5, 12, 2000, 4);
  CHECK(a.train == b.train);
  CHECK(a.dev == b.dev);
  CHECK(a.test == b.test);
  CHECK(a.src_vocab == b.src_vocab);
  CHECK_FALSE(a.train == c.train);

  auto hash = [](const std::vector<int>& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (int t : s) h = (h ^ static_cast<std::uint64_t>(t)) * 1099511628211ULL;
    return h;
  };
  std::set<std::uint64_t> train;
  for (const auto& p : a.train) train.insert(hash(p.src));
  for (const auto& p : a.dev) CHECK(train.count(hash(p.src)) == 0);
  for (const auto& p : a.test) CHECK(train.count(hash(p.src)) == 0);
}

TEST_CASE("generator argument errors") {
  CHECK_THROWS_AS(gen_reversal_task(64, 5, 12, 10, 1), UsageError);
  CHECK_THROWS_AS(gen_reversal_task(7, 5, 12, 100, 1), UsageError);
  CHECK_THROWS_AS(gen_reversal_task(64, 6, 5, 100, 1), UsageError);
  // Not enough distinct sequences of length 1 over 4 content tokens.
  CHECK_THROWS_AS(gen_reversal_task(8, 1, 1, 100, 1), UsageError);
}

TEST_CASE("tsv loading") {
  const fs::path dir = scratch("tsv");
  write_file(dir / "one.tsv", "a b\tc d\n");
  const ParallelCorpus c = load_tsv_corpus(dir / "one.tsv");
  REQUIRE(c.train.size() == 1);
  CHECK(c.src_vocab.decode(c.train[0].src) == std::vector<std::string>{"a", "b"});
  CHECK(c.tgt_vocab.decode(c.train[0].tgt) == std::vector<std::string>{"c", "d"});
  CHECK(c.dev.empty());

  write_file(dir / "empty.tsv", "");
  CHECK_THROWS_AS(load_tsv_corpus(dir / "empty.tsv"), UsageError);

  write_file(dir / "bad.tsv", "a b\tc\nno tab here\n");
  try {
    load_tsv_corpus(dir / "bad.tsv");
    FAIL("expected a parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  CHECK_THROWS_AS(load_tsv_corpus(dir / "missing.tsv"), DataError);

  // Unknown dev tokens map to <unk>.
  fs::create_directories(dir / "corpus");
  write_file(dir / "corpus" / "train.tsv", "a b\tc d\n");
  write_file(dir / "corpus" / "dev.tsv", "a q\tc\n");
  const ParallelCorpus d = load_tsv_corpus(dir / "corpus");
  REQUIRE(d.dev.size() == 1);
  CHECK(d.dev[0].src[1] == kUnkId);
  fs::remove_all(dir);
}

TEST_CASE("tsv round trip preserves id sequences") {
  const fs::path dir = scratch("roundtrip");
  const ParallelCorpus c = gen_reversal_task(32, 2, 8, 400, 5);
  write_tsv_corpus(c, dir);
  const ParallelCorpus back = load_tsv_corpus(dir);
  CHECK(back.train == c.train);
  CHECK(back.dev == c.dev);
  CHECK(back.test == c.test);
  fs::remove_all(dir);
}

TEST_CASE("vocab files round trip") {
  const fs::path dir = scratch("vocab");
  const ParallelCorpus c = gen_reversal_task(32, 2, 8, 100, 5);
  write_vocab(c.tgt_vocab, dir / "v.txt");
  CHECK(read_vocab(dir / "v.txt") == c.tgt_vocab);
  fs::remove_all(dir);
}

TEST_CASE("batch layout") {
  std::vector<SentencePair> pairs{{{4, 5, 6}, {7, 8}}, {{4}, {9, 10, 11}}};
  const Batch b = make_batch(std::span<const SentencePair>(pairs));
  CHECK(b.size == 2);
  CHECK(b.src_len == 4);
  CHECK(b.tgt_len == 4);
  CHECK(b.src == std::vector<int>{4, 5, 6, kEosId, 4, kEosId, kPadId, kPadId});
  CHECK(b.tgt_in == std::vector<int>{kBosId, 7, 8, kPadId, kBosId, 9, 10, 11});
  CHECK(b.tgt_out == std::vector<int>{7, 8, kEosId, kPadId, 9, 10, 11, kEosId});
  CHECK(b.src_mask == std::vector<unsigned char>{1, 1, 1, 1, 1, 1, 0, 0});
  CHECK(b.tgt_mask == std::vector<unsigned char>{1, 1, 1, 0, 1, 1, 1, 1});
  CHECK(b.target_tokens() == 7);
  CHECK(b.target_tokens(0) == 3);
  // Shift relation on real positions.
  for (int r = 0; r < b.size; ++r) {
    for (int t = 0; t + 1 < b.tgt_len; ++t) {
      const int i = r * b.tgt_len + t;
      if (b.tgt_mask[i + 1]) CHECK(b.tgt_out[i] == b.tgt_in[i + 1]);
    }
  }
}

TEST_CASE("batch size one adds no padding") {
  const ParallelCorpus c = gen_reversal_task(16, 2, 6, 100, 1);
  BatchIterator it = make_batches(c.train, 1, 1, true);
  for (int i = 0; i < 20; ++i) {
    const Batch b = it.next();
    for (unsigned char m : b.src_mask) CHECK(m == 1);
    for (unsigned char m : b.tgt_mask) CHECK(m == 1);
  }
}

TEST_CASE("unshuffled batches keep corpus order") {
  const ParallelCorpus c = gen_reversal_task(16, 2, 6, 100, 1);
  BatchIterator it = make_batches(c.train, 7, 1, false);
  std::size_t k = 0;
  for (std::size_t n = 0; n < it.batches_per_epoch(); ++n) {
    const Batch b = it.next();
    for (int r = 0; r < b.size; ++r, ++k) CHECK(b.src[r * b.src_len] == c.train[k].src[0]);
  }
  CHECK(k == c.train.size());
}

TEST_CASE("every token appears once per epoch and epochs reshuffle") {
  const ParallelCorpus c = gen_reversal_task(32, 2, 8, 500, 2);
  std::multiset<int> expect;
  for (const auto& p : c.train) expect.insert(p.src.begin(), p.src.end());
  BatchIterator it = make_batches(c.train, 16, 5, true);
  std::vector<std::vector<int>> epochs(2);
  for (int e = 0; e < 2; ++e) {
    std::multiset<int> seen;
    for (std::size_t n = 0; n < it.batches_per_epoch(); ++n) {
      const Batch b = it.next();
      for (std::size_t i = 0; i < b.src.size(); ++i) {
        if (b.src_mask[i] && b.src[i] != kEosId) {
          seen.insert(b.src[i]);
          epochs[e].push_back(b.src[i]);
        }
      }
    }
    CHECK(seen == expect);
  }
  CHECK(epochs[0] != epochs[1]);
  // Same seed, same order.
  BatchIterator again = make_batches(c.train, 16, 5, true);
  CHECK(again.next().src == make_batches(c.train, 16, 5, true).next().src);
}
