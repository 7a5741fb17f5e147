#include "headmask/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "headmask/errors.hpp"

namespace headmask {

// ---- Vocab ----------------------------------------------------------------

Vocab::Vocab() {
  for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) add(t);
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  for (const auto& t : tokens) v.add(t);
  return v;
}

int Vocab::add(const std::string& token) {
  if (auto it = ids_.find(token); it != ids_.end()) return it->second;
  const int id = size();
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

bool Vocab::contains(std::string_view token) const {
  return ids_.count(std::string(token)) > 0;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) {
    throw UsageError("token id " + std::to_string(id) +
                     " outside vocabulary of size " + std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocab::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id >= kNumReserved) out.push_back(token(id));
  }
  return out;
}

void write_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary " + path.string());
  for (int i = kNumReserved; i < vocab.size(); ++i) out << vocab.token(i) << '\n';
}

Vocab read_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read vocabulary " + path.string());
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) v.add(line);
  }
  return v;
}

// ---- splits ---------------------------------------------------------------

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "dev") return Split::Dev;
  if (name == "test") return Split::Test;
  throw UsageError("unknown split '" + std::string(name) +
                   "' (expected train, dev or test)");
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "train";
}

const std::vector<SentencePair>& ParallelCorpus::split(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Dev: return dev;
    case Split::Test: return test;
  }
  return train;
}

// ---- synthetic tasks ------------------------------------------------------

namespace {

std::string synthetic_token(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "w%04d", id);
  return buf;
}

Vocab synthetic_vocab(int vocab_size) {
  Vocab v;
  for (int id = kNumReserved; id < vocab_size; ++id) v.add(synthetic_token(id));
  return v;
}

ParallelCorpus gen_mapped_task(int vocab_size, int min_len, int max_len,
                               int n_pairs, std::uint64_t seed, bool reverse) {
  if (vocab_size < 8 || vocab_size > 10000) {
    throw UsageError("vocab_size must be in [8, 10000], got " +
                     std::to_string(vocab_size));
  }
  if (min_len < 1 || max_len < min_len) {
    throw UsageError("invalid length range [" + std::to_string(min_len) + ", " +
                     std::to_string(max_len) + "]");
  }
  if (n_pairs < 20) {
    throw UsageError("n_pairs=" + std::to_string(n_pairs) +
                     " is too small for a 90/5/5 split (need >= 20)");
  }
  const int content = vocab_size - kNumReserved;
  // Capacity check: number of distinct sequences in the length range.
  double capacity = 0.0;
  for (int len = min_len; len <= max_len && capacity < 1e12; ++len) {
    capacity += std::pow(static_cast<double>(content), len);
  }
  if (capacity < 2.0 * n_pairs) {
    throw UsageError("cannot draw " + std::to_string(n_pairs) +
                     " distinct sequences from this vocabulary/length range");
  }

  Rng rng = make_stream(seed, Stream::Corpus);
  std::vector<int> mapping(static_cast<std::size_t>(vocab_size));
  std::iota(mapping.begin(), mapping.end(), 0);
  for (int i = vocab_size - 1; i > kNumReserved; --i) {
    const int j = kNumReserved + static_cast<int>(rng.below(i - kNumReserved + 1));
    std::swap(mapping[i], mapping[j]);
  }

  std::set<std::vector<int>> seen;
  std::vector<SentencePair> pairs;
  pairs.reserve(static_cast<std::size_t>(n_pairs));
  while (static_cast<int>(pairs.size()) < n_pairs) {
    const int len = min_len + static_cast<int>(rng.below(max_len - min_len + 1));
    std::vector<int> src(static_cast<std::size_t>(len));
    for (int& t : src) t = kNumReserved + static_cast<int>(rng.below(content));
    if (!seen.insert(src).second) continue;
    std::vector<int> tgt(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
      const std::size_t from = reverse ? src.size() - 1 - i : i;
      tgt[i] = mapping[static_cast<std::size_t>(src[from])];
    }
    pairs.push_back({std::move(src), std::move(tgt)});
  }

  ParallelCorpus corpus;
  corpus.src_vocab = synthetic_vocab(vocab_size);
  corpus.tgt_vocab = synthetic_vocab(vocab_size);
  const std::size_t n_train = static_cast<std::size_t>(n_pairs) * 90 / 100;
  const std::size_t n_dev = static_cast<std::size_t>(n_pairs) * 5 / 100;
  auto first = pairs.begin();
  corpus.train.assign(first, first + n_train);
  corpus.dev.assign(first + n_train, first + n_train + n_dev);
  corpus.test.assign(first + n_train + n_dev, pairs.end());
  return corpus;
}

}  // namespace

ParallelCorpus gen_reversal_task(int vocab_size, int min_len, int max_len,
                                 int n_pairs, std::uint64_t seed) {
  return gen_mapped_task(vocab_size, min_len, max_len, n_pairs, seed, true);
}

ParallelCorpus gen_copy_task(int vocab_size, int min_len, int max_len,
                             int n_pairs, std::uint64_t seed) {
  return gen_mapped_task(vocab_size, min_len, max_len, n_pairs, seed, false);
}

// ---- TSV ------------------------------------------------------------------

namespace {

using TokenPair = std::pair<std::vector<std::string>, std::vector<std::string>>;

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream is{std::string(s)};
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::vector<TokenPair> read_tsv_pairs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file " + path.string());
  std::vector<TokenPair> pairs;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": expected 'source<TAB>target'");
    }
    pairs.emplace_back(split_ws(std::string_view(line).substr(0, tab)),
                       split_ws(std::string_view(line).substr(tab + 1)));
  }
  return pairs;
}

Vocab sorted_vocab(const std::set<std::string>& tokens) {
  return Vocab::from_tokens(std::vector<std::string>(tokens.begin(), tokens.end()));
}

std::vector<SentencePair> encode_pairs(const std::vector<TokenPair>& pairs,
                                       const Vocab& src, const Vocab& tgt) {
  std::vector<SentencePair> out;
  out.reserve(pairs.size());
  for (const auto& [s, t] : pairs) out.push_back({src.encode(s), tgt.encode(t)});
  return out;
}

}  // namespace

ParallelCorpus load_tsv_corpus(const std::filesystem::path& path) {
  std::vector<TokenPair> train, dev, test;
  if (std::filesystem::is_directory(path)) {
    train = read_tsv_pairs(path / "train.tsv");
    if (std::filesystem::exists(path / "dev.tsv")) dev = read_tsv_pairs(path / "dev.tsv");
    if (std::filesystem::exists(path / "test.tsv")) {
      test = read_tsv_pairs(path / "test.tsv");
    }
  } else {
    train = read_tsv_pairs(path);
  }
  if (train.empty()) {
    throw UsageError("corpus " + path.string() + " has no training pairs");
  }
  std::set<std::string> src_tokens, tgt_tokens;
  for (const auto& [s, t] : train) {
    src_tokens.insert(s.begin(), s.end());
    tgt_tokens.insert(t.begin(), t.end());
  }
  ParallelCorpus corpus;
  corpus.src_vocab = sorted_vocab(src_tokens);
  corpus.tgt_vocab = sorted_vocab(tgt_tokens);
  corpus.train = encode_pairs(train, corpus.src_vocab, corpus.tgt_vocab);
  corpus.dev = encode_pairs(dev, corpus.src_vocab, corpus.tgt_vocab);
  corpus.test = encode_pairs(test, corpus.src_vocab, corpus.tgt_vocab);
  return corpus;
}

void write_tsv_corpus(const ParallelCorpus& corpus,
                      const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (Split s : {Split::Train, Split::Dev, Split::Test}) {
    const auto file = dir / (std::string(split_name(s)) + ".tsv");
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError("cannot write " + file.string());
    for (const auto& p : corpus.split(s)) {
      const auto src = corpus.src_vocab.decode(p.src);
      const auto tgt = corpus.tgt_vocab.decode(p.tgt);
      for (std::size_t i = 0; i < src.size(); ++i) out << (i ? " " : "") << src[i];
      out << '\t';
      for (std::size_t i = 0; i < tgt.size(); ++i) out << (i ? " " : "") << tgt[i];
      out << '\n';
    }
  }
}

// ---- batching -------------------------------------------------------------

int Batch::target_tokens() const {
  return static_cast<int>(std::count(tgt_mask.begin(), tgt_mask.end(), 1));
}

int Batch::target_tokens(int row) const {
  const auto first = tgt_mask.begin() + static_cast<std::ptrdiff_t>(row) * tgt_len;
  return static_cast<int>(std::count(first, first + tgt_len, 1));
}

Batch make_batch(std::span<const SentencePair* const> pairs) {
  Batch b;
  b.size = static_cast<int>(pairs.size());
  for (const SentencePair* p : pairs) {
    b.src_len = std::max(b.src_len, static_cast<int>(p->src.size()) + 1);
    b.tgt_len = std::max(b.tgt_len, static_cast<int>(p->tgt.size()) + 1);
  }
  const std::size_t ns = static_cast<std::size_t>(b.size) * b.src_len;
  const std::size_t nt = static_cast<std::size_t>(b.size) * b.tgt_len;
  b.src.assign(ns, kPadId);
  b.src_mask.assign(ns, 0);
  b.tgt_in.assign(nt, kPadId);
  b.tgt_out.assign(nt, kPadId);
  b.tgt_mask.assign(nt, 0);
  for (int r = 0; r < b.size; ++r) {
    const SentencePair& p = *pairs[static_cast<std::size_t>(r)];
    const std::size_t so = static_cast<std::size_t>(r) * b.src_len;
    for (std::size_t i = 0; i < p.src.size(); ++i) {
      b.src[so + i] = p.src[i];
      b.src_mask[so + i] = 1;
    }
    b.src[so + p.src.size()] = kEosId;
    b.src_mask[so + p.src.size()] = 1;

    const std::size_t to = static_cast<std::size_t>(r) * b.tgt_len;
    b.tgt_in[to] = kBosId;
    for (std::size_t i = 0; i < p.tgt.size(); ++i) {
      b.tgt_in[to + i + 1] = p.tgt[i];
      b.tgt_out[to + i] = p.tgt[i];
    }
    b.tgt_out[to + p.tgt.size()] = kEosId;
    for (std::size_t i = 0; i <= p.tgt.size(); ++i) b.tgt_mask[to + i] = 1;
  }
  return b;
}

Batch make_batch(std::span<const SentencePair> pairs) {
  std::vector<const SentencePair*> ptrs;
  ptrs.reserve(pairs.size());
  for (const auto& p : pairs) ptrs.push_back(&p);
  return make_batch(ptrs);
}

BatchIterator::BatchIterator(const std::vector<SentencePair>& pairs,
                             int batch_size, Rng rng, bool shuffle)
    : pairs_(&pairs), batch_size_(batch_size), rng_(rng), shuffle_(shuffle) {
  if (batch_size < 1) {
    throw UsageError("batch_size must be >= 1, got " + std::to_string(batch_size));
  }
  if (pairs.empty()) throw UsageError("cannot batch an empty split");
  order_.resize(pairs.size());
  start_epoch();
}

void BatchIterator::start_epoch() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle_) {
    for (std::size_t i = order_.size() - 1; i > 0; --i) {
      std::swap(order_[i], order_[rng_.below(i + 1)]);
    }
  }
  cursor_ = 0;
}

std::size_t BatchIterator::batches_per_epoch() const {
  return (order_.size() + batch_size_ - 1) / static_cast<std::size_t>(batch_size_);
}

Batch BatchIterator::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    start_epoch();
  }
  const std::size_t end =
      std::min(order_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
  std::vector<const SentencePair*> chunk;
  chunk.reserve(end - cursor_);
  for (std::size_t i = cursor_; i < end; ++i) chunk.push_back(&(*pairs_)[order_[i]]);
  cursor_ = end;
  return make_batch(chunk);
}

BatchIterator make_batches(const std::vector<SentencePair>& pairs,
                           int batch_size, std::uint64_t seed, bool shuffle) {
  return BatchIterator(pairs, batch_size, make_stream(seed, Stream::Data),
                       shuffle);
}

std::vector<Batch> epoch_batches(const std::vector<SentencePair>& pairs,
                                 int batch_size) {
  if (batch_size < 1) {
    throw UsageError("batch_size must be >= 1, got " + std::to_string(batch_size));
  }
  std::vector<Batch> out;
  for (std::size_t i = 0; i < pairs.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min(pairs.size() - i, static_cast<std::size_t>(batch_size));
    out.push_back(make_batch(std::span<const SentencePair>(pairs.data() + i, n)));
  }
  return out;
}

}  // namespace headmask
