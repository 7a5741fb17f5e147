#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "headmask/rng.hpp"

namespace headmask {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReserved = 4;

// Token <-> id table. Ids 0..3 are reserved for <pad>, <s>, </s>, <unk>.
class Vocab {
 public:
  Vocab();

  // Builds a vocabulary whose non-reserved ids follow `tokens` in order.
  static Vocab from_tokens(const std::vector<std::string>& tokens);

  int add(const std::string& token);
  // Unknown tokens map to kUnkId.
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  // Drops reserved ids.
  std::vector<std::string> decode(std::span<const int> ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

void write_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab read_vocab(const std::filesystem::path& path);

struct SentencePair {
  std::vector<int> src;
  std::vector<int> tgt;

  bool operator==(const SentencePair&) const = default;
};

enum class Split { Train, Dev, Test };
Split parse_split(std::string_view name);
std::string_view split_name(Split split);

struct ParallelCorpus {
  Vocab src_vocab;
  Vocab tgt_vocab;
  std::vector<SentencePair> train;
  std::vector<SentencePair> dev;
  std::vector<SentencePair> test;

  const std::vector<SentencePair>& split(Split s) const;
};

// Source is a uniform random token sequence; target is the reversed source
// mapped through a seeded bijection over the non-reserved vocabulary.
// vocab_size counts the reserved ids. Splits are 90/5/5 and never share a
// source sequence.
ParallelCorpus gen_reversal_task(int vocab_size, int min_len, int max_len,
                                 int n_pairs, std::uint64_t seed);
// Same generator, without the reversal (target = mapped source).
ParallelCorpus gen_copy_task(int vocab_size, int min_len, int max_len,
                             int n_pairs, std::uint64_t seed);

// Reads a TSV corpus. A directory is read as train.tsv / dev.tsv / test.tsv
// (dev and test optional); a plain file becomes the train split. Vocabularies
// are built from train in lexicographic token order.
ParallelCorpus load_tsv_corpus(const std::filesystem::path& path);
void write_tsv_corpus(const ParallelCorpus& corpus,
                      const std::filesystem::path& dir);

// A padded batch. Sources end in </s>; tgt_in starts with <s>; tgt_out is
// tgt_in shifted left by one with </s> appended. Masks hold 1 for real tokens.
struct Batch {
  int size = 0;
  int src_len = 0;
  int tgt_len = 0;
  std::vector<int> src;
  std::vector<int> tgt_in;
  std::vector<int> tgt_out;
  std::vector<unsigned char> src_mask;
  std::vector<unsigned char> tgt_mask;

  int target_tokens() const;
  int target_tokens(int row) const;
};

Batch make_batch(std::span<const SentencePair* const> pairs);
Batch make_batch(std::span<const SentencePair> pairs);

// Endless batch stream over one split. With shuffle on, every epoch is a fresh
// permutation drawn from the supplied data RNG.
class BatchIterator {
 public:
  BatchIterator(const std::vector<SentencePair>& pairs, int batch_size, Rng rng,
                bool shuffle);

  Batch next();
  int epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const;

 private:
  void start_epoch();

  const std::vector<SentencePair>* pairs_;
  int batch_size_;
  Rng rng_;
  bool shuffle_;
  int epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

BatchIterator make_batches(const std::vector<SentencePair>& pairs,
                           int batch_size, std::uint64_t seed, bool shuffle);

// One pass over `pairs` in order.
std::vector<Batch> epoch_batches(const std::vector<SentencePair>& pairs,
                                 int batch_size);

}  // namespace headmask
