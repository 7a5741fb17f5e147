#pragma once

#include <cstdint>
#include <random>

namespace headmask {

// Seeded PRNG with platform-independent float/normal/integer draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 24 bits of precision.
  float uniform() {
    return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
  }

  // Uniform in [lo, hi).
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (computed in double).
  float normal();

  // Unbiased integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

enum class Stream : std::uint64_t {
  Init = 1,
  Dropout = 2,
  Data = 3,
  Mask = 4,
  Corpus = 5,
};

// Derives an independent stream from a run seed so that consuming one stream
// never shifts another.
Rng make_stream(std::uint64_t seed, Stream stream);

struct RngStreams {
  explicit RngStreams(std::uint64_t seed)
      : init(make_stream(seed, Stream::Init)),
        dropout(make_stream(seed, Stream::Dropout)),
        data(make_stream(seed, Stream::Data)),
        mask(make_stream(seed, Stream::Mask)) {}

  Rng init;
  Rng dropout;
  Rng data;
  Rng mask;
};

}  // namespace headmask
