#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "headmask/data.hpp"
#include "headmask/model.hpp"

namespace headmask {

// Per-head importance I_h = E_x |d L(x) / d gate_h|, indexed by flat head id.
struct ImportanceReport {
  HeadLayout layout;
  std::vector<float> scores;
  int num_samples = 0;
  std::string dataset_tag;
  int step = 0;

  float score(int flat_id) const { return scores.at(static_cast<std::size_t>(flat_id)); }
};

// Groups of flat head ids, most important group first.
struct HeadGroups {
  std::vector<std::vector<int>> groups;
  int group_size = 0;  // size of the largest group
};

struct ImportanceOptions {
  float label_smoothing = 0.1f;
  // Train mode turns dropout on; the importance-guided trainer's first pass uses it.
  bool train = false;
  Rng* dropout_rng = nullptr;
};

// d L(x) / d gate_h for every sentence x of the batch, evaluated at the gate
// values given by `mask` (1 for unmasked heads): result[row][flat_id].
std::vector<std::vector<float>> sentence_gate_gradients(
    const Transformer& model, const Batch& batch, const MaskSet& mask,
    const ImportanceOptions& options);

// The same quantity computed as the explicit contraction
// sum over positions and channels of Att_h(x) * d L(x) / d Att_h(x), read from
// the pre-gate head contexts after backward().
std::vector<std::vector<float>> sentence_context_contractions(
    const Transformer& model, const Batch& batch, const MaskSet& mask,
    const ImportanceOptions& options);

// Running sum of |per-sentence gate gradient| in batch order.
class ImportanceAccumulator {
 public:
  explicit ImportanceAccumulator(HeadLayout layout);

  void add(const std::vector<std::vector<float>>& sentence_gradients);
  int samples() const { return samples_; }
  ImportanceReport report(std::string dataset_tag, int step) const;

 private:
  HeadLayout layout_;
  std::vector<double> sums_;
  int samples_ = 0;
};

ImportanceReport estimate_importance(const Transformer& model,
                                     std::span<const Batch> batches,
                                     const MaskSet& mask_context,
                                     const ImportanceOptions& options = {},
                                     std::string dataset_tag = "",
                                     int step = 0);

// Heads sorted by descending score (ties by ascending flat id), cut into
// num_groups contiguous chunks; earlier chunks absorb the remainder.
HeadGroups partition_groups(const ImportanceReport& report, int num_groups = 8);

struct DistributionStats {
  double mean = 0.0;
  double variance = 0.0;  // population (divide by N)
};
DistributionStats distribution_stats(const ImportanceReport& report);

// The n highest-scoring heads, ties by ascending flat id, in rank order.
std::vector<int> top_n_heads(const ImportanceReport& report, int n);

// importance.csv: flat_id,attn_type,layer,head,importance
void write_importance_csv(const ImportanceReport& report,
                          const std::filesystem::path& path);
ImportanceReport read_importance_csv(const std::filesystem::path& path);

}  // namespace headmask
