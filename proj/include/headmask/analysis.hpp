#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "headmask/data.hpp"
#include "headmask/importance.hpp"
#include "headmask/model.hpp"

namespace headmask {

struct Metrics {
  double token_accuracy = 0.0;
  // Absent when evaluation skipped decoding.
  std::optional<double> bleu;
};

struct EvalOptions {
  int batch_size = 100;
  // Greedy decoding dominates evaluation cost; sweeps may skip it.
  bool with_bleu = true;
};

// Teacher-forced next-token accuracy over non-pad target positions.
double token_accuracy(const Transformer& model,
                      const std::vector<SentencePair>& pairs,
                      const MaskSet* mask, int batch_size = 100);

Metrics evaluate(const Transformer& model, const std::vector<SentencePair>& pairs,
                 const MaskSet& mask, const EvalOptions& options = {});

// Corpus BLEU-4 in [0, 100] with brevity penalty. For n >= 2 an n-gram order
// with zero matches is smoothed to 1 / (candidates + 1).
double corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                   const std::vector<std::vector<int>>& references);

enum class SweepOrder { PerGroup, Ascending, Descending };
std::string_view sweep_order_name(SweepOrder order);  // groups/ascending/descending
SweepOrder parse_sweep_order(std::string_view name);

struct SweepRow {
  std::vector<int> masked_heads;
  int n_masked = 0;
  std::string metric_name = "token_accuracy";
  double metric_value = 0.0;
  Metrics metrics;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  SweepOrder order = SweepOrder::PerGroup;
  std::string model_tag;
};

struct SweepOptions {
  int num_groups = 8;
  EvalOptions eval;
  // Worker threads evaluating independent rows.
  int jobs = 1;
};

// Row 0 is the unmasked model; row g masks exactly group g.
SweepResult sweep_group_masking(const Transformer& model,
                                const ImportanceReport& report,
                                const std::vector<SentencePair>& dev,
                                const SweepOptions& options = {});

// Row 0 is the unmasked model; row i masks the first i groups taken from the
// least (Ascending) or most (Descending) important end.
SweepResult sweep_cumulative(const Transformer& model,
                             const ImportanceReport& report,
                             const std::vector<SentencePair>& dev,
                             SweepOrder order, const SweepOptions& options = {});

// Trapezoid area under metric_value over x = n_masked / total heads.
double sweep_area(const SweepResult& sweep, int total_heads);

struct DistributionRow {
  std::string model_tag;
  double mean = 0.0;
  double variance = 0.0;
  double max = 0.0;
  std::vector<int> histogram;
};

struct DistributionTable {
  std::vector<DistributionRow> rows;
  double bin_low = 0.0;
  double bin_high = 0.0;
  int bins = 20;
};

// Histograms share bins spanning the pooled score range of all reports.
DistributionTable compare_distributions(std::span<const ImportanceReport> reports,
                                        int bins = 20);

void write_sweep_csv(std::span<const SweepResult> sweeps,
                     const std::filesystem::path& path);
std::vector<SweepResult> read_sweep_csv(const std::filesystem::path& path);
void write_stats_csv(const DistributionTable& table,
                     const std::filesystem::path& path);
void write_histogram_csv(const DistributionTable& table,
                         const std::filesystem::path& path);
void write_metrics_csv(const Metrics& metrics, std::span<const int> masked_heads,
                       const std::filesystem::path& path);

// Shortest round-trip text for CSV cells.
std::string format_number(double value);

}  // namespace headmask
