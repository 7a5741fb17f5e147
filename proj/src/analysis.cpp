#include "headmask/analysis.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "headmask/errors.hpp"

namespace headmask {

// ---- evaluation -------------------------------------------------------------

double token_accuracy(const Transformer& model,
                      const std::vector<SentencePair>& pairs,
                      const MaskSet* mask, int batch_size) {
  if (pairs.empty()) throw UsageError("token_accuracy on an empty split");
  const int vocab = model.config().vocab_tgt;
  std::size_t correct = 0, total = 0;
  for (const Batch& b : epoch_batches(pairs, batch_size)) {
    Tape tape(false);
    ForwardOptions fo;
    fo.mask = mask;
    const ForwardResult r = model.forward(tape, b, fo);
    const auto logits = r.logits.data();
    for (std::size_t i = 0; i < b.tgt_out.size(); ++i) {
      if (!b.tgt_mask[i]) continue;
      const float* row = logits.data() + i * static_cast<std::size_t>(vocab);
      const int best = static_cast<int>(std::max_element(row, row + vocab) - row);
      correct += best == b.tgt_out[i];
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

Metrics evaluate(const Transformer& model, const std::vector<SentencePair>& pairs,
                 const MaskSet& mask, const EvalOptions& options) {
  Metrics m;
  m.token_accuracy = token_accuracy(model, pairs, &mask, options.batch_size);
  if (options.with_bleu) {
    std::vector<std::vector<int>> hyps, refs;
    for (std::size_t i = 0; i < pairs.size(); i += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t n = std::min(pairs.size() - i, static_cast<std::size_t>(options.batch_size));
      const Batch b = make_batch(std::span<const SentencePair>(pairs.data() + i, n));
      auto out = model.greedy_decode(b, &mask, b.src_len + 10);
      for (std::size_t j = 0; j < n; ++j) {
        hyps.push_back(std::move(out[j]));
        refs.push_back(pairs[i + j].tgt);
      }
    }
    m.bleu = corpus_bleu(hyps, refs);
  }
  return m;
}

double corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                   const std::vector<std::vector<int>>& references) {
  if (hypotheses.size() != references.size()) {
    throw UsageError("corpus_bleu: " + std::to_string(hypotheses.size()) +
                     " hypotheses vs " + std::to_string(references.size()) +
                     " references");
  }
  constexpr int kOrder = 4;
  std::array<double, kOrder> matched{}, candidates{};
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    hyp_len += static_cast<double>(hyp.size());
    ref_len += static_cast<double>(ref.size());
    for (int n = 1; n <= kOrder; ++n) {
      if (hyp.size() < static_cast<std::size_t>(n)) continue;
      std::map<std::vector<int>, int> ref_counts;
      for (std::size_t i = 0; i + n <= ref.size(); ++i) {
        ++ref_counts[std::vector<int>(ref.begin() + i, ref.begin() + i + n)];
      }
      std::map<std::vector<int>, int> hyp_counts;
      for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
        ++hyp_counts[std::vector<int>(hyp.begin() + i, hyp.begin() + i + n)];
      }
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matched[n - 1] += std::min(count, it->second);
      }
      candidates[n - 1] += static_cast<double>(hyp.size() - n + 1);
    }
  }
  if (hyp_len == 0.0 || matched[0] == 0.0) return 0.0;
  double log_precision = 0.0;
  for (int n = 0; n < kOrder; ++n) {
    const double p = matched[n] > 0.0 ? matched[n] / candidates[n]
                                      : 1.0 / (candidates[n] + 1.0);
    log_precision += std::log(p) / kOrder;
  }
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * bp * std::exp(log_precision);
}

// ---- sweeps -----------------------------------------------------------------

std::string_view sweep_order_name(SweepOrder order) {
  switch (order) {
    case SweepOrder::PerGroup: return "groups";
    case SweepOrder::Ascending: return "ascending";
    case SweepOrder::Descending: return "descending";
  }
  return "groups";
}

SweepOrder parse_sweep_order(std::string_view name) {
  if (name == "groups") return SweepOrder::PerGroup;
  if (name == "ascending") return SweepOrder::Ascending;
  if (name == "descending") return SweepOrder::Descending;
  throw UsageError("unknown sweep mode '" + std::string(name) +
                   "' (expected groups, ascending or descending)");
}

namespace {

void run_rows(const Transformer& model, const std::vector<SentencePair>& dev,
              std::vector<SweepRow>& rows, const SweepOptions& options) {
  auto eval_row = [&](std::size_t i) {
    SweepRow& row = rows[i];
    const MaskSet mask = MaskSet::masking(row.masked_heads);
    row.n_masked = mask.count_masked();
    row.metrics = evaluate(model, dev, mask, options.eval);
    row.metric_value = row.metrics.token_accuracy;
  };
  const std::size_t jobs = static_cast<std::size_t>(std::max(1, options.jobs));
  if (jobs == 1) {
    for (std::size_t i = 0; i < rows.size(); ++i) eval_row(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs);
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&, w]() {
      try {
        for (std::size_t i = next++; i < rows.size(); i = next++) eval_row(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void check_report(const Transformer& model, const ImportanceReport& report) {
  if (!(report.layout == model.config().layout())) {
    throw UsageError("importance report covers " + std::to_string(report.layout.total()) +
                     " heads but the model has " +
                     std::to_string(model.config().total_heads()));
  }
}

std::vector<int> sorted(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace

SweepResult sweep_group_masking(const Transformer& model,
                                const ImportanceReport& report,
                                const std::vector<SentencePair>& dev,
                                const SweepOptions& options) {
  check_report(model, report);
  const HeadGroups groups = partition_groups(report, options.num_groups);
  SweepResult result;
  result.order = SweepOrder::PerGroup;
  result.rows.resize(groups.groups.size() + 1);
  for (std::size_t g = 0; g < groups.groups.size(); ++g) {
    result.rows[g + 1].masked_heads = sorted(groups.groups[g]);
  }
  run_rows(model, dev, result.rows, options);
  return result;
}

SweepResult sweep_cumulative(const Transformer& model,
                             const ImportanceReport& report,
                             const std::vector<SentencePair>& dev,
                             SweepOrder order, const SweepOptions& options) {
  if (order == SweepOrder::PerGroup) {
    throw UsageError("sweep_cumulative needs ascending or descending order");
  }
  check_report(model, report);
  HeadGroups groups = partition_groups(report, options.num_groups);
  if (order == SweepOrder::Ascending) {
    std::reverse(groups.groups.begin(), groups.groups.end());
  }
  SweepResult result;
  result.order = order;
  result.rows.resize(groups.groups.size() + 1);
  std::vector<int> masked;
  for (std::size_t g = 0; g < groups.groups.size(); ++g) {
    masked.insert(masked.end(), groups.groups[g].begin(), groups.groups[g].end());
    result.rows[g + 1].masked_heads = sorted(masked);
  }
  run_rows(model, dev, result.rows, options);
  return result;
}

double sweep_area(const SweepResult& sweep, int total_heads) {
  double area = 0.0;
  for (std::size_t i = 1; i < sweep.rows.size(); ++i) {
    const double x0 = static_cast<double>(sweep.rows[i - 1].n_masked) / total_heads;
    const double x1 = static_cast<double>(sweep.rows[i].n_masked) / total_heads;
    area += 0.5 * (x1 - x0) *
            (sweep.rows[i - 1].metric_value + sweep.rows[i].metric_value);
  }
  return area;
}

// ---- distributions ----------------------------------------------------------

DistributionTable compare_distributions(std::span<const ImportanceReport> reports,
                                        int bins) {
  if (bins < 1) throw UsageError("histogram needs at least one bin");
  DistributionTable table;
  table.bins = bins;
  bool first = true;
  for (const auto& r : reports) {
    for (float s : r.scores) {
      if (first) {
        table.bin_low = table.bin_high = s;
        first = false;
      }
      table.bin_low = std::min<double>(table.bin_low, s);
      table.bin_high = std::max<double>(table.bin_high, s);
    }
  }
  const double width = table.bin_high > table.bin_low
                           ? (table.bin_high - table.bin_low) / bins
                           : 1.0 / bins;
  if (table.bin_high <= table.bin_low) table.bin_high = table.bin_low + 1.0;
  for (const auto& r : reports) {
    DistributionRow row;
    row.model_tag = r.dataset_tag;
    const DistributionStats st = distribution_stats(r);
    row.mean = st.mean;
    row.variance = st.variance;
    row.max = *std::max_element(r.scores.begin(), r.scores.end());
    row.histogram.assign(static_cast<std::size_t>(bins), 0);
    for (float s : r.scores) {
      int bin = static_cast<int>((s - table.bin_low) / width);
      bin = std::clamp(bin, 0, bins - 1);
      ++row.histogram[static_cast<std::size_t>(bin)];
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---- CSV --------------------------------------------------------------------

std::string format_number(double value) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

void write_sweep_csv(std::span<const SweepResult> sweeps,
                     const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "order_tag,row,n_masked,masked_heads,token_accuracy,bleu\n";
  for (const auto& sweep : sweeps) {
    for (std::size_t i = 0; i < sweep.rows.size(); ++i) {
      const auto& r = sweep.rows[i];
      out << sweep_order_name(sweep.order) << ',' << i << ',' << r.n_masked << ','
          << join_head_ids(r.masked_heads) << ','
          << format_number(r.metrics.token_accuracy) << ','
          << (r.metrics.bleu ? format_number(*r.metrics.bleu) : "") << '\n';
    }
  }
}

std::vector<SweepResult> read_sweep_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) ||
      line != "order_tag,row,n_masked,masked_heads,token_accuracy,bleu") {
    throw DataError(path.string() + ": unexpected sweep.csv header");
  }
  std::vector<SweepResult> sweeps;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 6) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": expected 6 columns");
    }
    SweepRow row;
    try {
      const SweepOrder order = parse_sweep_order(cells[0]);
      const int index = std::stoi(cells[1]);
      if (index == 0 || sweeps.empty() || sweeps.back().order != order) {
        sweeps.emplace_back();
        sweeps.back().order = order;
      }
      row.n_masked = std::stoi(cells[2]);
      row.masked_heads = parse_head_ids(cells[3]);
      row.metrics.token_accuracy = std::stod(cells[4]);
      if (!cells[5].empty()) row.metrics.bleu = std::stod(cells[5]);
    } catch (const std::logic_error&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed row");
    } catch (const UsageError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    row.metric_value = row.metrics.token_accuracy;
    sweeps.back().rows.push_back(std::move(row));
  }
  return sweeps;
}

void write_stats_csv(const DistributionTable& table,
                     const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "model_tag,mean,variance,max\n";
  for (const auto& r : table.rows) {
    out << r.model_tag << ',' << format_number(r.mean) << ','
        << format_number(r.variance) << ',' << format_number(r.max) << '\n';
  }
}

void write_histogram_csv(const DistributionTable& table,
                         const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "model_tag,bin_low,bin_high,count\n";
  const double width = (table.bin_high - table.bin_low) / table.bins;
  for (const auto& r : table.rows) {
    for (int b = 0; b < table.bins; ++b) {
      out << r.model_tag << ',' << format_number(table.bin_low + b * width) << ','
          << format_number(table.bin_low + (b + 1) * width) << ','
          << r.histogram[static_cast<std::size_t>(b)] << '\n';
    }
  }
}

void write_metrics_csv(const Metrics& metrics, std::span<const int> masked_heads,
                       const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "masked_heads,token_accuracy,bleu\n";
  out << join_head_ids(masked_heads) << ',' << format_number(metrics.token_accuracy)
      << ',' << (metrics.bleu ? format_number(*metrics.bleu) : "") << '\n';
}

}  // namespace headmask
