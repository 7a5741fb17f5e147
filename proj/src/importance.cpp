#include "headmask/importance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "headmask/errors.hpp"

namespace headmask {

namespace {

ForwardResult run_sentence_backward(Tape& tape, const Transformer& model,
                                    const Batch& batch, const MaskSet& mask,
                                    const ImportanceOptions& options) {
  ForwardOptions fo;
  fo.train = options.train;
  fo.mask = &mask;
  fo.label_smoothing = options.label_smoothing;
  fo.reduction = LossReduction::SentenceSum;
  fo.dropout_rng = options.dropout_rng;
  ForwardResult result = model.forward(tape, batch, fo);
  tape.backward(result.loss);
  return result;
}

// Descending by score, ascending flat id on ties.
std::vector<int> ranked_heads(const ImportanceReport& report) {
  std::vector<int> order(report.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return report.scores[a] > report.scores[b];
  });
  return order;
}

}  // namespace

std::vector<std::vector<float>> sentence_gate_gradients(
    const Transformer& model, const Batch& batch, const MaskSet& mask,
    const ImportanceOptions& options) {
  Tape tape;
  ForwardResult result = run_sentence_backward(tape, model, batch, mask, options);
  model.zero_grad();
  return gate_gradients(result, model.config());
}

std::vector<std::vector<float>> sentence_context_contractions(
    const Transformer& model, const Batch& batch, const MaskSet& mask,
    const ImportanceOptions& options) {
  Tape tape;
  ForwardResult result = run_sentence_backward(tape, model, batch, mask, options);
  model.zero_grad();
  const int heads = model.config().heads_per_layer;
  std::vector<std::vector<float>> out(
      static_cast<std::size_t>(batch.size),
      std::vector<float>(static_cast<std::size_t>(model.config().total_heads()), 0.0f));
  for (std::size_t g = 0; g < result.head_contexts.size(); ++g) {
    const Tensor& ctx = result.head_contexts[g];
    const auto value = ctx.data();
    const auto grad = ctx.grad();
    if (grad.empty()) continue;
    const std::size_t inner = ctx.numel() / (static_cast<std::size_t>(batch.size) * heads);
    for (int r = 0; r < batch.size; ++r) {
      for (int h = 0; h < heads; ++h) {
        const std::size_t base = (static_cast<std::size_t>(r) * heads + h) * inner;
        double acc = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
          acc += static_cast<double>(value[base + i]) * grad[base + i];
        }
        out[r][g * heads + h] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

ImportanceAccumulator::ImportanceAccumulator(HeadLayout layout)
    : layout_(layout), sums_(static_cast<std::size_t>(layout.total()), 0.0) {}

void ImportanceAccumulator::add(
    const std::vector<std::vector<float>>& sentence_gradients) {
  for (const auto& row : sentence_gradients) {
    if (row.size() != sums_.size()) {
      throw ShapeError("importance row has " + std::to_string(row.size()) +
                       " heads, expected " + std::to_string(sums_.size()));
    }
    for (std::size_t h = 0; h < row.size(); ++h) sums_[h] += std::fabs(row[h]);
    ++samples_;
  }
}

ImportanceReport ImportanceAccumulator::report(std::string dataset_tag,
                                               int step) const {
  ImportanceReport r;
  r.layout = layout_;
  r.num_samples = samples_;
  r.dataset_tag = std::move(dataset_tag);
  r.step = step;
  r.scores.resize(sums_.size(), 0.0f);
  if (samples_ > 0) {
    for (std::size_t h = 0; h < sums_.size(); ++h) {
      r.scores[h] = static_cast<float>(sums_[h] / samples_);
    }
  }
  return r;
}

ImportanceReport estimate_importance(const Transformer& model,
                                     std::span<const Batch> batches,
                                     const MaskSet& mask_context,
                                     const ImportanceOptions& options,
                                     std::string dataset_tag, int step) {
  if (batches.empty()) throw UsageError("estimate_importance needs at least one batch");
  ImportanceAccumulator acc(model.config().layout());
  for (const Batch& b : batches) {
    acc.add(sentence_gate_gradients(model, b, mask_context, options));
  }
  return acc.report(std::move(dataset_tag), step);
}

HeadGroups partition_groups(const ImportanceReport& report, int num_groups) {
  const int total = static_cast<int>(report.scores.size());
  if (num_groups < 1) {
    throw UsageError("num_groups must be >= 1, got " + std::to_string(num_groups));
  }
  if (num_groups > total) {
    throw UsageError("cannot split " + std::to_string(total) + " heads into " +
                     std::to_string(num_groups) + " groups");
  }
  const std::vector<int> order = ranked_heads(report);
  HeadGroups out;
  const int base = total / num_groups;
  const int extra = total % num_groups;
  out.group_size = base + (extra > 0 ? 1 : 0);
  std::size_t cursor = 0;
  for (int g = 0; g < num_groups; ++g) {
    const std::size_t n = static_cast<std::size_t>(base + (g < extra ? 1 : 0));
    out.groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                            order.begin() + static_cast<std::ptrdiff_t>(cursor + n));
    cursor += n;
  }
  return out;
}

DistributionStats distribution_stats(const ImportanceReport& report) {
  if (report.scores.empty()) throw UsageError("distribution_stats on an empty report");
  const double n = static_cast<double>(report.scores.size());
  double mean = 0.0;
  for (float s : report.scores) mean += s;
  mean /= n;
  double var = 0.0;
  for (float s : report.scores) var += (s - mean) * (s - mean);
  return {mean, var / n};
}

std::vector<int> top_n_heads(const ImportanceReport& report, int n) {
  const int total = static_cast<int>(report.scores.size());
  if (n < 0 || n > total) {
    throw UsageError("top_n_heads: n=" + std::to_string(n) + " outside [0, " +
                     std::to_string(total) + "]");
  }
  std::vector<int> order = ranked_heads(report);
  order.resize(static_cast<std::size_t>(n));
  return order;
}

void write_importance_csv(const ImportanceReport& report,
                          const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "flat_id,attn_type,layer,head,importance\n";
  for (int id = 0; id < static_cast<int>(report.scores.size()); ++id) {
    const HeadId h = HeadId::from_flat(id, report.layout);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(report.scores[id]));
    out << id << ',' << attn_type_name(h.type) << ',' << h.layer << ',' << h.head
        << ',' << buf << '\n';
  }
}

ImportanceReport read_importance_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "flat_id,attn_type,layer,head,importance") {
    throw DataError(path.string() + ": unexpected importance.csv header");
  }
  struct Row {
    int flat;
    HeadId head;
    float score;
  };
  std::vector<Row> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": expected 5 columns");
    }
    try {
      rows.push_back({std::stoi(cells[0]),
                      HeadId{parse_attn_type(cells[1]), std::stoi(cells[2]),
                             std::stoi(cells[3])},
                      std::stof(cells[4])});
    } catch (const std::logic_error&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": malformed row");
    } catch (const UsageError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  HeadLayout layout;
  for (const Row& r : rows) {
    layout.layers = std::max(layout.layers, r.head.layer + 1);
    layout.heads_per_layer = std::max(layout.heads_per_layer, r.head.head + 1);
  }
  if (rows.empty() || static_cast<int>(rows.size()) != layout.total()) {
    throw DataError(path.string() + ": rows do not cover every head exactly once");
  }
  ImportanceReport report;
  report.layout = layout;
  report.scores.assign(rows.size(), -1.0f);
  report.dataset_tag = path.stem().string();
  std::vector<bool> seen(rows.size(), false);
  for (const Row& r : rows) {
    if (r.flat < 0 || r.flat >= layout.total() || seen[r.flat] ||
        r.head.flat(layout) != r.flat) {
      throw DataError(path.string() + ": inconsistent flat_id " + std::to_string(r.flat));
    }
    if (!(r.score >= 0.0f)) {
      throw DataError(path.string() + ": negative importance for head " +
                      std::to_string(r.flat));
    }
    seen[r.flat] = true;
    report.scores[r.flat] = r.score;
  }
  return report;
}

}  // namespace headmask
