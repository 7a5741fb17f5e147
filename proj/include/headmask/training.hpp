#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "headmask/data.hpp"
#include "headmask/model.hpp"
#include "headmask/rng.hpp"

namespace headmask {

enum class Variant { Baseline, RandomN, ImptN };
std::string_view variant_name(Variant v);  // baseline, random, impt
Variant parse_variant(std::string_view name);

// ceil(0.125 * total_heads)
int default_mask_n(int total_heads);

struct TrainConfig {
  Variant variant = Variant::Baseline;
  // Heads masked per batch; negative means default_mask_n(total heads).
  int mask_n = -1;
  int max_steps = 3000;
  int batch_size = 32;
  int warmup_steps = 400;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.98f;
  float adam_eps = 1e-9f;
  float label_smoothing = 0.1f;
  // Multiplier on the schedule. 0 keeps parameters frozen.
  float lr_scale = 1.0f;
  // Dev token accuracy every this many steps (and at the last step); 0 = never.
  int eval_every = 500;
  std::uint64_t seed = 1;

  int resolved_mask_n(int total_heads) const;
  void validate(int total_heads) const;
};

// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
float lr_schedule(int step, int d_model, int warmup);

struct StepRecord {
  int step = 0;
  double loss = 0.0;
  float lr = 0.0f;
  std::optional<double> dev_metric;
  std::vector<int> masked_heads;
};

// Bookkeeping of one importance-guided step.
struct ImptStepCheck {
  std::uint64_t checksum_before_pass1 = 0;
  std::uint64_t checksum_after_pass1 = 0;
  std::vector<int> top_n;   // from the pass-1 report
  std::vector<int> masked;  // what pass 2 actually masked
};

struct TrainState {
  int step = 0;
  std::vector<std::vector<float>> adam_m;
  std::vector<std::vector<float>> adam_v;
  RngStreams rng;
  double running_loss = 0.0;
  int optimizer_steps = 0;
  int batches = 0;
  std::vector<StepRecord> log;
  std::vector<ImptStepCheck> impt_checks;
  double seconds = 0.0;

  explicit TrainState(std::uint64_t seed) : rng(seed) {}
};

using StepCallback = std::function<void(const StepRecord&)>;

// Fresh model whose initial weights come from the seed's init stream.
Transformer init_model(const ModelConfig& config, std::uint64_t seed);

// FNV-1a over the bytes of every parameter and, when given, optimizer moments.
std::uint64_t parameter_checksum(const Transformer& model,
                                 const TrainState* state = nullptr);

// mask_n distinct flat ids drawn uniformly from all heads, ascending.
std::vector<int> sample_heads(Rng& rng, int total_heads, int mask_n);

TrainState train_baseline(Transformer& model, const ParallelCorpus& data,
                          const TrainConfig& cfg, const StepCallback& on_step = {});
TrainState train_random_mask(Transformer& model, const ParallelCorpus& data,
                             const TrainConfig& cfg, const StepCallback& on_step = {});
TrainState train_importance_mask(Transformer& model, const ParallelCorpus& data,
                                 const TrainConfig& cfg,
                                 const StepCallback& on_step = {});
// Dispatches on cfg.variant.
TrainState train(Transformer& model, const ParallelCorpus& data,
                 const TrainConfig& cfg, const StepCallback& on_step = {});

// step,variant,loss,lr,dev_metric,masked_heads
void write_training_log(const TrainState& state, Variant variant,
                        const std::filesystem::path& path);

}  // namespace headmask
