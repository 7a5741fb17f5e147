#include "headmask/training.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "headmask/analysis.hpp"
#include "headmask/errors.hpp"
#include "headmask/importance.hpp"
#include "headmask/loss.hpp"

namespace headmask {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::RandomN: return "random";
    case Variant::ImptN: return "impt";
  }
  return "baseline";
}

Variant parse_variant(std::string_view name) {
  if (name == "baseline") return Variant::Baseline;
  if (name == "random") return Variant::RandomN;
  if (name == "impt") return Variant::ImptN;
  throw UsageError("unknown variant '" + std::string(name) +
                   "' (expected baseline, random or impt)");
}

int default_mask_n(int total_heads) { return (total_heads + 7) / 8; }

int TrainConfig::resolved_mask_n(int total_heads) const {
  if (variant == Variant::Baseline) return 0;
  return mask_n < 0 ? default_mask_n(total_heads) : mask_n;
}

void TrainConfig::validate(int total_heads) const {
  if (max_steps < 0) throw UsageError("max_steps must be >= 0");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (warmup_steps < 1) throw UsageError("warmup_steps must be >= 1");
  if (!(label_smoothing >= 0.0f && label_smoothing < 1.0f)) {
    throw UsageError("label_smoothing must be in [0, 1)");
  }
  if (!(lr_scale >= 0.0f)) throw UsageError("lr_scale must be >= 0");
  if (eval_every < 0) throw UsageError("eval_every must be >= 0");
  if (variant != Variant::Baseline && resolved_mask_n(total_heads) > total_heads) {
    throw UsageError("mask_n " + std::to_string(mask_n) + " exceeds the model's " +
                     std::to_string(total_heads) + " heads");
  }
}

float lr_schedule(int step, int d_model, int warmup) {
  if (step < 1) throw UsageError("lr_schedule: step must be >= 1, got " + std::to_string(step));
  if (warmup < 1) throw UsageError("lr_schedule: warmup must be >= 1");
  const double s = step;
  const double lr = std::pow(static_cast<double>(d_model), -0.5) *
                    std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
  return static_cast<float>(lr);
}

Transformer init_model(const ModelConfig& config, std::uint64_t seed) {
  RngStreams streams(seed);
  return Transformer(config, streams.init);
}

namespace {

void fnv(std::uint64_t& h, std::span<const float> values) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  for (std::size_t i = 0; i < values.size_bytes(); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
}

}  // namespace

std::uint64_t parameter_checksum(const Transformer& model, const TrainState* state) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& p : model.parameters()) fnv(h, p.value.data());
  if (state) {
    for (const auto& m : state->adam_m) fnv(h, m);
    for (const auto& v : state->adam_v) fnv(h, v);
  }
  return h;
}

std::vector<int> sample_heads(Rng& rng, int total_heads, int mask_n) {
  if (mask_n < 0 || mask_n > total_heads) {
    throw UsageError("cannot sample " + std::to_string(mask_n) + " of " +
                     std::to_string(total_heads) + " heads");
  }
  std::vector<int> pool(static_cast<std::size_t>(total_heads));
  std::iota(pool.begin(), pool.end(), 0);
  // Partial Fisher-Yates.
  for (int i = 0; i < mask_n; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(total_heads - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  std::vector<int> out(pool.begin(), pool.begin() + mask_n);
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

class Trainer {
 public:
  Trainer(Transformer& model, const ParallelCorpus& data, const TrainConfig& cfg,
          const StepCallback& on_step)
      : model_(model), data_(data), cfg_(cfg), on_step_(on_step),
        total_(model.config().total_heads()),
        mask_n_(cfg.resolved_mask_n(total_)),
        state_(cfg.seed),
        batches_(make_batches(data.train, cfg.batch_size, cfg.seed, true)) {
    cfg_.validate(total_);
    if (data.train.empty()) throw UsageError("training split is empty");
    for (const auto& p : model_.parameters()) {
      state_.adam_m.emplace_back(p.value.numel(), 0.0f);
      state_.adam_v.emplace_back(p.value.numel(), 0.0f);
    }
  }

  TrainState run() {
    const auto start = std::chrono::steady_clock::now();
    for (int step = 1; step <= cfg_.max_steps; ++step) {
      const Batch batch = batches_.next();
      ++state_.batches;
      std::vector<int> heads;
      switch (cfg_.variant) {
        case Variant::Baseline: break;
        case Variant::RandomN: heads = sample_heads(state_.rng.mask, total_, mask_n_); break;
        case Variant::ImptN: heads = importance_pass(batch); break;
      }
      const MaskSet mask = MaskSet::masking(heads);
      if (mask.count_masked() != mask_n_) {
        throw ContractError("step " + std::to_string(step) + " masked " +
                            std::to_string(mask.count_masked()) + " heads, expected " +
                            std::to_string(mask_n_));
      }
      if (cfg_.variant == Variant::ImptN) {
        ImptStepCheck& check = state_.impt_checks.back();
        check.masked = mask.masked_ids();
        check.checksum_after_pass1 = parameter_checksum(model_, &state_);
      }
      update(step, batch, mask);
    }
    state_.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return std::move(state_);
  }

 private:
  // Pass 1: gradients of this batch's loss with respect to every gate, on a
  // throwaway tape. Dropout replays the masks pass 2 will draw.
  std::vector<int> importance_pass(const Batch& batch) {
    ImptStepCheck check;
    check.checksum_before_pass1 = parameter_checksum(model_, &state_);
    Rng replay = state_.rng.dropout;
    ImportanceOptions opts;
    opts.label_smoothing = cfg_.label_smoothing;
    opts.train = true;
    opts.dropout_rng = &replay;
    ImportanceAccumulator acc(model_.config().layout());
    acc.add(sentence_gate_gradients(model_, batch, MaskSet{}, opts));
    check.top_n = top_n_heads(acc.report("batch", state_.step + 1), mask_n_);
    state_.impt_checks.push_back(check);
    return check.top_n;
  }

  void update(int step, const Batch& batch, const MaskSet& mask) {
    Tape tape;
    ForwardOptions fo;
    fo.train = true;
    fo.mask = &mask;
    fo.label_smoothing = cfg_.label_smoothing;
    fo.reduction = LossReduction::TokenMean;
    fo.dropout_rng = &state_.rng.dropout;
    model_.zero_grad();
    const ForwardResult r = model_.forward(tape, batch, fo);
    const double loss = r.loss.item();
    if (!std::isfinite(loss)) {
      throw NumericError("training diverged at step " + std::to_string(step) +
                         ": loss is " + std::to_string(loss));
    }
    tape.backward(r.loss);

    const float lr = lr_schedule(step, model_.config().d_model, cfg_.warmup_steps) *
                     cfg_.lr_scale;
    adam(step, lr);
    model_.zero_grad();
    state_.step = step;
    ++state_.optimizer_steps;
    state_.running_loss = step == 1 ? loss : 0.98 * state_.running_loss + 0.02 * loss;

    StepRecord rec;
    rec.step = step;
    rec.loss = loss;
    rec.lr = lr;
    rec.masked_heads = mask.masked_ids();
    if (cfg_.eval_every > 0 && !data_.dev.empty() &&
        (step % cfg_.eval_every == 0 || step == cfg_.max_steps)) {
      rec.dev_metric = token_accuracy(model_, data_.dev, nullptr);
    }
    if (on_step_) on_step_(rec);
    state_.log.push_back(std::move(rec));
  }

  void adam(int step, float lr) {
    const float b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2, eps = cfg_.adam_eps;
    const float c1 = 1.0f - static_cast<float>(std::pow(b1, step));
    const float c2 = 1.0f - static_cast<float>(std::pow(b2, step));
    const auto& params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor p = params[i].value;
      const auto g = p.grad();
      auto value = p.mutable_data();
      auto& m = state_.adam_m[i];
      auto& v = state_.adam_v[i];
      for (std::size_t j = 0; j < value.size(); ++j) {
        const float gj = g.empty() ? 0.0f : g[j];
        m[j] = b1 * m[j] + (1.0f - b1) * gj;
        v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
        const float mhat = m[j] / c1;
        const float vhat = v[j] / c2;
        value[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  Transformer& model_;
  const ParallelCorpus& data_;
  TrainConfig cfg_;
  const StepCallback& on_step_;
  int total_;
  int mask_n_;
  TrainState state_;
  BatchIterator batches_;
};

void require_variant(const TrainConfig& cfg, Variant v, const char* fn) {
  if (cfg.variant != v) {
    throw UsageError(std::string(fn) + " called with variant " +
                     std::string(variant_name(cfg.variant)));
  }
}

}  // namespace

TrainState train_baseline(Transformer& model, const ParallelCorpus& data,
                          const TrainConfig& cfg, const StepCallback& on_step) {
  require_variant(cfg, Variant::Baseline, "train_baseline");
  return Trainer(model, data, cfg, on_step).run();
}

TrainState train_random_mask(Transformer& model, const ParallelCorpus& data,
                             const TrainConfig& cfg, const StepCallback& on_step) {
  require_variant(cfg, Variant::RandomN, "train_random_mask");
  return Trainer(model, data, cfg, on_step).run();
}

TrainState train_importance_mask(Transformer& model, const ParallelCorpus& data,
                                 const TrainConfig& cfg, const StepCallback& on_step) {
  require_variant(cfg, Variant::ImptN, "train_importance_mask");
  return Trainer(model, data, cfg, on_step).run();
}

TrainState train(Transformer& model, const ParallelCorpus& data,
                 const TrainConfig& cfg, const StepCallback& on_step) {
  switch (cfg.variant) {
    case Variant::Baseline: return train_baseline(model, data, cfg, on_step);
    case Variant::RandomN: return train_random_mask(model, data, cfg, on_step);
    case Variant::ImptN: return train_importance_mask(model, data, cfg, on_step);
  }
  throw UsageError("unknown variant");
}

void write_training_log(const TrainState& state, Variant variant,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "step,variant,loss,lr,dev_metric,masked_heads\n";
  for (const auto& r : state.log) {
    out << r.step << ',' << variant_name(variant) << ',' << format_number(r.loss) << ','
        << format_number(r.lr) << ','
        << (r.dev_metric ? format_number(*r.dev_metric) : "") << ','
        << join_head_ids(r.masked_heads) << '\n';
  }
}

}  // namespace headmask
