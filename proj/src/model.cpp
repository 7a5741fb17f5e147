#include "headmask/model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "headmask/errors.hpp"
#include "headmask/loss.hpp"

namespace headmask {

// ---- heads and masks --------------------------------------------------------

std::string_view attn_type_name(AttnType type) {
  switch (type) {
    case AttnType::EncSelf: return "enc_self";
    case AttnType::DecSelf: return "dec_self";
    case AttnType::EncDec: return "enc_dec";
  }
  return "enc_self";
}

AttnType parse_attn_type(std::string_view name) {
  if (name == "enc_self") return AttnType::EncSelf;
  if (name == "dec_self") return AttnType::DecSelf;
  if (name == "enc_dec") return AttnType::EncDec;
  throw UsageError("unknown attention type '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw UsageError("model config: " + msg); };
  if (layers < 1) fail("layers must be >= 1");
  if (heads_per_layer < 1) fail("heads_per_layer must be >= 1");
  if (d_model < 1 || d_model % heads_per_layer != 0) {
    fail("d_model (" + std::to_string(d_model) +
         ") must be a positive multiple of heads_per_layer (" +
         std::to_string(heads_per_layer) + ")");
  }
  if (d_ff < 1) fail("d_ff must be >= 1");
  if (vocab_src < kNumReserved + 1 || vocab_tgt < kNumReserved + 1) {
    fail("vocabularies need at least one non-reserved token");
  }
  if (!(dropout >= 0.0f && dropout < 1.0f)) fail("dropout must be in [0, 1)");
  if (max_len < 2) fail("max_len must be >= 2");
}

int count_heads(const ModelConfig& config) { return config.total_heads(); }

int HeadId::flat(const HeadLayout& config) const {
  if (layer < 0 || layer >= config.layers || head < 0 ||
      head >= config.heads_per_layer) {
    throw UsageError("head (" + std::string(attn_type_name(type)) + ", " +
                     std::to_string(layer) + ", " + std::to_string(head) +
                     ") outside the model");
  }
  return static_cast<int>(type) * config.layers * config.heads_per_layer +
         layer * config.heads_per_layer + head;
}

HeadId HeadId::from_flat(int flat, const HeadLayout& config) {
  if (flat < 0 || flat >= config.total()) {
    throw UsageError("flat head id " + std::to_string(flat) + " outside [0, " +
                     std::to_string(config.total()) + ")");
  }
  const int per_type = config.layers * config.heads_per_layer;
  return HeadId{static_cast<AttnType>(flat / per_type),
                (flat % per_type) / config.heads_per_layer,
                flat % config.heads_per_layer};
}

MaskSet MaskSet::masking(std::span<const int> flat_ids) {
  MaskSet m;
  for (int id : flat_ids) m.mask(id);
  return m;
}

void MaskSet::set_gate(int flat_id, int gate) {
  if (gate != 0 && gate != 1) {
    throw UsageError("gate values are 0 or 1, got " + std::to_string(gate));
  }
  if (flat_id < 0) throw UsageError("negative head id " + std::to_string(flat_id));
  gates_[flat_id] = gate;
}

int MaskSet::gate(int flat_id) const {
  auto it = gates_.find(flat_id);
  return it == gates_.end() ? 1 : it->second;
}

int MaskSet::count_masked() const {
  return static_cast<int>(std::count_if(gates_.begin(), gates_.end(),
                                        [](const auto& kv) { return kv.second == 0; }));
}

std::vector<int> MaskSet::masked_ids() const {
  std::vector<int> out;
  for (const auto& [id, g] : gates_) {
    if (g == 0) out.push_back(id);
  }
  return out;
}

std::string join_head_ids(std::span<const int> flat_ids) {
  std::string out;
  for (std::size_t i = 0; i < flat_ids.size(); ++i) {
    if (i) out += ';';
    out += std::to_string(flat_ids[i]);
  }
  return out;
}

std::vector<int> parse_head_ids(std::string_view text) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find_first_of(";,", pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view item = text.substr(pos, end - pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) {
      int v = 0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || p != item.data() + item.size()) {
        throw UsageError("invalid head id '" + std::string(item) + "'");
      }
      out.push_back(v);
    }
    pos = end + 1;
  }
  return out;
}

// ---- construction -----------------------------------------------------------

namespace {

Tensor xavier(Rng& rng, int fan_in, int fan_out) {
  const float a = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  std::vector<float> v(static_cast<std::size_t>(fan_in) * fan_out);
  for (float& x : v) x = rng.uniform(-a, a);
  return Tensor::from_data({fan_in, fan_out}, std::move(v), true);
}

Tensor zeros_param(int n) { return Tensor::zeros({n}, true); }
Tensor ones_param(int n) { return Tensor::full({n}, 1.0f, true); }

Tensor normal_embedding(Rng& rng, int vocab, int d) {
  const float std_dev = 1.0f / std::sqrt(static_cast<float>(d));
  std::vector<float> v(static_cast<std::size_t>(vocab) * d);
  for (float& x : v) x = rng.normal() * std_dev;
  return Tensor::from_data({vocab, d}, std::move(v), true);
}

AttentionWeights make_attention(Rng& rng, int d) {
  AttentionWeights w;
  w.wq = xavier(rng, d, d);
  w.bq = zeros_param(d);
  w.wk = xavier(rng, d, d);
  w.bk = zeros_param(d);
  w.wv = xavier(rng, d, d);
  w.bv = zeros_param(d);
  w.wo = xavier(rng, d, d);
  w.bo = zeros_param(d);
  return w;
}

NormWeights make_norm(int d) { return {ones_param(d), zeros_param(d)}; }

FeedForwardWeights make_ffn(Rng& rng, int d, int d_ff) {
  FeedForwardWeights w;
  w.w1 = xavier(rng, d, d_ff);
  w.b1 = zeros_param(d_ff);
  w.w2 = xavier(rng, d_ff, d);
  w.b2 = zeros_param(d);
  return w;
}

void push_attention(std::vector<NamedParameter>& out, const std::string& p,
                    const AttentionWeights& w) {
  out.push_back({p + ".wq", w.wq});
  out.push_back({p + ".bq", w.bq});
  out.push_back({p + ".wk", w.wk});
  out.push_back({p + ".bk", w.bk});
  out.push_back({p + ".wv", w.wv});
  out.push_back({p + ".bv", w.bv});
  out.push_back({p + ".wo", w.wo});
  out.push_back({p + ".bo", w.bo});
}

void push_norm(std::vector<NamedParameter>& out, const std::string& p,
               const NormWeights& w) {
  out.push_back({p + ".gamma", w.gamma});
  out.push_back({p + ".beta", w.beta});
}

void push_ffn(std::vector<NamedParameter>& out, const std::string& p,
              const FeedForwardWeights& w) {
  out.push_back({p + ".w1", w.w1});
  out.push_back({p + ".b1", w.b1});
  out.push_back({p + ".w2", w.w2});
  out.push_back({p + ".b2", w.b2});
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(tape, matmul(tape, x, w), b);
}

}  // namespace

Transformer::Transformer(ModelConfig config, Rng& init_rng)
    : config_(std::move(config)) {
  config_.validate();
  const int d = config_.d_model;
  src_embed_ = normal_embedding(init_rng, config_.vocab_src, d);
  tgt_embed_ = normal_embedding(init_rng, config_.vocab_tgt, d);
  for (int l = 0; l < config_.layers; ++l) {
    EncoderLayerWeights e;
    e.self_attn = make_attention(init_rng, d);
    e.norm1 = make_norm(d);
    e.ffn = make_ffn(init_rng, d, config_.d_ff);
    e.norm2 = make_norm(d);
    encoder_.push_back(std::move(e));
  }
  for (int l = 0; l < config_.layers; ++l) {
    DecoderLayerWeights dl;
    dl.self_attn = make_attention(init_rng, d);
    dl.norm1 = make_norm(d);
    dl.cross_attn = make_attention(init_rng, d);
    dl.norm2 = make_norm(d);
    dl.ffn = make_ffn(init_rng, d, config_.d_ff);
    dl.norm3 = make_norm(d);
    decoder_.push_back(std::move(dl));
  }
  out_w_ = xavier(init_rng, d, config_.vocab_tgt);
  out_b_ = zeros_param(config_.vocab_tgt);

  positions_.resize(static_cast<std::size_t>(config_.max_len) * d);
  for (int pos = 0; pos < config_.max_len; ++pos) {
    for (int i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      positions_[static_cast<std::size_t>(pos) * d + i] =
          static_cast<float>(std::sin(pos * freq));
      if (i + 1 < d) {
        positions_[static_cast<std::size_t>(pos) * d + i + 1] =
            static_cast<float>(std::cos(pos * freq));
      }
    }
  }

  params_.push_back({"src_embed", src_embed_});
  params_.push_back({"tgt_embed", tgt_embed_});
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    push_attention(params_, p + ".self", encoder_[l].self_attn);
    push_norm(params_, p + ".norm1", encoder_[l].norm1);
    push_ffn(params_, p + ".ffn", encoder_[l].ffn);
    push_norm(params_, p + ".norm2", encoder_[l].norm2);
  }
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    push_attention(params_, p + ".self", decoder_[l].self_attn);
    push_norm(params_, p + ".norm1", decoder_[l].norm1);
    push_attention(params_, p + ".cross", decoder_[l].cross_attn);
    push_norm(params_, p + ".norm2", decoder_[l].norm2);
    push_ffn(params_, p + ".ffn", decoder_[l].ffn);
    push_norm(params_, p + ".norm3", decoder_[l].norm3);
  }
  params_.push_back({"out.w", out_w_});
  params_.push_back({"out.b", out_b_});
}

Transformer Transformer::clone() const {
  Rng scratch(0);
  Transformer copy(config_, scratch);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto dst = copy.params_[i].value.mutable_data();
    const auto src = params_[i].value.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

std::size_t Transformer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void Transformer::zero_grad() const {
  for (const auto& p : params_) {
    Tensor t = p.value;
    t.zero_grad();
  }
}

// ---- forward ----------------------------------------------------------------

Transformer::GateSet Transformer::make_gates(Tape& tape, int batch,
                                             const MaskSet* mask,
                                             std::span<const float> gate_values) const {
  const int heads = config_.heads_per_layer;
  if (!gate_values.empty() &&
      gate_values.size() != static_cast<std::size_t>(config_.total_heads())) {
    throw UsageError("expected " + std::to_string(config_.total_heads()) +
                     " gate values, got " + std::to_string(gate_values.size()));
  }
  GateSet set;
  for (int type = 0; type < kNumAttnTypes; ++type) {
    for (int l = 0; l < config_.layers; ++l) {
      std::vector<float> open(static_cast<std::size_t>(heads), 1.0f);
      if (!gate_values.empty()) {
        for (int h = 0; h < heads; ++h) {
          open[h] = gate_values[HeadId{static_cast<AttnType>(type), l, h}.flat(config_.layout())];
        }
      } else if (mask) {
        int active = 0;
        for (int h = 0; h < heads; ++h) {
          const int flat = HeadId{static_cast<AttnType>(type), l, h}.flat(config_.layout());
          open[h] = static_cast<float>(mask->gate(flat));
          active += mask->gate(flat);
        }
        if (config_.rescale_heads && active > 0 && active < heads) {
          const float s = static_cast<float>(heads) / static_cast<float>(active);
          for (float& g : open) g *= s;
        }
      }
      std::vector<float> values(static_cast<std::size_t>(batch) * heads);
      for (int b = 0; b < batch; ++b) {
        std::copy(open.begin(), open.end(), values.begin() + b * heads);
      }
      set.gates.push_back(
          Tensor::from_data({batch, heads}, std::move(values), tape.recording()));
    }
  }
  set.contexts.resize(set.gates.size());
  return set;
}

void Transformer::check_lengths(const Batch& batch) const {
  if (batch.size < 1) throw UsageError("empty batch");
  if (batch.src_len > config_.max_len || batch.tgt_len > config_.max_len) {
    throw UsageError("sequence length " +
                     std::to_string(std::max(batch.src_len, batch.tgt_len)) +
                     " exceeds max_len " + std::to_string(config_.max_len));
  }
}

Tensor Transformer::embed(Tape& tape, const Tensor& table,
                          std::span<const int> ids, int batch, int len,
                          bool train, Rng* rng) const {
  const int d = config_.d_model;
  Tensor x = embedding(tape, table, ids, {batch, len});
  x = scale(tape, x, std::sqrt(static_cast<float>(d)));
  Tensor pe = Tensor::from_data(
      {len, d}, std::vector<float>(positions_.begin(),
                                   positions_.begin() + static_cast<std::ptrdiff_t>(len) * d));
  x = add(tape, x, pe);
  if (train && config_.dropout > 0.0f) x = dropout(tape, x, config_.dropout, *rng, true);
  return x;
}

Tensor gated_multihead_attention(Tape& tape, const AttentionWeights& w,
                                 const Tensor& query, const Tensor& memory,
                                 std::span<const unsigned char> keep,
                                 const Tensor& gates, int heads,
                                 const AttentionOptions& options) {
  const int batch = query.dim(0);
  const int lq = query.dim(1);
  const int lk = memory.dim(1);
  const int d = query.dim(2);
  if (heads < 1 || d % heads != 0) {
    throw UsageError("d_model " + std::to_string(d) + " is not divisible into " +
                     std::to_string(heads) + " heads");
  }
  const int dk = d / heads;
  if (gates.rank() != 2 || gates.dim(0) != batch || gates.dim(1) != heads) {
    throw UsageError("attention layer has " + std::to_string(heads) +
                     " heads but received gates " + shape_str(gates.shape()));
  }

  auto split_heads = [&](const Tensor& x, int len) {
    return transpose(tape, reshape(tape, x, {batch, len, heads, dk}), 1, 2);
  };
  Tensor q = split_heads(linear(tape, query, w.wq, w.bq), lq);
  Tensor k = split_heads(linear(tape, memory, w.wk, w.bk), lk);
  Tensor v = split_heads(linear(tape, memory, w.wv, w.bv), lk);

  Tensor scores = scale(tape, matmul(tape, q, transpose(tape, k, 2, 3)),
                        1.0f / std::sqrt(static_cast<float>(dk)));
  Tensor probs = masked_softmax(tape, scores, keep);
  if (options.train && options.dropout > 0.0f) {
    probs = dropout(tape, probs, options.dropout, *options.rng, true);
  }
  Tensor ctx = matmul(tape, probs, v);  // [batch, heads, lq, dk]
  if (options.context) *options.context = ctx;
  Tensor gated = gate_heads(tape, ctx, gates);
  Tensor merged = reshape(tape, transpose(tape, gated, 1, 2), {batch, lq, d});
  return linear(tape, merged, w.wo, w.bo);
}

Tensor Transformer::attention(Tape& tape, const AttentionWeights& w,
                              const Tensor& query, const Tensor& memory,
                              std::span<const unsigned char> keep,
                              const Tensor& gates, Tensor* context, bool train,
                              Rng* rng) const {
  AttentionOptions opts;
  opts.dropout = config_.dropout;
  opts.train = train;
  opts.rng = rng;
  opts.context = context;
  return gated_multihead_attention(tape, w, query, memory, keep, gates,
                                   config_.heads_per_layer, opts);
}

namespace {

Tensor residual_norm(Tape& tape, const Tensor& x, const Tensor& sublayer,
                     const NormWeights& norm, float p, bool train, Rng* rng) {
  Tensor s = train && p > 0.0f ? dropout(tape, sublayer, p, *rng, true) : sublayer;
  return layer_norm(tape, add(tape, x, s), norm.gamma, norm.beta);
}

Tensor feed_forward(Tape& tape, const Tensor& x, const FeedForwardWeights& w) {
  return linear(tape, relu(tape, linear(tape, x, w.w1, w.b1)), w.w2, w.b2);
}

}  // namespace

Tensor Transformer::encode(Tape& tape, const Batch& batch, GateSet& gates,
                           bool train, Rng* rng) const {
  const int b = batch.size;
  const int s = batch.src_len;
  std::vector<unsigned char> keep(static_cast<std::size_t>(b) * s * s);
  for (int r = 0; r < b; ++r) {
    for (int q = 0; q < s; ++q) {
      for (int k = 0; k < s; ++k) {
        keep[(static_cast<std::size_t>(r) * s + q) * s + k] = batch.src_mask[r * s + k];
      }
    }
  }
  Tensor x = embed(tape, src_embed_, batch.src, b, s, train, rng);
  const std::size_t base = static_cast<std::size_t>(AttnType::EncSelf) * config_.layers;
  for (int l = 0; l < config_.layers; ++l) {
    const auto& w = encoder_[static_cast<std::size_t>(l)];
    Tensor a = attention(tape, w.self_attn, x, x, keep, gates.gates[base + l],
                         &gates.contexts[base + l], train, rng);
    x = residual_norm(tape, x, a, w.norm1, config_.dropout, train, rng);
    x = residual_norm(tape, x, feed_forward(tape, x, w.ffn), w.norm2,
                      config_.dropout, train, rng);
  }
  return x;
}

Tensor Transformer::decode(Tape& tape, const Batch& batch,
                           std::span<const int> tgt_ids,
                           std::span<const unsigned char> tgt_mask, int tgt_len,
                           const Tensor& memory, GateSet& gates, bool train,
                           Rng* rng) const {
  const int b = batch.size;
  const int s = batch.src_len;
  const int t = tgt_len;
  std::vector<unsigned char> self_keep(static_cast<std::size_t>(b) * t * t, 0);
  std::vector<unsigned char> cross_keep(static_cast<std::size_t>(b) * t * s);
  for (int r = 0; r < b; ++r) {
    for (int q = 0; q < t; ++q) {
      for (int k = 0; k <= q; ++k) {
        self_keep[(static_cast<std::size_t>(r) * t + q) * t + k] = tgt_mask[r * t + k];
      }
      for (int k = 0; k < s; ++k) {
        cross_keep[(static_cast<std::size_t>(r) * t + q) * s + k] = batch.src_mask[r * s + k];
      }
    }
  }
  Tensor y = embed(tape, tgt_embed_, tgt_ids, b, t, train, rng);
  const std::size_t self_base = static_cast<std::size_t>(AttnType::DecSelf) * config_.layers;
  const std::size_t cross_base = static_cast<std::size_t>(AttnType::EncDec) * config_.layers;
  for (int l = 0; l < config_.layers; ++l) {
    const auto& w = decoder_[static_cast<std::size_t>(l)];
    Tensor a = attention(tape, w.self_attn, y, y, self_keep,
                         gates.gates[self_base + l], &gates.contexts[self_base + l],
                         train, rng);
    y = residual_norm(tape, y, a, w.norm1, config_.dropout, train, rng);
    Tensor c = attention(tape, w.cross_attn, y, memory, cross_keep,
                         gates.gates[cross_base + l],
                         &gates.contexts[cross_base + l], train, rng);
    y = residual_norm(tape, y, c, w.norm2, config_.dropout, train, rng);
    y = residual_norm(tape, y, feed_forward(tape, y, w.ffn), w.norm3,
                      config_.dropout, train, rng);
  }
  return y;
}

Tensor Transformer::project(Tape& tape, const Tensor& states) const {
  const int rows = states.dim(0) * states.dim(1);
  return linear(tape, reshape(tape, states, {rows, config_.d_model}), out_w_, out_b_);
}

ForwardResult Transformer::forward(Tape& tape, const Batch& batch,
                                   const ForwardOptions& options) const {
  check_lengths(batch);
  const bool train = options.train && config_.dropout > 0.0f;
  if (train && options.dropout_rng == nullptr) {
    throw ContractError("train-mode forward needs a dropout RNG");
  }
  GateSet gates = make_gates(tape, batch.size, options.mask, options.gate_values);
  Tensor memory = encode(tape, batch, gates, train, options.dropout_rng);
  Tensor states = decode(tape, batch, batch.tgt_in, batch.tgt_mask, batch.tgt_len,
                         memory, gates, train, options.dropout_rng);
  ForwardResult result;
  result.logits = project(tape, states);
  if (options.reduction == LossReduction::TokenMean) {
    result.loss = label_smoothed_loss(tape, result.logits, batch.tgt_out,
                                      options.label_smoothing);
  } else {
    result.loss = sentence_summed_loss(tape, result.logits, batch.tgt_out,
                                       batch.size, options.label_smoothing);
  }
  result.gates = std::move(gates.gates);
  result.head_contexts = std::move(gates.contexts);
  return result;
}

std::vector<std::vector<int>> Transformer::greedy_decode(const Batch& batch,
                                                         const MaskSet* mask,
                                                         int max_steps) const {
  check_lengths(batch);
  max_steps = std::min(max_steps, config_.max_len);
  Tape tape(false);
  GateSet gates = make_gates(tape, batch.size, mask);
  Tensor memory = encode(tape, batch, gates, false, nullptr);
  const int b = batch.size;
  std::vector<std::vector<int>> hyps(static_cast<std::size_t>(b));
  std::vector<bool> done(static_cast<std::size_t>(b), false);
  std::vector<int> prefix(static_cast<std::size_t>(b), kBosId);
  const int vocab = config_.vocab_tgt;
  for (int t = 1; t <= max_steps; ++t) {
    std::vector<unsigned char> prefix_mask(prefix.size(), 1);
    Tensor states = decode(tape, batch, prefix, prefix_mask, t, memory, gates,
                           false, nullptr);
    Tensor logits = project(tape, states);  // [b * t, vocab]
    const auto lv = logits.data();
    std::vector<int> next(static_cast<std::size_t>(b) * (t + 1));
    bool all_done = true;
    for (int r = 0; r < b; ++r) {
      const float* row = lv.data() + (static_cast<std::size_t>(r) * t + (t - 1)) * vocab;
      const int best = static_cast<int>(std::max_element(row, row + vocab) - row);
      if (!done[r]) {
        if (best == kEosId) {
          done[r] = true;
        } else {
          hyps[r].push_back(best);
        }
      }
      all_done = all_done && done[r];
      std::copy(prefix.begin() + static_cast<std::ptrdiff_t>(r) * t,
                prefix.begin() + static_cast<std::ptrdiff_t>(r + 1) * t,
                next.begin() + static_cast<std::ptrdiff_t>(r) * (t + 1));
      next[static_cast<std::size_t>(r) * (t + 1) + t] = best;
    }
    if (all_done) break;
    prefix = std::move(next);
  }
  return hyps;
}

std::vector<std::vector<float>> gate_gradients(const ForwardResult& result,
                                               const ModelConfig& config) {
  if (result.gates.empty()) return {};
  const int batch = result.gates.front().dim(0);
  const int heads = config.heads_per_layer;
  std::vector<std::vector<float>> out(
      static_cast<std::size_t>(batch),
      std::vector<float>(static_cast<std::size_t>(config.total_heads()), 0.0f));
  for (std::size_t g = 0; g < result.gates.size(); ++g) {
    const auto grad = result.gates[g].grad();
    if (grad.empty()) continue;
    for (int r = 0; r < batch; ++r) {
      for (int h = 0; h < heads; ++h) {
        out[r][g * heads + h] = grad[static_cast<std::size_t>(r) * heads + h];
      }
    }
  }
  return out;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr int kCheckpointVersion = 1;

std::string format_float(float v) {
  char buf[32];
  // Shortest text that reads back as the same float.
  for (int precision = 6; precision <= 9; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, static_cast<double>(v));
    if (std::strtof(buf, nullptr) == v) break;
  }
  return buf;
}

int parse_int(const std::string& key, const std::string& value) {
  int v = 0;
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size()) {
    throw UsageError("invalid integer for " + key + ": '" + value + "'");
  }
  return v;
}

float parse_float(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const float v = std::strtof(value.c_str(), &end);
  if (value.empty() || end != value.c_str() + value.size()) {
    throw UsageError("invalid number for " + key + ": '" + value + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw UsageError("invalid boolean for " + key + ": '" + value + "'");
}

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

}  // namespace

std::map<std::string, std::string> model_config_entries(const ModelConfig& c) {
  return {
      {"layers", std::to_string(c.layers)},
      {"heads_per_layer", std::to_string(c.heads_per_layer)},
      {"d_model", std::to_string(c.d_model)},
      {"d_ff", std::to_string(c.d_ff)},
      {"vocab_src", std::to_string(c.vocab_src)},
      {"vocab_tgt", std::to_string(c.vocab_tgt)},
      {"dropout", format_float(c.dropout)},
      {"max_len", std::to_string(c.max_len)},
      {"rescale_heads", c.rescale_heads ? "1" : "0"},
  };
}

bool is_model_config_key(const std::string& key) {
  return model_config_entries(ModelConfig{}).count(key) > 0;
}

void apply_model_config_entry(ModelConfig& c, const std::string& key,
                              const std::string& value) {
  if (key == "layers") c.layers = parse_int(key, value);
  else if (key == "heads_per_layer") c.heads_per_layer = parse_int(key, value);
  else if (key == "d_model") c.d_model = parse_int(key, value);
  else if (key == "d_ff") c.d_ff = parse_int(key, value);
  else if (key == "vocab_src") c.vocab_src = parse_int(key, value);
  else if (key == "vocab_tgt") c.vocab_tgt = parse_int(key, value);
  else if (key == "dropout") c.dropout = parse_float(key, value);
  else if (key == "max_len") c.max_len = parse_int(key, value);
  else if (key == "rescale_heads") c.rescale_heads = parse_bool(key, value);
  else throw UsageError("unknown model config key '" + key + "'");
}

void save_checkpoint(const Transformer& model,
                     const std::filesystem::path& manifest) {
  std::filesystem::path data_path = manifest;
  data_path.replace_extension(".bin");
  std::ofstream meta(manifest, std::ios::binary);
  std::ofstream data(data_path, std::ios::binary);
  if (!meta || !data) {
    throw DataError("cannot write checkpoint " + manifest.string());
  }
  meta << "format_version=" << kCheckpointVersion << '\n';
  meta << "data_file=" << data_path.filename().string() << '\n';
  for (const auto& [k, v] : model_config_entries(model.config())) {
    meta << "config." << k << '=' << v << '\n';
  }
  const auto& params = model.parameters();
  meta << "num_params=" << params.size() << '\n';
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    std::string dims;
    for (std::size_t j = 0; j < p.value.shape().size(); ++j) {
      dims += (j ? "," : "") + std::to_string(p.value.shape()[j]);
    }
    const std::size_t bytes = p.value.numel() * sizeof(float);
    meta << "param." << i << ".name=" << p.name << '\n';
    meta << "param." << i << ".shape=" << dims << '\n';
    meta << "param." << i << ".offset=" << offset << '\n';
    meta << "param." << i << ".bytes=" << bytes << '\n';
    for (float f : p.value.data()) {
      const std::uint32_t le = to_le(std::bit_cast<std::uint32_t>(f));
      data.write(reinterpret_cast<const char*>(&le), sizeof le);
    }
    offset += bytes;
  }
  if (!meta || !data) throw DataError("short write for checkpoint " + manifest.string());
}

Transformer load_checkpoint(const std::filesystem::path& manifest) {
  std::ifstream meta(manifest, std::ios::binary);
  if (!meta) throw DataError("cannot open checkpoint manifest " + manifest.string());
  std::map<std::string, std::string> kv;
  std::string line;
  int line_no = 0;
  while (std::getline(meta, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError(manifest.string() + ":" + std::to_string(line_no) +
                      ": expected key=value");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) {
      throw DataError("checkpoint " + manifest.string() + " lacks '" + key + "'");
    }
    return it->second;
  };
  if (need("format_version") != std::to_string(kCheckpointVersion)) {
    throw DataError("unsupported checkpoint format_version " + need("format_version"));
  }
  ModelConfig config;
  for (const auto& [k, v] : model_config_entries(ModelConfig{})) {
    (void)v;
    apply_model_config_entry(config, k, need("config." + k));
  }
  Rng scratch(0);
  Transformer model(config, scratch);

  const auto data_path = manifest.parent_path() / need("data_file");
  std::ifstream data(data_path, std::ios::binary);
  if (!data) throw DataError("cannot open checkpoint data " + data_path.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(data)),
                         std::istreambuf_iterator<char>());

  const auto& params = model.parameters();
  if (parse_int("num_params", need("num_params")) != static_cast<int>(params.size())) {
    throw DataError("checkpoint has " + need("num_params") +
                    " parameters but the configured model has " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string prefix = "param." + std::to_string(i);
    Tensor p = params[i].value;
    if (need(prefix + ".name") != params[i].name) {
      throw DataError("checkpoint parameter " + std::to_string(i) + " is '" +
                      need(prefix + ".name") + "', expected '" + params[i].name + "'");
    }
    const std::vector<int> dims = parse_head_ids(need(prefix + ".shape"));
    if (Shape(dims) != p.shape()) {
      throw DataError("checkpoint shape " + need(prefix + ".shape") + " for " +
                      params[i].name + " does not match model " + shape_str(p.shape()));
    }
    const std::size_t offset = std::stoull(need(prefix + ".offset"));
    const std::size_t bytes = p.numel() * sizeof(float);
    if (std::stoull(need(prefix + ".bytes")) != bytes || offset + bytes > blob.size()) {
      throw DataError("checkpoint data for " + params[i].name + " is truncated");
    }
    auto dst = p.mutable_data();
    for (std::size_t j = 0; j < p.numel(); ++j) {
      std::uint32_t le = 0;
      std::memcpy(&le, blob.data() + offset + j * sizeof le, sizeof le);
      dst[j] = std::bit_cast<float>(to_le(le));
    }
  }
  return model;
}

}  // namespace headmask
