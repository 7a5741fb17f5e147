#pragma once

#include <compare>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "headmask/data.hpp"
#include "headmask/rng.hpp"
#include "headmask/tensor.hpp"

namespace headmask {

enum class AttnType { EncSelf = 0, DecSelf = 1, EncDec = 2 };
inline constexpr int kNumAttnTypes = 3;

std::string_view attn_type_name(AttnType type);  // enc_self, dec_self, enc_dec
AttnType parse_attn_type(std::string_view name);

// Shape of the head grid: kNumAttnTypes x layers x heads_per_layer.
struct HeadLayout {
  int layers = 0;
  int heads_per_layer = 0;

  int total() const { return kNumAttnTypes * layers * heads_per_layer; }
  bool operator==(const HeadLayout&) const = default;
};

struct ModelConfig {
  int layers = 2;
  int heads_per_layer = 4;
  int d_model = 64;
  int d_ff = 128;
  int vocab_src = 64;
  int vocab_tgt = 64;
  float dropout = 0.1f;
  int max_len = 64;
  // Scale surviving heads of a layer by heads / unmasked when some are masked.
  bool rescale_heads = false;

  void validate() const;
  int total_heads() const { return kNumAttnTypes * layers * heads_per_layer; }
  int head_dim() const { return d_model / heads_per_layer; }
  HeadLayout layout() const { return {layers, heads_per_layer}; }

  bool operator==(const ModelConfig&) const = default;
};

int count_heads(const ModelConfig& config);

struct HeadId {
  AttnType type = AttnType::EncSelf;
  int layer = 0;
  int head = 0;

  // flat = type * layers * heads + layer * heads + head
  int flat(const HeadLayout& layout) const;
  static HeadId from_flat(int flat, const HeadLayout& layout);

  auto operator<=>(const HeadId&) const = default;
};

// Gate assignment over heads; absent entries are open (gate 1).
class MaskSet {
 public:
  MaskSet() = default;
  static MaskSet masking(std::span<const int> flat_ids);

  void set_gate(int flat_id, int gate);
  void mask(int flat_id) { set_gate(flat_id, 0); }
  int gate(int flat_id) const;
  bool masked(int flat_id) const { return gate(flat_id) == 0; }
  int count_masked() const;
  // Ascending flat ids with gate 0.
  std::vector<int> masked_ids() const;

 private:
  std::map<int, int> gates_;
};

// Rendered as "3;7;12"; the empty set is "".
std::string join_head_ids(std::span<const int> flat_ids);
std::vector<int> parse_head_ids(std::string_view text);

enum class LossReduction {
  // Mean over all non-pad target tokens of the batch.
  TokenMean,
  // Sum over sentences of each sentence's own token mean, so the gradient
  // with respect to a per-sentence gate is d L(x) / d gate for that sentence.
  SentenceSum,
};

struct ForwardOptions {
  bool train = false;
  const MaskSet* mask = nullptr;
  float label_smoothing = 0.0f;
  LossReduction reduction = LossReduction::TokenMean;
  // Required when train is set and dropout > 0.
  Rng* dropout_rng = nullptr;
  // Continuous gate value per flat head id, replacing `mask` when non-empty.
  std::span<const float> gate_values;
};

struct ForwardResult {
  Tensor loss;
  // [batch * tgt_len, vocab_tgt]
  Tensor logits;
  // One [batch, heads] gate tensor per (type, layer), indexed
  // type * layers + layer. Leaves of the tape, so they carry d loss / d gate.
  std::vector<Tensor> gates;
  // Per-head attention context before gating, [batch, heads, q_len, head_dim],
  // same indexing as gates.
  std::vector<Tensor> head_contexts;
};

struct NamedParameter {
  std::string name;
  Tensor value;
};

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct AttentionOptions {
  float dropout = 0.0f;
  bool train = false;
  Rng* rng = nullptr;
  // Receives the per-head context before gating, [batch, heads, q_len, head_dim].
  Tensor* context = nullptr;
};

// query [batch, q_len, d], memory [batch, k_len, d], keep [batch, q_len, k_len]
// (1 = attend; causal and padding masks are both expressed here), gates
// [batch, heads]. Each head's context is scaled by its gate before the heads
// are concatenated and projected.
Tensor gated_multihead_attention(Tape& tape, const AttentionWeights& w,
                                 const Tensor& query, const Tensor& memory,
                                 std::span<const unsigned char> keep,
                                 const Tensor& gates, int heads,
                                 const AttentionOptions& options = {});

struct NormWeights {
  Tensor gamma, beta;
};

struct FeedForwardWeights {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayerWeights {
  AttentionWeights self_attn;
  NormWeights norm1;
  FeedForwardWeights ffn;
  NormWeights norm2;
};

struct DecoderLayerWeights {
  AttentionWeights self_attn;
  NormWeights norm1;
  AttentionWeights cross_attn;
  NormWeights norm2;
  FeedForwardWeights ffn;
  NormWeights norm3;
};

// Post-norm encoder-decoder transformer with sinusoidal positions. Each head
// output is multiplied by its gate before the heads are merged.
class Transformer {
 public:
  Transformer(ModelConfig config, Rng& init_rng);

  const ModelConfig& config() const { return config_; }
  // Fixed order; names are stable and used by checkpoints.
  const std::vector<NamedParameter>& parameters() const { return params_; }
  // Deep copy; the default copy shares parameter storage.
  Transformer clone() const;
  std::size_t parameter_count() const;
  void zero_grad() const;

  // Teacher-forced loss over the batch.
  ForwardResult forward(Tape& tape, const Batch& batch,
                        const ForwardOptions& options) const;

  // Greedy decoding, one hypothesis per batch row (without </s>).
  std::vector<std::vector<int>> greedy_decode(const Batch& batch,
                                              const MaskSet* mask,
                                              int max_steps) const;

 private:
  struct GateSet {
    std::vector<Tensor> gates;
    std::vector<Tensor> contexts;
  };

  GateSet make_gates(Tape& tape, int batch, const MaskSet* mask,
                     std::span<const float> gate_values = {}) const;
  Tensor encode(Tape& tape, const Batch& batch, GateSet& gates, bool train,
                Rng* rng) const;
  // Returns decoder states [batch, tgt_len, d_model] for tgt_ids / tgt_mask.
  Tensor decode(Tape& tape, const Batch& batch, std::span<const int> tgt_ids,
                std::span<const unsigned char> tgt_mask, int tgt_len,
                const Tensor& memory, GateSet& gates, bool train,
                Rng* rng) const;
  Tensor project(Tape& tape, const Tensor& states) const;
  Tensor attention(Tape& tape, const AttentionWeights& w, const Tensor& query,
                   const Tensor& memory, std::span<const unsigned char> keep,
                   const Tensor& gates, Tensor* context, bool train,
                   Rng* rng) const;
  Tensor embed(Tape& tape, const Tensor& table, std::span<const int> ids,
               int batch, int len, bool train, Rng* rng) const;
  void check_lengths(const Batch& batch) const;

  ModelConfig config_;
  Tensor src_embed_, tgt_embed_;
  std::vector<EncoderLayerWeights> encoder_;
  std::vector<DecoderLayerWeights> decoder_;
  Tensor out_w_, out_b_;
  std::vector<float> positions_;  // [max_len, d_model] sinusoidal table
  std::vector<NamedParameter> params_;
};

// Flat ids of per-example gate gradients: result[row][flat_head].
std::vector<std::vector<float>> gate_gradients(const ForwardResult& result,
                                               const ModelConfig& config);

// ---- checkpoints ------------------------------------------------------------

// Writes `manifest` (key=value text) and a sibling data file holding every
// parameter as little-endian f32, concatenated in manifest order.
void save_checkpoint(const Transformer& model,
                     const std::filesystem::path& manifest);
Transformer load_checkpoint(const std::filesystem::path& manifest);

// Config serialization shared with run configs.
std::map<std::string, std::string> model_config_entries(const ModelConfig& c);
void apply_model_config_entry(ModelConfig& c, const std::string& key,
                              const std::string& value);
bool is_model_config_key(const std::string& key);

}  // namespace headmask
