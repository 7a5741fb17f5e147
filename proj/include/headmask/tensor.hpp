#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "headmask/rng.hpp"

namespace headmask {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major f32 array. Copies are shallow handles onto the same storage;
// values are fixed once an op has produced them, only the grad buffer (and
// parameter values, via the optimizer) are written afterwards.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  // Negative axes count from the back.
  int dim(int axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  // Empty span when no gradient has been accumulated.
  std::span<const float> grad() const;
  // Allocates a zero buffer on first use.
  std::span<float> grad_buffer() const;
  void zero_grad() const;

  bool is(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Storage> s) : s_(std::move(s)) {}

  std::shared_ptr<Storage> s_;
};

// Records differentiable operations in execution order. A tape is single-use:
// backward() may run once, after which the tape is consumed. A tape built with
// recording=false is an inference context; ops then skip all bookkeeping.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // True when an op over these inputs must be recorded.
  bool wants(std::initializer_list<const Tensor*> inputs) const;

  void record(const Tensor& output, std::vector<Tensor> inputs, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and runs every backward rule in reverse
  // recording order. Gradients accumulate additively into each tensor.
  void backward(const Tensor& loss);

 private:
  struct Node {
    Tensor output;
    std::vector<Tensor> inputs;
    BackwardFn fn;
  };
  bool recording_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

// ---- differentiable operations -------------------------------------------

// Elementwise a + b. b may also match a trailing suffix of a's shape, in which
// case it is broadcast over a's leading dimensions (bias, positional tables).
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, float c);
Tensor add_scalar(Tape& tape, const Tensor& x, float c);

// a[..., m, k] x b[..., k, n]. Batch dimensions must match exactly, or b may
// be a plain matrix shared across a's batch.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor transpose(Tape& tape, const Tensor& x, int axis1, int axis2);
Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

Tensor softmax(Tape& tape, const Tensor& x, int axis);
// Softmax over the last axis of scores[batch, heads, q, k]. keep[batch, q, k]
// (1 = attend) is shared across heads; excluded keys get probability exactly 0.
Tensor masked_softmax(Tape& tape, const Tensor& scores,
                      std::span<const unsigned char> keep);

Tensor relu(Tape& tape, const Tensor& x);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, float eps = 1e-5f);

// Train mode zeroes each element with probability p and scales survivors by
// 1/(1-p). Eval mode (or p == 0) returns x itself.
Tensor dropout(Tape& tape, const Tensor& x, float p, Rng& rng, bool train);

// Rows of table[vocab, d] gathered by ids; result shape is ids_shape + [d].
Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids,
                 const Shape& ids_shape);

// x[batch, heads, ...] scaled per (batch, head) by gates[batch, heads].
Tensor gate_heads(Tape& tape, const Tensor& x, const Tensor& gates);

// Sum over rows i of weight[i] * H(q_i, softmax(logits_i)), where q_i puts
// (1 - epsilon) on targets[i] and epsilon / (V - 1) on every other class.
// Rows with weight 0 are skipped entirely. logits are [rows, V].
Tensor smoothed_cross_entropy(Tape& tape, const Tensor& logits,
                              std::span<const int> targets,
                              std::span<const float> weights, float epsilon);

// Mean of -log softmax(logits_i)[targets_i] over rows.
Tensor cross_entropy(Tape& tape, const Tensor& logits,
                     std::span<const int> targets);

}  // namespace headmask
