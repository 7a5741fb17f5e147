#include "headmask/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "headmask/errors.hpp"

namespace headmask {

namespace {

using RowMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

// Splits shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[i]);
  s.extent = static_cast<std::size_t>(shape[axis]);
  for (std::size_t i = axis + 1; i < shape.size(); ++i) {
    s.inner *= static_cast<std::size_t>(shape[i]);
  }
  return s;
}

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.begin(), suffix.end(),
                    full.end() - static_cast<std::ptrdiff_t>(suffix.size()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

Tensor make_output(Shape shape, std::vector<float> data, Tape& tape,
                   std::initializer_list<const Tensor*> inputs) {
  return Tensor::from_data(std::move(shape), std::move(data),
                           tape.wants(inputs));
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<float>(n, value),
                   requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data,
                         bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto s = std::make_shared<Storage>();
  s->shape = std::move(shape);
  s->value = std::move(data);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!s_) throw ContractError("use of undefined tensor");
  return s_->shape;
}

int Tensor::dim(int axis) const {
  return shape()[static_cast<std::size_t>(normalize_axis(axis, rank()))];
}

std::size_t Tensor::numel() const { return s_ ? s_->value.size() : 0; }

std::span<const float> Tensor::data() const {
  if (!s_) return {};
  return s_->value;
}

std::span<float> Tensor::mutable_data() {
  if (!s_) return {};
  return s_->value;
}

float Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return s_->value[0];
}

bool Tensor::requires_grad() const { return s_ && s_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!s_) throw ContractError("use of undefined tensor");
  s_->requires_grad = value;
}

bool Tensor::has_grad() const { return s_ && !s_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!s_) return {};
  return s_->grad;
}

std::span<float> Tensor::grad_buffer() const {
  if (!s_) throw ContractError("use of undefined tensor");
  if (s_->grad.empty()) s_->grad.assign(s_->value.size(), 0.0f);
  return s_->grad;
}

void Tensor::zero_grad() const {
  if (s_) s_->grad.clear();
}

// ---- Tape -----------------------------------------------------------------

bool Tape::wants(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

void Tape::record(const Tensor& output, std::vector<Tensor> inputs,
                  BackwardFn fn) {
  if (consumed_) throw ContractError("recording onto a consumed tape");
  nodes_.push_back(Node{output, std::move(inputs), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!recording_) throw ContractError("backward() on a non-recording tape");
  if (consumed_) {
    throw ContractError("backward() called twice; tapes are single-use");
  }
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  if (nodes_.empty()) throw ContractError("backward() on an empty tape");
  consumed_ = true;
  Tensor seed = loss;
  seed.grad_buffer()[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.has_grad()) it->fn();
  }
}

// ---- elementwise ----------------------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t inner = bv.size();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); i += inner) {
    for (std::size_t j = 0; j < inner; ++j) out[i + j] = av[i + j] + bv[j];
  }
  Tensor y = make_output(a.shape(), std::move(out), tape, {&a, &b});
  if (y.requires_grad()) {
    tape.record(y, {a, b}, [a, b, y, inner]() mutable {
      const auto g = y.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); i += inner) {
          for (std::size_t j = 0; j < inner; ++j) gb[j] += g[i + j];
        }
      }
    });
  }
  return y;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  Tensor y = make_output(a.shape(), std::move(out), tape, {&a, &b});
  if (y.requires_grad()) {
    tape.record(y, {a, b}, [a, b, y]() mutable {
      const auto g = y.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return y;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  Tensor y = make_output(a.shape(), std::move(out), tape, {&a, &b});
  if (y.requires_grad()) {
    tape.record(y, {a, b}, [a, b, y]() mutable {
      const auto g = y.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        const auto bv = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        const auto av = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return y;
}

Tensor scale(Tape& tape, const Tensor& x, float c) {
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * c;
  Tensor y = make_output(x.shape(), std::move(out), tape, {&x});
  if (y.requires_grad()) {
    tape.record(y, {x}, [x, y, c]() mutable {
      const auto g = y.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
    });
  }
  return y;
}

Tensor add_scalar(Tape& tape, const Tensor& x, float c) {
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + c;
  Tensor y = make_output(x.shape(), std::move(out), tape, {&x});
  if (y.requires_grad()) {
    tape.record(y, {x}, [x, y]() mutable {
      const auto g = y.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

// ---- matmul ---------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto mismatch = [&]() {
    return ShapeError("matmul: incompatible shapes " + shape_str(as) + " and " +
                      shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  const int m = as[as.size() - 2];
  const int k = as.back();
  const int n = bs.back();
  if (bs[bs.size() - 2] != k) throw mismatch();
  const bool shared_rhs = bs.size() == 2;
  if (!shared_rhs &&
      (as.size() != bs.size() ||
       !std::equal(as.begin(), as.end() - 2, bs.begin()))) {
    throw mismatch();
  }
  const std::size_t batch = a.numel() / (static_cast<std::size_t>(m) * k);

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  std::vector<float> out(batch * m * n);
  if (shared_rhs) {
    const int rows = static_cast<int>(batch) * m;
    MutMap(out.data(), rows, n).noalias() =
        ConstMap(a.data().data(), rows, k) * ConstMap(b.data().data(), k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      MutMap(out.data() + i * m * n, m, n).noalias() =
          ConstMap(a.data().data() + i * m * k, m, k) *
          ConstMap(b.data().data() + i * k * n, k, n);
    }
  }
  Tensor y = make_output(std::move(out_shape), std::move(out), tape, {&a, &b});
  if (y.requires_grad()) {
    tape.record(y, {a, b}, [a, b, y, m, k, n, batch, shared_rhs]() mutable {
      const float* g = y.grad().data();
      if (shared_rhs) {
        const int rows = static_cast<int>(batch) * m;
        if (a.requires_grad()) {
          MutMap(a.grad_buffer().data(), rows, k).noalias() +=
              ConstMap(g, rows, n) *
              ConstMap(b.data().data(), k, n).transpose();
        }
        if (b.requires_grad()) {
          MutMap(b.grad_buffer().data(), k, n).noalias() +=
              ConstMap(a.data().data(), rows, k).transpose() *
              ConstMap(g, rows, n);
        }
        return;
      }
      float* ga = a.requires_grad() ? a.grad_buffer().data() : nullptr;
      float* gb = b.requires_grad() ? b.grad_buffer().data() : nullptr;
      for (std::size_t i = 0; i < batch; ++i) {
        const ConstMap gi(g + i * m * n, m, n);
        if (ga) {
          MutMap(ga + i * m * k, m, k).noalias() +=
              gi * ConstMap(b.data().data() + i * k * n, k, n).transpose();
        }
        if (gb) {
          MutMap(gb + i * k * n, k, n).noalias() +=
              ConstMap(a.data().data() + i * m * k, m, k).transpose() * gi;
        }
      }
    });
  }
  return y;
}

// ---- shape ops ------------------------------------------------------------

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  const auto xv = x.data();
  Tensor y = make_output(std::move(shape), std::vector<float>(xv.begin(), xv.end()),
                         tape, {&x});
  if (y.requires_grad()) {
    tape.record(y, {x}, [x, y]() mutable {
      const auto g = y.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

namespace {

// Copies src viewed as [pre, d1, mid, d2, post] into dst laid out as
// [pre, d2, mid, d1, post]; accumulates when `accumulate` is set.
void swap_axes_copy(const float* src, float* dst, std::size_t pre,
                    std::size_t d1, std::size_t mid, std::size_t d2,
                    std::size_t post, bool accumulate) {
  for (std::size_t p = 0; p < pre; ++p) {
    for (std::size_t i = 0; i < d1; ++i) {
      for (std::size_t q = 0; q < mid; ++q) {
        for (std::size_t j = 0; j < d2; ++j) {
          const float* s = src + ((((p * d1 + i) * mid + q) * d2 + j) * post);
          float* d = dst + ((((p * d2 + j) * mid + q) * d1 + i) * post);
          if (accumulate) {
            for (std::size_t r = 0; r < post; ++r) d[r] += s[r];
          } else {
            std::memcpy(d, s, post * sizeof(float));
          }
        }
      }
    }
  }
}

}  // namespace

Tensor transpose(Tape& tape, const Tensor& x, int axis1, int axis2) {
  const Shape& xs = x.shape();
  int a1 = normalize_axis(axis1, x.rank());
  int a2 = normalize_axis(axis2, x.rank());
  if (a1 == a2) return reshape(tape, x, xs);
  if (a1 > a2) std::swap(a1, a2);
  std::size_t pre = 1, mid = 1, post = 1;
  for (int i = 0; i < a1; ++i) pre *= xs[i];
  for (int i = a1 + 1; i < a2; ++i) mid *= xs[i];
  for (std::size_t i = a2 + 1; i < xs.size(); ++i) post *= xs[i];
  const std::size_t d1 = xs[a1], d2 = xs[a2];

  Shape out_shape = xs;
  std::swap(out_shape[a1], out_shape[a2]);
  std::vector<float> out(x.numel());
  swap_axes_copy(x.data().data(), out.data(), pre, d1, mid, d2, post, false);
  Tensor y = make_output(std::move(out_shape), std::move(out), tape, {&x});
  if (y.requires_grad()) {
    tape.record(y, {x}, [x, y, pre, d1, mid, d2, post]() mutable {
      swap_axes_copy(y.grad().data(), x.grad_buffer().data(), pre, d2, mid, d1,
                     post, true);
    });
  }
  return y;
}

Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const int ax = normalize_axis(axis, static_cast<int>(first.size()));
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) {
      throw ShapeError("concat: rank mismatch " + shape_str(first) + " vs " +
                       shape_str(s));
    }
    out_shape[ax] += s[ax];
    s[ax] = first[ax];
    if (s != first) {
      throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " +
                       shape_str(p.shape()));
    }
  }
  const AxisSplit os = split_at(out_shape, ax);
  std::vector<float> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    const std::size_t chunk = p.shape()[ax] * os.inner;
    offsets.push_back(offset);
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::memcpy(out.data() + o * os.extent * os.inner + offset,
                  p.data().data() + o * chunk, chunk * sizeof(float));
    }
    offset += chunk;
    any_grad = any_grad || p.requires_grad();
  }
  Tensor y = Tensor::from_data(std::move(out_shape), std::move(out),
                               tape.recording() && any_grad);
  if (y.requires_grad()) {
    tape.record(y, parts, [parts, y, offsets, os, ax]() mutable {
      const auto g = y.grad();
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!parts[i].requires_grad()) continue;
        const std::size_t chunk = parts[i].shape()[ax] * os.inner;
        auto gp = parts[i].grad_buffer();
        for (std::size_t o = 0; o < os.outer; ++o) {
          const float* src = g.data() + o * os.extent * os.inner + offsets[i];
          float* dst = gp.data() + o * chunk;
          for (std::size_t r = 0; r < chunk; ++r) dst[r] += src[r];
        }
      }
    });
  }
  return y;
}

// ---- reductions -----------------------------------------------------------

Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor y = make_output({1}, {static_cast<float>(acc)}, tape, {&x});
  if (y.requires_grad()) {
    tape.record(y, {x}, [x, y]() mutable {
      const float g = y.grad()[0];
      for (float& v : x.grad_buffer()) v += g;
    });
  }
  return y;
}

Tensor mean(Tape& tape, const Tensor& x) {
  return scale(tape, sum(tape, x), 1.0f / static_cast<float>(x.numel()));
}

// ---- softmax --------------------------------------------------------------

Tensor softmax(Tape& tape, const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), ax);
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      float mx = xv[base];
      for (std::size_t j = 1; j < s.extent; ++j) {
        mx = std::max(mx, xv[base + j * s.inner]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const float e = std::exp(xv[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      const float inv = static_cast<float>(1.0 / z);
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] *= inv;
    }
  }
  Tensor y = make_output(x.shape(), std::move(out), tape, {&x});
  if (y.requires_grad()) {
    tape.record(y, {x}, [x, y, s]() mutable {
      const auto g = y.grad();
      const auto p = y.data();
      auto gx = x.grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.extent * s.inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < s.extent; ++j) {
            dot += static_cast<double>(g[base + j * s.inner]) *
                   p[base + j * s.inner];
          }
          const float d = static_cast<float>(dot);
          for (std::size_t j = 0; j < s.extent; ++j) {
            const std::size_t idx = base + j * s.inner;
            gx[idx] += p[idx] * (g[idx] - d);
          }
        }
      }
    });
  }
  return y;
}

Tensor masked_softmax(Tape& tape, const Tensor& scores,
                      std::span<const unsigned char> keep) {
  if (scores.rank() != 4) {
    throw ShapeError("masked_softmax: expected [batch, heads, q, k], got " +
                     shape_str(scores.shape()));
  }
  const std::size_t batch = scores.dim(0), heads = scores.dim(1),
                    lq = scores.dim(2), lk = scores.dim(3);
  if (keep.size() != batch * lq * lk) {
    throw ShapeError("masked_softmax: mask has " + std::to_string(keep.size()) +
                     " entries, scores " + shape_str(scores.shape()) + " need " +
                     std::to_string(batch * lq * lk));
  }
  const auto xv = scores.data();
  std::vector<float> out(xv.size(), 0.0f);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t q = 0; q < lq; ++q) {
        const std::size_t row = ((b * heads + h) * lq + q) * lk;
        const unsigned char* km = keep.data() + (b * lq + q) * lk;
        float mx = -INFINITY;
        for (std::size_t j = 0; j < lk; ++j) {
          if (km[j]) mx = std::max(mx, xv[row + j]);
        }
        if (mx == -INFINITY) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
          if (!km[j]) continue;
          const float e = std::exp(xv[row + j] - mx);
          out[row + j] = e;
          z += e;
        }
        const float inv = static_cast<float>(1.0 / z);
        for (std::size_t j = 0; j < lk; ++j) out[row + j] *= inv;
      }
    }
  }
  Tensor y = make_output(scores.shape(), std::move(out), tape, {&scores});
  if (y.requires_grad()) {
    tape.record(y, {scores}, [scores, y, lk]() mutable {
      const auto g = y.grad();
      const auto p = y.data();
      auto gx = scores.grad_buffer();
      for (std::size_t row = 0; row < g.size(); row += lk) {
        double dot = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
          dot += static_cast<double>(g[row + j]) * p[row + j];
        }
        const float d = static_cast<float>(dot);
        for (std::size_t j = 0; j < lk; ++j) {
          gx[row + j] += p[row + j] * (g[row + j] - d);
        }
      }
    });
  }
  return y;
}

// ---- activations / normalization ------------------------------------------

Tensor relu(Tape& tape, const Tensor& x) {
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  Tensor y = make_output(x.shape(), std::move(out), tape, {&x});
  if (y.requires_grad()) {
    tape.record(y, {x}, [x, y]() mutable {
      const auto g = y.grad();
      const auto xv = x.data();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > 0.0f) gx[i] += g[i];
      }
    });
  }
  return y;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, float eps) {
  const std::size_t d = static_cast<std::size_t>(x.dim(-1));
  if (gamma.shape() != Shape{static_cast<int>(d)} ||
      beta.shape() != Shape{static_cast<int>(d)}) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) +
                     " with gamma " + shape_str(gamma.shape()) + " and beta " +
                     shape_str(beta.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<float> out(xv.size());
  std::vector<float> xhat(xv.size());
  std::vector<float> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = static_cast<float>(1.0 / std::sqrt(var + eps));
    for (std::size_t j = 0; j < d; ++j) {
      const float h = static_cast<float>(xr[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  Tensor y = make_output(x.shape(), std::move(out), tape, {&x, &gamma, &beta});
  if (y.requires_grad()) {
    tape.record(y, {x, gamma, beta},
                [x, gamma, beta, y, xhat = std::move(xhat),
                 rstd = std::move(rstd), d, rows]() mutable {
                  const auto g = y.grad();
                  const auto gv = gamma.data();
                  if (gamma.requires_grad()) {
                    auto gg = gamma.grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      gg[i % d] += g[i] * xhat[i];
                    }
                  }
                  if (beta.requires_grad()) {
                    auto gb = beta.grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                  }
                  if (!x.requires_grad()) return;
                  auto gx = x.grad_buffer();
                  for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dh = g[r * d + j] * gv[j];
                      m1 += dh;
                      m2 += dh * xhat[r * d + j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dh = g[r * d + j] * gv[j];
                      gx[r * d + j] += static_cast<float>(
                          rstd[r] * (dh - m1 - xhat[r * d + j] * m2));
                    }
                  }
                });
  }
  return y;
}

Tensor dropout(Tape& tape, const Tensor& x, float p, Rng& rng, bool train) {
  if (p < 0.0f || p >= 1.0f) {
    throw UsageError("dropout probability must be in [0, 1), got " +
                     std::to_string(p));
  }
  if (!train || p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  const auto xv = x.data();
  std::vector<float> factor(xv.size());
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    factor[i] = rng.uniform() < p ? 0.0f : keep_scale;
    out[i] = xv[i] * factor[i];
  }
  Tensor y = make_output(x.shape(), std::move(out), tape, {&x});
  if (y.requires_grad()) {
    tape.record(y, {x}, [x, y, factor = std::move(factor)]() mutable {
      const auto g = y.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor[i];
    });
  }
  return y;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids,
                 const Shape& ids_shape) {
  if (table.rank() != 2) {
    throw ShapeError("embedding: table must be [vocab, d], got " +
                     shape_str(table.shape()));
  }
  if (shape_numel(ids_shape) != ids.size()) {
    throw ShapeError("embedding: " + std::to_string(ids.size()) +
                     " ids do not fill " + shape_str(ids_shape));
  }
  const int vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<float> out(ids.size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw UsageError("token id " + std::to_string(ids[i]) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
    std::memcpy(out.data() + i * d, tv.data() + ids[i] * d, d * sizeof(float));
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(static_cast<int>(d));
  Tensor y = make_output(std::move(out_shape), std::move(out), tape, {&table});
  if (y.requires_grad()) {
    std::vector<int> saved(ids.begin(), ids.end());
    tape.record(y, {table}, [table, y, saved = std::move(saved), d]() mutable {
      const auto g = y.grad();
      auto gt = table.grad_buffer();
      for (std::size_t i = 0; i < saved.size(); ++i) {
        float* row = gt.data() + saved[i] * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
      }
    });
  }
  return y;
}

Tensor gate_heads(Tape& tape, const Tensor& x, const Tensor& gates) {
  if (gates.rank() != 2 || x.rank() < 2 || x.dim(0) != gates.dim(0) ||
      x.dim(1) != gates.dim(1)) {
    throw ShapeError("gate_heads: input " + shape_str(x.shape()) +
                     " incompatible with gates " + shape_str(gates.shape()));
  }
  const std::size_t units = gates.numel();
  const std::size_t inner = x.numel() / units;
  const auto xv = x.data();
  const auto gv = gates.data();
  std::vector<float> out(xv.size());
  for (std::size_t u = 0; u < units; ++u) {
    for (std::size_t i = 0; i < inner; ++i) {
      out[u * inner + i] = xv[u * inner + i] * gv[u];
    }
  }
  Tensor y = make_output(x.shape(), std::move(out), tape, {&x, &gates});
  if (y.requires_grad()) {
    tape.record(y, {x, gates}, [x, gates, y, units, inner]() mutable {
      const auto g = y.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        const auto gv = gates.data();
        for (std::size_t u = 0; u < units; ++u) {
          for (std::size_t i = 0; i < inner; ++i) {
            gx[u * inner + i] += g[u * inner + i] * gv[u];
          }
        }
      }
      if (gates.requires_grad()) {
        auto gg = gates.grad_buffer();
        const auto xv = x.data();
        for (std::size_t u = 0; u < units; ++u) {
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) {
            acc += static_cast<double>(xv[u * inner + i]) * g[u * inner + i];
          }
          gg[u] += static_cast<float>(acc);
        }
      }
    });
  }
  return y;
}

// ---- losses ---------------------------------------------------------------

namespace {

void check_loss_inputs(const char* op, const Tensor& logits,
                       std::span<const int> targets, std::size_t weights) {
  if (logits.rank() != 2) {
    throw ShapeError(std::string(op) + ": logits must be [rows, classes], got " +
                     shape_str(logits.shape()));
  }
  const std::size_t rows = logits.dim(0);
  if (targets.size() != rows || weights != rows) {
    throw ShapeError(std::string(op) + ": " + std::to_string(rows) +
                     " rows but " + std::to_string(targets.size()) +
                     " targets and " + std::to_string(weights) + " weights");
  }
  const int classes = logits.dim(1);
  for (int t : targets) {
    if (t < 0 || t >= classes) {
      throw UsageError(std::string(op) + ": target " + std::to_string(t) +
                       " outside " + std::to_string(classes) + " classes");
    }
  }
}

double row_logsumexp(const float* row, std::size_t n) {
  float mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
  return mx + std::log(z);
}

}  // namespace

Tensor smoothed_cross_entropy(Tape& tape, const Tensor& logits,
                              std::span<const int> targets,
                              std::span<const float> weights, float epsilon) {
  check_loss_inputs("smoothed_cross_entropy", logits, targets, weights.size());
  if (epsilon < 0.0f || epsilon >= 1.0f) {
    throw UsageError("label smoothing must be in [0, 1), got " +
                     std::to_string(epsilon));
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  const double on = 1.0 - static_cast<double>(epsilon);
  const double off =
      classes > 1 ? static_cast<double>(epsilon) / static_cast<double>(classes - 1)
                  : 0.0;
  const auto lv = logits.data();
  std::vector<double> lse(rows, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] == 0.0f) continue;
    const float* row = lv.data() + r * classes;
    lse[r] = row_logsumexp(row, classes);
    const double gold = row[targets[r]] - lse[r];
    double others = 0.0;
    for (std::size_t j = 0; j < classes; ++j) {
      if (static_cast<int>(j) != targets[r]) others += row[j] - lse[r];
    }
    total += weights[r] * -(on * gold + off * others);
  }
  Tensor y = make_output({1}, {static_cast<float>(total)}, tape, {&logits});
  if (y.requires_grad()) {
    std::vector<int> t(targets.begin(), targets.end());
    std::vector<float> w(weights.begin(), weights.end());
    tape.record(y, {logits},
                [logits, y, t = std::move(t), w = std::move(w),
                 lse = std::move(lse), on, off, rows, classes]() mutable {
                  const float g = y.grad()[0];
                  const auto lv = logits.data();
                  auto gl = logits.grad_buffer();
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (w[r] == 0.0f) continue;
                    const float* row = lv.data() + r * classes;
                    const double scale = static_cast<double>(g) * w[r];
                    for (std::size_t j = 0; j < classes; ++j) {
                      const double p = std::exp(row[j] - lse[r]);
                      const double q = static_cast<int>(j) == t[r] ? on : off;
                      gl[r * classes + j] += static_cast<float>(scale * (p - q));
                    }
                  }
                });
  }
  return y;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits,
                     std::span<const int> targets) {
  const std::size_t rows = logits.rank() == 2 ? logits.dim(0) : 0;
  check_loss_inputs("cross_entropy", logits, targets, rows);
  const std::size_t classes = logits.dim(1);
  const auto lv = logits.data();
  // Same accumulation order as smoothed_cross_entropy with uniform weights.
  const double inv_rows = 1.0f / static_cast<float>(rows);
  std::vector<double> lse(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = lv.data() + r * classes;
    lse[r] = row_logsumexp(row, classes);
    total += inv_rows * (lse[r] - row[targets[r]]);
  }
  Tensor y = make_output({1}, {static_cast<float>(total)}, tape, {&logits});
  if (y.requires_grad()) {
    std::vector<int> t(targets.begin(), targets.end());
    tape.record(y, {logits},
                [logits, y, t = std::move(t), lse = std::move(lse), inv_rows,
                 rows, classes]() mutable {
                  const double g = y.grad()[0] * inv_rows;
                  const auto lv = logits.data();
                  auto gl = logits.grad_buffer();
                  for (std::size_t r = 0; r < rows; ++r) {
                    const float* row = lv.data() + r * classes;
                    for (std::size_t j = 0; j < classes; ++j) {
                      const double p = std::exp(row[j] - lse[r]);
                      const double q = static_cast<int>(j) == t[r] ? 1.0 : 0.0;
                      gl[r * classes + j] += static_cast<float>(g * (p - q));
                    }
                  }
                });
  }
  return y;
}

}  // namespace headmask
