// Copyright 2026 The cilslu Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records operations in creation order. Parameters enter the tape as
// leaves bound to a Tensor; backward() writes the adjoint of every recorded
// node and adds leaf adjoints into the bound Tensor::grad. All ops treat
// tensors as matrices: rank 0 is 1×1, rank 1 is 1×n.

#pragma once

#include <cilslu/error.hpp>
#include <cilslu/kernels.hpp>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cilslu {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty when no gradient has been accumulated

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(element_count(shape), fill) {}

  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    require(element_count(shape) == data.size(), ErrorKind::dimension,
            "tensor " + shape_string(shape) + " given " + std::to_string(data.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t r, std::size_t c, double fill = 0.0) {
    return Tensor(Shape{r, c}, fill);
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      require(row.size() == c, ErrorKind::dimension, "ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(values));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const {
    require(shape.size() <= 2, ErrorKind::dimension, "rank > 2 tensor used as matrix");
    return shape.size() == 2 ? shape[0] : 1;
  }

  std::size_t cols() const {
    require(shape.size() <= 2, ErrorKind::dimension, "rank > 2 tensor used as matrix");
    if (shape.empty()) return 1;
    return shape.size() == 2 ? shape[1] : shape[0];
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  double item() const {
    require(data.size() == 1, ErrorKind::usage, "item() on non-scalar " + shape_string(shape));
    return data[0];
  }

  bool has_grad() const { return !grad.empty(); }

  void zero_grad() {
    if (grad.empty()) return;
    std::fill(grad.begin(), grad.end(), 0.0);
  }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  /// Leaf bound to a parameter; its adjoint is added into p.grad on backward.
  Var param(Tensor& p) {
    Node n;
    n.value = Tensor(p.shape, p.data);
    n.needs_grad = record_ && p.requires_grad;
    n.param = n.needs_grad ? &p : nullptr;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  /// Read-only parameter view: enters the tape as a constant.
  Var param(const Tensor& p) { return constant(Tensor(p.shape, p.data)); }

  Var constant(Tensor v) {
    Node n;
    n.value = std::move(v);
    n.value.requires_grad = false;
    n.value.grad.clear();
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  /// Records an operation result. The backward rule is kept only when some
  /// input needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].needs_grad;
    }
    return push_node(std::move(value), needs, std::move(fn));
  }

  Var push(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].needs_grad;
    }
    return push_node(std::move(value), needs, std::move(fn));
  }

  const Tensor& value(Var v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }

  /// Adjoint buffer of a node, allocated as zeros on first access.
  std::vector<double>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  /// Adjoint of a node after backward(); empty when none reached it.
  const std::vector<double>& grad_of(Var v) const { return nodes_[v.id()].grad; }

  void backward(Var loss) {
    require(loss.tape() == this, ErrorKind::usage, "backward on a variable from another tape");
    require(nodes_[loss.id()].value.size() == 1, ErrorKind::usage,
            "backward requires a scalar loss, got " + shape_string(nodes_[loss.id()].value.shape));
    for (Node& n : nodes_) n.grad.clear();
    if (!nodes_[loss.id()].needs_grad) return;
    grad(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) {
        n.backward(*this, i);
      } else if (n.param != nullptr) {
        Tensor& p = *n.param;
        if (p.grad.empty()) p.grad.assign(p.data.size(), 0.0);
        for (std::size_t j = 0; j < p.grad.size(); ++j) p.grad[j] += n.grad[j];
      }
    }
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    Tensor* param = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var push_node(Tensor value, bool needs, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs;
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(Var v) const {
    require(v.tape() == this && v.id() < nodes_.size(), ErrorKind::usage,
            "variable does not belong to this tape");
  }

  bool record_;
  std::deque<Node> nodes_;  // stable references across push
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape == b.shape, ErrorKind::dimension,
          std::string(op) + ": shape mismatch " + shape_string(a.shape) + " vs " +
              shape_string(b.shape));
}

inline void check_finite(const Tensor& t, const char* op) {
  for (double x : t.data)
    require(std::isfinite(x), ErrorKind::numeric, std::string(op) + ": non-finite input");
}

inline void accumulate(std::vector<double>& dst, const std::vector<double>& src, double scale = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::check_same_shape(av, bv, "add");
  Tensor out(av.shape, av.data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const auto g = tp.grad(self);
    if (tp.needs_grad(ia)) detail::accumulate(tp.grad(ia), g);
    if (tp.needs_grad(ib)) detail::accumulate(tp.grad(ib), g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::check_same_shape(av, bv, "sub");
  Tensor out(av.shape, av.data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const auto g = tp.grad(self);
    if (tp.needs_grad(ia)) detail::accumulate(tp.grad(ia), g);
    if (tp.needs_grad(ib)) detail::accumulate(tp.grad(ib), g, -1.0);
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::check_same_shape(av, bv, "mul");
  Tensor out(av.shape, av.data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const auto g = tp.grad(self);
    const auto& x = tp.value(ia).data;
    const auto& y = tp.value(ib).data;
    if (tp.needs_grad(ia)) {
      auto& ga = tp.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (tp.needs_grad(ib)) {
      auto& gb = tp.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape();
  Tensor out(a.value().shape, a.value().data);
  for (double& x : out.data) x *= c;
  const std::size_t ia = a.id();
  return t.push(std::move(out), {a}, [ia, c](Tape& tp, std::size_t self) {
    detail::accumulate(tp.grad(ia), tp.grad(self), c);
  });
}

/// x[n×m] + b broadcast over rows; b is [1×m] or [m].
inline Var add_row(Var x, Var b) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  const std::size_t n = xv.rows(), m = xv.cols();
  require(bv.size() == m, ErrorKind::dimension,
          "add_row: bias " + shape_string(bv.shape) + " vs input " + shape_string(xv.shape));
  Tensor out(xv.shape, xv.data);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] += bv.data[j];
  const std::size_t ix = x.id(), ib = b.id();
  return t.push(std::move(out), {x, b}, [ix, ib, n, m](Tape& tp, std::size_t self) {
    const auto g = tp.grad(self);
    if (tp.needs_grad(ix)) detail::accumulate(tp.grad(ix), g);
    if (tp.needs_grad(ib)) {
      auto& gb = tp.grad(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
    }
  });
}

/// Adds a constant tensor (e.g. an additive mask); no gradient flows into it.
inline Var add_constant(Var x, const Tensor& c) {
  Tape& t = *x.tape();
  detail::check_same_shape(x.value(), c, "add_constant");
  Tensor out(x.value().shape, x.value().data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += c.data[i];
  const std::size_t ix = x.id();
  return t.push(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
    detail::accumulate(tp.grad(ix), tp.grad(self));
  });
}

/// Replaces entries where mask is nonzero by `fill`; masked entries get no gradient.
inline Var masked_fill(Var x, const std::vector<unsigned char>& mask, double fill) {
  Tape& t = *x.tape();
  require(mask.size() == x.value().size(), ErrorKind::dimension, "masked_fill: mask size");
  Tensor out(x.value().shape, x.value().data);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out.data[i] = fill;
  const std::size_t ix = x.id();
  return t.push(std::move(out), {x}, [ix, mask](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!mask[i]) gx[i] += g[i];
  });
}

inline Var gelu(Var x) {
  Tape& t = *x.tape();
  Tensor out(x.value().shape, x.value().data);
  for (double& v : out.data) v = kernels::gelu(v);
  const std::size_t ix = x.id();
  return t.push(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& xv = tp.value(ix).data;
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * kernels::gelu_grad(xv[i]);
  });
}

inline Var relu(Var x) {
  Tape& t = *x.tape();
  Tensor out(x.value().shape, x.value().data);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  const std::size_t ix = x.id();
  return t.push(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& xv = tp.value(ix).data;
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

/// Inverted dropout. Identity when p == 0 or rng is null (evaluation).
inline Var dropout(Var x, double p, std::mt19937_64* rng) {
  require(p >= 0.0 && p < 1.0, ErrorKind::config, "dropout rate must lie in [0, 1)");
  if (p == 0.0 || rng == nullptr) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> mask(x.value().size());
  for (double& m : mask) m = keep(*rng) ? inv : 0.0;
  Tensor out(x.value().shape, x.value().data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= mask[i];
  const std::size_t ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix, mask = std::move(mask)](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  require(bv.rows() == k, ErrorKind::dimension,
          "matmul: " + shape_string(av.shape) + " · " + shape_string(bv.shape));
  Tensor out = Tensor::matrix(m, n);
  kernels::gemm(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.needs_grad(ia)) {
      // dA = dC · Bᵀ
      kernels::gemm_bt(g.data(), tp.value(ib).data.data(), tp.grad(ia).data(), m, n, k);
    }
    if (tp.needs_grad(ib)) {
      // dB = Aᵀ · dC
      kernels::gemm_at(tp.value(ia).data.data(), g.data(), tp.grad(ib).data(), k, m, n);
    }
  });
}

/// x·W + b
inline Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

inline Var transpose(Var x) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = xv.data[i * c + j];
  const std::size_t ix = x.id();
  return t.push(std::move(out), {x}, [ix, r, c](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum(Var x) {
  Tape& t = *x.tape();
  double s = 0.0;
  for (double v : x.value().data) s += v;
  const std::size_t ix = x.id();
  return t.push(Tensor::scalar(s), {x}, [ix](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (double& gx : tp.grad(ix)) gx += g;
  });
}

/// Mean over axis 0 (→ [1×cols]) or axis 1 (→ [rows×1]).
inline Var mean(Var x, int axis) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  require(axis == 0 || axis == 1, ErrorKind::dimension, "mean: axis must be 0 or 1");
  const std::size_t ix = x.id();
  if (axis == 0) {
    Tensor out = Tensor::matrix(1, c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.data[j] += xv.data[i * c + j];
    for (double& v : out.data) v /= static_cast<double>(r);
    return t.push(std::move(out), {x}, [ix, r, c](Tape& tp, std::size_t self) {
      const auto& g = tp.grad(self);
      auto& gx = tp.grad(ix);
      const double inv = 1.0 / static_cast<double>(r);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j] * inv;
    });
  }
  Tensor out = Tensor::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.data[i] += xv.data[i * c + j];
    out.data[i] /= static_cast<double>(c);
  }
  return t.push(std::move(out), {x}, [ix, r, c](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ix);
    const double inv = 1.0 / static_cast<double>(c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i] * inv;
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::dimension, "concat_cols: no inputs");
  Tape& t = *parts[0].tape();
  const std::size_t r = parts[0].rows();
  std::vector<std::size_t> ids, widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require(p.rows() == r, ErrorKind::dimension, "concat_cols: row count mismatch");
    ids.push_back(p.id());
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out = Tensor::matrix(r, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value().data;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out.data[i * total + off + j] = pv[i * widths[k] + j];
    off += widths[k];
  }
  return t.push(std::move(out), parts, [ids, widths, r, total](Tape& tp, std::size_t self) {
    const auto g = tp.grad(self);
    std::size_t o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.needs_grad(ids[k])) {
        auto& gp = tp.grad(ids[k]);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + o + j];
      }
      o += widths[k];
    }
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::dimension, "concat_rows: no inputs");
  Tape& t = *parts[0].tape();
  const std::size_t c = parts[0].cols();
  std::vector<std::size_t> ids, sizes;
  std::vector<double> values;
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require(p.cols() == c, ErrorKind::dimension, "concat_rows: column count mismatch");
    ids.push_back(p.id());
    sizes.push_back(p.value().size());
    rows += p.rows();
    values.insert(values.end(), p.value().data.begin(), p.value().data.end());
  }
  return t.push(Tensor(Shape{rows, c}, std::move(values)), parts,
                [ids, sizes](Tape& tp, std::size_t self) {
                  const auto g = tp.grad(self);
                  std::size_t o = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (tp.needs_grad(ids[k])) {
                      auto& gp = tp.grad(ids[k]);
                      for (std::size_t i = 0; i < sizes[k]; ++i) gp[i] += g[o + i];
                    }
                    o += sizes[k];
                  }
                });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  require(begin + count <= c, ErrorKind::dimension, "slice_cols: range out of bounds");
  Tensor out = Tensor::matrix(r, count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out.data[i * count + j] = xv.data[i * c + begin + j];
  const std::size_t ix = x.id();
  return t.push(std::move(out), {x}, [ix, r, c, begin, count](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * c + begin + j] += g[i * count + j];
  });
}

/// Rows of table selected by ids; backward scatter-adds into the table.
inline Var embedding(Var table, std::span<const int> ids) {
  Tape& t = *table.tape();
  const Tensor& tv = table.value();
  const std::size_t vocab = tv.rows(), h = tv.cols();
  Tensor out = Tensor::matrix(ids.size(), h);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < vocab, ErrorKind::input,
            "embedding: id " + std::to_string(ids[i]) + " outside vocabulary");
    std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(ids[i] * h), h,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * h));
  }
  const std::size_t it = table.id();
  std::vector<int> idv(ids.begin(), ids.end());
  return t.push(std::move(out), {table}, [it, idv = std::move(idv), h](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gt = tp.grad(it);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < h; ++j) gt[static_cast<std::size_t>(idv[i]) * h + j] += g[i * h + j];
  });
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

namespace detail {

inline int normalize_axis(const Tensor& x, int axis) {
  const int rank = x.rank() == 2 ? 2 : 1;
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, ErrorKind::dimension, "axis out of range");
  return rank == 2 ? axis : 1;
}

}  // namespace detail

/// Softmax along `axis` (default: last).
inline Var softmax(Var x, int axis = -1) {
  const int ax = detail::normalize_axis(x.value(), axis);
  if (ax == 0) return transpose(softmax(transpose(x), 1));
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  detail::check_finite(xv, "softmax");
  const std::size_t r = xv.rows(), c = xv.cols();
  require(c >= 1, ErrorKind::dimension, "softmax over an empty axis");
  Tensor out(xv.shape, xv.data);
  for (std::size_t i = 0; i < r; ++i) kernels::softmax_row(out.data.data() + i * c, c);
  const std::size_t ix = x.id();
  return t.push(std::move(out), {x}, [ix, r, c](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& y = tp.value(self).data;
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

inline Var log_softmax(Var x, int axis = -1) {
  const int ax = detail::normalize_axis(x.value(), axis);
  if (ax == 0) return transpose(log_softmax(transpose(x), 1));
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  detail::check_finite(xv, "log_softmax");
  const std::size_t r = xv.rows(), c = xv.cols();
  require(c >= 1, ErrorKind::dimension, "log_softmax over an empty axis");
  Tensor out(xv.shape, xv.data);
  for (std::size_t i = 0; i < r; ++i) {
    const double lse = kernels::log_sum_exp(xv.data.data() + i * c, c);
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] -= lse;
  }
  const std::size_t ix = x.id();
  return t.push(std::move(out), {x}, [ix, r, c](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& y = tp.value(self).data;
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gs;
    }
  });
}

/// Row-wise layer normalization with affine gain and bias ([1×m] or [m]).
inline Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require(eps > 0.0, ErrorKind::config, "layer_norm: epsilon must be positive");
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  require(c >= 2, ErrorKind::dimension, "layer_norm: normalized axis needs length >= 2");
  require(gain.value().size() == c && bias.value().size() == c, ErrorKind::dimension,
          "layer_norm: affine parameter size");
  Tensor out(xv.shape);
  std::vector<double> rstd(r);
  for (std::size_t i = 0; i < r; ++i)
    kernels::layer_norm_row(xv.data.data() + i * c, gain.value().data.data(),
                            bias.value().data.data(), out.data.data() + i * c, c, eps, nullptr,
                            &rstd[i]);
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return t.push(std::move(out), {x, gain, bias},
                [ix, ig, ib, r, c, rstd = std::move(rstd)](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  const auto& xd = tp.value(ix).data;
                  const auto& gd = tp.value(ig).data;
                  std::vector<double> xhat(c), dxhat(c);
                  for (std::size_t i = 0; i < r; ++i) {
                    const double* xi = xd.data() + i * c;
                    double mu = 0.0;
                    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
                    mu /= static_cast<double>(c);
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                      xhat[j] = (xi[j] - mu) * rstd[i];
                      dxhat[j] = g[i * c + j] * gd[j];
                      m1 += dxhat[j];
                      m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    if (tp.needs_grad(ix)) {
                      auto& gx = tp.grad(ix);
                      for (std::size_t j = 0; j < c; ++j)
                        gx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                    if (tp.needs_grad(ig)) {
                      auto& gg = tp.grad(ig);
                      for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[j];
                    }
                    if (tp.needs_grad(ib)) {
                      auto& gb = tp.grad(ib);
                      for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                    }
                  }
                });
}

/// Multi-head scaled dot-product attention. q is [n×w], k and v are [m×w].
/// With `causal`, query i attends to keys 0..i (requires n <= m).
inline Var attention(Var q, Var k, Var v, std::size_t heads, bool causal) {
  Tape& t = *q.tape();
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t n = qv.rows(), m = kv.rows(), w = qv.cols();
  require(heads >= 1 && w % heads == 0, ErrorKind::dimension, "attention: width not divisible by heads");
  require(kv.cols() == w && vv.cols() == w && vv.rows() == m, ErrorKind::dimension,
          "attention: key/value shape");
  require(!causal || n <= m, ErrorKind::dimension, "attention: causal mask needs n <= m");
  auto probs = std::make_shared<std::vector<double>>(heads * n * m, 0.0);
  Tensor out = Tensor::matrix(n, w);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t keys = causal ? i + 1 : m;
    kernels::attend_row(qv.data.data() + i * w, kv.data.data(), vv.data.data(), keys, w, heads,
                        out.data.data() + i * w, probs->data() + i * m, n * m);
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return t.push(std::move(out), {q, k, v},
                [iq, ik, iv, n, m, w, heads, causal, probs](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  const auto& qd = tp.value(iq).data;
                  const auto& kd = tp.value(ik).data;
                  const auto& vd = tp.value(iv).data;
                  std::vector<double>* gq = tp.needs_grad(iq) ? &tp.grad(iq) : nullptr;
                  std::vector<double>* gk = tp.needs_grad(ik) ? &tp.grad(ik) : nullptr;
                  std::vector<double>* gv = tp.needs_grad(iv) ? &tp.grad(iv) : nullptr;
                  const std::size_t dh = w / heads;
                  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
                  std::vector<double> dp(m), ds(m);
                  for (std::size_t hd = 0; hd < heads; ++hd) {
                    const std::size_t off = hd * dh;
                    for (std::size_t i = 0; i < n; ++i) {
                      const std::size_t keys = causal ? i + 1 : m;
                      const double* p = probs->data() + hd * n * m + i * m;
                      const double* gi = g.data() + i * w + off;
                      double dot = 0.0;
                      for (std::size_t s = 0; s < keys; ++s) {
                        const double* vs = vd.data() + s * w + off;
                        double acc = 0.0;
                        for (std::size_t d = 0; d < dh; ++d) acc += gi[d] * vs[d];
                        dp[s] = acc;
                        dot += acc * p[s];
                        if (gv != nullptr) {
                          double* gvs = gv->data() + s * w + off;
                          for (std::size_t d = 0; d < dh; ++d) gvs[d] += p[s] * gi[d];
                        }
                      }
                      for (std::size_t s = 0; s < keys; ++s) ds[s] = p[s] * (dp[s] - dot) * sc;
                      const double* qi = qd.data() + i * w + off;
                      for (std::size_t s = 0; s < keys; ++s) {
                        const double* ks = kd.data() + s * w + off;
                        if (gq != nullptr) {
                          double* gqi = gq->data() + i * w + off;
                          for (std::size_t d = 0; d < dh; ++d) gqi[d] += ds[s] * ks[d];
                        }
                        if (gk != nullptr) {
                          double* gks = gk->data() + s * w + off;
                          for (std::size_t d = 0; d < dh; ++d) gks[d] += ds[s] * qi[d];
                        }
                      }
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Fused losses

/// Σ_i −log softmax(logits_i)[targets_i], skipping rows whose target equals
/// ignore_index. Returns a scalar.
inline Var nll_rows(Var logits, std::span<const int> targets, int ignore_index = -1) {
  Tape& t = *logits.tape();
  const Tensor& lv = logits.value();
  const std::size_t r = lv.rows(), c = lv.cols();
  require(targets.size() == r, ErrorKind::dimension, "nll_rows: target count vs logits rows");
  detail::check_finite(lv, "nll_rows");
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] == ignore_index) continue;
    require(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < c, ErrorKind::input,
            "nll_rows: target id outside vocabulary");
    const double* row = lv.data.data() + i * c;
    total += kernels::log_sum_exp(row, c) - row[targets[i]];
  }
  const std::size_t il = logits.id();
  std::vector<int> tg(targets.begin(), targets.end());
  return t.push(Tensor::scalar(total), {logits},
                [il, r, c, tg = std::move(tg), ignore_index](Tape& tp, std::size_t self) {
                  const double g = tp.grad(self)[0];
                  const auto& lv2 = tp.value(il).data;
                  auto& gl = tp.grad(il);
                  std::vector<double> p(c);
                  for (std::size_t i = 0; i < r; ++i) {
                    if (tg[i] == ignore_index) continue;
                    std::copy_n(lv2.begin() + static_cast<std::ptrdiff_t>(i * c), c, p.begin());
                    kernels::softmax_row(p.data(), c);
                    for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += g * p[j];
                    gl[i * c + static_cast<std::size_t>(tg[i])] -= g;
                  }
                });
}

/// Σ_i Σ_v −target_probs[i,v] · log softmax(logits_i)[v] against a constant
/// distribution. Rows with row_mask[i] == 0 are skipped (empty mask keeps all).
inline Var soft_cross_entropy_rows(Var logits, const Tensor& target_probs,
                                   const std::vector<unsigned char>& row_mask = {}) {
  Tape& t = *logits.tape();
  const Tensor& lv = logits.value();
  const std::size_t r = lv.rows(), c = lv.cols();
  require(target_probs.rows() == r && target_probs.cols() == c, ErrorKind::dimension,
          "soft_cross_entropy_rows: target distribution shape");
  require(row_mask.empty() || row_mask.size() == r, ErrorKind::dimension,
          "soft_cross_entropy_rows: row mask size");
  detail::check_finite(lv, "soft_cross_entropy_rows");
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (!row_mask.empty() && !row_mask[i]) continue;
    const double* row = lv.data.data() + i * c;
    const double lse = kernels::log_sum_exp(row, c);
    for (std::size_t j = 0; j < c; ++j) total -= target_probs.data[i * c + j] * (row[j] - lse);
  }
  const std::size_t il = logits.id();
  return t.push(Tensor::scalar(total), {logits},
                [il, r, c, target_probs, row_mask](Tape& tp, std::size_t self) {
                  const double g = tp.grad(self)[0];
                  const auto& lv2 = tp.value(il).data;
                  auto& gl = tp.grad(il);
                  std::vector<double> p(c);
                  for (std::size_t i = 0; i < r; ++i) {
                    if (!row_mask.empty() && !row_mask[i]) continue;
                    std::copy_n(lv2.begin() + static_cast<std::ptrdiff_t>(i * c), c, p.begin());
                    kernels::softmax_row(p.data(), c);
                    double mass = 0.0;
                    for (std::size_t j = 0; j < c; ++j) mass += target_probs.data[i * c + j];
                    for (std::size_t j = 0; j < c; ++j)
                      gl[i * c + j] += g * (mass * p[j] - target_probs.data[i * c + j]);
                  }
                });
}

/// ‖a − b‖² as a scalar, with b held constant.
inline Var squared_distance(Var a, const Tensor& b) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  require(av.size() == b.size(), ErrorKind::dimension, "squared_distance: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) total += (av.data[i] - b.data[i]) * (av.data[i] - b.data[i]);
  const std::size_t ia = a.id();
  return t.push(Tensor::scalar(total), {a}, [ia, b](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    const auto& ad = tp.value(ia).data;
    auto& ga = tp.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * g * (ad[i] - b.data[i]);
  });
}

}  // namespace cilslu
