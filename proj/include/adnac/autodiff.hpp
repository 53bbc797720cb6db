#pragma once

// Tape-based reverse-mode differentiation over dense arrays.
//
// Every op appends one node to the tape in execution order, so the tape is
// already topologically sorted; backward() walks it once in reverse. A tape
// may be differentiated exactly once. Build a fresh tape for every step.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "adnac/error.hpp"
#include "adnac/tensor.hpp"

namespace adnac::ad {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = std::numeric_limits<std::size_t>::max();

  bool valid() const { return tape != nullptr; }
  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape; }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push("constant", std::move(v), nullptr, false, nullptr); }
  Var<T> input(Tensor<T> v, bool requires_grad) {
    return push("input", std::move(v), nullptr, requires_grad, nullptr);
  }

  // Leaf that reads the parameter in place; its gradient is added to
  // p.grad after backward(). Frozen parameters still pass gradients to
  // their consumers' other inputs but never receive one themselves.
  Var<T> param(Parameter<T>& p) {
    auto v = push("param", Tensor<T>{}, &p.value, !p.frozen, nullptr);
    nodes_[v.id].param = &p;
    return v;
  }

  Var<T> record(const char* op, Tensor<T> out, bool requires_grad, BackwardFn fn) {
    if (check_finite_) {
      for (const T& x : out.data) {
        if (!std::isfinite(x)) {
          throw NumericError(std::string("non-finite value produced by ") + op +
                             (scope_.empty() ? std::string() : " in " + scope_));
        }
      }
    }
    return push(op, std::move(out), nullptr, requires_grad, requires_grad ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.own;
  }
  bool requires_grad(Var<T> v) const { return v.valid() && nodes_.at(v.id).requires_grad; }

  // Gradient buffer of an input, allocated (zeroed) on first touch.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty() && n.grad.shape.empty()) {
      const Tensor<T>& v = n.ref ? *n.ref : n.own;
      n.grad = Tensor<T>(v.shape);
    }
    return n.grad;
  }
  const Tensor<T>* grad_if_any(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.data.empty() ? nullptr : &n.grad;
  }

  void backward(Var<T> loss) {
    if (consumed_) throw UsageError("backward() called twice on the same tape");
    const Tensor<T>& lv = value(loss);
    if (lv.size() != 1) throw UsageError("backward() needs a scalar loss, got shape " + shape_str(lv.shape));
    if (!std::isfinite(lv.data[0])) throw NumericError("backward() on a non-finite loss");
    consumed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id).data[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.data.empty()) continue;
      if (n.backward) {
        // the node's own gradient is final here; move it out so the
        // callback may allocate other gradients without invalidation
        Tensor<T> g = std::move(n.grad);
        n.backward(*this, g);
        nodes_[i].grad = std::move(g);
      }
      Node& m = nodes_[i];
      if (m.param != nullptr) {
        Parameter<T>& p = *m.param;
        if (p.grad.size() != p.value.size()) p.zero_grad();
        for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad.data[k] += m.grad.data[k];
      }
    }
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }
  const char* op_name(Var<T> v) const { return nodes_.at(v.id).op; }

  void set_scope(std::string s) { scope_ = std::move(s); }
  const std::string& scope() const { return scope_; }
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    const char* op = "";
    Tensor<T> own;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Var<T> push(const char* op, Tensor<T> own, const Tensor<T>* ref, bool rg, BackwardFn fn) {
    Node n;
    n.op = op;
    n.own = std::move(own);
    n.ref = ref;
    n.requires_grad = rg;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // deque: values stay put while the tape grows
  std::string scope_;
  bool consumed_ = false;
  bool check_finite_ = true;
};

namespace detail {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
Tape<T>& tape_of(Var<T> a) {
  require(a.valid(), "operation on an unbound variable");
  return *a.tape;
}

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  require(a.tape == b.tape, "variables recorded on different tapes");
}

inline std::size_t conv_out_len(std::size_t len, std::size_t k, std::size_t stride, std::size_t pad) {
  require(len + 2 * pad >= k, "conv1d: input length " + std::to_string(len) + " + 2*padding shorter than kernel");
  return (len + 2 * pad - k) / stride + 1;
}

// col[(ci*K + k), b*Tout + t] = x[b, ci, t*stride - pad + k]   (zero outside)
template <typename T>
MatR<T> im2col(const T* x, std::size_t B, std::size_t C, std::size_t Tin, std::size_t K, std::size_t stride,
               std::size_t pad, std::size_t Tout) {
  MatR<T> col(C * K, B * Tout);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < K; ++k) {
      T* row = col.data() + (c * K + k) * B * Tout;
      for (std::size_t b = 0; b < B; ++b) {
        const T* xr = x + (b * C + c) * Tin;
        T* out = row + b * Tout;
        for (std::size_t t = 0; t < Tout; ++t) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * stride + k) - static_cast<std::ptrdiff_t>(pad);
          out[t] = (pos >= 0 && pos < static_cast<std::ptrdiff_t>(Tin)) ? xr[pos] : T(0);
        }
      }
    }
  }
  return col;
}

// Adjoint of im2col: scatter-add columns back onto a (B, C, Tin) buffer.
template <typename T>
void col2im(const MatR<T>& col, T* x, std::size_t B, std::size_t C, std::size_t Tin, std::size_t K,
            std::size_t stride, std::size_t pad, std::size_t Tout) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < K; ++k) {
      const T* row = col.data() + (c * K + k) * B * Tout;
      for (std::size_t b = 0; b < B; ++b) {
        T* xr = x + (b * C + c) * Tin;
        const T* in = row + b * Tout;
        for (std::size_t t = 0; t < Tout; ++t) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * stride + k) - static_cast<std::ptrdiff_t>(pad);
          if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(Tin)) xr[pos] += in[t];
        }
      }
    }
  }
}

// (B, C, T) <-> (C, B*T)
template <typename T>
MatR<T> gather_channels(const T* x, std::size_t B, std::size_t C, std::size_t Tn) {
  MatR<T> m(C, B * Tn);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) std::copy_n(x + (b * C + c) * Tn, Tn, m.data() + c * B * Tn + b * Tn);
  return m;
}

template <typename T>
void scatter_channels(const MatR<T>& m, T* x, std::size_t B, std::size_t C, std::size_t Tn, bool accumulate) {
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = m.data() + c * B * Tn + b * Tn;
      T* dst = x + (b * C + c) * Tn;
      if (accumulate)
        for (std::size_t t = 0; t < Tn; ++t) dst[t] += src[t];
      else
        std::copy_n(src, Tn, dst);
    }
}

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolutions

// x: (B, Cin, T), w: (Cout, Cin, K), b: (Cout) or unbound. Cross-correlation.
template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, Var<T> bias, std::size_t stride = 1, std::size_t padding = 0) {
  using namespace detail;
  Tape<T>& tape = tape_of(x);
  require_same_tape(x, w);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require(xv.rank() == 3 && wv.rank() == 3, "conv1d: expected x (B,C,T) and w (Cout,Cin,K), got " +
                                                 shape_str(xv.shape) + " and " + shape_str(wv.shape));
  const std::size_t B = xv.dim(0), Cin = xv.dim(1), Tin = xv.dim(2);
  const std::size_t Cout = wv.dim(0), K = wv.dim(2);
  require(wv.dim(1) == Cin, "conv1d: weight expects " + std::to_string(wv.dim(1)) + " input channels, got " +
                                std::to_string(Cin));
  require(stride >= 1, "conv1d: stride must be >= 1");
  if (bias.valid()) require(bias.value().size() == Cout, "conv1d: bias length must equal Cout");
  const std::size_t Tout = conv_out_len(Tin, K, stride, padding);

  MatR<T> col = im2col(xv.ptr(), B, Cin, Tin, K, stride, padding, Tout);
  CMapR<T> W(wv.ptr(), Cout, Cin * K);
  MatR<T> res = W * col;
  if (bias.valid()) {
    const T* bv = bias.value().ptr();
    for (std::size_t c = 0; c < Cout; ++c) res.row(c).array() += bv[c];
  }
  Tensor<T> out(Shape{B, Cout, Tout});
  scatter_channels(res, out.ptr(), B, Cout, Tout, false);

  const bool rg = tape.requires_grad(x) || tape.requires_grad(w) || tape.requires_grad(bias);
  return tape.record("conv1d", std::move(out), rg,
                     [x, w, bias, B, Cin, Tin, Cout, K, stride, padding, Tout](Tape<T>& tp, const Tensor<T>& g) {
                       MatR<T> dres = gather_channels(g.ptr(), B, Cout, Tout);
                       if (tp.requires_grad(bias)) {
                         T* db = tp.grad(bias.id).ptr();
                         for (std::size_t c = 0; c < Cout; ++c) db[c] += dres.row(c).sum();
                       }
                       const Tensor<T>& xv2 = x.value();
                       const Tensor<T>& wv2 = w.value();
                       if (tp.requires_grad(w)) {
                         MatR<T> col2 = im2col(xv2.ptr(), B, Cin, Tin, K, stride, padding, Tout);
                         MapR<T> dW(tp.grad(w.id).ptr(), Cout, Cin * K);
                         dW.noalias() += dres * col2.transpose();
                       }
                       if (tp.requires_grad(x)) {
                         CMapR<T> W2(wv2.ptr(), Cout, Cin * K);
                         MatR<T> dcol = W2.transpose() * dres;
                         col2im(dcol, tp.grad(x.id).ptr(), B, Cin, Tin, K, stride, padding, Tout);
                       }
                     });
}

// x: (B, Cin, T), w: (Cin, Cout, K), b: (Cout) or unbound.
// Output length (T-1)*stride - 2*padding + K; adjoint of conv1d with the same weight.
template <typename T>
Var<T> conv_transpose1d(Var<T> x, Var<T> w, Var<T> bias, std::size_t stride = 1, std::size_t padding = 0) {
  using namespace detail;
  Tape<T>& tape = tape_of(x);
  require_same_tape(x, w);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require(xv.rank() == 3 && wv.rank() == 3, "conv_transpose1d: expected x (B,C,T) and w (Cin,Cout,K), got " +
                                                 shape_str(xv.shape) + " and " + shape_str(wv.shape));
  const std::size_t B = xv.dim(0), Cin = xv.dim(1), Tin = xv.dim(2);
  const std::size_t Cout = wv.dim(1), K = wv.dim(2);
  require(wv.dim(0) == Cin, "conv_transpose1d: weight expects " + std::to_string(wv.dim(0)) +
                                " input channels, got " + std::to_string(Cin));
  require(stride >= 1 && Tin >= 1, "conv_transpose1d: invalid stride or empty input");
  require((Tin - 1) * stride + K > 2 * padding, "conv_transpose1d: padding consumes the whole output");
  if (bias.valid()) require(bias.value().size() == Cout, "conv_transpose1d: bias length must equal Cout");
  const std::size_t Tout = (Tin - 1) * stride + K - 2 * padding;

  MatR<T> xg = gather_channels(xv.ptr(), B, Cin, Tin);
  CMapR<T> W(wv.ptr(), Cin, Cout * K);
  MatR<T> cols = W.transpose() * xg;
  Tensor<T> out(Shape{B, Cout, Tout});
  // the "input" of col2im here is the output signal, the "columns" index input time
  col2im(cols, out.ptr(), B, Cout, Tout, K, stride, padding, Tin);
  if (bias.valid()) {
    const T* bv = bias.value().ptr();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < Cout; ++c) {
        T* o = out.ptr() + (b * Cout + c) * Tout;
        for (std::size_t t = 0; t < Tout; ++t) o[t] += bv[c];
      }
  }

  const bool rg = tape.requires_grad(x) || tape.requires_grad(w) || tape.requires_grad(bias);
  return tape.record(
      "conv_transpose1d", std::move(out), rg,
      [x, w, bias, B, Cin, Tin, Cout, K, stride, padding, Tout](Tape<T>& tp, const Tensor<T>& g) {
        if (tp.requires_grad(bias)) {
          T* db = tp.grad(bias.id).ptr();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < Cout; ++c) {
              const T* gr = g.ptr() + (b * Cout + c) * Tout;
              T s = 0;
              for (std::size_t t = 0; t < Tout; ++t) s += gr[t];
              db[c] += s;
            }
        }
        MatR<T> dcols = im2col(g.ptr(), B, Cout, Tout, K, stride, padding, Tin);
        const Tensor<T>& wv2 = w.value();
        if (tp.requires_grad(w)) {
          MatR<T> xg2 = gather_channels(x.value().ptr(), B, Cin, Tin);
          MapR<T> dW(tp.grad(w.id).ptr(), Cin, Cout * K);
          dW.noalias() += xg2 * dcols.transpose();
        }
        if (tp.requires_grad(x)) {
          CMapR<T> W2(wv2.ptr(), Cin, Cout * K);
          MatR<T> dx = W2 * dcols;
          scatter_channels(dx, tp.grad(x.id).ptr(), B, Cin, Tin, true);
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and activations

// Biased-variance group normalization over (channels-in-group x time).
template <typename T>
Var<T> group_norm(Var<T> x, std::size_t groups, Var<T> gamma, Var<T> beta, double eps = 1e-5) {
  using namespace detail;
  Tape<T>& tape = tape_of(x);
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "group_norm: expected (B,C,T), got " + shape_str(xv.shape));
  const std::size_t B = xv.dim(0), C = xv.dim(1), Tn = xv.dim(2);
  if (groups == 0 || C % groups != 0)
    throw ConfigError("group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups) +
                      " groups");
  require(gamma.value().size() == C && beta.value().size() == C, "group_norm: gamma/beta must have C entries");
  const std::size_t cpg = C / groups;
  const std::size_t n = cpg * Tn;

  Tensor<T> xhat(xv.shape);
  std::vector<T> inv_std(B * groups);
  Tensor<T> out(xv.shape);
  const T* gm = gamma.value().ptr();
  const T* bt = beta.value().ptr();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t off = (b * C + g * cpg) * Tn;
      const T* xs = xv.ptr() + off;
      double mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += xs[i];
      mean /= static_cast<double>(n);
      double var = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = xs[i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[b * groups + g] = static_cast<T>(is);
      T* xh = xhat.ptr() + off;
      T* o = out.ptr() + off;
      for (std::size_t c = 0; c < cpg; ++c) {
        const std::size_t ch = g * cpg + c;
        for (std::size_t t = 0; t < Tn; ++t) {
          const std::size_t i = c * Tn + t;
          xh[i] = static_cast<T>((xs[i] - mean) * is);
          o[i] = gm[ch] * xh[i] + bt[ch];
        }
      }
    }
  }

  const bool rg = tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
  return tape.record(
      "group_norm", std::move(out), rg,
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), B, C, Tn, groups, cpg,
       n](Tape<T>& tp, const Tensor<T>& gy) {
        const T* gm2 = gamma.value().ptr();
        if (tp.requires_grad(gamma) || tp.requires_grad(beta)) {
          std::vector<double> dg(C, 0.0), dbt(C, 0.0);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const T* gr = gy.ptr() + (b * C + c) * Tn;
              const T* xh = xhat.ptr() + (b * C + c) * Tn;
              for (std::size_t t = 0; t < Tn; ++t) {
                dg[c] += static_cast<double>(gr[t]) * xh[t];
                dbt[c] += gr[t];
              }
            }
          if (tp.requires_grad(gamma)) {
            T* d = tp.grad(gamma.id).ptr();
            for (std::size_t c = 0; c < C; ++c) d[c] += static_cast<T>(dg[c]);
          }
          if (tp.requires_grad(beta)) {
            T* d = tp.grad(beta.id).ptr();
            for (std::size_t c = 0; c < C; ++c) d[c] += static_cast<T>(dbt[c]);
          }
        }
        if (!tp.requires_grad(x)) return;
        T* dx = tp.grad(x.id).ptr();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t off = (b * C + g * cpg) * Tn;
            const T* gr = gy.ptr() + off;
            const T* xh = xhat.ptr() + off;
            double m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat * xhat)
            for (std::size_t c = 0; c < cpg; ++c) {
              const double gmc = gm2[g * cpg + c];
              for (std::size_t t = 0; t < Tn; ++t) {
                const std::size_t i = c * Tn + t;
                const double dxh = gr[i] * gmc;
                m1 += dxh;
                m2 += dxh * xh[i];
              }
            }
            m1 /= static_cast<double>(n);
            m2 /= static_cast<double>(n);
            const double is = inv_std[b * groups + g];
            for (std::size_t c = 0; c < cpg; ++c) {
              const double gmc = gm2[g * cpg + c];
              for (std::size_t t = 0; t < Tn; ++t) {
                const std::size_t i = c * Tn + t;
                dx[off + i] += static_cast<T>(is * (gr[i] * gmc - m1 - xh[i] * m2));
              }
            }
          }
      });
}

template <typename T>
Var<T> silu(Var<T> x) {
  Tape<T>& tape = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = xv.data[i] * detail::sigmoid(xv.data[i]);
  return tape.record("silu", std::move(out), tape.requires_grad(x), [x](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& xv2 = x.value();
    T* dx = tp.grad(x.id).ptr();
    for (std::size_t i = 0; i < xv2.size(); ++i) {
      const T s = detail::sigmoid(xv2.data[i]);
      dx[i] += g.data[i] * s * (T(1) + xv2.data[i] * (T(1) - s));
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise and structural kit

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::tape_of(a);
  detail::require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require(av.shape == bv.shape, "add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
  return tape.record("add", std::move(out), tape.requires_grad(a) || tape.requires_grad(b),
                     [a, b](Tape<T>& tp, const Tensor<T>& g) {
                       for (Var<T> v : {a, b}) {
                         if (!tp.requires_grad(v)) continue;
                         T* d = tp.grad(v.id).ptr();
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g.data[i];
                       }
                     });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::tape_of(a);
  detail::require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require(av.shape == bv.shape, "sub: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] - bv.data[i];
  return tape.record("sub", std::move(out), tape.requires_grad(a) || tape.requires_grad(b),
                     [a, b](Tape<T>& tp, const Tensor<T>& g) {
                       if (tp.requires_grad(a)) {
                         T* d = tp.grad(a.id).ptr();
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g.data[i];
                       }
                       if (tp.requires_grad(b)) {
                         T* d = tp.grad(b.id).ptr();
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g.data[i];
                       }
                     });
}

template <typename T>
Var<T> mul_scalar(Var<T> a, double c) {
  Tape<T>& tape = detail::tape_of(a);
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape);
  const T k = static_cast<T>(c);
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] * k;
  return tape.record("mul_scalar", std::move(out), tape.requires_grad(a), [a, k](Tape<T>& tp, const Tensor<T>& g) {
    T* d = tp.grad(a.id).ptr();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g.data[i] * k;
  });
}

// Per-channel x * scale[c] + shift[c] on (B, C, T) with constant scale/shift.
template <typename T>
Var<T> affine_channels(Var<T> x, const std::vector<double>& scale, const std::vector<double>& shift) {
  Tape<T>& tape = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  detail::require(xv.rank() == 3 && scale.size() == xv.dim(1) && shift.size() == xv.dim(1),
                  "affine_channels: expected (B," + std::to_string(scale.size()) + ",T), got " + shape_str(xv.shape));
  const std::size_t B = xv.dim(0), C = xv.dim(1), Tn = xv.dim(2);
  Tensor<T> out(xv.shape);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T s = static_cast<T>(scale[c]), o = static_cast<T>(shift[c]);
      const std::size_t base = (b * C + c) * Tn;
      for (std::size_t t = 0; t < Tn; ++t) out.data[base + t] = xv.data[base + t] * s + o;
    }
  return tape.record("affine_channels", std::move(out), tape.requires_grad(x),
                     [x, scale, B, C, Tn](Tape<T>& tp, const Tensor<T>& g) {
                       T* d = tp.grad(x.id).ptr();
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t c = 0; c < C; ++c) {
                           const T s = static_cast<T>(scale[c]);
                           const std::size_t base = (b * C + c) * Tn;
                           for (std::size_t t = 0; t < Tn; ++t) d[base + t] += g.data[base + t] * s;
                         }
                     });
}

// (B, Ca, T) ++ (B, Cb, T) -> (B, Ca + Cb, T)
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::tape_of(a);
  detail::require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2),
                  "concat_channels: incompatible shapes " + shape_str(av.shape) + " and " + shape_str(bv.shape));
  const std::size_t B = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), Tn = av.dim(2);
  Tensor<T> out(Shape{B, Ca + Cb, Tn});
  for (std::size_t i = 0; i < B; ++i) {
    std::copy_n(av.ptr() + i * Ca * Tn, Ca * Tn, out.ptr() + i * (Ca + Cb) * Tn);
    std::copy_n(bv.ptr() + i * Cb * Tn, Cb * Tn, out.ptr() + i * (Ca + Cb) * Tn + Ca * Tn);
  }
  return tape.record("concat_channels", std::move(out), tape.requires_grad(a) || tape.requires_grad(b),
                     [a, b, B, Ca, Cb, Tn](Tape<T>& tp, const Tensor<T>& g) {
                       if (tp.requires_grad(a)) {
                         T* d = tp.grad(a.id).ptr();
                         for (std::size_t i = 0; i < B; ++i)
                           for (std::size_t k = 0; k < Ca * Tn; ++k) d[i * Ca * Tn + k] += g.data[i * (Ca + Cb) * Tn + k];
                       }
                       if (tp.requires_grad(b)) {
                         T* d = tp.grad(b.id).ptr();
                         for (std::size_t i = 0; i < B; ++i)
                           for (std::size_t k = 0; k < Cb * Tn; ++k)
                             d[i * Cb * Tn + k] += g.data[i * (Ca + Cb) * Tn + Ca * Tn + k];
                       }
                     });
}

namespace detail {

// Copies the first `keep` samples of every row of a (rows, Tin) view into a
// (rows, Tout) view, zero filling the rest.
template <typename T>
void copy_rows(const T* src, std::size_t Tin, T* dst, std::size_t Tout, std::size_t rows, std::size_t keep,
               bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = src + r * Tin;
    T* d = dst + r * Tout;
    if (accumulate)
      for (std::size_t t = 0; t < keep; ++t) d[t] += s[t];
    else
      std::copy_n(s, keep, d);
  }
}

}  // namespace detail

// Appends `extra` zeros on the right of the time (last) axis.
template <typename T>
Var<T> pad_time(Var<T> x, std::size_t extra) {
  Tape<T>& tape = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  detail::require(xv.rank() >= 1, "pad_time: needs a time axis");
  const std::size_t Tn = xv.shape.back();
  const std::size_t rows = Tn ? xv.size() / Tn : 0;
  Shape s = xv.shape;
  s.back() = Tn + extra;
  Tensor<T> out(s);
  detail::copy_rows(xv.ptr(), Tn, out.ptr(), Tn + extra, rows, Tn, false);
  return tape.record("pad_time", std::move(out), tape.requires_grad(x),
                     [x, Tn, extra, rows](Tape<T>& tp, const Tensor<T>& g) {
                       detail::copy_rows(g.ptr(), Tn + extra, tp.grad(x.id).ptr(), Tn, rows, Tn, true);
                     });
}

// Keeps the first `len` samples of the time (last) axis.
template <typename T>
Var<T> crop_time(Var<T> x, std::size_t len) {
  Tape<T>& tape = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  detail::require(xv.rank() >= 1 && len <= xv.shape.back(), "crop_time: crop length exceeds time axis");
  const std::size_t Tn = xv.shape.back();
  const std::size_t rows = Tn ? xv.size() / Tn : 0;
  Shape s = xv.shape;
  s.back() = len;
  Tensor<T> out(s);
  detail::copy_rows(xv.ptr(), Tn, out.ptr(), len, rows, len, false);
  return tape.record("crop_time", std::move(out), tape.requires_grad(x),
                     [x, Tn, len, rows](Tape<T>& tp, const Tensor<T>& g) {
                       detail::copy_rows(g.ptr(), len, tp.grad(x.id).ptr(), Tn, rows, len, true);
                     });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tape<T>& tape = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  detail::require(numel(shape) == xv.size(), "reshape: " + shape_str(xv.shape) + " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape), xv.data);
  return tape.record("reshape", std::move(out), tape.requires_grad(x), [x](Tape<T>& tp, const Tensor<T>& g) {
    T* d = tp.grad(x.id).ptr();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g.data[i];
  });
}

// (B, 1, F*hop) -> (B, hop, F): column f holds samples [f*hop, (f+1)*hop).
template <typename T>
Var<T> frames_from_wave(Var<T> x, std::size_t hop) {
  Tape<T>& tape = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  detail::require(xv.rank() == 3 && xv.dim(1) == 1 && hop > 0 && xv.dim(2) % hop == 0,
                  "frames_from_wave: expected (B,1,F*hop), got " + shape_str(xv.shape));
  const std::size_t B = xv.dim(0), F = xv.dim(2) / hop;
  Tensor<T> out(Shape{B, hop, F});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t h = 0; h < hop; ++h) out.at3(b, h, f) = xv.data[b * F * hop + f * hop + h];
  return tape.record("frames_from_wave", std::move(out), tape.requires_grad(x),
                     [x, B, F, hop](Tape<T>& tp, const Tensor<T>& g) {
                       T* d = tp.grad(x.id).ptr();
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t f = 0; f < F; ++f)
                           for (std::size_t h = 0; h < hop; ++h) d[b * F * hop + f * hop + h] += g.at3(b, h, f);
                     });
}

// Inverse of frames_from_wave: (B, hop, F) -> (B, 1, F*hop).
template <typename T>
Var<T> wave_from_frames(Var<T> x) {
  Tape<T>& tape = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  detail::require(xv.rank() == 3, "wave_from_frames: expected (B,hop,F), got " + shape_str(xv.shape));
  const std::size_t B = xv.dim(0), hop = xv.dim(1), F = xv.dim(2);
  Tensor<T> out(Shape{B, 1, F * hop});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t h = 0; h < hop; ++h) out.data[b * F * hop + f * hop + h] = xv.at3(b, h, f);
  return tape.record("wave_from_frames", std::move(out), tape.requires_grad(x),
                     [x, B, F, hop](Tape<T>& tp, const Tensor<T>& g) {
                       Tensor<T>& d = tp.grad(x.id);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t f = 0; f < F; ++f)
                           for (std::size_t h = 0; h < hop; ++h) d.at3(b, h, f) += g.data[b * F * hop + f * hop + h];
                     });
}

// ---------------------------------------------------------------------------
// Reductions (all return scalars)

template <typename T>
Var<T> sum(Var<T> x) {
  Tape<T>& tape = detail::tape_of(x);
  double s = 0;
  for (T v : x.value().data) s += v;
  return tape.record("sum", Tensor<T>::scalar(static_cast<T>(s)), tape.requires_grad(x),
                     [x](Tape<T>& tp, const Tensor<T>& g) {
                       T* d = tp.grad(x.id).ptr();
                       const std::size_t n = tp.value(x).size();
                       for (std::size_t i = 0; i < n; ++i) d[i] += g.data[0];
                     });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().size();
  detail::require(n > 0, "mean: empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(n));
}

// mean |x|, subgradient sign(0) = 0
template <typename T>
Var<T> mean_abs(Var<T> x) {
  Tape<T>& tape = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  detail::require(xv.size() > 0, "mean_abs: empty tensor");
  double s = 0;
  for (T v : xv.data) s += std::abs(v);
  const double n = static_cast<double>(xv.size());
  return tape.record("mean_abs", Tensor<T>::scalar(static_cast<T>(s / n)), tape.requires_grad(x),
                     [x, n](Tape<T>& tp, const Tensor<T>& g) {
                       const Tensor<T>& xv2 = x.value();
                       T* d = tp.grad(x.id).ptr();
                       const T k = static_cast<T>(g.data[0] / n);
                       for (std::size_t i = 0; i < xv2.size(); ++i) {
                         const T v = xv2.data[i];
                         d[i] += v > T(0) ? k : (v < T(0) ? -k : T(0));
                       }
                     });
}

template <typename T>
Var<T> sum_sq(Var<T> x) {
  Tape<T>& tape = detail::tape_of(x);
  double s = 0;
  for (T v : x.value().data) s += static_cast<double>(v) * v;
  return tape.record("sum_sq", Tensor<T>::scalar(static_cast<T>(s)), tape.requires_grad(x),
                     [x](Tape<T>& tp, const Tensor<T>& g) {
                       const Tensor<T>& xv2 = x.value();
                       T* d = tp.grad(x.id).ptr();
                       for (std::size_t i = 0; i < xv2.size(); ++i) d[i] += T(2) * g.data[0] * xv2.data[i];
                     });
}

template <typename T>
Var<T> dot(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::tape_of(a);
  detail::require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require(av.size() == bv.size(), "dot: size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += static_cast<double>(av.data[i]) * bv.data[i];
  return tape.record("dot", Tensor<T>::scalar(static_cast<T>(s)), tape.requires_grad(a) || tape.requires_grad(b),
                     [a, b](Tape<T>& tp, const Tensor<T>& g) {
                       const Tensor<T>& av2 = a.value();
                       const Tensor<T>& bv2 = b.value();
                       if (tp.requires_grad(a)) {
                         T* d = tp.grad(a.id).ptr();
                         for (std::size_t i = 0; i < av2.size(); ++i) d[i] += g.data[0] * bv2.data[i];
                       }
                       if (tp.requires_grad(b)) {
                         T* d = tp.grad(b.id).ptr();
                         for (std::size_t i = 0; i < av2.size(); ++i) d[i] += g.data[0] * av2.data[i];
                       }
                     });
}

template <typename T>
Var<T> log10_scalar(Var<T> x) {
  Tape<T>& tape = detail::tape_of(x);
  const T v = x.value().item();
  if (!(v > T(0))) throw NumericError("log10_scalar: argument must be positive");
  return tape.record("log10_scalar", Tensor<T>::scalar(std::log10(v)), tape.requires_grad(x),
                     [x](Tape<T>& tp, const Tensor<T>& g) {
                       const T v2 = x.value().item();
                       tp.grad(x.id).data[0] += g.data[0] / (v2 * static_cast<T>(std::log(10.0)));
                     });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
  bool passed = true;
};

inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-12});
}

// `build` records a scalar-valued function of `params` on the tape it is
// given. Every coordinate of every parameter (up to `max_coords` per
// parameter, evenly strided; 0 means all) is compared against five-point
// central differences with step h.
template <typename Build>
GradCheckReport grad_check(Build&& build, const std::vector<Parameter<double>*>& params, double h, double tol,
                           std::size_t max_coords = std::numeric_limits<std::size_t>::max()) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = build(tape);
    tape.backward(loss);
  }
  auto eval = [&build]() {
    Tape<double> tape;
    return build(tape).value().item();
  };
  GradCheckReport rep;
  for (auto* p : params) {
    const std::size_t n = p->value.size();
    const std::size_t step = max_coords > 0 && n > max_coords ? (n + max_coords - 1) / max_coords : 1;
    for (std::size_t i = 0; i < n; i += step) {
      const double orig = p->value.data[i];
      auto at = [&](double d) {
        p->value.data[i] = orig + d;
        return eval();
      };
      const double f1 = at(h) - at(-h);
      const double f2 = at(2 * h) - at(-2 * h);
      p->value.data[i] = orig;
      // five-point stencil, O(h^4) truncation error
      const double numeric = (8.0 * f1 - f2) / (12.0 * h);
      const double analytic = p->grad.data[i];
      const double err = grad_rel_error(analytic, numeric);
      ++rep.coords_checked;
      if (err > rep.max_rel_error || rep.coords_checked == 1) {
        rep.max_rel_error = err;
        rep.worst_param = p->name;
        rep.worst_index = i;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.passed = rep.max_rel_error < tol;
  return rep;
}

}  // namespace adnac::ad
