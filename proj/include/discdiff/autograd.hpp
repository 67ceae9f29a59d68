#pragma once

// Tape-free reverse-mode automatic differentiation over Tensor<T>.
//
// A Var owns a shared graph node. Results of operations keep their parents
// alive only when some input requires a gradient, so inference through the
// same code path builds no graph.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "discdiff/tensor.hpp"

namespace discdiff::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value[0]; }
  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

  void zero_grad() {
    if (node_) node_->grad = Tensor<T>();
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const Mat<T>>;

namespace detail {

template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  for (const auto& in : inputs) node->requires_grad |= in.requires_grad();
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

template <typename T>
bool wants(const Node<T>& self, std::size_t i) {
  return self.parents[i] && self.parents[i]->requires_grad;
}

}  // namespace detail

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

// Runs reverse accumulation from a scalar root. Gradients accumulate into
// leaves; callers zero them between steps.
template <typename T>
void backward(const Var<T>& root) {
  if (root.size() != 1) throw InvalidArgument("backward requires a scalar root");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(self, k)) continue;
      auto& g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (detail::wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (detail::wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

// a / (b + guard)
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b, T guard = T(0)) {
  require_same_shape(a.value(), b.value(), "div");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= (b.value()[i] + guard);
  return detail::make_result<T>(std::move(out), {a, b}, [guard](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (detail::wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / (bv[i] + guard);
    }
    if (detail::wants(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T d = bv[i] + guard;
        g[i] -= self.grad[i] * av[i] / (d * d);
      }
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return detail::make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

namespace detail {

template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D df_from_x_y) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = f(v);
  return make_result<T>(std::move(out), {a}, [df_from_x_y](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * df_from_x_y(x[i], self.value[i]);
  });
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

template <typename T>
Var<T> silu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x * detail::sigmoid(x); },
      [](T x, T) {
        const T s = detail::sigmoid(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return detail::sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  return detail::make_result<T>(Tensor<T>({1}, s), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g.values()) v += self.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Euclidean norm of each leading-axis item: {N, ...} -> {N}. The gradient at
// a zero vector is taken as zero.
template <typename T>
Var<T> l2_norm_per_item(const Var<T>& a) {
  const std::size_t n = a.dim(0);
  const std::size_t len = a.size() / n;
  Tensor<T> out({n});
  for (std::size_t b = 0; b < n; ++b) {
    T s = 0;
    for (std::size_t i = 0; i < len; ++i) s += a.value()[b * len + i] * a.value()[b * len + i];
    out[b] = std::sqrt(s);
  }
  return detail::make_result<T>(std::move(out), {a}, [n, len](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < n; ++b) {
      if (self.value[b] == T(0)) continue;
      const T k = self.grad[b] / self.value[b];
      for (std::size_t i = 0; i < len; ++i) g[b * len + i] += k * x[b * len + i];
    }
  });
}

// mean over elements of sqrt(d^2 + gamma^2)
template <typename T>
Var<T> charbonnier_mean(const Var<T>& d, T gamma) {
  T s = 0;
  const T g2 = gamma * gamma;
  for (T v : d.value().values()) s += std::sqrt(v * v + g2);
  const T inv_n = T(1) / static_cast<T>(d.size());
  return detail::make_result<T>(Tensor<T>({1}, s * inv_n), {d}, [g2, inv_n](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    const T up = self.grad[0] * inv_n;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * x[i] / std::sqrt(x[i] * x[i] + g2);
  });
}

template <typename T>
Var<T> square_mean(const Var<T>& d) {
  T s = 0;
  for (T v : d.value().values()) s += v * v;
  const T inv_n = T(1) / static_cast<T>(d.size());
  return detail::make_result<T>(Tensor<T>({1}, s * inv_n), {d}, [inv_n](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    const T up = T(2) * self.grad[0] * inv_n;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * x[i];
  });
}

// Softmax over a 1-D vector.
template <typename T>
Var<T> softmax(const Var<T>& a) {
  Tensor<T> out = a.value();
  const T m = *std::max_element(out.values().begin(), out.values().end());
  T s = 0;
  for (auto& v : out.values()) s += (v = std::exp(v - m));
  for (auto& v : out.values()) v /= s;
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    T dot = 0;
    for (std::size_t i = 0; i < self.value.size(); ++i) dot += self.grad[i] * self.value[i];
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.value[i] * (self.grad[i] - dot);
  });
}

// out = sum_k w[k] * xs[k], with w a 1-D Var of length xs.size().
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const Var<T>& w) {
  if (w.size() != xs.size()) throw ShapeMismatch("weighted_sum: weight count differs from inputs");
  Tensor<T> out(xs.front().shape());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    require_same_shape(xs[k].value(), xs.front().value(), "weighted_sum");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w.value()[k] * xs[k].value()[i];
  }
  std::vector<Var<T>> inputs = xs;
  inputs.push_back(w);
  const std::size_t k_count = xs.size();
  return detail::make_result<T>(std::move(out), std::move(inputs), [k_count](Node<T>& self) {
    const auto& wv = self.parents[k_count]->value;
    for (std::size_t k = 0; k < k_count; ++k) {
      if (detail::wants(self, k)) {
        auto& g = self.parents[k]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += wv[k] * self.grad[i];
      }
    }
    if (detail::wants(self, k_count)) {
      auto& g = self.parents[k_count]->grad_buffer();
      for (std::size_t k = 0; k < k_count; ++k) {
        const auto& x = self.parents[k]->value;
        T s = 0;
        for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * self.grad[i];
        g[k] += s;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Feature-map ops on {N, C, H, W}

namespace detail {

template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* x) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

// Square-kernel 2-D convolution. weight {Cout, Cin, k, k}, bias {Cout}.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
              std::size_t pad) {
  if (x.value().rank() != 4 || weight.value().rank() != 4)
    throw ShapeMismatch("conv2d expects rank-4 input and weight");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin)
    throw ShapeMismatch("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                        std::to_string(weight.dim(1)));
  if (h + 2 * pad < k || w + 2 * pad < k) throw ShapeMismatch("conv2d: input smaller than kernel");
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (w + 2 * pad - k) / stride + 1;
  const std::size_t kk = cin * k * k, p = ho * wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> out({n, cout, ho, wo});
  CMatMap<T> wm(weight.value().data(), cout, kk);
  Mat<T> col(direct ? 0 : kk, direct ? 0 : p);
  for (std::size_t b = 0; b < n; ++b) {
    const T* xb = x.value().data() + b * cin * h * w;
    MatMap<T> ob(out.data() + b * cout * p, cout, p);
    if (direct) {
      ob.noalias() = wm * CMatMap<T>(xb, kk, p);
    } else {
      detail::im2col(xb, cin, h, w, k, stride, pad, ho, wo, col.data());
      ob.noalias() = wm * col;
    }
    if (bias.defined())
      for (std::size_t co = 0; co < cout; ++co) ob.row(co).array() += bias.value()[co];
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(
      std::move(out), std::move(inputs),
      [=](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        CMatMap<T> wm(wv.data(), cout, kk);
        const bool gx = detail::wants(self, 0), gw = detail::wants(self, 1);
        const bool gb = self.parents.size() > 2 && detail::wants(self, 2);
        Mat<T> col(direct ? 0 : kk, direct ? 0 : p);
        Mat<T> dcol(direct ? 0 : kk, direct ? 0 : p);
        for (std::size_t b = 0; b < n; ++b) {
          CMatMap<T> gb_out(self.grad.data() + b * cout * p, cout, p);
          const T* xb = xv.data() + b * cin * h * w;
          if (gw) {
            MatMap<T> gwm(self.parents[1]->grad_buffer().data(), cout, kk);
            if (direct) {
              gwm.noalias() += gb_out * CMatMap<T>(xb, kk, p).transpose();
            } else {
              detail::im2col(xb, cin, h, w, k, stride, pad, ho, wo, col.data());
              gwm.noalias() += gb_out * col.transpose();
            }
          }
          if (gb) {
            auto& g = self.parents[2]->grad_buffer();
            for (std::size_t co = 0; co < cout; ++co) g[co] += gb_out.row(co).sum();
          }
          if (gx) {
            T* gxb = self.parents[0]->grad_buffer().data() + b * cin * h * w;
            if (direct) {
              MatMap<T>(gxb, kk, p).noalias() += wm.transpose() * gb_out;
            } else {
              dcol.noalias() = wm.transpose() * gb_out;
              detail::col2im(dcol.data(), cin, h, w, k, stride, pad, ho, wo, gxb);
            }
          }
        }
      });
}

// x {N, in}, weight {out, in}, bias {out} -> {N, out}
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const std::size_t n = x.dim(0), in = x.dim(1), outf = weight.dim(0);
  if (weight.dim(1) != in) throw ShapeMismatch("linear: input width differs from weight");
  Tensor<T> out({n, outf});
  MatMap<T> om(out.data(), n, outf);
  om.noalias() = CMatMap<T>(x.value().data(), n, in) *
                 CMatMap<T>(weight.value().data(), outf, in).transpose();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < outf; ++o) om(b, o) += bias.value()[o];
  return detail::make_result<T>(std::move(out), {x, weight, bias}, [=](Node<T>& self) {
    CMatMap<T> g(self.grad.data(), n, outf);
    if (detail::wants(self, 0))
      MatMap<T>(self.parents[0]->grad_buffer().data(), n, in).noalias() +=
          g * CMatMap<T>(self.parents[1]->value.data(), outf, in);
    if (detail::wants(self, 1))
      MatMap<T>(self.parents[1]->grad_buffer().data(), outf, in).noalias() +=
          g.transpose() * CMatMap<T>(self.parents[0]->value.data(), n, in);
    if (detail::wants(self, 2)) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::size_t o = 0; o < outf; ++o) gb[o] += g.col(o).sum();
    }
  });
}

// Group normalization with per-channel affine parameters.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups,
                  T eps = T(1e-5)) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c % groups != 0) throw ShapeMismatch("group_norm: channels not divisible by groups");
  const std::size_t cg = c / groups, m = cg * hw;
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(n * groups);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t off = (b * c + g * cg) * hw;
      const T* xs = x.value().data() + off;
      T mu = 0;
      for (std::size_t i = 0; i < m; ++i) mu += xs[i];
      mu /= static_cast<T>(m);
      T var = 0;
      for (std::size_t i = 0; i < m; ++i) var += (xs[i] - mu) * (xs[i] - mu);
      var /= static_cast<T>(m);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[b * groups + g] = is;
      for (std::size_t ci = 0; ci < cg; ++ci) {
        const std::size_t ch = g * cg + ci;
        const T ga = gamma.value()[ch], be = beta.value()[ch];
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t idx = off + ci * hw + i;
          xhat[idx] = (x.value()[idx] - mu) * is;
          out[idx] = xhat[idx] * ga + be;
        }
      }
    }
  return detail::make_result<T>(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& ga = self.parents[1]->value;
        const bool gx = detail::wants(self, 0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t off = (b * c + g * cg) * hw;
            T sum_dxh = 0, sum_dxh_xh = 0;
            for (std::size_t ci = 0; ci < cg; ++ci) {
              const std::size_t ch = g * cg + ci;
              T sg = 0, sgx = 0;
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = off + ci * hw + i;
                sg += self.grad[idx];
                sgx += self.grad[idx] * xhat[idx];
              }
              if (detail::wants(self, 1)) self.parents[1]->grad_buffer()[ch] += sgx;
              if (detail::wants(self, 2)) self.parents[2]->grad_buffer()[ch] += sg;
              sum_dxh += sg * ga[ch];
              sum_dxh_xh += sgx * ga[ch];
            }
            if (!gx) continue;
            auto& gxv = self.parents[0]->grad_buffer();
            const T is = inv_std[b * groups + g];
            const T inv_m = T(1) / static_cast<T>(m);
            for (std::size_t ci = 0; ci < cg; ++ci) {
              const T gac = ga[g * cg + ci];
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = off + ci * hw + i;
                const T dxh = self.grad[idx] * gac;
                gxv[idx] += is * (dxh - inv_m * sum_dxh - xhat[idx] * inv_m * sum_dxh_xh);
              }
            }
          }
      });
}

// x {N, C, H, W} + b {N, C} broadcast over space.
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (b.value().rank() != 2 || b.dim(0) != n || b.dim(1) != c)
    throw ShapeMismatch("add_channel_bias: bias must be {N, C}");
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] += b.value()[i];
  return detail::make_result<T>(std::move(out), {x, b}, [n, c, hw](Node<T>& self) {
    if (detail::wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < n * c; ++i) {
        T s = 0;
        for (std::size_t j = 0; j < hw; ++j) s += self.grad[i * hw + j];
        g[i] += s;
      }
    }
  });
}

// x {N, C, H, W} * s {N, C} broadcast over space.
template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (s.value().rank() != 2 || s.dim(0) != n || s.dim(1) != c)
    throw ShapeMismatch("scale_channels: scale must be {N, C}");
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] *= s.value()[i];
  return detail::make_result<T>(std::move(out), {x, s}, [n, c, hw](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& sv = self.parents[1]->value;
    if (detail::wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < n * c; ++i)
        for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += self.grad[i * hw + j] * sv[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < n * c; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < hw; ++j) acc += self.grad[i * hw + j] * xv[i * hw + j];
        g[i] += acc;
      }
    }
  });
}

// {N, C, H, W} -> {N, C}
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < hw; ++j) s += x.value()[i * hw + j];
    out[i] = s / static_cast<T>(hw);
  }
  return detail::make_result<T>(std::move(out), {x}, [n, c, hw](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n * c; ++i) {
      const T v = self.grad[i] / static_cast<T>(hw);
      for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += v;
    }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  const std::size_t n = xs.front().dim(0), h = xs.front().dim(2), w = xs.front().dim(3);
  std::size_t c = 0;
  std::vector<std::size_t> widths;
  for (const auto& x : xs) {
    if (x.dim(0) != n || x.dim(2) != h || x.dim(3) != w)
      throw ShapeMismatch("concat_channels: batch/spatial sizes differ");
    widths.push_back(x.dim(1));
    c += x.dim(1);
  }
  const std::size_t hw = h * w;
  Tensor<T> out({n, c, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const T* src = xs[k].value().data() + b * widths[k] * hw;
      std::copy(src, src + widths[k] * hw, out.data() + (b * c + off) * hw);
      off += widths[k];
    }
  }
  return detail::make_result<T>(std::move(out), xs, [n, c, hw, widths](Node<T>& self) {
    for (std::size_t b = 0; b < n; ++b) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        if (detail::wants(self, k)) {
          auto& g = self.parents[k]->grad_buffer();
          const T* src = self.grad.data() + (b * c + off) * hw;
          T* dst = g.data() + b * widths[k] * hw;
          for (std::size_t i = 0; i < widths[k] * hw; ++i) dst[i] += src[i];
        }
        off += widths[k];
      }
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t start, std::size_t count) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
  if (start + count > c) throw ShapeMismatch("slice_channels: range exceeds channel count");
  Tensor<T> out({n, count, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = x.value().data() + (b * c + start) * hw;
    std::copy(src, src + count * hw, out.data() + b * count * hw);
  }
  return detail::make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < n; ++b) {
      T* dst = g.data() + (b * c + start) * hw;
      const T* src = self.grad.data() + b * count * hw;
      for (std::size_t i = 0; i < count * hw; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeMismatch("avg_pool2: odd spatial size");
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor<T> out({n, c, ho, wo});
  const T* xv = x.value().data();
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        const T* s = xv + p * h * w + 2 * i * w + 2 * j;
        out[p * ho * wo + i * wo + j] = T(0.25) * (s[0] + s[1] + s[w] + s[w + 1]);
      }
  return detail::make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          const T v = T(0.25) * self.grad[p * ho * wo + i * wo + j];
          T* d = g.data() + p * h * w + 2 * i * w + 2 * j;
          d[0] += v;
          d[1] += v;
          d[w] += v;
          d[w + 1] += v;
        }
  });
}

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = 2 * h, wo = 2 * w;
  Tensor<T> out({n, c, ho, wo});
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        out[p * ho * wo + i * wo + j] = x.value()[p * h * w + (i / 2) * w + j / 2];
  return detail::make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j)
          g[p * h * w + (i / 2) * w + j / 2] += self.grad[p * ho * wo + i * wo + j];
  });
}

// Multi-head dot-product self-attention over spatial positions.
// qkv {N, 3C, H, W} laid out as [q | k | v] per head -> {N, C, H, W}.
template <typename T>
Var<T> spatial_attention(const Var<T>& qkv, std::size_t heads) {
  const std::size_t n = qkv.dim(0), c3 = qkv.dim(1), h = qkv.dim(2), w = qkv.dim(3);
  if (c3 % (3 * heads) != 0) throw ShapeMismatch("spatial_attention: channels not divisible");
  const std::size_t c = c3 / 3, d = c / heads, L = h * w;
  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> out({n, c, h, w});
  std::vector<Mat<T>> weights(n * heads);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const T* base = qkv.value().data() + (b * c3 + hd * 3 * d) * L;
      CMatMap<T> q(base, d, L), k(base + d * L, d, L), v(base + 2 * d * L, d, L);
      Mat<T> a = (q.transpose() * k) * sc;  // {L_t, L_s}
      for (Eigen::Index t = 0; t < a.rows(); ++t) {
        const T mx = a.row(t).maxCoeff();
        a.row(t) = (a.row(t).array() - mx).exp();
        a.row(t) /= a.row(t).sum();
      }
      MatMap<T>(out.data() + (b * c + hd * d) * L, d, L).noalias() = v * a.transpose();
      weights[b * heads + hd] = std::move(a);
    }
  return detail::make_result<T>(
      std::move(out), {qkv}, [=, weights = std::move(weights)](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const T* base = self.parents[0]->value.data() + (b * c3 + hd * 3 * d) * L;
            CMatMap<T> q(base, d, L), k(base + d * L, d, L), v(base + 2 * d * L, d, L);
            T* gbase = g.data() + (b * c3 + hd * 3 * d) * L;
            MatMap<T> gq(gbase, d, L), gk(gbase + d * L, d, L), gv(gbase + 2 * d * L, d, L);
            CMatMap<T> go(self.grad.data() + (b * c + hd * d) * L, d, L);
            const Mat<T>& a = weights[b * heads + hd];
            gv.noalias() += go * a;
            Mat<T> da = go.transpose() * v;  // {L_t, L_s}
            for (Eigen::Index t = 0; t < da.rows(); ++t) {
              const T dot = (da.row(t).array() * a.row(t).array()).sum();
              da.row(t) = a.row(t).array() * (da.row(t).array() - dot);
            }
            da *= sc;
            gq.noalias() += k * da.transpose();
            gk.noalias() += q * da;
          }
      });
}

}  // namespace discdiff::ag
