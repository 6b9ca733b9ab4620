#include "afft/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace afft::core {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  if (!check_finite_enabled()) return;
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

// Wraps freshly computed values into a tensor and records the backward closure when needed.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::vector<NodePtr<T>> parents, BackwardFn<T> bw,
                      const char* op) {
  check_finite(values, op);
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(bw);
  }
  return Tensor<T>::from_node(std::move(node));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = ap[i];
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
Tensor<T> unary(const Tensor<T>& x, T (*f)(T), T (*df)(T, T), const char* op) {
  std::vector<T> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xs[i]);
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {xn},
                        [xn, df](TensorNode<T>& self) {
                          if (!xn->requires_grad) return;
                          auto& g = xn->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(xn->value[i], self.value[i]);
                        },
                        op);
}

}  // namespace

Mask Mask::all(Shape shape) {
  Mask m;
  m.allow.assign(shape_numel(shape), 1);
  m.shape = std::move(shape);
  return m;
}

Mask Mask::causal(std::size_t n) {
  Mask m;
  m.shape = {n, n};
  m.allow.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.allow[i * n + j] = 1;
  return m;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  auto an = a.node(), bn = b.node();
  return make_result<T>(Shape{m, n}, std::move(out), {an, bn},
                        [an, bn, m, k, n](TensorNode<T>& self) {
                          if (an->requires_grad) gemm_nt(m, n, k, self.grad.data(), bn->value.data(), an->grad_buffer().data());
                          if (bn->requires_grad) gemm_tn(k, m, n, an->value.data(), self.grad.data(), bn->grad_buffer().data());
                        },
                        "matmul");
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<T> out(g * m * n, T(0));
  for (std::size_t i = 0; i < g; ++i) gemm_nn(m, k, n, a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n);
  auto an = a.node(), bn = b.node();
  return make_result<T>(Shape{g, m, n}, std::move(out), {an, bn},
                        [an, bn, g, m, k, n](TensorNode<T>& self) {
                          for (std::size_t i = 0; i < g; ++i) {
                            const T* go = self.grad.data() + i * m * n;
                            if (an->requires_grad) gemm_nt(m, n, k, go, bn->value.data() + i * k * n, an->grad_buffer().data() + i * m * k);
                            if (bn->requires_grad) gemm_tn(k, m, n, an->value.data() + i * m * k, go, bn->grad_buffer().data() + i * k * n);
                          }
                        },
                        "bmm");
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw ShapeError("linear shape mismatch: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t k = w.dim(0), n = w.dim(1), m = x.numel() / k;
  if (bias && (bias->rank() != 1 || bias->dim(0) != n)) throw ShapeError("linear bias shape mismatch");
  std::vector<T> out(m * n, T(0));
  if (bias) {
    auto bs = bias->data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bs.begin(), bs.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  gemm_nn(m, k, n, x.data().data(), w.data().data(), out.data());
  Shape shape = x.shape();
  shape.back() = n;
  auto xn = x.node(), wn = w.node();
  NodePtr<T> bn = bias ? bias->node() : nullptr;
  std::vector<NodePtr<T>> parents{xn, wn};
  if (bn) parents.push_back(bn);
  return make_result<T>(std::move(shape), std::move(out), std::move(parents),
                        [xn, wn, bn, m, k, n](TensorNode<T>& self) {
                          if (xn->requires_grad) gemm_nt(m, n, k, self.grad.data(), wn->value.data(), xn->grad_buffer().data());
                          if (wn->requires_grad) gemm_tn(k, m, n, xn->value.data(), self.grad.data(), wn->grad_buffer().data());
                          if (bn && bn->requires_grad) {
                            auto& g = bn->grad_buffer();
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                          }
                        },
                        "linear");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix(b.shape(), a.shape())) {
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  }
  const std::size_t nb = b.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bs[i % nb];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {an, bn},
                        [an, bn, nb](TensorNode<T>& self) {
                          if (an->requires_grad) {
                            auto& g = an->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                          if (bn->requires_grad) {
                            auto& g = bn->grad_buffer();
                            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % nb] += self.grad[i];
                          }
                        },
                        "add");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {an, bn},
                        [an, bn](TensorNode<T>& self) {
                          if (an->requires_grad) {
                            auto& g = an->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
                          }
                          if (bn->requires_grad) {
                            auto& g = bn->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
                          }
                        },
                        "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto an = a.node();
  return make_result<T>(a.shape(), std::move(out), {an},
                        [an, factor](TensorNode<T>& self) {
                          auto& g = an->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
                        },
                        "scale");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T in, T) { return in > T(0) ? T(1) : T(0); }, "relu");
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>)); },
      [](T in, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(in / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * in * in) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
        return cdf + in * pdf;
      },
      "gelu");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T out) { return out * (T(1) - out); }, "sigmoid");
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.data()) {
    if (!(v > T(0))) throw NumericError("log of non-positive value");
  }
  return unary<T>(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; }, "log");
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t axis, const Mask* mask) {
  const auto rank = static_cast<std::ptrdiff_t>(x.rank());
  if (rank == 0) throw ShapeError("softmax of a scalar");
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax axis out of range");
  if (mask && (!is_suffix(mask->shape, x.shape()) || mask->allow.size() != shape_numel(mask->shape) || mask->allow.empty())) {
    throw ShapeError("softmax mask " + shape_str(mask->shape) + " not broadcastable to " + shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), static_cast<std::size_t>(axis));
  auto xs = x.data();
  std::vector<T> out(x.numel(), T(0));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < s.len; ++j) {
        const std::size_t f = base + j * s.inner;
        if (mask && !mask->allowed(f)) continue;
        any = true;
        mx = std::max(mx, xs[f]);
      }
      if (!any) throw NumericError("softmax over a fully masked slice");
      T total = 0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const std::size_t f = base + j * s.inner;
        if (mask && !mask->allowed(f)) continue;
        out[f] = std::exp(xs[f] - mx);
        total += out[f];
      }
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] /= total;
    }
  }
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {xn},
                        [xn, s](TensorNode<T>& self) {
                          auto& g = xn->grad_buffer();
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t in = 0; in < s.inner; ++in) {
                              const std::size_t base = o * s.len * s.inner + in;
                              T dot = 0;
                              for (std::size_t j = 0; j < s.len; ++j) {
                                const std::size_t f = base + j * s.inner;
                                dot += self.grad[f] * self.value[f];
                              }
                              for (std::size_t j = 0; j < s.len; ++j) {
                                const std::size_t f = base + j * s.inner;
                                g[f] += self.value[f] * (self.grad[f] - dot);
                              }
                            }
                          }
                        },
                        "softmax");
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm of a scalar");
  const std::size_t n = x.shape().back();
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw ShapeError("layer_norm affine parameters must have shape [" + std::to_string(n) + "]");
  }
  const std::size_t rows = x.numel() / n;
  auto xs = x.data();
  auto gs = gamma.data(), bs = beta.data();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xs.data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mu) * rstd[r];
      out[r * n + j] = xhat[r * n + j] * gs[j] + bs[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result<T>(x.shape(), std::move(out), {xn, gn, bn},
                        [xn, gn, bn, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](TensorNode<T>& self) {
                          const auto& dy = self.grad;
                          if (gn->requires_grad || bn->requires_grad) {
                            auto& gg = gn->grad_buffer();
                            auto& gb = bn->grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < n; ++j) {
                                gg[j] += dy[r * n + j] * xhat[r * n + j];
                                gb[j] += dy[r * n + j];
                              }
                          }
                          if (!xn->requires_grad) return;
                          auto& gx = xn->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            T mean_d = 0, mean_dx = 0;
                            for (std::size_t j = 0; j < n; ++j) {
                              const T d = dy[r * n + j] * gn->value[j];
                              mean_d += d;
                              mean_dx += d * xhat[r * n + j];
                            }
                            mean_d /= static_cast<T>(n);
                            mean_dx /= static_cast<T>(n);
                            for (std::size_t j = 0; j < n; ++j) {
                              const T d = dy[r * n + j] * gn->value[j];
                              gx[r * n + j] += rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
                            }
                          }
                        },
                        "layer_norm");
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads, const Mask* mask,
                    AttentionTrace* capture) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() || q.dim(0) != k.dim(0) ||
      q.dim(2) != k.dim(2)) {
    throw ShapeError("attention shape mismatch: q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) + " v" +
                     shape_str(v.shape()));
  }
  const std::size_t groups = q.dim(0), tq = q.dim(1), tk = k.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("model dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (mask && mask->shape != Shape{tq, tk}) {
    throw ShapeError("attention mask must be " + shape_str({tq, tk}) + ", got " + shape_str(mask->shape));
  }
  const std::size_t dh = d / heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));
  auto qs = q.data(), ks = k.data(), vs = v.data();
  std::vector<T> probs(groups * heads * tq * tk, T(0));
  std::vector<T> out(groups * tq * d, T(0));
  std::vector<T> row(tk);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < tq; ++i) {
        const T* qi = qs.data() + (g * tq + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < tk; ++j) {
          if (mask && !mask->allow[i * tk + j]) continue;
          const T* kj = ks.data() + (g * tk + j) * d + h * dh;
          T acc = 0;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          row[j] = acc * scl;
          mx = std::max(mx, row[j]);
          any = true;
        }
        if (!any) throw NumericError("attention query row " + std::to_string(i) + " is fully masked");
        T* p = probs.data() + ((g * heads + h) * tq + i) * tk;
        T total = 0;
        for (std::size_t j = 0; j < tk; ++j) {
          if (mask && !mask->allow[i * tk + j]) continue;
          p[j] = std::exp(row[j] - mx);
          total += p[j];
        }
        T* oi = out.data() + (g * tq + i) * d + h * dh;
        for (std::size_t j = 0; j < tk; ++j) {
          p[j] /= total;
          if (p[j] == T(0)) continue;
          const T* vj = vs.data() + (g * tk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  if (capture) {
    AttentionMap map;
    map.groups = groups;
    map.heads = heads;
    map.queries = tq;
    map.keys = tk;
    map.weights.assign(probs.begin(), probs.end());
    capture->layers.push_back(std::move(map));
  }
  auto qn = q.node(), kn = k.node(), vn = v.node();
  return make_result<T>(
      Shape{groups, tq, d}, std::move(out), {qn, kn, vn},
      [qn, kn, vn, probs = std::move(probs), groups, heads, tq, tk, d, dh, scl](TensorNode<T>& self) {
        const auto& dout = self.grad;
        std::vector<T>* gq = qn->requires_grad ? &qn->grad_buffer() : nullptr;
        std::vector<T>* gk = kn->requires_grad ? &kn->grad_buffer() : nullptr;
        std::vector<T>* gv = vn->requires_grad ? &vn->grad_buffer() : nullptr;
        std::vector<T> dp(tk);
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < tq; ++i) {
              const T* p = probs.data() + ((g * heads + h) * tq + i) * tk;
              const T* doi = dout.data() + (g * tq + i) * d + h * dh;
              T dot = 0;
              for (std::size_t j = 0; j < tk; ++j) {
                const T* vj = vn->value.data() + (g * tk + j) * d + h * dh;
                T acc = 0;
                for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
                dp[j] = acc;
                dot += acc * p[j];
                if (gv && p[j] != T(0)) {
                  T* gvj = gv->data() + (g * tk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * doi[c];
                }
              }
              const T* qi = qn->value.data() + (g * tq + i) * d + h * dh;
              T* gqi = gq ? gq->data() + (g * tq + i) * d + h * dh : nullptr;
              for (std::size_t j = 0; j < tk; ++j) {
                if (p[j] == T(0)) continue;
                const T ds = p[j] * (dp[j] - dot) * scl;
                const T* kj = kn->value.data() + (g * tk + j) * d + h * dh;
                if (gqi)
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                if (gk) {
                  T* gkj = gk->data() + (g * tk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      },
      "attention");
}

namespace {

// Shared core for hard and soft targets: per-row target distribution (nullptr = ignored row).
template <typename T, typename RowTarget>
Tensor<T> cross_entropy_impl(const Tensor<T>& logits, std::size_t rows, std::size_t classes, RowTarget target_of) {
  auto xs = logits.data();
  std::vector<T> logp(rows * classes, T(0));
  std::vector<std::uint8_t> used(rows, 0);
  std::size_t valid = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!target_of(r, 0, true)) continue;
    used[r] = 1;
    ++valid;
    const T* x = xs.data() + r * classes;
    T mx = *std::max_element(x, x + classes);
    T total = 0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(x[c] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t c = 0; c < classes; ++c) logp[r * classes + c] = x[c] - lse;
  }
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!used[r]) continue;
    for (std::size_t c = 0; c < classes; ++c) {
      const T t = static_cast<T>(target_of(r, c, false));
      if (t != T(0)) loss -= t * logp[r * classes + c];
    }
  }
  if (valid) loss /= static_cast<T>(valid);
  // Per-row target weights materialised for backward.
  std::vector<T> tgt(rows * classes, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    if (used[r])
      for (std::size_t c = 0; c < classes; ++c) tgt[r * classes + c] = static_cast<T>(target_of(r, c, false));
  auto xn = logits.node();
  return make_result<T>(Shape{}, std::vector<T>{loss}, {xn},
                        [xn, rows, classes, valid, logp = std::move(logp), used = std::move(used),
                         tgt = std::move(tgt)](TensorNode<T>& self) {
                          if (!valid) return;
                          auto& g = xn->grad_buffer();
                          const T s = self.grad[0] / static_cast<T>(valid);
                          for (std::size_t r = 0; r < rows; ++r) {
                            if (!used[r]) continue;
                            T tsum = 0;
                            for (std::size_t c = 0; c < classes; ++c) tsum += tgt[r * classes + c];
                            for (std::size_t c = 0; c < classes; ++c) {
                              const std::size_t f = r * classes + c;
                              g[f] += s * (std::exp(logp[f]) * tsum - tgt[f]);
                            }
                          }
                        },
                        "cross_entropy");
}

template <typename T>
std::pair<std::size_t, std::size_t> logits_rows(const Tensor<T>& logits) {
  if (logits.rank() == 1) return {1, logits.dim(0)};
  if (logits.rank() == 2) return {logits.dim(0), logits.dim(1)};
  throw ShapeError("cross_entropy expects [C] or [N, C] logits, got " + shape_str(logits.shape()));
}

}  // namespace

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  const auto [rows, classes] = logits_rows(logits);
  if (targets.size() != rows) throw ShapeError("cross_entropy target count mismatch");
  for (int t : targets) {
    if (t == kIgnoreIndex) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw ConfigError("cross_entropy target " + std::to_string(t) + " out of range for " + std::to_string(classes) +
                        " classes");
    }
  }
  return cross_entropy_impl(logits, rows, classes, [&](std::size_t r, std::size_t c, bool probe) -> double {
    if (probe) return targets[r] != kIgnoreIndex ? 1.0 : 0.0;
    return static_cast<std::size_t>(targets[r]) == c ? 1.0 : 0.0;
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const SoftTargets& targets) {
  const auto [rows, classes] = logits_rows(logits);
  if (targets.rows != rows || targets.classes != classes || targets.probs.size() != rows * classes ||
      targets.valid.size() != rows) {
    throw ShapeError("cross_entropy soft target shape mismatch");
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (!targets.valid[r]) continue;
    double s = 0;
    for (std::size_t c = 0; c < classes; ++c) s += targets.probs[r * classes + c];
    if (std::abs(s - 1.0) > 1e-6) throw ConfigError("soft target row " + std::to_string(r) + " does not sum to 1");
  }
  return cross_entropy_impl(logits, rows, classes, [&](std::size_t r, std::size_t c, bool probe) -> double {
    if (probe) return targets.valid[r] ? 1.0 : 0.0;
    return targets.probs[r * classes + c];
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.numel();
  if (n == 0) throw ShapeError("mse of empty tensors");
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T diff = a.data()[i] - b.data()[i];
    acc += diff * diff;
  }
  auto an = a.node(), bn = b.node();
  return make_result<T>(Shape{}, std::vector<T>{acc / static_cast<T>(n)}, {an, bn},
                        [an, bn, n](TensorNode<T>& self) {
                          const T s = T(2) * self.grad[0] / static_cast<T>(n);
                          std::vector<T>* ga = an->requires_grad ? &an->grad_buffer() : nullptr;
                          std::vector<T>* gb = bn->requires_grad ? &bn->grad_buffer() : nullptr;
                          for (std::size_t i = 0; i < n; ++i) {
                            const T diff = an->value[i] - bn->value[i];
                            if (ga) (*ga)[i] += s * diff;
                            if (gb) (*gb)[i] -= s * diff;
                          }
                        },
                        "mse");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto xn = x.node();
  return make_result<T>(Shape{}, std::vector<T>{acc}, {xn},
                        [xn](TensorNode<T>& self) {
                          auto& g = xn->grad_buffer();
                          for (auto& v : g) v += self.grad[0];
                        },
                        "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("mean_axis axis out of range");
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.len == 0) throw ShapeError("mean_axis over empty axis");
  std::vector<T> out(s.outer * s.inner, T(0));
  auto xs = x.data();
  const T inv = T(1) / static_cast<T>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.len; ++j)
      for (std::size_t in = 0; in < s.inner; ++in) out[o * s.inner + in] += xs[(o * s.len + j) * s.inner + in] * inv;
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto xn = x.node();
  return make_result<T>(std::move(shape), std::move(out), {xn},
                        [xn, s, inv](TensorNode<T>& self) {
                          auto& g = xn->grad_buffer();
                          for (std::size_t o = 0; o < s.outer; ++o)
                            for (std::size_t j = 0; j < s.len; ++j)
                              for (std::size_t in = 0; in < s.inner; ++in)
                                g[(o * s.len + j) * s.inner + in] += self.grad[o * s.inner + in] * inv;
                        },
                        "mean_axis");
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range");
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.dim(i) != ref[i]) throw ShapeError("concat extent mismatch on axis " + std::to_string(i));
    shape[axis] += p.dim(axis);
  }
  const AxisSplit total = split_axis(shape, axis);
  std::vector<T> out(shape_numel(shape));
  std::vector<NodePtr<T>> nodes;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * total.inner;
    auto ps = p.data();
    for (std::size_t o = 0; o < total.outer; ++o)
      std::copy_n(ps.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total.len * total.inner + offset * total.inner));
    nodes.push_back(p.node());
    offsets.push_back(offset);
    offset += p.dim(axis);
  }
  return make_result<T>(std::move(shape), std::move(out), nodes,
                        [nodes, offsets, total, axis](TensorNode<T>& self) {
                          for (std::size_t n = 0; n < nodes.size(); ++n) {
                            auto& pn = nodes[n];
                            if (!pn->requires_grad) continue;
                            auto& g = pn->grad_buffer();
                            const std::size_t chunk = pn->shape[axis] * total.inner;
                            for (std::size_t o = 0; o < total.outer; ++o) {
                              const T* src = self.grad.data() + o * total.len * total.inner + offsets[n] * total.inner;
                              T* dst = g.data() + o * chunk;
                              for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                            }
                          }
                        },
                        "concat");
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range on axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  const std::size_t len = end - begin;
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<T> out(s.outer * len * s.inner);
  auto xs = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xs.begin() + static_cast<std::ptrdiff_t>((o * s.len + begin) * s.inner), len * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner));
  auto xn = x.node();
  return make_result<T>(std::move(shape), std::move(out), {xn},
                        [xn, s, begin, len](TensorNode<T>& self) {
                          auto& g = xn->grad_buffer();
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            T* dst = g.data() + (o * s.len + begin) * s.inner;
                            const T* src = self.grad.data() + o * len * s.inner;
                            for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                          }
                        },
                        "slice");
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return make_result<T>(std::move(shape), std::move(out), {xn},
                        [xn](TensorNode<T>& self) {
                          auto& g = xn->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                        },
                        "reshape");
}

namespace {

template <typename T>
Tensor<T> apply_keep_scale(const Tensor<T>& x, std::vector<T> factor, std::size_t block, const char* op) {
  std::vector<T> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] * factor[i / block];
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {xn},
                        [xn, factor = std::move(factor), block](TensorNode<T>& self) {
                          auto& g = xn->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor[i / block];
                        },
                        op);
}

}  // namespace

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  if (p == 0.0) return x;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> factor(x.numel());
  for (auto& f : factor) f = u(rng) < p ? T(0) : keep;
  return apply_keep_scale(x, std::move(factor), 1, "dropout");
}

template <typename T>
Tensor<T> drop_path(const Tensor<T>& x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("drop-path rate must be in [0, 1)");
  if (p == 0.0 || x.rank() == 0) return x;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> factor(x.dim(0));
  for (auto& f : factor) f = u(rng) < p ? T(0) : keep;
  return apply_keep_scale(x, std::move(factor), x.numel() / x.dim(0), "drop_path");
}

#define AFFT_INSTANTIATE_OPS(T)                                                                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                                       \
  template Tensor<T> gelu(const Tensor<T>&);                                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                    \
  template Tensor<T> log(const Tensor<T>&);                                                                        \
  template Tensor<T> softmax(const Tensor<T>&, std::ptrdiff_t, const Mask*);                                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                          \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, const Mask*,     \
                               AttentionTrace*);                                                                   \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                                        \
  template Tensor<T> cross_entropy(const Tensor<T>&, const SoftTargets&);                                          \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> sum(const Tensor<T>&);                                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                                       \
  template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);                                                     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                           \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                             \
  template Tensor<T> dropout(const Tensor<T>&, double, std::mt19937_64&);                                          \
  template Tensor<T> drop_path(const Tensor<T>&, double, std::mt19937_64&);

AFFT_INSTANTIATE_OPS(float)
AFFT_INSTANTIATE_OPS(double)

}  // namespace afft::core
