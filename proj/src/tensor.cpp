// Copyright 2026 The rscnn Authors
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

#include "rscnn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace rscnn {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

std::atomic<std::uint64_t> g_next_id{1};

template <typename T>
std::shared_ptr<Node<T>> make_node(Shape shape, std::vector<T> values, bool requires_grad) {
  if (values.size() != numel(shape)) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                         std::to_string(values.size()) + " values");
  }
  for (auto d : shape) {
    if (d == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

// Creates an op output. Inputs and the backward closure are kept only when
// some input participates in differentiation.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in->requires_grad;
  auto node = make_node<T>(std::move(shape), std::move(values), rg);
  if (rg) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(s));
  }
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transpose(std::size_t rows, std::size_t cols, std::span<const T> v) {
  std::vector<T> t(v.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = v[i * cols + j];
  return t;
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_strides;
  std::vector<std::size_t> b_strides;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b) +
                         " (rank differs)");
  }
  const std::size_t r = a.size();
  BroadcastPlan plan;
  plan.out.resize(r);
  plan.a_strides.assign(r, 0);
  plan.b_strides.assign(r, 0);
  for (std::size_t i = 0; i < r; ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    plan.out[i] = std::max(a[i], b[i]);
  }
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = r; i-- > 0;) {
    plan.a_strides[i] = a[i] == 1 ? 0 : sa;
    plan.b_strides[i] = b[i] == 1 ? 0 : sb;
    sa *= a[i];
    sb *= b[i];
  }
  return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
  const std::size_t r = plan.out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = plan.out[r - 1];
  const std::size_t ia = plan.a_strides[r - 1];
  const std::size_t ib = plan.b_strides[r - 1];
  const std::size_t outer = numel(plan.out) / inner;
  std::vector<std::size_t> idx(r, 0);
  std::size_t out_i = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t a0 = 0, b0 = 0;
    for (std::size_t d = 0; d + 1 < r; ++d) {
      a0 += idx[d] * plan.a_strides[d];
      b0 += idx[d] * plan.b_strides[d];
    }
    for (std::size_t j = 0; j < inner; ++j) f(out_i + j, a0 + j * ia, b0 + j * ib);
    out_i += inner;
    for (std::size_t d = r - 1; d-- > 0;) {
      if (++idx[d] < plan.out[d]) break;
      idx[d] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  return Tensor<T>(make_node<T>(std::move(shape), std::move(values), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = numel(shape);
  return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = numel(shape);
  return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

template <typename T>
BatchNormState<T>::BatchNormState(std::size_t channels)
    : running_mean(channels, T(0)),
      running_var(channels, T(1)),
      scale(Tensor<T>::full({1, channels}, T(1), true)),
      shift(Tensor<T>::zeros({1, channels}, true)) {}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  gemm_nn(m, k, n, a.values().data(), b.values().data(), out.data());
  return make_result<T>({m, n}, std::move(out), {a.node_ptr(), b.node_ptr()},
                        [m, k, n](Node<T>& self) {
                          auto& na = *self.inputs[0];
                          auto& nb = *self.inputs[1];
                          if (na.requires_grad) {
                            na.ensure_grad();
                            auto bt = transpose<T>(k, n, nb.value);
                            gemm_nn(m, n, k, self.grad.data(), bt.data(), na.grad.data());
                          }
                          if (nb.requires_grad) {
                            nb.ensure_grad();
                            auto at = transpose<T>(m, k, na.value);
                            gemm_nn(k, m, n, at.data(), self.grad.data(), nb.grad.data());
                          }
                        });
}

template <typename T>
Tensor<T> elementwise(ElementwiseKind kind, const Tensor<T>& a,
                      const std::optional<Tensor<T>>& b) {
  if (kind == ElementwiseKind::relu) {
    if (b) throw DimensionError("relu takes a single operand");
    std::vector<T> out(a.size());
    auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr()}, [](Node<T>& self) {
      auto& na = *self.inputs[0];
      na.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (na.value[i] > T(0)) na.grad[i] += self.grad[i];
    });
  }
  if (!b) throw DimensionError("binary elementwise op requires two operands");
  const Tensor<T>& bb = *b;
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), bb.shape()));
  std::vector<T> out(numel(plan->out));
  auto av = a.values();
  auto bv = bb.values();
  const bool is_add = kind == ElementwiseKind::add;
  if (a.shape() == bb.shape()) {
    if (is_add)
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    else
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  } else {
    for_each_broadcast(*plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      out[o] = is_add ? av[ia] + bv[ib] : av[ia] * bv[ib];
    });
  }
  const bool same = a.shape() == bb.shape();
  return make_result<T>(plan->out, std::move(out), {a.node_ptr(), bb.node_ptr()},
                        [plan, is_add, same](Node<T>& self) {
                          auto& na = *self.inputs[0];
                          auto& nb = *self.inputs[1];
                          if (na.requires_grad) na.ensure_grad();
                          if (nb.requires_grad) nb.ensure_grad();
                          const auto& g = self.grad;
                          if (same) {
                            if (na.requires_grad) {
                              if (is_add)
                                for (std::size_t i = 0; i < g.size(); ++i) na.grad[i] += g[i];
                              else
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  na.grad[i] += g[i] * nb.value[i];
                            }
                            if (nb.requires_grad) {
                              if (is_add)
                                for (std::size_t i = 0; i < g.size(); ++i) nb.grad[i] += g[i];
                              else
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  nb.grad[i] += g[i] * na.value[i];
                            }
                            return;
                          }
                          for_each_broadcast(*plan, [&](std::size_t o, std::size_t ia,
                                                        std::size_t ib) {
                            if (na.requires_grad) na.grad[ia] += is_add ? g[o] : g[o] * nb.value[ib];
                            if (nb.requires_grad) nb.grad[ib] += is_add ? g[o] : g[o] * na.value[ia];
                          });
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr()}, [factor](Node<T>& self) {
    auto& na = *self.inputs[0];
    na.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i] * factor;
  });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reduce(ReduceKind kind, const Tensor<T>& t, std::size_t axis) {
  if (axis >= t.rank()) {
    throw DimensionError("reduce: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(t.shape()));
  }
  const auto& s = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);

  auto v = t.values();
  std::vector<T> out(outer * inner);
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (kind == ReduceKind::max) {
    argmax->assign(outer * inner, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        std::size_t best = 0;
        T bv = v[base];
        for (std::size_t j = 1; j < n; ++j) {
          const T x = v[base + j * inner];
          if (x > bv) {
            bv = x;
            best = j;
          }
        }
        out[o * inner + i] = bv;
        (*argmax)[o * inner + i] = best;
      }
  } else {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < n; ++j) {
        const T* src = v.data() + (o * n + j) * inner;
        T* dst = out.data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    if (kind == ReduceKind::mean)
      for (auto& x : out) x /= static_cast<T>(n);
  }
  return make_result<T>(std::move(out_shape), std::move(out), {t.node_ptr()},
                        [kind, outer, inner, n, argmax](Node<T>& self) {
                          auto& in = *self.inputs[0];
                          in.ensure_grad();
                          const auto& g = self.grad;
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < inner; ++i) {
                              const std::size_t oi = o * inner + i;
                              const std::size_t base = o * n * inner + i;
                              if (kind == ReduceKind::max) {
                                in.grad[base + (*argmax)[oi] * inner] += g[oi];
                              } else {
                                const T gv = kind == ReduceKind::mean ? g[oi] / static_cast<T>(n)
                                                                      : g[oi];
                                for (std::size_t j = 0; j < n; ++j) in.grad[base + j * inner] += gv;
                              }
                            }
                        });
}

template <typename T>
Tensor<T> segment_reduce(ReduceKind kind, const Tensor<T>& t,
                         std::span<const std::size_t> offsets) {
  require_rank(t.shape(), 2, "segment_reduce");
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != t.dim(0)) {
    throw DimensionError("segment_reduce: offsets must span all " + std::to_string(t.dim(0)) +
                         " rows");
  }
  const std::size_t groups = offsets.size() - 1;
  const std::size_t c = t.dim(1);
  for (std::size_t g = 0; g < groups; ++g)
    if (offsets[g + 1] <= offsets[g]) throw DimensionError("segment_reduce: empty group");
  auto offs = std::make_shared<std::vector<std::size_t>>(offsets.begin(), offsets.end());
  auto v = t.values();
  std::vector<T> out(groups * c, T(0));
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (kind == ReduceKind::max) {
    argmax->assign(groups * c, 0);
    for (std::size_t g = 0; g < groups; ++g) {
      T* dst = out.data() + g * c;
      std::size_t* am = argmax->data() + g * c;
      const std::size_t r0 = (*offs)[g];
      std::copy_n(v.data() + r0 * c, c, dst);
      std::fill_n(am, c, r0);
      for (std::size_t r = r0 + 1; r < (*offs)[g + 1]; ++r) {
        const T* src = v.data() + r * c;
        for (std::size_t j = 0; j < c; ++j)
          if (src[j] > dst[j]) {
            dst[j] = src[j];
            am[j] = r;
          }
      }
    }
  } else {
    for (std::size_t g = 0; g < groups; ++g) {
      T* dst = out.data() + g * c;
      for (std::size_t r = (*offs)[g]; r < (*offs)[g + 1]; ++r) {
        const T* src = v.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
      }
      if (kind == ReduceKind::mean) {
        const T cnt = static_cast<T>((*offs)[g + 1] - (*offs)[g]);
        for (std::size_t j = 0; j < c; ++j) dst[j] /= cnt;
      }
    }
  }
  return make_result<T>({groups, c}, std::move(out), {t.node_ptr()},
                        [kind, offs, argmax, groups, c](Node<T>& self) {
                          auto& in = *self.inputs[0];
                          in.ensure_grad();
                          const auto& g = self.grad;
                          if (kind == ReduceKind::max) {
                            for (std::size_t i = 0; i < groups * c; ++i)
                              in.grad[(*argmax)[i] * c + i % c] += g[i];
                            return;
                          }
                          for (std::size_t gi = 0; gi < groups; ++gi) {
                            const std::size_t r0 = (*offs)[gi], r1 = (*offs)[gi + 1];
                            const T f = kind == ReduceKind::mean ? T(1) / static_cast<T>(r1 - r0)
                                                                 : T(1);
                            const T* src = g.data() + gi * c;
                            for (std::size_t r = r0; r < r1; ++r) {
                              T* dst = in.grad.data() + r * c;
                              for (std::size_t j = 0; j < c; ++j) dst[j] += src[j] * f;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& t) {
  return reduce(ReduceKind::sum, reshape(t, Shape{t.size()}), 0);
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape shape) {
  if (numel(shape) != t.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(t.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<T> out(t.values().begin(), t.values().end());
  return make_result<T>(std::move(shape), std::move(out), {t.node_ptr()}, [](Node<T>& self) {
    auto& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, std::span<const std::size_t> indices) {
  require_rank(t.shape(), 2, "gather_rows");
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t rows = t.dim(0), c = t.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  std::vector<T> out(idx->size() * c);
  auto v = t.values();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::size_t r = (*idx)[i];
    if (r >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(r) + " out of range for " +
                           shape_str(t.shape()));
    }
    std::copy_n(v.data() + r * c, c, out.data() + i * c);
  }
  return make_result<T>({idx->size(), c}, std::move(out), {t.node_ptr()},
                        [idx, c](Node<T>& self) {
                          auto& in = *self.inputs[0];
                          in.ensure_grad();
                          for (std::size_t i = 0; i < idx->size(); ++i) {
                            T* dst = in.grad.data() + (*idx)[i] * c;
                            const T* src = self.grad.data() + i * c;
                            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                          }
                        });
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  std::vector<std::shared_ptr<Node<T>>> inputs;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) {
      throw DimensionError("concat_cols: operand " + shape_str(p.shape()) +
                           " does not match row count " + std::to_string(rows));
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
    inputs.push_back(p.node_ptr());
  }
  std::vector<T> out(rows * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].values();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + col);
    col += widths[k];
  }
  return make_result<T>({rows, total}, std::move(out), std::move(inputs),
                        [widths, rows, total](Node<T>& self) {
                          std::size_t col = 0;
                          for (std::size_t k = 0; k < widths.size(); ++k) {
                            auto& in = *self.inputs[k];
                            if (in.requires_grad) {
                              in.ensure_grad();
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < widths[k]; ++j)
                                  in.grad[r * widths[k] + j] += self.grad[r * total + col + j];
                            }
                            col += widths[k];
                          }
                        });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& t, BatchNormState<T>& state, bool training) {
  require_rank(t.shape(), 2, "batchnorm");
  const std::size_t b = t.dim(0), c = t.dim(1);
  if (c != state.channels()) {
    throw DimensionError("batchnorm: input " + shape_str(t.shape()) + " vs state with " +
                         std::to_string(state.channels()) + " channels");
  }
  if (training && b < 2) {
    throw DimensionError("batchnorm: training mode needs at least 2 rows, got " +
                         shape_str(t.shape()));
  }
  auto x = t.values();
  auto gamma = state.scale.values();
  auto beta = state.shift.values();
  std::vector<T> mean(c, T(0)), var(c, T(0));
  if (training) {
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t j = 0; j < c; ++j) mean[j] += x[r * c + j];
    for (auto& m : mean) m /= static_cast<T>(b);
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const T d = x[r * c + j] - mean[j];
        var[j] += d * d;
      }
    for (auto& v : var) v /= static_cast<T>(b);
    const T m = state.momentum;
    const T unbias = static_cast<T>(b) / static_cast<T>(b - 1);
    for (std::size_t j = 0; j < c; ++j) {
      state.running_mean[j] = (T(1) - m) * state.running_mean[j] + m * mean[j];
      state.running_var[j] = (T(1) - m) * state.running_var[j] + m * var[j] * unbias;
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }
  auto inv_std = std::make_shared<std::vector<T>>(c);
  for (std::size_t j = 0; j < c; ++j)
    (*inv_std)[j] = T(1) / std::sqrt(var[j] + static_cast<T>(kBatchNormEpsilon));
  auto xhat = std::make_shared<std::vector<T>>(b * c);
  std::vector<T> out(b * c);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      (*xhat)[i] = (x[i] - mean[j]) * (*inv_std)[j];
      out[i] = gamma[j] * (*xhat)[i] + beta[j];
    }
  return make_result<T>(
      {b, c}, std::move(out), {t.node_ptr(), state.scale.node_ptr(), state.shift.node_ptr()},
      [b, c, training, inv_std, xhat](Node<T>& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        auto& nb = *self.inputs[2];
        const auto& g = self.grad;
        if (ng.requires_grad) {
          ng.ensure_grad();
          for (std::size_t r = 0; r < b; ++r)
            for (std::size_t j = 0; j < c; ++j) ng.grad[j] += g[r * c + j] * (*xhat)[r * c + j];
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          for (std::size_t r = 0; r < b; ++r)
            for (std::size_t j = 0; j < c; ++j) nb.grad[j] += g[r * c + j];
        }
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        const auto& gamma = ng.value;
        if (!training) {
          for (std::size_t r = 0; r < b; ++r)
            for (std::size_t j = 0; j < c; ++j)
              nx.grad[r * c + j] += g[r * c + j] * gamma[j] * (*inv_std)[j];
          return;
        }
        std::vector<T> sum_d(c, T(0)), sum_dx(c, T(0));
        for (std::size_t r = 0; r < b; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const T d = g[r * c + j] * gamma[j];
            sum_d[j] += d;
            sum_dx[j] += d * (*xhat)[r * c + j];
          }
        const T inv_b = T(1) / static_cast<T>(b);
        for (std::size_t r = 0; r < b; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t i = r * c + j;
            const T d = g[i] * gamma[j];
            nx.grad[i] += (*inv_std)[j] * inv_b *
                          (static_cast<T>(b) * d - sum_d[j] - (*xhat)[i] * sum_dx[j]);
          }
      });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& t, double rate, bool training, std::mt19937_64& rng) {
  if (!training || rate <= 0.0) return t;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(t.size());
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  return mul(t, Tensor<T>::from(t.shape(), std::move(mask)));
}

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& t, double eps) {
  require_rank(t.shape(), 2, "normalize_rows");
  const std::size_t r = t.dim(0), c = t.dim(1);
  auto v = t.values();
  auto norms = std::make_shared<std::vector<T>>(r);
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += v[i * c + j] * v[i * c + j];
    const T n = std::max(std::sqrt(s), static_cast<T>(eps));
    (*norms)[i] = n;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = v[i * c + j] / n;
  }
  const T teps = static_cast<T>(eps);
  return make_result<T>({r, c}, std::move(out), {t.node_ptr()},
                        [r, c, norms, teps](Node<T>& self) {
                          auto& in = *self.inputs[0];
                          in.ensure_grad();
                          for (std::size_t i = 0; i < r; ++i) {
                            const T n = (*norms)[i];
                            const T* g = self.grad.data() + i * c;
                            const T* y = self.value.data() + i * c;
                            T* dst = in.grad.data() + i * c;
                            if (n <= teps) {
                              for (std::size_t j = 0; j < c; ++j) dst[j] += g[j] / n;
                              continue;
                            }
                            T yg = 0;
                            for (std::size_t j = 0; j < c; ++j) yg += y[j] * g[j];
                            for (std::size_t j = 0; j < c; ++j) dst[j] += (g[j] - y[j] * yg) / n;
                          }
                        });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (targets.size() != b) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  auto v = logits.values();
  auto probs = std::make_shared<std::vector<T>>(b * k);
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw DimensionError("softmax_cross_entropy: target " + std::to_string(t) +
                           " outside [0," + std::to_string(k) + ")");
    }
    const T* z = v.data() + i * k;
    const T mx = *std::max_element(z, z + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(z[j] - mx));
    for (std::size_t j = 0; j < k; ++j)
      (*probs)[i * k + j] = static_cast<T>(std::exp(static_cast<double>(z[j] - mx)) / s);
    total += std::log(s) + static_cast<double>(mx) - static_cast<double>(z[t]);
  }
  return make_result<T>(Shape{}, {static_cast<T>(total / static_cast<double>(b))},
                        {logits.node_ptr()}, [b, k, probs, tgt](Node<T>& self) {
                          auto& in = *self.inputs[0];
                          in.ensure_grad();
                          const T g = self.grad[0] / static_cast<T>(b);
                          for (std::size_t i = 0; i < b; ++i)
                            for (std::size_t j = 0; j < k; ++j) {
                              const T onehot = static_cast<int>(j) == (*tgt)[i] ? T(1) : T(0);
                              in.grad[i * k + j] += g * ((*probs)[i * k + j] - onehot);
                            }
                        });
}

template <typename T>
Tensor<T> cosine_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
  require_rank(prediction.shape(), 2, "cosine_loss");
  if (prediction.shape() != target.shape()) {
    throw DimensionError("cosine_loss: prediction " + shape_str(prediction.shape()) +
                         " vs target " + shape_str(target.shape()));
  }
  const std::size_t b = prediction.dim(0), c = prediction.dim(1);
  auto p = prediction.values();
  auto t = target.values();
  auto norms = std::make_shared<std::vector<T>>(b);
  auto dots = std::make_shared<std::vector<T>>(b);
  double total = 0.0;
  const T min_norm = static_cast<T>(kCosineMinNorm);
  for (std::size_t i = 0; i < b; ++i) {
    T s = 0, d = 0;
    for (std::size_t j = 0; j < c; ++j) {
      s += p[i * c + j] * p[i * c + j];
      d += p[i * c + j] * t[i * c + j];
    }
    (*norms)[i] = std::max(std::sqrt(s), min_norm);
    (*dots)[i] = d;
    total += 1.0 - static_cast<double>(d / (*norms)[i]);
  }
  return make_result<T>(
      Shape{}, {static_cast<T>(total / static_cast<double>(b))},
      {prediction.node_ptr(), target.node_ptr()}, [b, c, norms, dots, min_norm](Node<T>& self) {
        auto& np = *self.inputs[0];
        auto& nt = *self.inputs[1];
        const T g = -self.grad[0] / static_cast<T>(b);
        if (np.requires_grad) np.ensure_grad();
        if (nt.requires_grad) nt.ensure_grad();
        for (std::size_t i = 0; i < b; ++i) {
          const T n = (*norms)[i];
          const bool guarded = n <= min_norm;
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t k = i * c + j;
            if (np.requires_grad) {
              T d = nt.value[k] / n;
              if (!guarded) d -= (*dots)[i] * np.value[k] / (n * n * n);
              np.grad[k] += g * d;
            }
            if (nt.requires_grad) nt.grad[k] += g * np.value[k] / n;
          }
        }
      });
}

template <typename T>
Tensor<T> loss(LossKind kind, const Tensor<T>& prediction, const Tensor<T>& target) {
  if (kind == LossKind::cosine) return cosine_loss(prediction, target);
  std::vector<int> idx;
  idx.reserve(target.size());
  for (T v : target.values()) idx.push_back(static_cast<int>(std::lround(static_cast<double>(v))));
  return softmax_cross_entropy(prediction, std::span<const int>(idx));
}

// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  Node<T>* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node<T>* n : order) {
    n->inputs.clear();
    n->backward = nullptr;
  }
}

// ---------------------------------------------------------------------------

#define RSCNN_INSTANTIATE(T)                                                                  \
  template class Tensor<T>;                                                                   \
  template struct BatchNormState<T>;                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> elementwise(ElementwiseKind, const Tensor<T>&,                           \
                                 const std::optional<Tensor<T>>&);                            \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> reduce(ReduceKind, const Tensor<T>&, std::size_t);                       \
  template Tensor<T> segment_reduce(ReduceKind, const Tensor<T>&,                             \
                                    std::span<const std::size_t>);                            \
  template Tensor<T> sum_all(const Tensor<T>&);                                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                        \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);             \
  template Tensor<T> concat_cols(std::span<const Tensor<T>>);                                 \
  template Tensor<T> batchnorm(const Tensor<T>&, BatchNormState<T>&, bool);                   \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, std::mt19937_64&);               \
  template Tensor<T> normalize_rows(const Tensor<T>&, double);                                \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);           \
  template Tensor<T> cosine_loss(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> loss(LossKind, const Tensor<T>&, const Tensor<T>&);                      \
  template void backward(const Tensor<T>&);

RSCNN_INSTANTIATE(float)
RSCNN_INSTANTIATE(double)

#undef RSCNN_INSTANTIATE

}  // namespace rscnn
