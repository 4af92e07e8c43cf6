#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "dualdec/common.hpp"

namespace dualdec {

// Dense row-major tensor with reverse-mode differentiation. A Tensor is a
// cheap handle onto a shared node; forward ops record parents and a backward
// closure on the result node. Values are immutable once written by a forward
// op; parameters are mutated only between steps (by the optimizer).

struct TensorNode;
using TensorNodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  std::vector<int> shape;
  std::vector<real> data;
  std::vector<real> grad;  // allocated on demand, same extent as data
  bool requires_grad = false;
  bool backward_done = false;  // set on the loss node after backward()
  std::vector<TensorNodePtr> parents;
  std::function<void(TensorNode&)> backward_fn;

  size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(TensorNodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    size_t count = 1;
    for (int e : shape) {
      if (e <= 0) throw DimensionError("tensor extent must be positive");
      count *= static_cast<size_t>(e);
    }
    n->shape = std::move(shape);
    n->data.assign(count, 0.0);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_values(std::vector<int> shape, std::vector<real> values,
                            bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    if (values.size() != t.numel()) throw DimensionError("value count does not match shape");
    t.node_->data = std::move(values);
    return t;
  }

  static Tensor scalar(real v, bool requires_grad = false) {
    return from_values({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  size_t numel() const { return node_->data.size(); }
  int rows() const { return node_->shape.at(0); }
  int cols() const { return node_->shape.at(1); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<real>& data() { return node_->data; }
  const std::vector<real>& data() const { return node_->data; }
  std::vector<real>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<real>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  real value() const {
    if (numel() != 1) throw DimensionError("value(): tensor is not scalar");
    return node_->data[0];
  }

  real at(int r, int c) const { return node_->data[static_cast<size_t>(r) * cols() + c]; }

  TensorNodePtr node() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  void zero_grad() { node_->grad.clear(); }

 private:
  TensorNodePtr node_;
};

// Global switch for tape recording; off makes forward ops pure (used for
// finite differences and evaluation on the tape path).
inline bool& grad_enabled() {
  static bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
};

namespace detail {

inline bool track(const Tensor& t) { return grad_enabled() && t.requires_grad(); }

inline Tensor make_result(std::vector<int> shape, bool tracked,
                          std::vector<TensorNodePtr> parents,
                          std::function<void(TensorNode&)> backward_fn) {
  Tensor out = Tensor::zeros(std::move(shape), tracked);
  if (tracked) {
    out.node()->parents = std::move(parents);
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw DimensionError(std::string(op) + ": shape mismatch");
}

inline void check_finite(const std::vector<real>& v, const char* what) {
  for (real x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
  }
}

}  // namespace detail

// ----------------------------- elementwise -----------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor out = detail::make_result(a.shape(), tracked, {a.node(), b.node()},
                                   [](TensorNode& o) {
                                     for (auto& p : o.parents) {
                                       if (!p->requires_grad) continue;
                                       p->ensure_grad();
                                       for (size_t i = 0; i < o.grad.size(); ++i)
                                         p->grad[i] += o.grad[i];
                                     }
                                   });
  for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor out = detail::make_result(a.shape(), tracked, {a.node(), b.node()},
                                   [](TensorNode& o) {
                                     auto& pa = o.parents[0];
                                     auto& pb = o.parents[1];
                                     if (pa->requires_grad) {
                                       pa->ensure_grad();
                                       for (size_t i = 0; i < o.grad.size(); ++i)
                                         pa->grad[i] += o.grad[i];
                                     }
                                     if (pb->requires_grad) {
                                       pb->ensure_grad();
                                       for (size_t i = 0; i < o.grad.size(); ++i)
                                         pb->grad[i] -= o.grad[i];
                                     }
                                   });
  for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor out = detail::make_result(a.shape(), tracked, {a.node(), b.node()},
                                   [](TensorNode& o) {
                                     auto& pa = o.parents[0];
                                     auto& pb = o.parents[1];
                                     if (pa->requires_grad) {
                                       pa->ensure_grad();
                                       for (size_t i = 0; i < o.grad.size(); ++i)
                                         pa->grad[i] += o.grad[i] * pb->data[i];
                                     }
                                     if (pb->requires_grad) {
                                       pb->ensure_grad();
                                       for (size_t i = 0; i < o.grad.size(); ++i)
                                         pb->grad[i] += o.grad[i] * pa->data[i];
                                     }
                                   });
  for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

inline Tensor scale(const Tensor& a, real c) {
  Tensor out = detail::make_result(a.shape(), detail::track(a), {a.node()},
                                   [c](TensorNode& o) {
                                     auto& p = o.parents[0];
                                     if (!p->requires_grad) return;
                                     p->ensure_grad();
                                     for (size_t i = 0; i < o.grad.size(); ++i)
                                       p->grad[i] += c * o.grad[i];
                                   });
  for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = c * a.data()[i];
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out = detail::make_result(a.shape(), detail::track(a), {a.node()},
                                   [](TensorNode& o) {
                                     auto& p = o.parents[0];
                                     if (!p->requires_grad) return;
                                     p->ensure_grad();
                                     for (size_t i = 0; i < o.grad.size(); ++i)
                                       if (p->data[i] > 0) p->grad[i] += o.grad[i];
                                   });
  for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = std::max<real>(0.0, a.data()[i]);
  return out;
}

// Multiplies by a fixed 0/1 (or scaled) mask; the mask is a constant, so the
// backward pass reuses it. Used for dropout and loss masking.
inline Tensor mul_const_mask(const Tensor& a, std::vector<real> mask) {
  if (mask.size() != a.numel()) throw DimensionError("mul_const_mask: mask size mismatch");
  auto mask_ptr = std::make_shared<std::vector<real>>(std::move(mask));
  Tensor out = detail::make_result(a.shape(), detail::track(a), {a.node()},
                                   [mask_ptr](TensorNode& o) {
                                     auto& p = o.parents[0];
                                     if (!p->requires_grad) return;
                                     p->ensure_grad();
                                     for (size_t i = 0; i < o.grad.size(); ++i)
                                       p->grad[i] += o.grad[i] * (*mask_ptr)[i];
                                   });
  for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * (*mask_ptr)[i];
  return out;
}

// Adds a constant matrix (e.g. positional encodings); no gradient flows into it.
inline Tensor add_const(const Tensor& a, const std::vector<real>& c) {
  if (c.size() != a.numel()) throw DimensionError("add_const: size mismatch");
  Tensor out = detail::make_result(a.shape(), detail::track(a), {a.node()},
                                   [](TensorNode& o) {
                                     auto& p = o.parents[0];
                                     if (!p->requires_grad) return;
                                     p->ensure_grad();
                                     for (size_t i = 0; i < o.grad.size(); ++i)
                                       p->grad[i] += o.grad[i];
                                   });
  for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + c[i];
  return out;
}

// ----------------------------- matrix ops -----------------------------

// [m×k] · [k×n] -> [m×n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor out = detail::make_result(
      {m, n}, tracked, {a.node(), b.node()}, [m, k, n](TensorNode& o) {
        auto& pa = o.parents[0];
        auto& pb = o.parents[1];
        if (pa->requires_grad) {
          pa->ensure_grad();  // dA = dO · B^T
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
              const real g = o.grad[static_cast<size_t>(i) * n + j];
              if (g == 0.0) continue;
              for (int l = 0; l < k; ++l)
                pa->grad[static_cast<size_t>(i) * k + l] += g * pb->data[static_cast<size_t>(l) * n + j];
            }
        }
        if (pb->requires_grad) {
          pb->ensure_grad();  // dB = A^T · dO
          for (int i = 0; i < m; ++i)
            for (int l = 0; l < k; ++l) {
              const real av = pa->data[static_cast<size_t>(i) * k + l];
              if (av == 0.0) continue;
              for (int j = 0; j < n; ++j)
                pb->grad[static_cast<size_t>(l) * n + j] += av * o.grad[static_cast<size_t>(i) * n + j];
            }
        }
      });
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      const real av = a.data()[static_cast<size_t>(i) * k + l];
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j)
        out.data()[static_cast<size_t>(i) * n + j] += av * b.data()[static_cast<size_t>(l) * n + j];
    }
  return out;
}

// [m×k] · [n×k]^T -> [m×n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
    throw DimensionError("matmul_nt: incompatible shapes");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor out = detail::make_result(
      {m, n}, tracked, {a.node(), b.node()}, [m, k, n](TensorNode& o) {
        auto& pa = o.parents[0];
        auto& pb = o.parents[1];
        if (pa->requires_grad) {
          pa->ensure_grad();  // dA = dO · B
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
              const real g = o.grad[static_cast<size_t>(i) * n + j];
              if (g == 0.0) continue;
              for (int l = 0; l < k; ++l)
                pa->grad[static_cast<size_t>(i) * k + l] += g * pb->data[static_cast<size_t>(j) * k + l];
            }
        }
        if (pb->requires_grad) {
          pb->ensure_grad();  // dB = dO^T · A
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
              const real g = o.grad[static_cast<size_t>(i) * n + j];
              if (g == 0.0) continue;
              for (int l = 0; l < k; ++l)
                pb->grad[static_cast<size_t>(j) * k + l] += g * pa->data[static_cast<size_t>(i) * k + l];
            }
        }
      });
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      real acc = 0.0;
      for (int l = 0; l < k; ++l)
        acc += a.data()[static_cast<size_t>(i) * k + l] * b.data()[static_cast<size_t>(j) * k + l];
      out.data()[static_cast<size_t>(i) * n + j] = acc;
    }
  return out;
}

// Broadcasts a length-n row vector over the rows of [m×n].
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  if (a.shape().size() != 2 || row.shape().size() != 1 || row.shape()[0] != a.cols())
    throw DimensionError("add_row: incompatible shapes");
  const int m = a.rows(), n = a.cols();
  const bool tracked = detail::track(a) || detail::track(row);
  Tensor out = detail::make_result(
      {m, n}, tracked, {a.node(), row.node()}, [m, n](TensorNode& o) {
        auto& pa = o.parents[0];
        auto& pr = o.parents[1];
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i];
        }
        if (pr->requires_grad) {
          pr->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) pr->grad[j] += o.grad[static_cast<size_t>(i) * n + j];
        }
      });
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data()[static_cast<size_t>(i) * n + j] = a.data()[static_cast<size_t>(i) * n + j] + row.data()[j];
  return out;
}

inline Tensor slice_cols(const Tensor& a, int offset, int len) {
  if (a.shape().size() != 2) throw DimensionError("slice_cols: want 2-d tensor");
  const int m = a.rows(), n = a.cols();
  if (offset < 0 || len <= 0 || offset + len > n) throw DimensionError("slice_cols: bad range");
  Tensor out = detail::make_result(
      {m, len}, detail::track(a), {a.node()}, [m, n, offset, len](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < len; ++j)
            p->grad[static_cast<size_t>(i) * n + offset + j] += o.grad[static_cast<size_t>(i) * len + j];
      });
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < len; ++j)
      out.data()[static_cast<size_t>(i) * len + j] = a.data()[static_cast<size_t>(i) * n + offset + j];
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: empty input");
  const int m = parts[0].rows();
  int n = 0;
  bool tracked = false;
  std::vector<TensorNodePtr> parents;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.rows() != m) throw DimensionError("concat_cols: row mismatch");
    n += p.cols();
    tracked = tracked || detail::track(p);
    parents.push_back(p.node());
  }
  Tensor out = detail::make_result(
      {m, n}, tracked, std::move(parents), [m, n](TensorNode& o) {
        int offset = 0;
        for (auto& p : o.parents) {
          const int w = p->shape[1];
          if (p->requires_grad) {
            p->ensure_grad();
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < w; ++j)
                p->grad[static_cast<size_t>(i) * w + j] += o.grad[static_cast<size_t>(i) * n + offset + j];
          }
          offset += w;
        }
      });
  int offset = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out.data()[static_cast<size_t>(i) * n + offset + j] = p.data()[static_cast<size_t>(i) * w + j];
    offset += w;
  }
  return out;
}

// Gathers rows of an embedding table: table[V×d], ids length n -> [n×d].
inline Tensor embedding(const Tensor& table, const Ids& ids) {
  if (table.shape().size() != 2) throw DimensionError("embedding: table must be 2-d");
  const int v = table.rows(), d = table.cols();
  const int n = static_cast<int>(ids.size());
  if (n == 0) throw InputError("embedding: empty id sequence");
  for (TokenId id : ids)
    if (id < 0 || id >= v) throw InputError("embedding: id out of vocabulary");
  auto ids_ptr = std::make_shared<Ids>(ids);
  Tensor out = detail::make_result(
      {n, d}, detail::track(table), {table.node()}, [ids_ptr, d](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < ids_ptr->size(); ++i) {
          const size_t src = i * d;
          const size_t dst = static_cast<size_t>((*ids_ptr)[i]) * d;
          for (int j = 0; j < d; ++j) p->grad[dst + j] += o.grad[src + j];
        }
      });
  for (int i = 0; i < n; ++i) {
    const size_t src = static_cast<size_t>(ids[i]) * d;
    for (int j = 0; j < d; ++j) out.data()[static_cast<size_t>(i) * d + j] = table.data()[src + j];
  }
  return out;
}

// ----------------------------- reductions -----------------------------

inline Tensor sum(const Tensor& a) {
  Tensor out = detail::make_result({1}, detail::track(a), {a.node()},
                                   [](TensorNode& o) {
                                     auto& p = o.parents[0];
                                     if (!p->requires_grad) return;
                                     p->ensure_grad();
                                     for (size_t i = 0; i < p->grad.size(); ++i)
                                       p->grad[i] += o.grad[0];
                                   });
  out.data()[0] = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return out;
}

// Weighted sum with constant weights; the workhorse for masked loss reduction.
inline Tensor weighted_sum(const Tensor& a, std::vector<real> weights) {
  if (weights.size() != a.numel()) throw DimensionError("weighted_sum: weight size mismatch");
  auto w = std::make_shared<std::vector<real>>(std::move(weights));
  Tensor out = detail::make_result({1}, detail::track(a), {a.node()},
                                   [w](TensorNode& o) {
                                     auto& p = o.parents[0];
                                     if (!p->requires_grad) return;
                                     p->ensure_grad();
                                     for (size_t i = 0; i < p->grad.size(); ++i)
                                       p->grad[i] += o.grad[0] * (*w)[i];
                                   });
  real acc = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * (*w)[i];
  out.data()[0] = acc;
  return out;
}

// ----------------------------- row-wise softmax family -----------------------------

// Row-wise softmax over [m×n] with an optional boolean keep-mask. Masking is
// additive -inf before the softmax; a row with no admissible key is rejected.
inline Tensor softmax_rows(const Tensor& a, const std::vector<uint8_t>* mask = nullptr) {
  if (a.shape().size() != 2) throw DimensionError("softmax_rows: want 2-d tensor");
  const int m = a.rows(), n = a.cols();
  if (mask && mask->size() != a.numel()) throw DimensionError("softmax_rows: mask size mismatch");
  Tensor out = detail::make_result(
      {m, n}, detail::track(a), {a.node()}, [m, n](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const size_t base = static_cast<size_t>(i) * n;
          real dot = 0.0;
          for (int j = 0; j < n; ++j) dot += o.grad[base + j] * o.data[base + j];
          for (int j = 0; j < n; ++j)
            p->grad[base + j] += o.data[base + j] * (o.grad[base + j] - dot);
        }
      });
  for (int i = 0; i < m; ++i) {
    const size_t base = static_cast<size_t>(i) * n;
    real mx = -std::numeric_limits<real>::infinity();
    bool any = false;
    for (int j = 0; j < n; ++j) {
      if (mask && !(*mask)[base + j]) continue;
      any = true;
      mx = std::max(mx, a.data()[base + j]);
    }
    if (!any) throw DegenerateMaskError("softmax_rows: fully masked row");
    real z = 0.0;
    for (int j = 0; j < n; ++j) {
      if (mask && !(*mask)[base + j]) {
        out.data()[base + j] = 0.0;
        continue;
      }
      const real e = std::exp(a.data()[base + j] - mx);
      out.data()[base + j] = e;
      z += e;
    }
    for (int j = 0; j < n; ++j) out.data()[base + j] /= z;
  }
  return out;
}

// Variant that zeroes fully masked rows instead of rejecting them; such a
// row's output is constant zero and passes no gradient. Used where a mask
// legitimately admits no key (first row of the strict cross-decoder mask).
inline Tensor softmax_rows_zero_empty(const Tensor& a, const std::vector<uint8_t>* mask) {
  if (a.shape().size() != 2) throw DimensionError("softmax_rows_zero_empty: want 2-d tensor");
  const int m = a.rows(), n = a.cols();
  if (mask && mask->size() != a.numel())
    throw DimensionError("softmax_rows_zero_empty: mask size mismatch");
  Tensor out = detail::make_result(
      {m, n}, detail::track(a), {a.node()}, [m, n](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const size_t base = static_cast<size_t>(i) * n;
          real dot = 0.0;
          for (int j = 0; j < n; ++j) dot += o.grad[base + j] * o.data[base + j];
          for (int j = 0; j < n; ++j)
            p->grad[base + j] += o.data[base + j] * (o.grad[base + j] - dot);
        }
      });
  for (int i = 0; i < m; ++i) {
    const size_t base = static_cast<size_t>(i) * n;
    real mx = -std::numeric_limits<real>::infinity();
    bool any = false;
    for (int j = 0; j < n; ++j) {
      if (mask && !(*mask)[base + j]) continue;
      any = true;
      mx = std::max(mx, a.data()[base + j]);
    }
    if (!any) continue;  // all-zero row
    real z = 0.0;
    for (int j = 0; j < n; ++j) {
      if (mask && !(*mask)[base + j]) {
        out.data()[base + j] = 0.0;
        continue;
      }
      const real e = std::exp(a.data()[base + j] - mx);
      out.data()[base + j] = e;
      z += e;
    }
    for (int j = 0; j < n; ++j) out.data()[base + j] /= z;
  }
  return out;
}

inline Tensor log_softmax_rows(const Tensor& a) {
  if (a.shape().size() != 2) throw DimensionError("log_softmax_rows: want 2-d tensor");
  const int m = a.rows(), n = a.cols();
  Tensor out = detail::make_result(
      {m, n}, detail::track(a), {a.node()}, [m, n](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const size_t base = static_cast<size_t>(i) * n;
          real gsum = 0.0;
          for (int j = 0; j < n; ++j) gsum += o.grad[base + j];
          for (int j = 0; j < n; ++j)
            p->grad[base + j] += o.grad[base + j] - std::exp(o.data[base + j]) * gsum;
        }
      });
  for (int i = 0; i < m; ++i) {
    const size_t base = static_cast<size_t>(i) * n;
    real mx = -std::numeric_limits<real>::infinity();
    for (int j = 0; j < n; ++j) mx = std::max(mx, a.data()[base + j]);
    real z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(a.data()[base + j] - mx);
    const real lz = mx + std::log(z);
    for (int j = 0; j < n; ++j) out.data()[base + j] = a.data()[base + j] - lz;
  }
  return out;
}

// ----------------------------- layer norm -----------------------------

// Normalizes each row of [... × d] to zero mean / unit variance (population
// variance, eps inside the square root), then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
  if (x.shape().empty()) throw DimensionError("layer_norm: empty shape");
  const int d = x.shape().back();
  if (d == 0) throw DimensionError("layer_norm: zero feature dimension");
  if (gain.shape() != std::vector<int>{d} || bias.shape() != std::vector<int>{d})
    throw DimensionError("layer_norm: gain/bias must have shape [d]");
  if (eps < 0) throw DomainError("layer_norm: eps must be non-negative");
  const int m = static_cast<int>(x.numel()) / d;
  const bool tracked = detail::track(x) || detail::track(gain) || detail::track(bias);
  Tensor out = detail::make_result(
      x.shape(), tracked, {x.node(), gain.node(), bias.node()}, [m, d, eps](TensorNode& o) {
        auto& px = o.parents[0];
        auto& pg = o.parents[1];
        auto& pb = o.parents[2];
        if (px->requires_grad) px->ensure_grad();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const size_t base = static_cast<size_t>(i) * d;
          real mean = 0.0;
          for (int j = 0; j < d; ++j) mean += px->data[base + j];
          mean /= d;
          real var = 0.0;
          for (int j = 0; j < d; ++j) {
            const real c = px->data[base + j] - mean;
            var += c * c;
          }
          var /= d;
          const real inv = 1.0 / std::sqrt(var + eps);
          // xhat_j = (x_j - mean) * inv
          if (pb->requires_grad)
            for (int j = 0; j < d; ++j) pb->grad[j] += o.grad[base + j];
          if (pg->requires_grad)
            for (int j = 0; j < d; ++j)
              pg->grad[j] += o.grad[base + j] * (px->data[base + j] - mean) * inv;
          if (px->requires_grad) {
            real sum_gy = 0.0, sum_gyx = 0.0;
            for (int j = 0; j < d; ++j) {
              const real gy = o.grad[base + j] * pg->data[j];
              const real xhat = (px->data[base + j] - mean) * inv;
              sum_gy += gy;
              sum_gyx += gy * xhat;
            }
            for (int j = 0; j < d; ++j) {
              const real gy = o.grad[base + j] * pg->data[j];
              const real xhat = (px->data[base + j] - mean) * inv;
              px->grad[base + j] += inv * (gy - sum_gy / d - xhat * sum_gyx / d);
            }
          }
        }
      });
  for (int i = 0; i < m; ++i) {
    const size_t base = static_cast<size_t>(i) * d;
    real mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x.data()[base + j];
    mean /= d;
    real var = 0.0;
    for (int j = 0; j < d; ++j) {
      const real c = x.data()[base + j] - mean;
      var += c * c;
    }
    var /= d;
    const real inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j)
      out.data()[base + j] = (x.data()[base + j] - mean) * inv * gain.data()[j] + bias.data()[j];
  }
  return out;
}

// ----------------------------- attention -----------------------------

// softmax(Q K^T / sqrt(d_k)) V with an optional boolean keep-mask of shape
// [m×n]. Masked positions get exactly zero weight; a query row with no
// admissible key is a degenerate-mask error.
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const std::vector<uint8_t>* mask = nullptr) {
  if (q.shape().size() != 2 || k.shape().size() != 2 || v.shape().size() != 2)
    throw DimensionError("scaled_dot_attention: want 2-d tensors");
  if (q.cols() != k.cols()) throw DimensionError("scaled_dot_attention: d_k mismatch");
  if (k.rows() != v.rows()) throw DimensionError("scaled_dot_attention: key/value count mismatch");
  if (mask && mask->size() != static_cast<size_t>(q.rows()) * k.rows())
    throw DimensionError("scaled_dot_attention: mask shape mismatch");
  const real inv_sqrt_dk = 1.0 / std::sqrt(static_cast<real>(q.cols()));
  Tensor scores = scale(matmul_nt(q, k), inv_sqrt_dk);
  Tensor weights = softmax_rows(scores, mask);
  return matmul(weights, v);
}

// ----------------------------- backward -----------------------------

// Reverse-mode sweep from a scalar loss. Policy: one backward per loss
// tensor; a second call on the same loss throws. Gradients accumulate into
// .grad, which callers zero between steps.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw DimensionError("backward: loss must be scalar");
  if (!loss.requires_grad()) throw InternalError("backward: loss does not require grad");
  if (loss.node()->backward_done) throw InternalError("backward: already called on this loss");
  detail::check_finite(loss.data(), "backward: loss");

  // Topological order by depth-first search; the gray set catches cycles.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> done, gray;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  gray.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* parent = node->parents[idx++].get();
      if (!parent->requires_grad || done.count(parent)) continue;
      if (gray.count(parent)) throw InternalError("backward: cycle in tape");
      gray.insert(parent);
      stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      done.insert(node);
      gray.erase(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
  loss.node()->backward_done = true;
}

}  // namespace dualdec
