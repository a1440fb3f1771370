#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "bica/tensor.hpp"

namespace bica {

// Dense kernels. Deterministic sequential accumulation order throughout; the
// reduction order is part of the artifact's reproducibility contract.
namespace detail {

template <class T>
void gemm_nn(int n, int k, int m, const T* a, const T* b, T* c) {
  for (int i = 0; i < n; ++i) {
    T* cr = c + static_cast<size_t>(i) * m;
    const T* ar = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b + static_cast<size_t>(p) * m;
      for (int j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
}

// c[i][j] += dot(a_i, b_j), b given row-major [m x k]
template <class T>
void gemm_nt(int n, int k, int m, const T* a, const T* b, T* c) {
  for (int i = 0; i < n; ++i) {
    const T* ar = a + static_cast<size_t>(i) * k;
    T* cr = c + static_cast<size_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const T* br = b + static_cast<size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
      cr[j] += acc;
    }
  }
}

// c[i][j] += sum_p a[p][i] * b[p][j], a given row-major [k x n]
template <class T>
void gemm_tn(int n, int k, int m, const T* a, const T* b, T* c) {
  for (int p = 0; p < k; ++p) {
    const T* ar = a + static_cast<size_t>(p) * n;
    const T* br = b + static_cast<size_t>(p) * m;
    for (int i = 0; i < n; ++i) {
      const T av = ar[i];
      T* cr = c + static_cast<size_t>(i) * m;
      for (int j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) throw validation_error(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = make_op<T>(a.shape(), {a, b}, [](TensorNode<T>& o) {
    for (int s = 0; s < 2; ++s) {
      auto& p = *o.parents[s];
      if (!p.requires_grad) continue;
      for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
    }
  });
  const auto& av = a.val();
  const auto& bv = b.val();
  auto& ov = out.val();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = make_op<T>(a.shape(), {a, b}, [](TensorNode<T>& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    for (size_t i = 0; i < o.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += o.grad[i];
      if (pb.requires_grad) pb.grad[i] -= o.grad[i];
    }
  });
  for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] = a.val()[i] - b.val()[i];
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = make_op<T>(a.shape(), {a, b}, [](TensorNode<T>& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    for (size_t i = 0; i < o.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += o.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += o.grad[i] * pa.value[i];
    }
  });
  for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] = a.val()[i] * b.val()[i];
  return out;
}

template <class T>
Tensor<T> div_ew(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "div");
  auto out = make_op<T>(a.shape(), {a, b}, [](TensorNode<T>& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    for (size_t i = 0; i < o.grad.size(); ++i) {
      const T inv = T(1) / pb.value[i];
      if (pa.requires_grad) pa.grad[i] += o.grad[i] * inv;
      if (pb.requires_grad) pb.grad[i] -= o.grad[i] * pa.value[i] * inv * inv;
    }
  });
  for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] = a.val()[i] / b.val()[i];
  return out;
}

template <class T>
Tensor<T> min_ew(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "min_ew");
  auto out = make_op<T>(a.shape(), {a, b}, [](TensorNode<T>& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    for (size_t i = 0; i < o.grad.size(); ++i) {
      if (pa.value[i] <= pb.value[i]) {
        if (pa.requires_grad) pa.grad[i] += o.grad[i];
      } else if (pb.requires_grad) {
        pb.grad[i] += o.grad[i];
      }
    }
  });
  for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] = std::min(a.val()[i], b.val()[i]);
  return out;
}

template <class T>
Tensor<T> max_ew(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "max_ew");
  auto out = make_op<T>(a.shape(), {a, b}, [](TensorNode<T>& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    for (size_t i = 0; i < o.grad.size(); ++i) {
      if (pa.value[i] >= pb.value[i]) {
        if (pa.requires_grad) pa.grad[i] += o.grad[i];
      } else if (pb.requires_grad) {
        pb.grad[i] += o.grad[i];
      }
    }
  });
  for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] = std::max(a.val()[i], b.val()[i]);
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  auto out = make_op<T>(a.shape(), {a}, [c](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * c;
  });
  for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] = a.val()[i] * c;
  return out;
}

template <class T>
Tensor<T> add_const(const Tensor<T>& a, T c) {
  auto out = make_op<T>(a.shape(), {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
  });
  for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] = a.val()[i] + c;
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  auto out = make_op<T>(a.shape(), {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t i = 0; i < o.grad.size(); ++i)
      if (p.value[i] > T(0)) p.grad[i] += o.grad[i];
  });
  for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] = std::max(a.val()[i], T(0));
  return out;
}

template <class T>
Tensor<T> abs_ew(const Tensor<T>& a) {
  auto out = make_op<T>(a.shape(), {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t i = 0; i < o.grad.size(); ++i)
      p.grad[i] += p.value[i] >= T(0) ? o.grad[i] : -o.grad[i];
  });
  for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] = std::abs(a.val()[i]);
  return out;
}

template <class T>
Tensor<T> sin_ew(const Tensor<T>& a) {
  auto out = make_op<T>(a.shape(), {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * std::cos(p.value[i]);
  });
  for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] = std::sin(a.val()[i]);
  return out;
}

template <class T>
Tensor<T> cos_ew(const Tensor<T>& a) {
  auto out = make_op<T>(a.shape(), {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] -= o.grad[i] * std::sin(p.value[i]);
  });
  for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] = std::cos(a.val()[i]);
  return out;
}

template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
  auto out = make_op<T>(a.shape(), {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t i = 0; i < o.grad.size(); ++i) {
      const T x = p.value[i];
      const T sig = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : [&] {
        const T e = std::exp(x);
        return e / (T(1) + e);
      }();
      p.grad[i] += o.grad[i] * sig;
    }
  });
  for (size_t i = 0; i < out.val().size(); ++i) {
    const T x = a.val()[i];
    out.val()[i] = x > T(20) ? x : std::log1p(std::exp(std::min(x, T(20))));
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto out = make_op<T>(a.shape(), {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t i = 0; i < o.grad.size(); ++i) {
      const T x = p.value[i];
      const T s = T(1) / (T(1) + std::exp(-x));
      p.grad[i] += o.grad[i] * s * (T(1) - s);
    }
  });
  for (size_t i = 0; i < out.val().size(); ++i)
    out.val()[i] = T(1) / (T(1) + std::exp(-a.val()[i]));
  return out;
}

// ---------------------------------------------------------------------------
// matmul and affine

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw validation_error("matmul: expects rank-2 tensors");
  const int n = ta ? a.dim(1) : a.dim(0);
  const int k = ta ? a.dim(0) : a.dim(1);
  const int kb = tb ? b.dim(1) : b.dim(0);
  const int m = tb ? b.dim(0) : b.dim(1);
  if (k != kb) throw validation_error("matmul: inner dimensions do not conform");

  auto out = make_op<T>({n, m}, {a, b}, [n, k, m, ta, tb](TensorNode<T>& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    const T* g = o.grad.data();
    // dA
    if (pa.requires_grad) {
      if (!ta && !tb) detail::gemm_nt(n, m, k, g, pb.value.data(), pa.grad.data());
      else if (!ta && tb) detail::gemm_nn(n, m, k, g, pb.value.data(), pa.grad.data());
      else if (ta && !tb) detail::gemm_nt(k, m, n, pb.value.data(), g, pa.grad.data());
      else throw validation_error("matmul: tt backward unsupported");
    }
    // dB
    if (pb.requires_grad) {
      if (!ta && !tb) detail::gemm_tn(k, n, m, pa.value.data(), g, pb.grad.data());
      else if (!ta && tb) detail::gemm_tn(m, n, k, g, pa.value.data(), pb.grad.data());
      else if (ta && !tb) detail::gemm_nn(k, n, m, pa.value.data(), g, pb.grad.data());
      else throw validation_error("matmul: tt backward unsupported");
    }
  });

  if (!ta && !tb) detail::gemm_nn(n, k, m, a.val().data(), b.val().data(), out.val().data());
  else if (!ta && tb) detail::gemm_nt(n, k, m, a.val().data(), b.val().data(), out.val().data());
  else if (ta && !tb) detail::gemm_tn(n, k, m, a.val().data(), b.val().data(), out.val().data());
  else throw validation_error("matmul: tt unsupported");
  return out;
}

// y[i][j] = x[i][j] + bias[j]
template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias) {
  const int n = x.dim(0), d = x.dim(1);
  if (static_cast<int>(bias.size()) != d) throw validation_error("add_row: bias width mismatch");
  auto out = make_op<T>(x.shape(), {x, bias}, [n, d](TensorNode<T>& o) {
    auto& px = *o.parents[0];
    auto& pb = *o.parents[1];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        const T g = o.grad[static_cast<size_t>(i) * d + j];
        if (px.requires_grad) px.grad[static_cast<size_t>(i) * d + j] += g;
        if (pb.requires_grad) pb.grad[j] += g;
      }
  });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out.val()[static_cast<size_t>(i) * d + j] = x.val()[static_cast<size_t>(i) * d + j] + bias.val()[j];
  return out;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_row(matmul(x, w), b);
}

// y[i][j] = x[i][j] * g[j] (per-channel gates)
template <class T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& g) {
  const int n = x.dim(0), d = x.dim(1);
  if (static_cast<int>(g.size()) != d) throw validation_error("mul_row: gate width mismatch");
  auto out = make_op<T>(x.shape(), {x, g}, [n, d](TensorNode<T>& o) {
    auto& px = *o.parents[0];
    auto& pg = *o.parents[1];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        const size_t ix = static_cast<size_t>(i) * d + j;
        if (px.requires_grad) px.grad[ix] += o.grad[ix] * pg.value[j];
        if (pg.requires_grad) pg.grad[j] += o.grad[ix] * px.value[ix];
      }
  });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const size_t ix = static_cast<size_t>(i) * d + j;
      out.val()[ix] = x.val()[ix] * g.val()[j];
    }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  auto out = make_op<T>({1}, {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += o.grad[0];
  });
  T acc = T(0);
  for (T v : a.val()) acc += v;
  out.val()[0] = acc;
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.size());
  auto out = make_op<T>({1}, {a}, [inv](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += o.grad[0] * inv;
  });
  T acc = T(0);
  for (T v : a.val()) acc += v;
  out.val()[0] = acc * inv;
  return out;
}

template <class T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw validation_error("add_n: empty list");
  auto out = make_op<T>(xs[0].shape(), xs, [](TensorNode<T>& o) {
    for (auto& pp : o.parents) {
      auto& p = *pp;
      if (!p.requires_grad) continue;
      for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
    }
  });
  for (const auto& x : xs) {
    detail::check_same_shape(xs[0], x, "add_n");
    for (size_t i = 0; i < out.val().size(); ++i) out.val()[i] += x.val()[i];
  }
  return out;
}

// per-row product, rank-2 input [n x m] -> [n]
template <class T>
Tensor<T> row_prod(const Tensor<T>& a) {
  const int n = a.dim(0), m = a.dim(1);
  auto out = make_op<T>({n}, {a}, [n, m](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        T others = T(1);
        for (int l = 0; l < m; ++l)
          if (l != j) others *= p.value[static_cast<size_t>(i) * m + l];
        p.grad[static_cast<size_t>(i) * m + j] += o.grad[i] * others;
      }
  });
  for (int i = 0; i < n; ++i) {
    T prod = T(1);
    for (int j = 0; j < m; ++j) prod *= a.val()[static_cast<size_t>(i) * m + j];
    out.val()[i] = prod;
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int len) {
  const int n = x.dim(0), d = x.dim(1);
  if (c0 < 0 || len <= 0 || c0 + len > d) throw validation_error("slice_cols: out of range");
  auto out = make_op<T>({n, len}, {x}, [n, d, c0, len](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < len; ++j)
        p.grad[static_cast<size_t>(i) * d + c0 + j] += o.grad[static_cast<size_t>(i) * len + j];
  });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < len; ++j)
      out.val()[static_cast<size_t>(i) * len + j] = x.val()[static_cast<size_t>(i) * d + c0 + j];
  return out;
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw validation_error("concat_cols: empty list");
  const int n = parts[0].dim(0);
  int total = 0;
  std::vector<int> widths;
  for (const auto& p : parts) {
    if (p.dim(0) != n) throw validation_error("concat_cols: row count mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  auto out = make_op<T>({n, total}, parts, [n, total, widths](TensorNode<T>& o) {
    int off = 0;
    for (size_t s = 0; s < o.parents.size(); ++s) {
      auto& p = *o.parents[s];
      const int w = widths[s];
      if (p.requires_grad)
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < w; ++j)
            p.grad[static_cast<size_t>(i) * w + j] += o.grad[static_cast<size_t>(i) * total + off + j];
      off += w;
    }
  });
  int off = 0;
  for (size_t s = 0; s < parts.size(); ++s) {
    const int w = widths[s];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j)
        out.val()[static_cast<size_t>(i) * total + off + j] = parts[s].val()[static_cast<size_t>(i) * w + j];
    off += w;
  }
  return out;
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw validation_error("concat_rows: empty list");
  const int d = parts[0].dim(1);
  int total = 0;
  std::vector<int> heights;
  for (const auto& p : parts) {
    if (p.dim(1) != d) throw validation_error("concat_rows: column count mismatch");
    heights.push_back(p.dim(0));
    total += p.dim(0);
  }
  auto out = make_op<T>({total, d}, parts, [d, heights](TensorNode<T>& o) {
    int off = 0;
    for (size_t s = 0; s < o.parents.size(); ++s) {
      auto& p = *o.parents[s];
      const int h = heights[s];
      if (p.requires_grad)
        for (size_t i = 0; i < static_cast<size_t>(h) * d; ++i)
          p.grad[i] += o.grad[static_cast<size_t>(off) * d + i];
      off += h;
    }
  });
  int off = 0;
  for (size_t s = 0; s < parts.size(); ++s) {
    std::copy(parts[s].val().begin(), parts[s].val().end(),
              out.val().begin() + static_cast<size_t>(off) * d);
    off += heights[s];
  }
  return out;
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& idx) {
  const int d = x.dim(1);
  const int k = static_cast<int>(idx.size());
  for (int i : idx)
    if (i < 0 || i >= x.dim(0)) throw validation_error("gather_rows: index out of range");
  auto out = make_op<T>({k, d}, {x}, [d, idx](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < d; ++j)
        p.grad[static_cast<size_t>(idx[r]) * d + j] += o.grad[r * d + j];
  });
  for (int r = 0; r < k; ++r)
    for (int j = 0; j < d; ++j)
      out.val()[static_cast<size_t>(r) * d + j] = x.val()[static_cast<size_t>(idx[r]) * d + j];
  return out;
}

// out[i] = x[i][ids[i]], result shape [n]
template <class T>
Tensor<T> pick_per_row(const Tensor<T>& x, const std::vector<int>& ids) {
  const int n = x.dim(0), d = x.dim(1);
  if (static_cast<int>(ids.size()) != n) throw validation_error("pick_per_row: id count mismatch");
  for (int i : ids)
    if (i < 0 || i >= d) throw validation_error("pick_per_row: id out of range");
  auto out = make_op<T>({n}, {x}, [d, ids](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (size_t i = 0; i < ids.size(); ++i) p.grad[i * d + ids[i]] += o.grad[i];
  });
  for (int i = 0; i < n; ++i) out.val()[i] = x.val()[static_cast<size_t>(i) * d + ids[i]];
  return out;
}

// ---------------------------------------------------------------------------
// grouped ops used by set abstraction

// x is [(n*g) x d] of grouped rows; returns [n x d] column-wise max per group.
// Gradient routes to the argmax row (first one on ties).
template <class T>
Tensor<T> group_max_pool(const Tensor<T>& x, int group) {
  const int total = x.dim(0), d = x.dim(1);
  if (group <= 0 || total % group != 0) throw validation_error("group_max_pool: bad group size");
  const int n = total / group;
  std::vector<int> arg(static_cast<size_t>(n) * d);
  auto out = Tensor<T>::zeros({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      int best = i * group;
      T bv = x.val()[static_cast<size_t>(best) * d + j];
      for (int r = 1; r < group; ++r) {
        const T v = x.val()[static_cast<size_t>(i * group + r) * d + j];
        if (v > bv) {
          bv = v;
          best = i * group + r;
        }
      }
      arg[static_cast<size_t>(i) * d + j] = best;
      out.val()[static_cast<size_t>(i) * d + j] = bv;
    }
  if (grad_enabled() && x.requires_grad()) {
    auto res = make_op<T>({n, d}, {x}, [d, arg](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      for (size_t i = 0; i < o.grad.size(); ++i)
        p.grad[static_cast<size_t>(arg[i]) * d + i % d] += o.grad[i];
    });
    res.val() = out.val();
    return res;
  }
  return out;
}

// x is [(n*g) x d]; returns [n x d] column-wise mean per group.
template <class T>
Tensor<T> group_mean_pool(const Tensor<T>& x, int group) {
  const int total = x.dim(0), d = x.dim(1);
  if (group <= 0 || total % group != 0) throw validation_error("group_mean_pool: bad group size");
  const int n = total / group;
  const T inv = T(1) / static_cast<T>(group);
  auto out = make_op<T>({n, d}, {x}, [n, d, group, inv](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < group; ++r)
        for (int j = 0; j < d; ++j)
          p.grad[static_cast<size_t>(i * group + r) * d + j] += o.grad[static_cast<size_t>(i) * d + j] * inv;
  });
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < group; ++r)
      for (int j = 0; j < d; ++j)
        out.val()[static_cast<size_t>(i) * d + j] += x.val()[static_cast<size_t>(i * group + r) * d + j] * inv;
  return out;
}

// y[i*g + r][:] = x[i*g + r][:] - centers[i][:]
template <class T>
Tensor<T> sub_group_broadcast(const Tensor<T>& x, const Tensor<T>& centers, int group) {
  const int total = x.dim(0), d = x.dim(1);
  const int n = centers.dim(0);
  if (total != n * group || centers.dim(1) != d)
    throw validation_error("sub_group_broadcast: shape mismatch");
  auto out = make_op<T>(x.shape(), {x, centers}, [n, d, group](TensorNode<T>& o) {
    auto& px = *o.parents[0];
    auto& pc = *o.parents[1];
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < group; ++r)
        for (int j = 0; j < d; ++j) {
          const size_t ix = static_cast<size_t>(i * group + r) * d + j;
          if (px.requires_grad) px.grad[ix] += o.grad[ix];
          if (pc.requires_grad) pc.grad[static_cast<size_t>(i) * d + j] -= o.grad[ix];
        }
  });
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < group; ++r)
      for (int j = 0; j < d; ++j) {
        const size_t ix = static_cast<size_t>(i * group + r) * d + j;
        out.val()[ix] = x.val()[ix] - centers.val()[static_cast<size_t>(i) * d + j];
      }
  return out;
}

// ---------------------------------------------------------------------------
// normalization and softmax

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const int n = x.dim(0), d = x.dim(1);
  if (static_cast<int>(gamma.size()) != d || static_cast<int>(beta.size()) != d)
    throw validation_error("layer_norm: affine width mismatch");
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(n) * d);
  auto inv_sigma = std::make_shared<std::vector<T>>(n);

  auto out = make_op<T>(x.shape(), {x, gamma, beta}, [n, d, xhat, inv_sigma](TensorNode<T>& o) {
    auto& px = *o.parents[0];
    auto& pg = *o.parents[1];
    auto& pb = *o.parents[2];
    const T invd = T(1) / static_cast<T>(d);
    for (int i = 0; i < n; ++i) {
      const size_t base = static_cast<size_t>(i) * d;
      if (px.requires_grad) {
        T m1 = T(0), m2 = T(0);
        for (int j = 0; j < d; ++j) {
          const T dxh = o.grad[base + j] * pg.value[j];
          m1 += dxh;
          m2 += dxh * (*xhat)[base + j];
        }
        m1 *= invd;
        m2 *= invd;
        for (int j = 0; j < d; ++j) {
          const T dxh = o.grad[base + j] * pg.value[j];
          px.grad[base + j] += (*inv_sigma)[i] * (dxh - m1 - (*xhat)[base + j] * m2);
        }
      }
      for (int j = 0; j < d; ++j) {
        if (pg.requires_grad) pg.grad[j] += o.grad[base + j] * (*xhat)[base + j];
        if (pb.requires_grad) pb.grad[j] += o.grad[base + j];
      }
    }
  });

  for (int i = 0; i < n; ++i) {
    const size_t base = static_cast<size_t>(i) * d;
    T m = T(0);
    for (int j = 0; j < d; ++j) m += x.val()[base + j];
    m /= static_cast<T>(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) {
      const T c = x.val()[base + j] - m;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_sigma)[i] = is;
    for (int j = 0; j < d; ++j) {
      const T xh = (x.val()[base + j] - m) * is;
      (*xhat)[base + j] = xh;
      out.val()[base + j] = gamma.val()[j] * xh + beta.val()[j];
    }
  }
  return out;
}

// Row softmax with max subtraction. A fully masked row (all entries at the
// additive mask floor) degenerates to uniform weights rather than NaN; the
// optional flag vector reports such rows.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, std::vector<char>* fully_masked = nullptr) {
  const int n = x.dim(0), d = x.dim(1);
  auto out = make_op<T>(x.shape(), {x}, [n, d](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (int i = 0; i < n; ++i) {
      const size_t base = static_cast<size_t>(i) * d;
      T dot = T(0);
      for (int j = 0; j < d; ++j) dot += o.grad[base + j] * o.value[base + j];
      for (int j = 0; j < d; ++j)
        p.grad[base + j] += o.value[base + j] * (o.grad[base + j] - dot);
    }
  });
  if (fully_masked) fully_masked->assign(n, 0);
  for (int i = 0; i < n; ++i) {
    const size_t base = static_cast<size_t>(i) * d;
    T mx = x.val()[base];
    for (int j = 1; j < d; ++j) mx = std::max(mx, x.val()[base + j]);
    if (fully_masked && mx < T(-1e8)) (*fully_masked)[i] = 1;
    T z = T(0);
    for (int j = 0; j < d; ++j) {
      const T e = std::exp(x.val()[base + j] - mx);
      out.val()[base + j] = e;
      z += e;
    }
    const T inv = T(1) / z;
    for (int j = 0; j < d; ++j) out.val()[base + j] *= inv;
  }
  return out;
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  const int n = x.dim(0), d = x.dim(1);
  auto out = make_op<T>(x.shape(), {x}, [n, d](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    for (int i = 0; i < n; ++i) {
      const size_t base = static_cast<size_t>(i) * d;
      T gsum = T(0);
      for (int j = 0; j < d; ++j) gsum += o.grad[base + j];
      for (int j = 0; j < d; ++j)
        p.grad[base + j] += o.grad[base + j] - std::exp(o.value[base + j]) * gsum;
    }
  });
  for (int i = 0; i < n; ++i) {
    const size_t base = static_cast<size_t>(i) * d;
    T mx = x.val()[base];
    for (int j = 1; j < d; ++j) mx = std::max(mx, x.val()[base + j]);
    T z = T(0);
    for (int j = 0; j < d; ++j) z += std::exp(x.val()[base + j] - mx);
    const T lse = mx + std::log(z);
    for (int j = 0; j < d; ++j) out.val()[base + j] = x.val()[base + j] - lse;
  }
  return out;
}

// Sum of -log P(ids[i] | row i). Teacher-forcing cross entropy.
template <class T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, const std::vector<int>& ids) {
  return scale(sum(pick_per_row(log_softmax_rows(logits), ids)), T(-1));
}

}  // namespace bica
