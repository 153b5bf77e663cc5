#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vlab/common.hpp"
#include "vlab/rng.hpp"

namespace vlab {

// Dense row-major rank-2 tensors with reverse-mode autodiff on an explicit
// tape. Training runs in float; the gradient-check harness instantiates the
// same graphs in double. Zero extents are permitted so the degenerate
// identity cases (zero-width concat, empty visual block) stay expressible.

inline std::atomic<bool> g_eager_finite_checks{true};

template <typename T>
struct TensorNode {
  int rows = 0;
  int cols = 0;
  std::shared_ptr<std::vector<T>> data;
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<T> grad;

  size_t size() const { return size_t(rows) * size_t(cols); }
  void ensure_grad() {
    if (!has_grad) {
      grad.assign(size(), T(0));
      has_grad = true;
    }
  }
};

inline std::string shape_str(int r, int c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode<T>>()) {
    node_->data = std::make_shared<std::vector<T>>();
  }

  Tensor(int rows, int cols, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (rows < 0 || cols < 0) {
      throw ShapeError("negative extent in shape " + shape_str(rows, cols));
    }
    node_->rows = rows;
    node_->cols = cols;
    node_->data = std::make_shared<std::vector<T>>(size_t(rows) * size_t(cols), T(0));
    node_->requires_grad = requires_grad;
  }

  static Tensor from(int rows, int cols, std::vector<T> values, bool requires_grad = false) {
    Tensor t(rows, cols, requires_grad);
    if (values.size() != t.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not fill shape " + shape_str(rows, cols));
    }
    *t.node_->data = std::move(values);
    return t;
  }

  static Tensor row(std::vector<T> values, bool requires_grad = false) {
    const int n = int(values.size());
    return from(1, n, std::move(values), requires_grad);
  }

  static Tensor scalar(T v) { return from(1, 1, {v}); }

  static Tensor randn(int rows, int cols, Rng& rng, T stddev, bool requires_grad = false) {
    Tensor t(rows, cols, requires_grad);
    for (auto& v : *t.node_->data) v = T(rng.gaussian()) * stddev;
    return t;
  }

  static Tensor identity(int n) {
    Tensor t(n, n);
    for (int i = 0; i < n; ++i) t.set(i, i, T(1));
    return t;
  }

  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  size_t size() const { return node_->size(); }

  std::span<const T> values() const { return {node_->data->data(), node_->data->size()}; }
  std::span<T> values_mut() { return {node_->data->data(), node_->data->size()}; }

  T at(int i, int j) const { return (*node_->data)[size_t(i) * cols() + j]; }
  void set(int i, int j, T v) { (*node_->data)[size_t(i) * cols() + j] = v; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return node_->has_grad; }
  std::span<const T> grad() const {
    if (!node_->has_grad) {
      throw Error("gradient requested but none present");
    }
    return {node_->grad.data(), node_->grad.size()};
  }
  void zero_grad() {
    node_->has_grad = false;
    node_->grad.clear();
  }

  // Fresh node over the same storage. Used to run concurrent forward passes
  // against shared parameters: each alias accumulates its own gradient.
  Tensor alias(bool requires_grad) const {
    Tensor t;
    t.node_->rows = rows();
    t.node_->cols = cols();
    t.node_->data = node_->data;
    t.node_->requires_grad = requires_grad;
    return t;
  }

  Tensor clone() const {
    Tensor t(rows(), cols(), requires_grad());
    *t.node_->data = *node_->data;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(rows(), cols(), requires_grad());
    auto src = values();
    auto dst = t.values_mut();
    for (size_t i = 0; i < src.size(); ++i) dst[i] = U(src[i]);
    return t;
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  template <typename U>
  friend class Tensor;
  std::shared_ptr<TensorNode<T>> node_;
};

// Boolean keep-mask for softmax_rows. keep[i*cols+j] != 0 means entry (i,j)
// participates in the row normalization.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> keep;

  static Mask causal(int n) {
    Mask m;
    m.rows = n;
    m.cols = n;
    m.keep.assign(size_t(n) * size_t(n), 0);
    for (int q = 0; q < n; ++q) {
      for (int k = 0; k <= q; ++k) m.keep[size_t(q) * n + k] = 1;
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// Raw matmul kernels. Row-major; `acc` accumulates into c instead of
// overwriting. Loop orders are chosen so the innermost loop is contiguous.
// ---------------------------------------------------------------------------
namespace kernels {

// c[m x n] = a[m x k] * b[k x n]
template <typename T>
void mm_nn(T* __restrict__ c, const T* __restrict__ a, const T* __restrict__ b, int m,
           int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    T* __restrict__ ci = c + size_t(i) * n;
    if (!acc) std::fill(ci, ci + n, T(0));
    const T* __restrict__ ai = a + size_t(i) * k;
    for (int l = 0; l < k; ++l) {
      const T av = ai[l];
      const T* __restrict__ bl = b + size_t(l) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// c[m x n] = a[m x k] * b[n x k]^T
template <typename T>
void mm_nt(T* __restrict__ c, const T* __restrict__ a, const T* __restrict__ b, int m,
           int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const T* __restrict__ ai = a + size_t(i) * k;
    T* __restrict__ ci = c + size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* __restrict__ bj = b + size_t(j) * k;
      T s = 0;
      for (int l = 0; l < k; ++l) s += ai[l] * bj[l];
      ci[j] = acc ? ci[j] + s : s;
    }
  }
}

// c[k x n] = a[m x k]^T * b[m x n]
template <typename T>
void mm_tn(T* __restrict__ c, const T* __restrict__ a, const T* __restrict__ b, int m,
           int k, int n, bool acc) {
  if (!acc) std::fill(c, c + size_t(k) * n, T(0));
  for (int i = 0; i < m; ++i) {
    const T* __restrict__ ai = a + size_t(i) * k;
    const T* __restrict__ bi = b + size_t(i) * n;
    for (int l = 0; l < k; ++l) {
      const T av = ai[l];
      T* __restrict__ cl = c + size_t(l) * n;
      for (int j = 0; j < n; ++j) cl[j] += av * bi[j];
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Tape: ordered record of executed ops. Ops are appended in execution order,
// so walking the record backwards is a valid reverse topological traversal
// and visits each op exactly once. Inputs are never mutated; every op
// allocates its output.
// ---------------------------------------------------------------------------
template <typename T>
class Tape {
 public:
  Tape() : finite_checks_(g_eager_finite_checks.load(std::memory_order_relaxed)) {}

  void set_finite_checks(bool on) { finite_checks_ = on; }
  size_t op_count() const { return ops_.size(); }

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.rows()) {
      throw ShapeError("matmul inner extents differ: " + shape_str(a.rows(), a.cols()) +
                       " vs " + shape_str(b.rows(), b.cols()));
    }
    Tensor<T> out(a.rows(), b.cols());
    kernels::mm_nn(out.values_mut().data(), a.values().data(), b.values().data(), a.rows(),
                   a.cols(), b.cols(), false);
    finish(out, "matmul");
    if (grad_needed(a, b)) {
      record(out, [an = a.node(), bn = b.node(), on = out.node()] {
        const T* g = on->grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          kernels::mm_nt(an->grad.data(), g, bn->data->data(), on->rows, on->cols, an->cols,
                         true);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          kernels::mm_tn(bn->grad.data(), an->data->data(), g, an->rows, an->cols, on->cols,
                         true);
        }
      });
    }
    return out;
  }

  // a * b^T; used for attention scores so keys never get materialized
  // transposed.
  Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.cols()) {
      throw ShapeError("matmul_nt feature extents differ: " +
                       shape_str(a.rows(), a.cols()) + " vs " +
                       shape_str(b.rows(), b.cols()));
    }
    Tensor<T> out(a.rows(), b.rows());
    kernels::mm_nt(out.values_mut().data(), a.values().data(), b.values().data(), a.rows(),
                   a.cols(), b.rows(), false);
    finish(out, "matmul_nt");
    if (grad_needed(a, b)) {
      record(out, [an = a.node(), bn = b.node(), on = out.node()] {
        const T* g = on->grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          kernels::mm_nn(an->grad.data(), g, bn->data->data(), on->rows, on->cols, an->cols,
                         true);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          kernels::mm_tn(bn->grad.data(), g, an->data->data(), on->rows, on->cols, an->cols,
                         true);
        }
      });
    }
    return out;
  }

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
      throw ShapeError("add shapes differ: " + shape_str(a.rows(), a.cols()) + " vs " +
                       shape_str(b.rows(), b.cols()));
    }
    Tensor<T> out(a.rows(), a.cols());
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    finish(out, "add");
    if (grad_needed(a, b)) {
      record(out, [an = a.node(), bn = b.node(), on = out.node()] {
        for (auto* n : {an.get(), bn.get()}) {
          if (!n->requires_grad) continue;
          n->ensure_grad();
          for (size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += on->grad[i];
        }
      });
    }
    return out;
  }

  Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out(a.rows(), a.cols());
    auto av = a.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
    finish(out, "scale");
    if (a.requires_grad()) {
      record(out, [an = a.node(), on = out.node(), s] {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * s;
      });
    }
    return out;
  }

  // Column-wise arithmetic mean; gradient spreads 1/m to every row.
  Tensor<T> mean_rows(const Tensor<T>& a) {
    if (a.rows() == 0) {
      throw ShapeError("mean_rows over an empty reduction: shape " +
                       shape_str(a.rows(), a.cols()));
    }
    const int m = a.rows(), n = a.cols();
    Tensor<T> out(1, n);
    auto ov = out.values_mut();
    auto av = a.values();
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int i = 0; i < m; ++i) s += double(av[size_t(i) * n + j]);
      ov[j] = T(s / m);
    }
    finish(out, "mean_rows");
    if (a.requires_grad()) {
      record(out, [an = a.node(), on = out.node(), m, n] {
        an->ensure_grad();
        const T inv = T(1) / T(m);
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) an->grad[size_t(i) * n + j] += on->grad[j] * inv;
        }
      });
    }
    return out;
  }

  // Row-wise [a | b]; gradient splits at column a.cols().
  Tensor<T> concat_features(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rows() != b.rows()) {
      throw ShapeError("concat_features row counts differ: " +
                       shape_str(a.rows(), a.cols()) + " vs " +
                       shape_str(b.rows(), b.cols()));
    }
    const int m = a.rows(), p = a.cols(), q = b.cols();
    Tensor<T> out(m, p + q);
    auto ov = out.values_mut();
    auto av = a.values();
    auto bv = b.values();
    for (int i = 0; i < m; ++i) {
      std::copy_n(av.data() + size_t(i) * p, p, ov.data() + size_t(i) * (p + q));
      std::copy_n(bv.data() + size_t(i) * q, q, ov.data() + size_t(i) * (p + q) + p);
    }
    finish(out, "concat_features");
    if (grad_needed(a, b)) {
      record(out, [an = a.node(), bn = b.node(), on = out.node(), m, p, q] {
        for (int i = 0; i < m; ++i) {
          const T* g = on->grad.data() + size_t(i) * (p + q);
          if (an->requires_grad) {
            an->ensure_grad();
            for (int j = 0; j < p; ++j) an->grad[size_t(i) * p + j] += g[j];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (int j = 0; j < q; ++j) bn->grad[size_t(i) * q + j] += g[p + j];
          }
        }
      });
    }
    return out;
  }

  Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) {
      throw ShapeError("concat_rows of zero parts");
    }
    const int n = parts.front().cols();
    int m = 0;
    for (const auto& p : parts) {
      if (p.cols() != n) {
        throw ShapeError("concat_rows column counts differ: " + shape_str(p.rows(), p.cols()) +
                         " vs " + shape_str(parts.front().rows(), n));
      }
      m += p.rows();
    }
    Tensor<T> out(m, n);
    auto ov = out.values_mut();
    size_t off = 0;
    for (const auto& p : parts) {
      auto pv = p.values();
      std::copy(pv.begin(), pv.end(), ov.begin() + off);
      off += pv.size();
    }
    finish(out, "concat_rows");
    bool rg = false;
    for (const auto& p : parts) rg = rg || p.requires_grad();
    if (rg) {
      std::vector<std::shared_ptr<TensorNode<T>>> nodes;
      nodes.reserve(parts.size());
      for (const auto& p : parts) nodes.push_back(p.node());
      record(out, [nodes = std::move(nodes), on = out.node()] {
        size_t off = 0;
        for (const auto& pn : nodes) {
          const size_t sz = pn->size();
          if (pn->requires_grad) {
            pn->ensure_grad();
            for (size_t i = 0; i < sz; ++i) pn->grad[i] += on->grad[off + i];
          }
          off += sz;
        }
      });
    }
    return out;
  }

  Tensor<T> slice_cols(const Tensor<T>& a, int from, int to) {
    if (from < 0 || to > a.cols() || from > to) {
      throw ShapeError("slice_cols [" + std::to_string(from) + ", " + std::to_string(to) +
                       ") out of bounds for shape " + shape_str(a.rows(), a.cols()));
    }
    const int m = a.rows(), n = a.cols(), w = to - from;
    Tensor<T> out(m, w);
    auto av = a.values();
    auto ov = out.values_mut();
    for (int i = 0; i < m; ++i) {
      std::copy_n(av.data() + size_t(i) * n + from, w, ov.data() + size_t(i) * w);
    }
    finish(out, "slice_cols");
    if (a.requires_grad()) {
      record(out, [an = a.node(), on = out.node(), m, n, from, w] {
        an->ensure_grad();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < w; ++j) {
            an->grad[size_t(i) * n + from + j] += on->grad[size_t(i) * w + j];
          }
        }
      });
    }
    return out;
  }

  Tensor<T> gather_rows(const Tensor<T>& a, std::vector<int> ids) {
    const int m = a.rows(), n = a.cols();
    for (int id : ids) {
      if (id < 0 || id >= m) {
        throw IndexError("gather_rows id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(m) + ")");
      }
    }
    Tensor<T> out(int(ids.size()), n);
    auto av = a.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < ids.size(); ++i) {
      std::copy_n(av.data() + size_t(ids[i]) * n, n, ov.data() + i * n);
    }
    finish(out, "gather_rows");
    if (a.requires_grad()) {
      record(out, [an = a.node(), on = out.node(), ids = std::move(ids), n] {
        an->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
          for (int j = 0; j < n; ++j) {
            an->grad[size_t(ids[i]) * n + j] += on->grad[i * n + j];
          }
        }
      });
    }
    return out;
  }

  // Row i of the output is table row ids[i], bitwise. Gradient scatter-adds
  // back into the table.
  Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids) {
    return gather_rows(table, ids);
  }

  // Tile a 1 x n row m times; gradient sums over the tiles.
  Tensor<T> repeat_rows(const Tensor<T>& a, int m) {
    if (a.rows() != 1) {
      throw ShapeError("repeat_rows expects a single row, got " +
                       shape_str(a.rows(), a.cols()));
    }
    const int n = a.cols();
    Tensor<T> out(m, n);
    auto av = a.values();
    auto ov = out.values_mut();
    for (int i = 0; i < m; ++i) std::copy_n(av.data(), n, ov.data() + size_t(i) * n);
    finish(out, "repeat_rows");
    if (a.requires_grad()) {
      record(out, [an = a.node(), on = out.node(), m, n] {
        an->ensure_grad();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) an->grad[j] += on->grad[size_t(i) * n + j];
        }
      });
    }
    return out;
  }

  // Row-wise softmax with max subtraction. Masked entries are exactly zero
  // and excluded from the normalization; a fully masked row is an error.
  Tensor<T> softmax_rows(const Tensor<T>& a, const Mask* mask = nullptr) {
    const int m = a.rows(), n = a.cols();
    if (mask != nullptr && (mask->rows != m || mask->cols != n)) {
      throw ShapeError("softmax mask shape " + shape_str(mask->rows, mask->cols) +
                       " does not match input " + shape_str(m, n));
    }
    Tensor<T> out(m, n);
    auto av = a.values();
    auto ov = out.values_mut();
    for (int i = 0; i < m; ++i) {
      const T* x = av.data() + size_t(i) * n;
      T* y = ov.data() + size_t(i) * n;
      const uint8_t* keep = mask ? mask->keep.data() + size_t(i) * n : nullptr;
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < n; ++j) {
        if (!keep || keep[j]) mx = std::max(mx, x[j]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) {
        throw MaskError("softmax row " + std::to_string(i) + " is fully masked");
      }
      double z = 0;
      for (int j = 0; j < n; ++j) {
        if (!keep || keep[j]) {
          y[j] = std::exp(x[j] - mx);
          z += double(y[j]);
        } else {
          y[j] = T(0);
        }
      }
      const T inv = T(1.0 / z);
      for (int j = 0; j < n; ++j) y[j] *= inv;
    }
    finish(out, "softmax_rows");
    if (a.requires_grad()) {
      record(out, [an = a.node(), on = out.node(), m, n] {
        an->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const T* p = on->data->data() + size_t(i) * n;
          const T* g = on->grad.data() + size_t(i) * n;
          T* d = an->grad.data() + size_t(i) * n;
          double dot = 0;
          for (int j = 0; j < n; ++j) dot += double(g[j]) * double(p[j]);
          for (int j = 0; j < n; ++j) d[j] += p[j] * (g[j] - T(dot));
        }
      });
    }
    return out;
  }

  // y = gain * (x - mean) / sqrt(var + 1e-5) + bias, per row. gain/bias are
  // 1 x n.
  Tensor<T> layer_norm_rows(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias) {
    const int m = a.rows(), n = a.cols();
    if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
      throw ShapeError("layer_norm affine shapes " + shape_str(gain.rows(), gain.cols()) +
                       ", " + shape_str(bias.rows(), bias.cols()) + " do not match input " +
                       shape_str(m, n));
    }
    constexpr double kEps = 1e-5;
    Tensor<T> out(m, n);
    auto av = a.values();
    auto gv = gain.values();
    auto bv = bias.values();
    auto ov = out.values_mut();
    std::vector<T> mean(m), inv_std(m);
    for (int i = 0; i < m; ++i) {
      const T* x = av.data() + size_t(i) * n;
      double mu = 0;
      for (int j = 0; j < n; ++j) mu += double(x[j]);
      mu /= n;
      double var = 0;
      for (int j = 0; j < n; ++j) {
        const double d = double(x[j]) - mu;
        var += d * d;
      }
      var /= n;
      const double is = 1.0 / std::sqrt(var + kEps);
      mean[i] = T(mu);
      inv_std[i] = T(is);
      T* y = ov.data() + size_t(i) * n;
      for (int j = 0; j < n; ++j) y[j] = gv[j] * T((double(x[j]) - mu) * is) + bv[j];
    }
    finish(out, "layer_norm_rows");
    if (grad_needed(a, gain) || bias.requires_grad()) {
      record(out, [an = a.node(), gn = gain.node(), bn = bias.node(), on = out.node(),
                   mean = std::move(mean), inv_std = std::move(inv_std), m, n] {
        for (int i = 0; i < m; ++i) {
          const T* x = an->data->data() + size_t(i) * n;
          const T* g = on->grad.data() + size_t(i) * n;
          const T mu = mean[i], is = inv_std[i];
          if (gn->requires_grad) {
            gn->ensure_grad();
            for (int j = 0; j < n; ++j) gn->grad[j] += g[j] * (x[j] - mu) * is;
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (int j = 0; j < n; ++j) bn->grad[j] += g[j];
          }
          if (an->requires_grad) {
            an->ensure_grad();
            const T* gamma = gn->data->data();
            double sum_dy = 0, sum_dy_xhat = 0;
            for (int j = 0; j < n; ++j) {
              const double dy = double(g[j]) * double(gamma[j]);
              sum_dy += dy;
              sum_dy_xhat += dy * double((x[j] - mu) * is);
            }
            sum_dy /= n;
            sum_dy_xhat /= n;
            T* d = an->grad.data() + size_t(i) * n;
            for (int j = 0; j < n; ++j) {
              const double dy = double(g[j]) * double(gamma[j]);
              const double xhat = double((x[j] - mu) * is);
              d[j] += T((dy - sum_dy - xhat * sum_dy_xhat) * double(is));
            }
          }
        }
      });
    }
    return out;
  }

  // Exact GELU, x * Phi(x).
  Tensor<T> gelu(const Tensor<T>& a) {
    Tensor<T> out(a.rows(), a.cols());
    auto av = a.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < ov.size(); ++i) {
      const double x = double(av[i]);
      ov[i] = T(x * 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)));
    }
    finish(out, "gelu");
    if (a.requires_grad()) {
      record(out, [an = a.node(), on = out.node()] {
        an->ensure_grad();
        const auto& x = *an->data;
        for (size_t i = 0; i < an->grad.size(); ++i) {
          const double v = double(x[i]);
          const double phi = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
          const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014326779;
          an->grad[i] += on->grad[i] * T(phi + v * pdf);
        }
      });
    }
    return out;
  }

  // Mean negative log-softmax of the target classes; 1 x 1 output.
  Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
    const int m = logits.rows(), v = logits.cols();
    if (int(targets.size()) != m) {
      throw ShapeError("cross_entropy target count " + std::to_string(targets.size()) +
                       " does not match logit rows " + shape_str(m, v));
    }
    for (int t : targets) {
      if (t < 0 || t >= v) {
        throw IndexError("cross_entropy target " + std::to_string(t) + " out of range [0, " +
                         std::to_string(v) + ")");
      }
    }
    Tensor<T> out(1, 1);
    auto lv = logits.values();
    std::vector<T> probs(size_t(m) * v);
    double loss = 0;
    for (int i = 0; i < m; ++i) {
      const T* x = lv.data() + size_t(i) * v;
      T* p = probs.data() + size_t(i) * v;
      T mx = x[0];
      for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
      double z = 0;
      for (int j = 0; j < v; ++j) {
        p[j] = std::exp(x[j] - mx);
        z += double(p[j]);
      }
      const T inv = T(1.0 / z);
      for (int j = 0; j < v; ++j) p[j] *= inv;
      loss += std::log(z) - double(x[targets[i]] - mx);
    }
    out.values_mut()[0] = T(loss / m);
    finish(out, "cross_entropy");
    if (logits.requires_grad()) {
      record(out, [ln = logits.node(), on = out.node(), probs = std::move(probs), targets, m,
                   v] {
        ln->ensure_grad();
        const T g = on->grad[0] / T(m);
        for (int i = 0; i < m; ++i) {
          const T* p = probs.data() + size_t(i) * v;
          T* d = ln->grad.data() + size_t(i) * v;
          for (int j = 0; j < v; ++j) d[j] += g * p[j];
          d[targets[i]] -= g;
        }
      });
    }
    return out;
  }

  // Seeds d(loss)/d(loss) = 1 and replays the op record in reverse. Ops whose
  // outputs never received a gradient are skipped.
  void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) {
      throw ShapeError("backward expects a scalar loss, got " +
                       shape_str(loss.rows(), loss.cols()));
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (it->out->has_grad) it->fn();
    }
  }

 private:
  struct OpRecord {
    std::shared_ptr<TensorNode<T>> out;
    std::function<void()> fn;
  };

  static bool grad_needed(const Tensor<T>& a, const Tensor<T>& b) {
    return a.requires_grad() || b.requires_grad();
  }

  void finish(Tensor<T>& out, const char* op) {
    if (finite_checks_) {
      for (T v : out.values()) {
        if (!std::isfinite(double(v))) {
          throw NumericError(std::string(op) + " produced a non-finite value");
        }
      }
    }
  }

  void record(Tensor<T>& out, std::function<void()> fn) {
    out.node()->requires_grad = true;
    ops_.push_back({out.node(), std::move(fn)});
  }

  std::vector<OpRecord> ops_;
  bool finite_checks_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace vlab
