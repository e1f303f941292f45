#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gp {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl<S>>> parents;
  // Accumulates this node's grad into its parents' grads.
  std::function<void(TensorImpl<S>&)> backprop;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
};

// Shared-impl tensor handle. Copies alias the same storage and tape node.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S(0), bool requires_grad = false) {
    impl_ = std::make_shared<TensorImpl<S>>();
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<size_t>(gp::numel(impl_->shape)), fill);
    impl_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != gp::numel(shape))
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  std::vector<S>& data() { return impl_->data; }
  const std::vector<S>& data() const { return impl_->data; }
  std::vector<S>& grad() { return impl_->grad; }
  const std::vector<S>& grad() const { return impl_->grad; }
  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  S item() const {
    if (numel() != 1) throw std::runtime_error("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  // Copy of the values with no tape history.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = false;
    return t;
  }

  void zero_grad() { impl_->grad.assign(impl_->data.size(), S(0)); }

  void backward() const {
    if (numel() != 1) throw std::runtime_error("backward() requires a scalar loss, got " + shape_str(shape()));
    // Reverse topological order over the tape.
    std::vector<TensorImpl<S>*> order;
    std::vector<TensorImpl<S>*> stack{impl_.get()};
    std::vector<std::pair<TensorImpl<S>*, size_t>> dfs;
    // Iterative DFS; visited keyed by pointer.
    std::vector<TensorImpl<S>*> visited;
    auto seen = [&](TensorImpl<S>* p) {
      return std::find(visited.begin(), visited.end(), p) != visited.end();
    };
    dfs.emplace_back(impl_.get(), 0);
    visited.push_back(impl_.get());
    while (!dfs.empty()) {
      auto& [node, idx] = dfs.back();
      if (idx < node->parents.size()) {
        TensorImpl<S>* p = node->parents[idx++].get();
        if (!seen(p)) {
          visited.push_back(p);
          dfs.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        dfs.pop_back();
      }
    }
    // `order` is post-order: parents before children; walk it backwards.
    impl_->ensure_grad();
    impl_->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorImpl<S>* node = *it;
      if (node->backprop && !node->grad.empty()) node->backprop(*node);
    }
  }

  std::shared_ptr<TensorImpl<S>>& impl() { return impl_; }
  const std::shared_ptr<TensorImpl<S>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<S>> impl_;
};

namespace detail {

template <typename S>
Tensor<S> make_result(Shape shape, std::vector<Tensor<S>> parents) {
  Tensor<S> out(std::move(shape));
  bool rg = false;
  for (auto& p : parents) rg = rg || p.requires_grad();
  out.set_requires_grad(rg);
  if (rg) {
    for (auto& p : parents) out.impl()->parents.push_back(p.impl());
  }
  return out;
}

template <typename S>
void accumulate(TensorImpl<S>& dst, const std::vector<S>& g) {
  dst.ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "add");
  Tensor<S> out = detail::make_result<S>(a.shape(), {a, b});
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[size_t(i)] = a.data()[size_t(i)] + b.data()[size_t(i)];
  if (out.requires_grad()) {
    auto ai = a.impl().get();
    auto bi = b.impl().get();
    bool arg = a.requires_grad(), brg = b.requires_grad();
    out.impl()->backprop = [ai, bi, arg, brg](TensorImpl<S>& self) {
      if (arg) detail::accumulate(*ai, self.grad);
      if (brg) detail::accumulate(*bi, self.grad);
    };
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "sub");
  Tensor<S> out = detail::make_result<S>(a.shape(), {a, b});
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[size_t(i)] = a.data()[size_t(i)] - b.data()[size_t(i)];
  if (out.requires_grad()) {
    auto ai = a.impl().get();
    auto bi = b.impl().get();
    bool arg = a.requires_grad(), brg = b.requires_grad();
    out.impl()->backprop = [ai, bi, arg, brg](TensorImpl<S>& self) {
      if (arg) detail::accumulate(*ai, self.grad);
      if (brg) {
        bi->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] -= self.grad[i];
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mul");
  Tensor<S> out = detail::make_result<S>(a.shape(), {a, b});
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[size_t(i)] = a.data()[size_t(i)] * b.data()[size_t(i)];
  if (out.requires_grad()) {
    auto ai = a.impl().get();
    auto bi = b.impl().get();
    bool arg = a.requires_grad(), brg = b.requires_grad();
    out.impl()->backprop = [ai, bi, arg, brg](TensorImpl<S>& self) {
      if (arg) {
        ai->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * bi->data[i];
      }
      if (brg) {
        bi->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i] * ai->data[i];
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out = detail::make_result<S>(a.shape(), {a});
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[size_t(i)] = a.data()[size_t(i)] * c;
  if (out.requires_grad()) {
    auto ai = a.impl().get();
    out.impl()->backprop = [ai, c](TensorImpl<S>& self) {
      ai->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * c;
    };
  }
  return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out = detail::make_result<S>(a.shape(), {a});
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[size_t(i)] = a.data()[size_t(i)] + c;
  if (out.requires_grad()) {
    auto ai = a.impl().get();
    out.impl()->backprop = [ai](TensorImpl<S>& self) { detail::accumulate(*ai, self.grad); };
  }
  return out;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return mul_scalar(a, S(-1));
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  return mul(a, a);
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  Tensor<S> out = detail::make_result<S>(a.shape(), {a});
  for (int64_t i = 0; i < a.numel(); ++i) {
    S v = a.data()[size_t(i)];
    out.data()[size_t(i)] = v > S(0) ? v : S(0);
  }
  if (out.requires_grad()) {
    auto ai = a.impl().get();
    out.impl()->backprop = [ai](TensorImpl<S>& self) {
      ai->ensure_grad();
      // Subgradient at 0 taken as 0.
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (ai->data[i] > S(0)) ai->grad[i] += self.grad[i];
    };
  }
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  Tensor<S> out = detail::make_result<S>(a.shape(), {a});
  for (int64_t i = 0; i < a.numel(); ++i) {
    S v = a.data()[size_t(i)];
    out.data()[size_t(i)] = S(1) / (S(1) + std::exp(-v));
  }
  if (out.requires_grad()) {
    auto ai = a.impl().get();
    auto oi = out.impl().get();
    out.impl()->backprop = [ai, oi](TensorImpl<S>& self) {
      ai->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        S y = oi->data[i];
        ai->grad[i] += self.grad[i] * y * (S(1) - y);
      }
    };
  }
  return out;
}

// (v + eps)^(-1/2), elementwise. eps is a constant shift.
template <typename S>
Tensor<S> rsqrt_shift(const Tensor<S>& v, S eps) {
  Tensor<S> out = detail::make_result<S>(v.shape(), {v});
  for (int64_t i = 0; i < v.numel(); ++i)
    out.data()[size_t(i)] = S(1) / std::sqrt(v.data()[size_t(i)] + eps);
  if (out.requires_grad()) {
    auto vi = v.impl().get();
    auto oi = out.impl().get();
    out.impl()->backprop = [vi, oi](TensorImpl<S>& self) {
      vi->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        S y = oi->data[i];
        vi->grad[i] += self.grad[i] * (S(-0.5) * y * y * y);
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (gp::numel(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<S> out = detail::make_result<S>(std::move(shape), {a});
  out.data() = a.data();
  if (out.requires_grad()) {
    auto ai = a.impl().get();
    out.impl()->backprop = [ai](TensorImpl<S>& self) { detail::accumulate(*ai, self.grad); };
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Tensor<S> out = detail::make_result<S>(Shape{1}, {a});
  S acc = 0;
  for (S v : a.data()) acc += v;
  out.data()[0] = acc;
  if (out.requires_grad()) {
    auto ai = a.impl().get();
    out.impl()->backprop = [ai](TensorImpl<S>& self) {
      ai->ensure_grad();
      for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += self.grad[0];
    };
  }
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return mul_scalar(sum(a), S(1) / S(a.numel()));
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = detail::make_result<S>(Shape{m, n}, {a, b});
  const S* A = a.data().data();
  const S* B = b.data().data();
  S* C = out.data().data();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      S av = A[i * k + p];
      if (av == S(0)) continue;
      const S* brow = B + p * n;
      S* crow = C + i * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  if (out.requires_grad()) {
    auto ai = a.impl().get();
    auto bi = b.impl().get();
    bool arg = a.requires_grad(), brg = b.requires_grad();
    out.impl()->backprop = [ai, bi, arg, brg, m, k, n](TensorImpl<S>& self) {
      const S* G = self.grad.data();
      if (arg) {
        ai->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            S acc = 0;
            const S* brow = bi->data.data() + p * n;
            const S* grow = G + i * n;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ai->grad[size_t(i) * k + p] += acc;
          }
      }
      if (brg) {
        bi->ensure_grad();
        for (int p = 0; p < k; ++p)
          for (int j = 0; j < n; ++j) {
            S acc = 0;
            for (int i = 0; i < m; ++i) acc += ai->data[size_t(i) * k + p] * G[i * n + j];
            bi->grad[size_t(p) * n + j] += acc;
          }
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.dim(1) != w.dim(0))
    throw std::invalid_argument("linear: inner dims disagree, input " + shape_str(x.shape()) +
                                " weight " + shape_str(w.shape()));
  if (b.shape().size() != 1 || b.dim(0) != w.dim(1))
    throw std::invalid_argument("linear: bias shape " + shape_str(b.shape()) +
                                " does not match output width " + std::to_string(w.dim(1)));
  Tensor<S> y = matmul(x, w);
  const int n = x.dim(0), g = w.dim(1);
  Tensor<S> out = detail::make_result<S>(Shape{n, g}, {y, b});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < g; ++j) out.data()[size_t(i) * g + j] = y.data()[size_t(i) * g + j] + b.data()[size_t(j)];
  if (out.requires_grad()) {
    auto yi = y.impl().get();
    auto bi = b.impl().get();
    bool brg = b.requires_grad();
    out.impl()->backprop = [yi, bi, brg, n, g](TensorImpl<S>& self) {
      detail::accumulate(*yi, self.grad);
      if (brg) {
        bi->ensure_grad();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < g; ++j) bi->grad[size_t(j)] += self.grad[size_t(i) * g + j];
      }
    };
  }
  return out;
}

// Rows [start, start+count) of a 2-D tensor.
template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, int start, int count) {
  if (x.shape().size() != 2 || start < 0 || count < 1 || start + count > x.dim(0))
    throw std::invalid_argument("slice_rows: bad range [" + std::to_string(start) + "," +
                                std::to_string(start + count) + ") for " + shape_str(x.shape()));
  const int c = x.dim(1);
  Tensor<S> out = detail::make_result<S>(Shape{count, c}, {x});
  std::copy(x.data().begin() + size_t(start) * c, x.data().begin() + size_t(start + count) * c,
            out.data().begin());
  if (out.requires_grad()) {
    auto xi = x.impl().get();
    out.impl()->backprop = [xi, start, count, c](TensorImpl<S>& self) {
      xi->ensure_grad();
      for (int i = 0; i < count; ++i)
        for (int j = 0; j < c; ++j)
          xi->grad[size_t(start + i) * c + j] += self.grad[size_t(i) * c + j];
    };
  }
  return out;
}

template <typename S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor<S> out = detail::make_result<S>(Shape{n, ca + cb}, {a, b});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + size_t(i) * ca, ca, out.data().begin() + size_t(i) * (ca + cb));
    std::copy_n(b.data().begin() + size_t(i) * cb, cb, out.data().begin() + size_t(i) * (ca + cb) + ca);
  }
  if (out.requires_grad()) {
    auto ai = a.impl().get();
    auto bi = b.impl().get();
    bool arg = a.requires_grad(), brg = b.requires_grad();
    out.impl()->backprop = [ai, bi, arg, brg, n, ca, cb](TensorImpl<S>& self) {
      if (arg) ai->ensure_grad();
      if (brg) bi->ensure_grad();
      for (int i = 0; i < n; ++i) {
        if (arg)
          for (int j = 0; j < ca; ++j) ai->grad[size_t(i) * ca + j] += self.grad[size_t(i) * (ca + cb) + j];
        if (brg)
          for (int j = 0; j < cb; ++j) bi->grad[size_t(i) * cb + j] += self.grad[size_t(i) * (ca + cb) + ca + j];
      }
    };
  }
  return out;
}

// Leading sub-block crop of a 4-D weight: keep out-channels [0,c0) and in-channels [0,c1).
template <typename S>
Tensor<S> crop4d(const Tensor<S>& x, int c0, int c1) {
  if (x.shape().size() != 4 || c0 < 1 || c1 < 1 || c0 > x.dim(0) || c1 > x.dim(1))
    throw std::invalid_argument("crop4d: bad crop (" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") for " + shape_str(x.shape()));
  const int O = x.dim(0), I = x.dim(1), kh = x.dim(2), kw = x.dim(3);
  Tensor<S> out = detail::make_result<S>(Shape{c0, c1, kh, kw}, {x});
  const int kk = kh * kw;
  for (int o = 0; o < c0; ++o)
    for (int i = 0; i < c1; ++i)
      std::copy_n(x.data().begin() + (size_t(o) * I + i) * kk, kk,
                  out.data().begin() + (size_t(o) * c1 + i) * kk);
  if (out.requires_grad()) {
    auto xi = x.impl().get();
    out.impl()->backprop = [xi, c0, c1, I, kk](TensorImpl<S>& self) {
      xi->ensure_grad();
      for (int o = 0; o < c0; ++o)
        for (int i = 0; i < c1; ++i)
          for (int k = 0; k < kk; ++k)
            xi->grad[(size_t(o) * I + i) * kk + k] += self.grad[(size_t(o) * c1 + i) * kk + k];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-channel broadcast ops over NCHW
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
void check_nchw_channel(const Tensor<S>& x, const Tensor<S>& v, const char* op) {
  if (x.shape().size() != 4 || v.shape().size() != 1 || v.dim(0) != x.dim(1))
    throw std::invalid_argument(std::string(op) + ": expected NCHW and per-channel vector, got " +
                                shape_str(x.shape()) + " and " + shape_str(v.shape()));
}
}  // namespace detail

template <typename S>
Tensor<S> add_channel(const Tensor<S>& x, const Tensor<S>& v) {
  detail::check_nchw_channel(x, v, "add_channel");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<S> out = detail::make_result<S>(x.shape(), {x, v});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      S b = v.data()[size_t(c)];
      size_t base = (size_t(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) out.data()[base + i] = x.data()[base + i] + b;
    }
  if (out.requires_grad()) {
    auto xi = x.impl().get();
    auto vi = v.impl().get();
    bool xrg = x.requires_grad(), vrg = v.requires_grad();
    out.impl()->backprop = [xi, vi, xrg, vrg, N, C, HW](TensorImpl<S>& self) {
      if (xrg) detail::accumulate(*xi, self.grad);
      if (vrg) {
        vi->ensure_grad();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            size_t base = (size_t(n) * C + c) * HW;
            S acc = 0;
            for (int i = 0; i < HW; ++i) acc += self.grad[base + i];
            vi->grad[size_t(c)] += acc;
          }
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> mul_channel(const Tensor<S>& x, const Tensor<S>& v) {
  detail::check_nchw_channel(x, v, "mul_channel");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<S> out = detail::make_result<S>(x.shape(), {x, v});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      S m = v.data()[size_t(c)];
      size_t base = (size_t(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) out.data()[base + i] = x.data()[base + i] * m;
    }
  if (out.requires_grad()) {
    auto xi = x.impl().get();
    auto vi = v.impl().get();
    bool xrg = x.requires_grad(), vrg = v.requires_grad();
    out.impl()->backprop = [xi, vi, xrg, vrg, N, C, HW](TensorImpl<S>& self) {
      if (xrg) xi->ensure_grad();
      if (vrg) vi->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          size_t base = (size_t(n) * C + c) * HW;
          if (xrg) {
            S m = vi->data[size_t(c)];
            for (int i = 0; i < HW; ++i) xi->grad[base + i] += self.grad[base + i] * m;
          }
          if (vrg) {
            S acc = 0;
            for (int i = 0; i < HW; ++i) acc += self.grad[base + i] * xi->data[base + i];
            vi->grad[size_t(c)] += acc;
          }
        }
    };
  }
  return out;
}

// Mean over N, H, W per channel: NCHW -> [C].
template <typename S>
Tensor<S> channel_mean(const Tensor<S>& x) {
  if (x.shape().size() != 4)
    throw std::invalid_argument("channel_mean: expected NCHW, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const S inv = S(1) / S(int64_t(N) * HW);
  Tensor<S> out = detail::make_result<S>(Shape{C}, {x});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      size_t base = (size_t(n) * C + c) * HW;
      S acc = 0;
      for (int i = 0; i < HW; ++i) acc += x.data()[base + i];
      out.data()[size_t(c)] += acc * inv;
    }
  if (out.requires_grad()) {
    auto xi = x.impl().get();
    out.impl()->backprop = [xi, N, C, HW, inv](TensorImpl<S>& self) {
      xi->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          size_t base = (size_t(n) * C + c) * HW;
          S g = self.grad[size_t(c)] * inv;
          for (int i = 0; i < HW; ++i) xi->grad[base + i] += g;
        }
    };
  }
  return out;
}

// NCHW -> [N, C], mean over spatial positions.
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.shape().size() != 4)
    throw std::invalid_argument("global_avg_pool: expected NCHW, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const S inv = S(1) / S(HW);
  Tensor<S> out = detail::make_result<S>(Shape{N, C}, {x});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      size_t base = (size_t(n) * C + c) * HW;
      S acc = 0;
      for (int i = 0; i < HW; ++i) acc += x.data()[base + i];
      out.data()[size_t(n) * C + c] = acc * inv;
    }
  if (out.requires_grad()) {
    auto xi = x.impl().get();
    out.impl()->backprop = [xi, N, C, HW, inv](TensorImpl<S>& self) {
      xi->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          S g = self.grad[size_t(n) * C + c] * inv;
          size_t base = (size_t(n) * C + c) * HW;
          for (int i = 0; i < HW; ++i) xi->grad[base + i] += g;
        }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride, int padding) {
  if (x.shape().size() != 4 || w.shape().size() != 4)
    throw std::invalid_argument("conv2d: expected 4-D input and weight, got " + shape_str(x.shape()) +
                                " and " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw std::invalid_argument("conv2d: input channels " + std::to_string(x.dim(1)) +
                                " do not match weight in-channels " + std::to_string(w.dim(1)) +
                                " (input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) + ")");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), K = w.dim(2);
  if (w.dim(2) != w.dim(3)) throw std::invalid_argument("conv2d: only square kernels supported");
  const int Ho = (H + 2 * padding - K) / stride + 1;
  const int Wo = (W + 2 * padding - K) / stride + 1;
  if (Ho < 1 || Wo < 1)
    throw std::invalid_argument("conv2d: empty output for input " + shape_str(x.shape()) +
                                " kernel " + std::to_string(K));
  Tensor<S> out = detail::make_result<S>(Shape{N, Cout, Ho, Wo}, {x, w});
  const S* X = x.data().data();
  const S* Wd = w.data().data();
  S* Y = out.data().data();
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int ci = 0; ci < Cin; ++ci)
        for (int kh = 0; kh < K; ++kh)
          for (int kw = 0; kw < K; ++kw) {
            S wv = Wd[((size_t(co) * Cin + ci) * K + kh) * K + kw];
            if (wv == S(0)) continue;
            for (int oh = 0; oh < Ho; ++oh) {
              int ih = oh * stride + kh - padding;
              if (ih < 0 || ih >= H) continue;
              const S* xrow = X + ((size_t(n) * Cin + ci) * H + ih) * W;
              S* yrow = Y + ((size_t(n) * Cout + co) * Ho + oh) * Wo;
              for (int ow = 0; ow < Wo; ++ow) {
                int iw = ow * stride + kw - padding;
                if (iw < 0 || iw >= W) continue;
                yrow[ow] += wv * xrow[iw];
              }
            }
          }
  if (out.requires_grad()) {
    auto xi = x.impl().get();
    auto wi = w.impl().get();
    bool xrg = x.requires_grad(), wrg = w.requires_grad();
    out.impl()->backprop = [xi, wi, xrg, wrg, N, Cin, H, W, Cout, K, Ho, Wo, stride,
                            padding](TensorImpl<S>& self) {
      if (xrg) xi->ensure_grad();
      if (wrg) wi->ensure_grad();
      const S* G = self.grad.data();
      for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co)
          for (int ci = 0; ci < Cin; ++ci)
            for (int kh = 0; kh < K; ++kh)
              for (int kw = 0; kw < K; ++kw) {
                size_t widx = ((size_t(co) * Cin + ci) * K + kh) * K + kw;
                S wv = wi->data[widx];
                S wgrad = 0;
                for (int oh = 0; oh < Ho; ++oh) {
                  int ih = oh * stride + kh - padding;
                  if (ih < 0 || ih >= H) continue;
                  const S* grow = G + ((size_t(n) * Cout + co) * Ho + oh) * Wo;
                  const S* xrow = xi->data.data() + ((size_t(n) * Cin + ci) * H + ih) * W;
                  S* gxrow = xrg ? xi->grad.data() + ((size_t(n) * Cin + ci) * H + ih) * W : nullptr;
                  for (int ow = 0; ow < Wo; ++ow) {
                    int iw = ow * stride + kw - padding;
                    if (iw < 0 || iw >= W) continue;
                    S g = grow[ow];
                    if (xrg) gxrow[iw] += g * wv;
                    if (wrg) wgrad += g * xrow[iw];
                  }
                }
                if (wrg) wi->grad[widx] += wgrad;
              }
    };
  }
  return out;
}

template <typename S>
Tensor<S> depthwise_conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride, int padding) {
  if (x.shape().size() != 4 || w.shape().size() != 4)
    throw std::invalid_argument("depthwise_conv2d: expected 4-D input and weight");
  if (w.dim(1) != 1)
    throw std::invalid_argument("depthwise_conv2d: weight must be Cx1xKxK, got " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(0))
    throw std::invalid_argument("depthwise_conv2d: channel mismatch, input " + shape_str(x.shape()) +
                                " weight " + shape_str(w.shape()));
  if (stride < 1) throw std::invalid_argument("depthwise_conv2d: stride must be >= 1");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int K = w.dim(2);
  const int Ho = (H + 2 * padding - K) / stride + 1;
  const int Wo = (W + 2 * padding - K) / stride + 1;
  if (Ho < 1 || Wo < 1) throw std::invalid_argument("depthwise_conv2d: empty output");
  Tensor<S> out = detail::make_result<S>(Shape{N, C, Ho, Wo}, {x, w});
  const S* X = x.data().data();
  const S* Wd = w.data().data();
  S* Y = out.data().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int kh = 0; kh < K; ++kh)
        for (int kw = 0; kw < K; ++kw) {
          S wv = Wd[(size_t(c) * K + kh) * K + kw];
          for (int oh = 0; oh < Ho; ++oh) {
            int ih = oh * stride + kh - padding;
            if (ih < 0 || ih >= H) continue;
            const S* xrow = X + ((size_t(n) * C + c) * H + ih) * W;
            S* yrow = Y + ((size_t(n) * C + c) * Ho + oh) * Wo;
            for (int ow = 0; ow < Wo; ++ow) {
              int iw = ow * stride + kw - padding;
              if (iw < 0 || iw >= W) continue;
              yrow[ow] += wv * xrow[iw];
            }
          }
        }
  if (out.requires_grad()) {
    auto xi = x.impl().get();
    auto wi = w.impl().get();
    bool xrg = x.requires_grad(), wrg = w.requires_grad();
    out.impl()->backprop = [xi, wi, xrg, wrg, N, C, H, W, K, Ho, Wo, stride,
                            padding](TensorImpl<S>& self) {
      if (xrg) xi->ensure_grad();
      if (wrg) wi->ensure_grad();
      const S* G = self.grad.data();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int kh = 0; kh < K; ++kh)
            for (int kw = 0; kw < K; ++kw) {
              size_t widx = (size_t(c) * K + kh) * K + kw;
              S wv = wi->data[widx];
              S wgrad = 0;
              for (int oh = 0; oh < Ho; ++oh) {
                int ih = oh * stride + kh - padding;
                if (ih < 0 || ih >= H) continue;
                const S* grow = G + ((size_t(n) * C + c) * Ho + oh) * Wo;
                const S* xrow = xi->data.data() + ((size_t(n) * C + c) * H + ih) * W;
                S* gxrow = xrg ? xi->grad.data() + ((size_t(n) * C + c) * H + ih) * W : nullptr;
                for (int ow = 0; ow < Wo; ++ow) {
                  int iw = ow * stride + kw - padding;
                  if (iw < 0 || iw >= W) continue;
                  S g = grow[ow];
                  if (xrg) gxrow[iw] += g * wv;
                  if (wrg) wgrad += g * xrow[iw];
                }
              }
              if (wrg) wi->grad[widx] += wgrad;
            }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2)
    throw std::invalid_argument("softmax_cross_entropy: logits must be NxC, got " + shape_str(logits.shape()));
  const int N = logits.dim(0), C = logits.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(N));
  for (int lab : labels)
    if (lab < 0 || lab >= C)
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(lab) +
                                  " out of range [0," + std::to_string(C) + ")");
  Tensor<S> out = detail::make_result<S>(Shape{1}, {logits});
  // Softmax probabilities are kept for the backward pass.
  auto probs = std::make_shared<std::vector<S>>(size_t(N) * C);
  S loss = 0;
  for (int i = 0; i < N; ++i) {
    const S* row = logits.data().data() + size_t(i) * C;
    S mx = row[0];
    for (int j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    S denom = 0;
    for (int j = 0; j < C; ++j) denom += std::exp(row[j] - mx);
    S lse = mx + std::log(denom);
    for (int j = 0; j < C; ++j) (*probs)[size_t(i) * C + j] = std::exp(row[j] - lse);
    loss += lse - row[labels[size_t(i)]];
  }
  out.data()[0] = loss / S(N);
  if (out.requires_grad()) {
    auto li = logits.impl().get();
    out.impl()->backprop = [li, probs, labels, N, C](TensorImpl<S>& self) {
      li->ensure_grad();
      S g = self.grad[0] / S(N);
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < C; ++j) {
          S p = (*probs)[size_t(i) * C + j];
          li->grad[size_t(i) * C + j] += g * (p - (j == labels[size_t(i)] ? S(1) : S(0)));
        }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and init
// ---------------------------------------------------------------------------

// SGD with momentum and decoupled weight decay (w <- w - lr*wd*w).
template <typename S>
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor<S>> params, S momentum = S(0), S weight_decay = S(0))
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (auto& p : params_) velocity_.emplace_back(p.numel(), S(0));
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(S lr) {
    if (lr < S(0)) throw std::invalid_argument("sgd: negative learning rate");
    for (size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto& v = velocity_[k];
      const bool has_grad = !p.grad().empty();
      for (int64_t i = 0; i < p.numel(); ++i) {
        S g = has_grad ? p.grad()[size_t(i)] : S(0);
        v[size_t(i)] = momentum_ * v[size_t(i)] + g;
        p.data()[size_t(i)] -= lr * v[size_t(i)] + lr * weight_decay_ * p.data()[size_t(i)];
      }
    }
  }

  const std::vector<Tensor<S>>& params() const { return params_; }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<S>> velocity_;
  S momentum_;
  S weight_decay_;
};

using Rng = std::mt19937_64;

template <typename S>
void uniform_init(Tensor<S>& t, S lo, S hi, Rng& rng) {
  std::uniform_real_distribution<double> dist{double(lo), double(hi)};
  for (auto& v : t.data()) v = S(dist(rng));
}

// Uniform +-sqrt(6/(fan_in+fan_out)).
template <typename S>
void glorot_init(Tensor<S>& t, int fan_in, int fan_out, Rng& rng) {
  S bound = S(std::sqrt(6.0 / double(fan_in + fan_out)));
  uniform_init(t, -bound, bound, rng);
}

template <typename S>
bool all_finite(const Tensor<S>& t) {
  for (S v : t.data())
    if (!std::isfinite(double(v))) return false;
  return true;
}

}  // namespace gp
