#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "smarties/common.hpp"

namespace smarties {

// Reverse-mode autodiff on dense row-major tensors. The graph is built
// dynamically: every op returns a fresh node holding its value, the parent
// nodes, and a closure that routes output gradients to the parents.
// Gradients are only tracked while grad_enabled() is true and at least one
// parent requires them.

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled_flag()) { grad_enabled_flag() = false; }
    ~NoGradGuard() { grad_enabled_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
struct TensorNode {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(const TensorNode&)> backward;

    size_t size() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <class T>
class TensorT {
  public:
    using Node = TensorNode<T>;

    TensorT() = default;

    TensorT(std::vector<int> shape, bool requires_grad) {
        n_ = std::make_shared<Node>();
        n_->shape = std::move(shape);
        n_->value.assign(count(n_->shape), T(0));
        n_->requires_grad = requires_grad;
    }

    static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
        return TensorT(std::move(shape), requires_grad);
    }

    static TensorT constant(std::vector<int> shape, T v) {
        TensorT t(std::move(shape), false);
        for (auto& x : t.values()) x = v;
        return t;
    }

    static TensorT from(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
        TensorT t;
        t.n_ = std::make_shared<Node>();
        if (count(shape) != data.size())
            throw std::invalid_argument("tensor data length does not match shape");
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static TensorT scalar(T v) { return from({1}, {v}); }

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[size_t(i)]; }
    int ndim() const { return int(n_->shape.size()); }
    size_t size() const { return n_->value.size(); }

    std::vector<T>& values() { return n_->value; }
    const std::vector<T>& values() const { return n_->value; }
    T* data() { return n_->value.data(); }
    const T* data() const { return n_->value.data(); }

    T item() const {
        if (size() != 1) throw std::invalid_argument("item() on non-scalar tensor");
        return n_->value[0];
    }

    bool requires_grad() const { return n_->requires_grad; }

    std::vector<T>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    const std::vector<T>& grad_view() const { return n_->grad; }

    void zero_grad() {
        n_->grad.assign(n_->value.size(), T(0));
    }

    bool all_finite() const {
        for (T v : n_->value)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    // Reverse pass from a scalar root. Accumulates into the grad buffers of
    // every reachable node that requires gradients; leaf grads persist until
    // zero_grad().
    void backward() const {
        if (size() != 1) throw std::invalid_argument("backward() needs a scalar root");
        if (!n_->requires_grad) return;
        std::vector<Node*> order = topo_order(n_.get());
        for (Node* nd : order) nd->ensure_grad();
        n_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* nd = *it;
            if (nd->backward) nd->backward(*nd);
        }
    }

    std::shared_ptr<Node> node() const { return n_; }

    static size_t count(const std::vector<int>& shape) {
        size_t c = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("negative dimension");
            c *= size_t(d);
        }
        return c;
    }

  private:
    std::shared_ptr<Node> n_;

    static std::vector<Node*> topo_order(Node* root) {
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<Node*, size_t>> stack{{root, 0}};
        seen.insert(root);
        while (!stack.empty()) {
            auto& [nd, next] = stack.back();
            if (next < nd->parents.size()) {
                Node* p = nd->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(nd);
                stack.pop_back();
            }
        }
        return order;
    }
};

namespace detail {

template <class T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <class T>
bool track(const std::vector<NodePtr<T>>& parents) {
    if (!grad_enabled_flag()) return false;
    for (const auto& p : parents)
        if (p->requires_grad) return true;
    return false;
}

template <class T>
TensorT<T> make_op(std::vector<int> shape, std::vector<T> value,
                   std::vector<NodePtr<T>> parents,
                   std::function<void(const TensorNode<T>&)> backward) {
    auto out = TensorT<T>::from(std::move(shape), std::move(value));
    auto nd = out.node();
    if (track<T>(parents)) {
        nd->requires_grad = true;
        nd->parents = std::move(parents);
        nd->backward = std::move(backward);
    }
    return out;
}

inline void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check(a.shape() == b.shape(), "add: shape mismatch");
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<T>(a.shape(), std::move(v), {pa, pb},
                              [pa, pb](const TensorNode<T>& out) {
                                  if (pa->requires_grad)
                                      for (size_t i = 0; i < out.size(); ++i) pa->grad[i] += out.grad[i];
                                  if (pb->requires_grad)
                                      for (size_t i = 0; i < out.size(); ++i) pb->grad[i] += out.grad[i];
                              });
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check(a.shape() == b.shape(), "sub: shape mismatch");
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<T>(a.shape(), std::move(v), {pa, pb},
                              [pa, pb](const TensorNode<T>& out) {
                                  if (pa->requires_grad)
                                      for (size_t i = 0; i < out.size(); ++i) pa->grad[i] += out.grad[i];
                                  if (pb->requires_grad)
                                      for (size_t i = 0; i < out.size(); ++i) pb->grad[i] -= out.grad[i];
                              });
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check(a.shape() == b.shape(), "mul: shape mismatch");
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<T>(a.shape(), std::move(v), {pa, pb},
                              [pa, pb](const TensorNode<T>& out) {
                                  if (pa->requires_grad)
                                      for (size_t i = 0; i < out.size(); ++i)
                                          pa->grad[i] += out.grad[i] * pb->value[i];
                                  if (pb->requires_grad)
                                      for (size_t i = 0; i < out.size(); ++i)
                                          pb->grad[i] += out.grad[i] * pa->value[i];
                              });
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * c;
    auto pa = a.node();
    return detail::make_op<T>(a.shape(), std::move(v), {pa},
                              [pa, c](const TensorNode<T>& out) {
                                  for (size_t i = 0; i < out.size(); ++i) pa->grad[i] += c * out.grad[i];
                              });
}

template <class T>
TensorT<T> gelu(const TensorT<T>& a) {
    const double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) {
        double x = double(a.data()[i]);
        v[i] = T(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    auto pa = a.node();
    return detail::make_op<T>(a.shape(), std::move(v), {pa},
                              [pa, inv_sqrt2, inv_sqrt2pi](const TensorNode<T>& out) {
                                  for (size_t i = 0; i < out.size(); ++i) {
                                      double x = double(pa->value[i]);
                                      double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
                                                 x * inv_sqrt2pi * std::exp(-0.5 * x * x);
                                      pa->grad[i] += out.grad[i] * T(d);
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), "matmul: shape mismatch");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> v(size_t(m) * size_t(n), T(0));
    for (int i = 0; i < m; ++i) {
        const T* ar = a.data() + size_t(i) * size_t(k);
        T* cr = v.data() + size_t(i) * size_t(n);
        for (int l = 0; l < k; ++l) {
            const T al = ar[l];
            const T* br = b.data() + size_t(l) * size_t(n);
            for (int j = 0; j < n; ++j) cr[j] += al * br[j];
        }
    }
    auto pa = a.node(), pb = b.node();
    return detail::make_op<T>({m, n}, std::move(v), {pa, pb},
                              [pa, pb, m, k, n](const TensorNode<T>& out) {
                                  if (pa->requires_grad) {
                                      for (int i = 0; i < m; ++i) {
                                          T* da = pa->grad.data() + size_t(i) * size_t(k);
                                          const T* go = out.grad.data() + size_t(i) * size_t(n);
                                          for (int l = 0; l < k; ++l) {
                                              const T* br = pb->value.data() + size_t(l) * size_t(n);
                                              T acc = 0;
                                              for (int j = 0; j < n; ++j) acc += go[j] * br[j];
                                              da[l] += acc;
                                          }
                                      }
                                  }
                                  if (pb->requires_grad) {
                                      for (int l = 0; l < k; ++l) {
                                          T* db = pb->grad.data() + size_t(l) * size_t(n);
                                          for (int i = 0; i < m; ++i) {
                                              const T al = pa->value[size_t(i) * size_t(k) + size_t(l)];
                                              const T* go = out.grad.data() + size_t(i) * size_t(n);
                                              for (int j = 0; j < n; ++j) db[j] += al * go[j];
                                          }
                                      }
                                  }
                              });
}

template <class T>
TensorT<T> transpose(const TensorT<T>& a) {
    detail::check(a.ndim() == 2, "transpose: need 2-D tensor");
    const int m = a.dim(0), n = a.dim(1);
    std::vector<T> v(a.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) v[size_t(j) * size_t(m) + size_t(i)] = a.data()[size_t(i) * size_t(n) + size_t(j)];
    auto pa = a.node();
    return detail::make_op<T>({n, m}, std::move(v), {pa},
                              [pa, m, n](const TensorNode<T>& out) {
                                  for (int i = 0; i < m; ++i)
                                      for (int j = 0; j < n; ++j)
                                          pa->grad[size_t(i) * size_t(n) + size_t(j)] +=
                                              out.grad[size_t(j) * size_t(m) + size_t(i)];
                              });
}

// y = x W^T with x:[n,in], W:[out,in].
template <class T>
TensorT<T> linear_no_bias(const TensorT<T>& x, const TensorT<T>& w) {
    detail::check(x.ndim() == 2 && w.ndim() == 2 && x.dim(1) == w.dim(1), "linear_no_bias: shape mismatch");
    const int n = x.dim(0), in = x.dim(1), out_d = w.dim(0);
    std::vector<T> v(size_t(n) * size_t(out_d));
    for (int r = 0; r < n; ++r) {
        const T* xr = x.data() + size_t(r) * size_t(in);
        T* yr = v.data() + size_t(r) * size_t(out_d);
        for (int o = 0; o < out_d; ++o) {
            const T* wr = w.data() + size_t(o) * size_t(in);
            T acc = 0;
            for (int i = 0; i < in; ++i) acc += xr[i] * wr[i];
            yr[o] = acc;
        }
    }
    auto px = x.node(), pw = w.node();
    return detail::make_op<T>({n, out_d}, std::move(v), {px, pw},
                              [px, pw, n, in, out_d](const TensorNode<T>& out) {
                                  for (int r = 0; r < n; ++r) {
                                      const T* go = out.grad.data() + size_t(r) * size_t(out_d);
                                      const T* xr = px->value.data() + size_t(r) * size_t(in);
                                      for (int o = 0; o < out_d; ++o) {
                                          const T g = go[o];
                                          if (g == T(0)) continue;
                                          const T* wr = pw->value.data() + size_t(o) * size_t(in);
                                          if (px->requires_grad) {
                                              T* dx = px->grad.data() + size_t(r) * size_t(in);
                                              for (int i = 0; i < in; ++i) dx[i] += g * wr[i];
                                          }
                                          if (pw->requires_grad) {
                                              T* dw = pw->grad.data() + size_t(o) * size_t(in);
                                              for (int i = 0; i < in; ++i) dw[i] += g * xr[i];
                                          }
                                      }
                                  }
                              });
}

// y = x W^T + b with x:[n,in], W:[out,in], b:[out].
template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    detail::check(x.ndim() == 2 && w.ndim() == 2 && b.ndim() == 1, "linear: bad ranks");
    detail::check(x.dim(1) == w.dim(1) && w.dim(0) == b.dim(0), "linear: shape mismatch");
    const int n = x.dim(0), in = x.dim(1), out_d = w.dim(0);
    std::vector<T> v(size_t(n) * size_t(out_d));
    for (int r = 0; r < n; ++r) {
        const T* xr = x.data() + size_t(r) * size_t(in);
        T* yr = v.data() + size_t(r) * size_t(out_d);
        for (int o = 0; o < out_d; ++o) {
            const T* wr = w.data() + size_t(o) * size_t(in);
            T acc = b.data()[o];
            for (int i = 0; i < in; ++i) acc += xr[i] * wr[i];
            yr[o] = acc;
        }
    }
    auto px = x.node(), pw = w.node(), pb = b.node();
    return detail::make_op<T>({n, out_d}, std::move(v), {px, pw, pb},
                              [px, pw, pb, n, in, out_d](const TensorNode<T>& out) {
                                  for (int r = 0; r < n; ++r) {
                                      const T* go = out.grad.data() + size_t(r) * size_t(out_d);
                                      const T* xr = px->value.data() + size_t(r) * size_t(in);
                                      for (int o = 0; o < out_d; ++o) {
                                          const T g = go[o];
                                          if (g == T(0)) continue;
                                          const T* wr = pw->value.data() + size_t(o) * size_t(in);
                                          if (px->requires_grad) {
                                              T* dx = px->grad.data() + size_t(r) * size_t(in);
                                              for (int i = 0; i < in; ++i) dx[i] += g * wr[i];
                                          }
                                          if (pw->requires_grad) {
                                              T* dw = pw->grad.data() + size_t(o) * size_t(in);
                                              for (int i = 0; i < in; ++i) dw[i] += g * xr[i];
                                          }
                                          if (pb->requires_grad) pb->grad[size_t(o)] += g;
                                      }
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Normalization and attention pieces
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-6)) {
    detail::check(x.ndim() == 2 && gamma.ndim() == 1 && beta.ndim() == 1, "layer_norm: bad ranks");
    detail::check(x.dim(1) == gamma.dim(0) && x.dim(1) == beta.dim(0), "layer_norm: shape mismatch");
    const int n = x.dim(0), d = x.dim(1);
    std::vector<T> v(x.size());
    auto xhat = std::make_shared<std::vector<T>>(x.size());
    auto inv_std = std::make_shared<std::vector<T>>(size_t(n));
    for (int r = 0; r < n; ++r) {
        const T* xr = x.data() + size_t(r) * size_t(d);
        T mean = 0;
        for (int i = 0; i < d; ++i) mean += xr[i];
        mean /= T(d);
        T var = 0;
        for (int i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[size_t(r)] = is;
        T* vr = v.data() + size_t(r) * size_t(d);
        T* hr = xhat->data() + size_t(r) * size_t(d);
        for (int i = 0; i < d; ++i) {
            hr[i] = (xr[i] - mean) * is;
            vr[i] = gamma.data()[i] * hr[i] + beta.data()[i];
        }
    }
    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    return detail::make_op<T>(x.shape(), std::move(v), {px, pg, pb},
                              [px, pg, pb, xhat, inv_std, n, d](const TensorNode<T>& out) {
                                  for (int r = 0; r < n; ++r) {
                                      const T* go = out.grad.data() + size_t(r) * size_t(d);
                                      const T* hr = xhat->data() + size_t(r) * size_t(d);
                                      if (pg->requires_grad)
                                          for (int i = 0; i < d; ++i) pg->grad[size_t(i)] += go[i] * hr[i];
                                      if (pb->requires_grad)
                                          for (int i = 0; i < d; ++i) pb->grad[size_t(i)] += go[i];
                                      if (px->requires_grad) {
                                          T sum_gy = 0, sum_gyh = 0;
                                          for (int i = 0; i < d; ++i) {
                                              const T gy = go[i] * pg->value[size_t(i)];
                                              sum_gy += gy;
                                              sum_gyh += gy * hr[i];
                                          }
                                          const T is = (*inv_std)[size_t(r)];
                                          T* dx = px->grad.data() + size_t(r) * size_t(d);
                                          for (int i = 0; i < d; ++i) {
                                              const T gy = go[i] * pg->value[size_t(i)];
                                              dx[i] += is * (gy - sum_gy / T(d) - hr[i] * sum_gyh / T(d));
                                          }
                                      }
                                  }
                              });
}

template <class T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
    detail::check(x.ndim() == 2, "softmax_rows: need 2-D tensor");
    const int n = x.dim(0), d = x.dim(1);
    std::vector<T> v(x.size());
    for (int r = 0; r < n; ++r) {
        const T* xr = x.data() + size_t(r) * size_t(d);
        T* vr = v.data() + size_t(r) * size_t(d);
        T mx = xr[0];
        for (int i = 1; i < d; ++i) mx = std::max(mx, xr[i]);
        T sum = 0;
        for (int i = 0; i < d; ++i) {
            vr[i] = std::exp(xr[i] - mx);
            sum += vr[i];
        }
        for (int i = 0; i < d; ++i) vr[i] /= sum;
    }
    auto px = x.node();
    return detail::make_op<T>(x.shape(), std::move(v), {px},
                              [px, n, d](const TensorNode<T>& out) {
                                  for (int r = 0; r < n; ++r) {
                                      const T* y = out.value.data() + size_t(r) * size_t(d);
                                      const T* go = out.grad.data() + size_t(r) * size_t(d);
                                      T dot = 0;
                                      for (int i = 0; i < d; ++i) dot += go[i] * y[i];
                                      T* dx = px->grad.data() + size_t(r) * size_t(d);
                                      for (int i = 0; i < d; ++i) dx[i] += y[i] * (go[i] - dot);
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Row/column plumbing
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> gather_rows(const TensorT<T>& x, const std::vector<int>& idx) {
    detail::check(x.ndim() == 2, "gather_rows: need 2-D tensor");
    const int d = x.dim(1);
    std::vector<T> v(idx.size() * size_t(d));
    for (size_t j = 0; j < idx.size(); ++j) {
        detail::check(idx[j] >= 0 && idx[j] < x.dim(0), "gather_rows: index out of range");
        std::copy_n(x.data() + size_t(idx[j]) * size_t(d), size_t(d), v.data() + j * size_t(d));
    }
    auto px = x.node();
    auto ids = std::make_shared<std::vector<int>>(idx);
    return detail::make_op<T>({int(idx.size()), d}, std::move(v), {px},
                              [px, ids, d](const TensorNode<T>& out) {
                                  for (size_t j = 0; j < ids->size(); ++j) {
                                      T* dst = px->grad.data() + size_t((*ids)[j]) * size_t(d);
                                      const T* src = out.grad.data() + j * size_t(d);
                                      for (int i = 0; i < d; ++i) dst[i] += src[i];
                                  }
                              });
}

// Rows idx[j] of the output receive row j of x; all other rows are zero.
template <class T>
TensorT<T> scatter_rows(const TensorT<T>& x, const std::vector<int>& idx, int n_rows) {
    detail::check(x.ndim() == 2 && int(idx.size()) == x.dim(0), "scatter_rows: bad index count");
    const int d = x.dim(1);
    std::vector<T> v(size_t(n_rows) * size_t(d), T(0));
    for (size_t j = 0; j < idx.size(); ++j) {
        detail::check(idx[j] >= 0 && idx[j] < n_rows, "scatter_rows: index out of range");
        std::copy_n(x.data() + j * size_t(d), size_t(d), v.data() + size_t(idx[j]) * size_t(d));
    }
    auto px = x.node();
    auto ids = std::make_shared<std::vector<int>>(idx);
    return detail::make_op<T>({n_rows, d}, std::move(v), {px},
                              [px, ids, d](const TensorNode<T>& out) {
                                  for (size_t j = 0; j < ids->size(); ++j) {
                                      T* dst = px->grad.data() + j * size_t(d);
                                      const T* src = out.grad.data() + size_t((*ids)[j]) * size_t(d);
                                      for (int i = 0; i < d; ++i) dst[i] += src[i];
                                  }
                              });
}

// Broadcasts embedding e into rows `rows` of an otherwise zero [n_rows, d] tensor.
template <class T>
TensorT<T> fill_rows(const TensorT<T>& e, int n_rows, const std::vector<int>& rows) {
    detail::check(e.ndim() == 1, "fill_rows: embedding must be 1-D");
    const int d = e.dim(0);
    std::vector<T> v(size_t(n_rows) * size_t(d), T(0));
    for (int r : rows) {
        detail::check(r >= 0 && r < n_rows, "fill_rows: row out of range");
        std::copy_n(e.data(), size_t(d), v.data() + size_t(r) * size_t(d));
    }
    auto pe = e.node();
    auto rws = std::make_shared<std::vector<int>>(rows);
    return detail::make_op<T>({n_rows, d}, std::move(v), {pe},
                              [pe, rws, d](const TensorNode<T>& out) {
                                  for (int r : *rws) {
                                      const T* src = out.grad.data() + size_t(r) * size_t(d);
                                      for (int i = 0; i < d; ++i) pe->grad[size_t(i)] += src[i];
                                  }
                              });
}

template <class T>
TensorT<T> concat_rows(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1), "concat_rows: shape mismatch");
    const int d = a.dim(1), m = a.dim(0), n = b.dim(0);
    std::vector<T> v(a.size() + b.size());
    std::copy_n(a.data(), a.size(), v.data());
    std::copy_n(b.data(), b.size(), v.data() + a.size());
    auto pa = a.node(), pb = b.node();
    return detail::make_op<T>({m + n, d}, std::move(v), {pa, pb},
                              [pa, pb](const TensorNode<T>& out) {
                                  const size_t na = pa->size();
                                  if (pa->requires_grad)
                                      for (size_t i = 0; i < na; ++i) pa->grad[i] += out.grad[i];
                                  if (pb->requires_grad)
                                      for (size_t i = 0; i < pb->size(); ++i) pb->grad[i] += out.grad[na + i];
                              });
}

template <class T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
    detail::check(!parts.empty(), "concat_cols: empty input");
    const int n = parts[0].dim(0);
    int total = 0;
    std::vector<detail::NodePtr<T>> parents;
    for (const auto& p : parts) {
        detail::check(p.ndim() == 2 && p.dim(0) == n, "concat_cols: shape mismatch");
        total += p.dim(1);
        parents.push_back(p.node());
    }
    std::vector<T> v(size_t(n) * size_t(total));
    int off = 0;
    for (const auto& p : parts) {
        const int d = p.dim(1);
        for (int r = 0; r < n; ++r)
            std::copy_n(p.data() + size_t(r) * size_t(d), size_t(d),
                        v.data() + size_t(r) * size_t(total) + size_t(off));
        off += d;
    }
    auto ps = std::make_shared<std::vector<detail::NodePtr<T>>>(parents);
    return detail::make_op<T>({n, total}, std::move(v), parents,
                              [ps, n, total](const TensorNode<T>& out) {
                                  int off2 = 0;
                                  for (const auto& p : *ps) {
                                      const int d = p->shape[1];
                                      if (p->requires_grad) {
                                          for (int r = 0; r < n; ++r) {
                                              const T* src = out.grad.data() + size_t(r) * size_t(total) + size_t(off2);
                                              T* dst = p->grad.data() + size_t(r) * size_t(d);
                                              for (int i = 0; i < d; ++i) dst[i] += src[i];
                                          }
                                      }
                                      off2 += d;
                                  }
                              });
}

template <class T>
TensorT<T> slice_cols(const TensorT<T>& x, int off, int len) {
    detail::check(x.ndim() == 2 && off >= 0 && len > 0 && off + len <= x.dim(1), "slice_cols: bad range");
    const int n = x.dim(0), d = x.dim(1);
    std::vector<T> v(size_t(n) * size_t(len));
    for (int r = 0; r < n; ++r)
        std::copy_n(x.data() + size_t(r) * size_t(d) + size_t(off), size_t(len),
                    v.data() + size_t(r) * size_t(len));
    auto px = x.node();
    return detail::make_op<T>({n, len}, std::move(v), {px},
                              [px, off, len, n, d](const TensorNode<T>& out) {
                                  for (int r = 0; r < n; ++r) {
                                      T* dst = px->grad.data() + size_t(r) * size_t(d) + size_t(off);
                                      const T* src = out.grad.data() + size_t(r) * size_t(len);
                                      for (int i = 0; i < len; ++i) dst[i] += src[i];
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> mean_rows(const TensorT<T>& x) {
    detail::check(x.ndim() == 2, "mean_rows: need 2-D tensor");
    const int n = x.dim(0), d = x.dim(1);
    std::vector<T> v(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        T acc = 0;
        const T* xr = x.data() + size_t(r) * size_t(d);
        for (int i = 0; i < d; ++i) acc += xr[i];
        v[size_t(r)] = acc / T(d);
    }
    auto px = x.node();
    return detail::make_op<T>({n}, std::move(v), {px},
                              [px, n, d](const TensorNode<T>& out) {
                                  for (int r = 0; r < n; ++r) {
                                      const T g = out.grad[size_t(r)] / T(d);
                                      T* dst = px->grad.data() + size_t(r) * size_t(d);
                                      for (int i = 0; i < d; ++i) dst[i] += g;
                                  }
                              });
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
    T acc = 0;
    for (size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    auto px = x.node();
    return detail::make_op<T>({1}, {acc}, {px},
                              [px](const TensorNode<T>& out) {
                                  const T g = out.grad[0];
                                  for (size_t i = 0; i < px->size(); ++i) px->grad[i] += g;
                              });
}

// Mean softmax cross-entropy over rows; labels are class indices.
template <class T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels) {
    detail::check(logits.ndim() == 2 && int(labels.size()) == logits.dim(0),
                  "softmax_cross_entropy: label count mismatch");
    const int n = logits.dim(0), k = logits.dim(1);
    auto probs = std::make_shared<std::vector<T>>(logits.size());
    T loss = 0;
    for (int r = 0; r < n; ++r) {
        detail::check(labels[size_t(r)] >= 0 && labels[size_t(r)] < k,
                      "softmax_cross_entropy: label out of range");
        const T* xr = logits.data() + size_t(r) * size_t(k);
        T mx = xr[0];
        for (int i = 1; i < k; ++i) mx = std::max(mx, xr[i]);
        T sum = 0;
        T* pr = probs->data() + size_t(r) * size_t(k);
        for (int i = 0; i < k; ++i) {
            pr[i] = std::exp(xr[i] - mx);
            sum += pr[i];
        }
        for (int i = 0; i < k; ++i) pr[i] /= sum;
        loss -= std::log(std::max(pr[labels[size_t(r)]], T(1e-300)));
    }
    loss /= T(n);
    auto px = logits.node();
    auto lab = std::make_shared<std::vector<int>>(labels);
    return detail::make_op<T>({1}, {loss}, {px},
                              [px, probs, lab, n, k](const TensorNode<T>& out) {
                                  const T g = out.grad[0] / T(n);
                                  for (int r = 0; r < n; ++r) {
                                      const T* pr = probs->data() + size_t(r) * size_t(k);
                                      T* dx = px->grad.data() + size_t(r) * size_t(k);
                                      for (int i = 0; i < k; ++i)
                                          dx[i] += g * (pr[i] - (i == (*lab)[size_t(r)] ? T(1) : T(0)));
                                  }
                              });
}

// Mean per-element sigmoid binary cross-entropy; targets in {0,1}.
template <class T>
TensorT<T> sigmoid_bce(const TensorT<T>& logits, const TensorT<T>& targets) {
    detail::check(logits.shape() == targets.shape(), "sigmoid_bce: shape mismatch");
    const size_t n = logits.size();
    T loss = 0;
    for (size_t i = 0; i < n; ++i) {
        const T z = logits.data()[i], t = targets.data()[i];
        loss += std::max(z, T(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= T(n);
    auto px = logits.node();
    auto pt = targets.node();
    return detail::make_op<T>({1}, {loss}, {px, pt},
                              [px, pt, n](const TensorNode<T>& out) {
                                  const T g = out.grad[0] / T(n);
                                  for (size_t i = 0; i < n; ++i) {
                                      const T z = px->value[i];
                                      const T s = T(1) / (T(1) + std::exp(-z));
                                      px->grad[i] += g * (s - pt->value[i]);
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Attention (composite)
// ---------------------------------------------------------------------------

// Scaled dot-product attention over all rows of x. The key projection has no
// bias: a per-row constant shift of the keys cancels inside the row softmax,
// so such a bias would be function-inert dead weight.
template <class T>
TensorT<T> multi_head_attention(const TensorT<T>& x, const TensorT<T>& w_q, const TensorT<T>& b_q,
                                const TensorT<T>& w_k, const TensorT<T>& w_v, const TensorT<T>& b_v,
                                const TensorT<T>& w_out, const TensorT<T>& b_out, int heads) {
    const int d = x.dim(1);
    detail::check(heads > 0 && d % heads == 0, "attention: dim not divisible by heads");
    const int hd = d / heads;
    TensorT<T> q = linear(x, w_q, b_q);
    TensorT<T> k = linear_no_bias(x, w_k);
    TensorT<T> v = linear(x, w_v, b_v);
    std::vector<TensorT<T>> ctx;
    ctx.reserve(size_t(heads));
    const T inv_sqrt_hd = T(1) / std::sqrt(T(hd));
    for (int h = 0; h < heads; ++h) {
        TensorT<T> qh = slice_cols(q, h * hd, hd);
        TensorT<T> kh = slice_cols(k, h * hd, hd);
        TensorT<T> vh = slice_cols(v, h * hd, hd);
        TensorT<T> att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_hd));
        ctx.push_back(matmul(att, vh));
    }
    TensorT<T> merged = heads == 1 ? ctx[0] : concat_cols(ctx);
    return linear(merged, w_out, b_out);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

template <class T>
void require_finite(const TensorT<T>& t, const std::string& what) {
    if (!t.all_finite()) throw InvariantError("non-finite values in " + what);
}

// Compares reverse-mode gradients of scalar f against central differences.
// Returns max over parameter elements of |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|).
template <class T>
double grad_check(const std::function<TensorT<T>()>& f, const std::vector<TensorT<T>>& params,
                  double h) {
    for (auto p : params) p.zero_grad();
    TensorT<T> loss = f();
    if (!loss.all_finite()) throw InvariantError("grad_check: non-finite objective");
    loss.backward();
    std::vector<std::vector<T>> g_ad;
    g_ad.reserve(params.size());
    for (auto p : params) g_ad.push_back(p.grad());

    NoGradGuard ng;
    double worst = 0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        TensorT<T> p = params[pi];
        for (size_t i = 0; i < p.size(); ++i) {
            const T orig = p.data()[i];
            p.data()[i] = orig + T(h);
            const double f_plus = double(f().item());
            p.data()[i] = orig - T(h);
            const double f_minus = double(f().item());
            p.data()[i] = orig;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
                throw InvariantError("grad_check: non-finite objective under perturbation");
            const double g_fd = (f_plus - f_minus) / (2.0 * h);
            const double ga = double(g_ad[pi][i]);
            const double err = std::abs(ga - g_fd) / std::max(1e-12, std::abs(ga) + std::abs(g_fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

using Tensor = TensorT<double>;

}  // namespace smarties
