#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "gradnet/tensor.hpp"

// Define-by-run reverse-mode autodiff. The one property everything downstream
// leans on: backward rules emit ordinary graph ops, so the gradient of a loss
// is itself a differentiable node and d(grad)/d(params) — the second-order
// path through the one-step template update — falls out of running grad()
// twice. Backward closures may reference parent vars only, never the node
// they belong to (no shared_ptr cycles); ops that need their own output for
// the derivative (sigmoid, softplus) recompute it from the parent.

namespace gradnet {

struct Node;
using Var = std::shared_ptr<Node>;
using BackwardFn = std::function<std::vector<Var>(const Var&)>;

struct Node {
  Tensor val;
  bool requires_grad = false;
  std::int64_t id = 0;  // creation order; parents always have smaller ids
  std::vector<Var> parents;
  BackwardFn backward;
};

namespace detail {
inline std::int64_t next_node_id() {
  static std::atomic<std::int64_t> counter{0};
  return ++counter;
}
}  // namespace detail

inline Var leaf(Tensor value, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  n->val = std::move(value);
  n->requires_grad = requires_grad;
  n->id = detail::next_node_id();
  return n;
}

inline Var constant(Tensor value) { return leaf(std::move(value), false); }

inline Var detach(const Var& a) { return leaf(a->val, false); }

namespace detail {

/// Nodes fed only by non-grad inputs keep no parents/backward and behave as
/// constants, so no-grad forwards (tracking) stay cheap to retain.
inline Var make_node(Tensor value, std::vector<Var> parents, BackwardFn bw) {
  auto n = std::make_shared<Node>();
  n->val = std::move(value);
  n->id = next_node_id();
  bool rg = false;
  for (const auto& p : parents) rg = rg || (p && p->requires_grad);
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward = std::move(bw);
  }
  return n;
}

inline void check_same_shape(const char* op, const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val))
    throw ShapeError(cat(op, ": shape mismatch ", a->val.shape_str(), " vs ",
                         b->val.shape_str()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape("add", a, b);
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
  return detail::make_node(std::move(out), {a, b}, [](const Var& g) {
    return std::vector<Var>{g, g};
  });
}

inline Var neg(const Var& a) {
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = -out[i];
  return detail::make_node(std::move(out), {a}, [](const Var& g) {
    return std::vector<Var>{neg(g)};
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape("sub", a, b);
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
  return detail::make_node(std::move(out), {a, b}, [](const Var& g) {
    return std::vector<Var>{g, neg(g)};
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape("mul", a, b);
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
  return detail::make_node(std::move(out), {a, b}, [a, b](const Var& g) {
    Var ga = a->requires_grad ? mul(g, b) : nullptr;
    Var gb = b->requires_grad ? mul(g, a) : nullptr;
    return std::vector<Var>{ga, gb};
  });
}

/// k*a + c, elementwise with scalar coefficients.
inline Var affine(const Var& a, double k, double c) {
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = k * out[i] + c;
  return detail::make_node(std::move(out), {a}, [k](const Var& g) {
    return std::vector<Var>{affine(g, k, 0.0)};
  });
}

inline Var scale(const Var& a, double k) { return affine(a, k, 0.0); }

inline Var relu(const Var& a) {
  Tensor out = a->val;
  Tensor mask = Tensor::zeros_like(out);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (out[i] > 0)
      mask[i] = 1.0;
    else
      out[i] = 0.0;
  }
  return detail::make_node(std::move(out), {a},
                           [mask = std::move(mask)](const Var& g) {
                             return std::vector<Var>{mul(g, constant(mask))};
                           });
}

inline Var clamp(const Var& a, double lo, double hi) {
  Tensor out = a->val;
  Tensor mask = Tensor::zeros_like(out);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (out[i] < lo)
      out[i] = lo;
    else if (out[i] > hi)
      out[i] = hi;
    else
      mask[i] = 1.0;
  }
  return detail::make_node(std::move(out), {a},
                           [mask = std::move(mask)](const Var& g) {
                             return std::vector<Var>{mul(g, constant(mask))};
                           });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double x = out[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return detail::make_node(std::move(out), {a}, [a](const Var& g) {
    Var s = sigmoid(a);  // recomputed; closures never capture their own node
    return std::vector<Var>{mul(g, mul(s, affine(s, -1.0, 1.0)))};
  });
}

/// log(1 + e^x), numerically stable in both tails.
inline Var softplus(const Var& a) {
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double x = out[i];
    out[i] = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
  return detail::make_node(std::move(out), {a}, [a](const Var& g) {
    return std::vector<Var>{mul(g, sigmoid(a))};
  });
}

// ---------------------------------------------------------------------------
// reductions / shape ops

inline Var broadcast_full(const Var& s, std::vector<int> dims);

inline Var sum_all(const Var& a) {
  Tensor out = Tensor::scalar(a->val.sum());
  std::vector<int> dims = a->val.dims();
  return detail::make_node(std::move(out), {a},
                           [dims = std::move(dims)](const Var& g) {
                             return std::vector<Var>{broadcast_full(g, dims)};
                           });
}

inline Var broadcast_full(const Var& s, std::vector<int> dims) {
  if (s->val.numel() != 1) throw ShapeError("broadcast_full: source must be scalar");
  Tensor out(dims, s->val[0]);
  return detail::make_node(std::move(out), {s}, [](const Var& g) {
    return std::vector<Var>{sum_all(g)};
  });
}

inline Var reshape(const Var& a, std::vector<int> dims) {
  Tensor out = a->val.reshaped(dims);
  std::vector<int> back = a->val.dims();
  return detail::make_node(std::move(out), {a},
                           [back = std::move(back)](const Var& g) {
                             return std::vector<Var>{reshape(g, back)};
                           });
}

inline Var crop2d(const Var& a, int pad);

/// Zero-pad the two trailing spatial dims of a CxHxW tensor.
inline Var pad2d(const Var& a, int pad) {
  const Tensor& x = a->val;
  if (x.ndim() != 3) throw ShapeError("pad2d: expects CxHxW");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out({C, H + 2 * pad, W + 2 * pad});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) out(c, y + pad, xx + pad) = x(c, y, xx);
  return detail::make_node(std::move(out), {a}, [pad](const Var& g) {
    return std::vector<Var>{crop2d(g, pad)};
  });
}

inline Var crop2d(const Var& a, int pad) {
  const Tensor& x = a->val;
  if (x.ndim() != 3) throw ShapeError("crop2d: expects CxHxW");
  const int C = x.dim(0), H = x.dim(1) - 2 * pad, W = x.dim(2) - 2 * pad;
  if (H <= 0 || W <= 0) throw ShapeError("crop2d: crop exceeds extent");
  Tensor out({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) out(c, y, xx) = x(c, y + pad, xx + pad);
  return detail::make_node(std::move(out), {a}, [pad](const Var& g) {
    return std::vector<Var>{pad2d(g, pad)};
  });
}

// ---------------------------------------------------------------------------
// convolution family. Valid padding, floor semantics for strided remainders.
// The triple {conv2d, conv_transpose2d, conv2d_wgrad} is closed under
// differentiation, which is what makes higher-order grads work.

namespace detail {

inline void conv_shape_check(const char* op, const Tensor& x, const Tensor& w,
                             int stride) {
  if (x.ndim() != 3 || w.ndim() != 4)
    throw ShapeError(cat(op, ": expects CxHxW input and OxCxKhxKw weights, got ",
                         x.shape_str(), " and ", w.shape_str()));
  if (x.dim(0) != w.dim(1))
    throw ShapeError(cat(op, ": channel mismatch, input ", x.shape_str(),
                         " vs weights ", w.shape_str()));
  if (w.dim(2) > x.dim(1) || w.dim(3) > x.dim(2))
    throw ShapeError(cat(op, ": kernel ", w.shape_str(), " larger than input ",
                         x.shape_str()));
  if (stride < 1) throw ShapeError(cat(op, ": stride must be >= 1"));
}

inline Tensor conv2d_val(const Tensor& x, const Tensor& w, int stride) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int Ho = (H - kh) / stride + 1, Wo = (W - kw) / stride + 1;
  Tensor out({O, Ho, Wo});
  for (int o = 0; o < O; ++o)
    for (int c = 0; c < C; ++c) {
      const double* wbase = w.data() + ((static_cast<std::size_t>(o) * C + c) * kh) * kw;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = 0;
          const int iy0 = oy * stride, ix0 = ox * stride;
          for (int ky = 0; ky < kh; ++ky) {
            const double* xrow = x.data() +
                (static_cast<std::size_t>(c) * H + (iy0 + ky)) * W + ix0;
            const double* wrow = wbase + static_cast<std::size_t>(ky) * kw;
            for (int kx = 0; kx < kw; ++kx) acc += wrow[kx] * xrow[kx];
          }
          out(o, oy, ox) += acc;
        }
    }
  return out;
}

inline Tensor conv_transpose2d_val(const Tensor& t, const Tensor& w, int stride,
                                   int Hout, int Wout) {
  const int O = t.dim(0), Ho = t.dim(1), Wo = t.dim(2);
  const int C = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  Tensor out({C, Hout, Wout});
  for (int o = 0; o < O; ++o)
    for (int c = 0; c < C; ++c) {
      const double* wbase = w.data() + ((static_cast<std::size_t>(o) * C + c) * kh) * kw;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const double tv = t(o, oy, ox);
          if (tv == 0.0) continue;
          const int iy0 = oy * stride, ix0 = ox * stride;
          for (int ky = 0; ky < kh; ++ky) {
            double* orow = out.data() +
                (static_cast<std::size_t>(c) * Hout + (iy0 + ky)) * Wout + ix0;
            const double* wrow = wbase + static_cast<std::size_t>(ky) * kw;
            for (int kx = 0; kx < kw; ++kx) orow[kx] += tv * wrow[kx];
          }
        }
    }
  return out;
}

inline Tensor conv2d_wgrad_val(const Tensor& x, const Tensor& t, int stride,
                               int kh, int kw) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = t.dim(0), Ho = t.dim(1), Wo = t.dim(2);
  Tensor out({O, C, kh, kw});
  for (int o = 0; o < O; ++o)
    for (int c = 0; c < C; ++c) {
      double* wbase = out.data() + ((static_cast<std::size_t>(o) * C + c) * kh) * kw;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const double tv = t(o, oy, ox);
          if (tv == 0.0) continue;
          const int iy0 = oy * stride, ix0 = ox * stride;
          for (int ky = 0; ky < kh; ++ky) {
            const double* xrow = x.data() +
                (static_cast<std::size_t>(c) * H + (iy0 + ky)) * W + ix0;
            double* wrow = wbase + static_cast<std::size_t>(ky) * kw;
            for (int kx = 0; kx < kw; ++kx) wrow[kx] += tv * xrow[kx];
          }
        }
    }
  return out;
}

}  // namespace detail

inline Var conv_transpose2d(const Var& t, const Var& w, int stride, int Hout, int Wout);
inline Var conv2d_wgrad(const Var& x, const Var& t, int stride, int kh, int kw);

/// Valid cross-correlation of OxCxKhxKw weights over a CxHxW input.
inline Var conv2d(const Var& x, const Var& w, int stride) {
  detail::conv_shape_check("conv2d", x->val, w->val, stride);
  Tensor out = detail::conv2d_val(x->val, w->val, stride);
  const int H = x->val.dim(1), W = x->val.dim(2);
  const int kh = w->val.dim(2), kw = w->val.dim(3);
  return detail::make_node(
      std::move(out), {x, w}, [x, w, stride, H, W, kh, kw](const Var& g) {
        Var gx = x->requires_grad ? conv_transpose2d(g, w, stride, H, W) : nullptr;
        Var gw = w->requires_grad ? conv2d_wgrad(x, g, stride, kh, kw) : nullptr;
        return std::vector<Var>{gx, gw};
      });
}

/// Adjoint of conv2d in its input: scatters an OxHoxWo map back to CxHoutxWout.
inline Var conv_transpose2d(const Var& t, const Var& w, int stride, int Hout, int Wout) {
  if (t->val.ndim() != 3 || w->val.ndim() != 4 || t->val.dim(0) != w->val.dim(0))
    throw ShapeError(detail::cat("conv_transpose2d: bad shapes ", t->val.shape_str(),
                                 " and ", w->val.shape_str()));
  const int kh = w->val.dim(2), kw = w->val.dim(3);
  if ((t->val.dim(1) - 1) * stride + kh > Hout || (t->val.dim(2) - 1) * stride + kw > Wout)
    throw ShapeError("conv_transpose2d: output extent too small");
  Tensor out = detail::conv_transpose2d_val(t->val, w->val, stride, Hout, Wout);
  return detail::make_node(
      std::move(out), {t, w}, [t, w, stride, kh, kw](const Var& g) {
        Var gt = t->requires_grad ? conv2d(g, w, stride) : nullptr;
        Var gw = w->requires_grad ? conv2d_wgrad(g, t, stride, kh, kw) : nullptr;
        return std::vector<Var>{gt, gw};
      });
}

/// Adjoint of conv2d in its weights.
inline Var conv2d_wgrad(const Var& x, const Var& t, int stride, int kh, int kw) {
  if (x->val.ndim() != 3 || t->val.ndim() != 3)
    throw ShapeError("conv2d_wgrad: expects CxHxW and OxHoxWo");
  Tensor out = detail::conv2d_wgrad_val(x->val, t->val, stride, kh, kw);
  const int H = x->val.dim(1), W = x->val.dim(2);
  return detail::make_node(
      std::move(out), {x, t}, [x, t, stride, H, W](const Var& g) {
        Var gx = x->requires_grad ? conv_transpose2d(t, g, stride, H, W) : nullptr;
        Var gt = t->requires_grad ? conv2d(x, g, stride) : nullptr;
        return std::vector<Var>{gx, gt};
      });
}

inline Var channel_broadcast(const Var& b, int H, int W);

inline Var channel_sum(const Var& y) {
  if (y->val.ndim() != 3) throw ShapeError("channel_sum: expects CxHxW");
  const int C = y->val.dim(0), H = y->val.dim(1), W = y->val.dim(2);
  Tensor out({C});
  for (int c = 0; c < C; ++c) {
    double s = 0;
    for (int yy = 0; yy < H; ++yy)
      for (int xx = 0; xx < W; ++xx) s += y->val(c, yy, xx);
    out[static_cast<std::size_t>(c)] = s;
  }
  return detail::make_node(std::move(out), {y}, [H, W](const Var& g) {
    return std::vector<Var>{channel_broadcast(g, H, W)};
  });
}

inline Var channel_broadcast(const Var& b, int H, int W) {
  if (b->val.ndim() != 1) throw ShapeError("channel_broadcast: expects C");
  const int C = b->val.dim(0);
  Tensor out({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int yy = 0; yy < H; ++yy)
      for (int xx = 0; xx < W; ++xx) out(c, yy, xx) = b->val[static_cast<std::size_t>(c)];
  return detail::make_node(std::move(out), {b}, [](const Var& g) {
    return std::vector<Var>{channel_sum(g)};
  });
}

inline Var bias_add(const Var& y, const Var& b) {
  if (y->val.ndim() != 3 || b->val.ndim() != 1 || y->val.dim(0) != b->val.dim(0))
    throw ShapeError(detail::cat("bias_add: ", y->val.shape_str(), " vs ",
                                 b->val.shape_str()));
  return add(y, channel_broadcast(b, y->val.dim(1), y->val.dim(2)));
}

// ---------------------------------------------------------------------------
// max pooling via a captured selection; the scatter/gather pair keeps the
// (piecewise linear) op differentiable to any order.

inline Var select_gather(const Var& a, std::shared_ptr<const std::vector<std::size_t>> idx,
                         std::vector<int> out_dims);

inline Var select_scatter(const Var& a, std::shared_ptr<const std::vector<std::size_t>> idx,
                          std::vector<int> out_dims) {
  Tensor out(out_dims);
  for (std::size_t i = 0; i < idx->size(); ++i) out[(*idx)[i]] += a->val[i];
  std::vector<int> in_dims = a->val.dims();
  return detail::make_node(std::move(out), {a},
                           [idx, in_dims = std::move(in_dims)](const Var& g) {
                             return std::vector<Var>{select_gather(g, idx, in_dims)};
                           });
}

inline Var select_gather(const Var& a, std::shared_ptr<const std::vector<std::size_t>> idx,
                         std::vector<int> out_dims) {
  Tensor out(out_dims);
  for (std::size_t i = 0; i < idx->size(); ++i) out[i] = a->val[(*idx)[i]];
  std::vector<int> in_dims = a->val.dims();
  return detail::make_node(std::move(out), {a},
                           [idx, in_dims = std::move(in_dims)](const Var& g) {
                             return std::vector<Var>{select_scatter(g, idx, in_dims)};
                           });
}

inline Var maxpool2d(const Var& a, int k, int stride) {
  const Tensor& x = a->val;
  if (x.ndim() != 3) throw ShapeError("maxpool2d: expects CxHxW");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (k > H || k > W) throw ShapeError("maxpool2d: window larger than input");
  const int Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->resize(static_cast<std::size_t>(C) * Ho * Wo);
  Tensor out({C, Ho, Wo});
  std::size_t oi = 0;
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox, ++oi) {
        double best = -HUGE_VAL;
        std::size_t best_at = 0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            std::size_t at = (static_cast<std::size_t>(c) * H + (oy * stride + ky)) * W +
                             (ox * stride + kx);
            if (x[at] > best) {  // first max wins; deterministic
              best = x[at];
              best_at = at;
            }
          }
        out[oi] = best;
        (*idx)[oi] = best_at;
      }
  std::vector<int> in_dims = x.dims();
  return detail::make_node(std::move(out), {a},
                           [idx, in_dims = std::move(in_dims)](const Var& g) {
                             return std::vector<Var>{select_scatter(g, idx, in_dims)};
                           });
}

// ---------------------------------------------------------------------------
// backward engine

/// d(root)/d(wrt[i]) for a scalar root. With create_graph the results remain
/// differentiable (the second application gives second-order terms); without
/// it they are detached constants. Leaves unreachable from root get zeros.
inline std::vector<Var> grad(const Var& root, const std::vector<Var>& wrt,
                             bool create_graph = false) {
  if (root->val.numel() != 1)
    throw ShapeError("grad: root must be scalar");

  std::vector<Node*> order;
  if (root->requires_grad) {
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (const auto& p : n->parents)
        if (p && p->requires_grad && seen.insert(p.get()).second)
          stack.push_back(p.get());
    }
    // Children always have larger ids than parents, so descending creation
    // order is a topological order.
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->id > b->id; });
  }

  std::unordered_map<Node*, Var> gmap;
  gmap[root.get()] = constant(Tensor::scalar(1.0));
  for (Node* n : order) {
    auto it = gmap.find(n);
    if (it == gmap.end() || !n->backward) continue;
    std::vector<Var> pgs = n->backward(it->second);
    if (pgs.size() != n->parents.size())
      throw Error("grad: backward arity mismatch");
    for (std::size_t i = 0; i < pgs.size(); ++i) {
      const Var& p = n->parents[i];
      if (!p || !p->requires_grad || !pgs[i]) continue;
      auto pit = gmap.find(p.get());
      if (pit == gmap.end())
        gmap.emplace(p.get(), pgs[i]);
      else
        pit->second = add(pit->second, pgs[i]);
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = gmap.find(w.get());
    Var g = (it != gmap.end()) ? it->second : constant(Tensor::zeros_like(w->val));
    out.push_back(create_graph ? g : detach(g));
  }
  return out;
}

}  // namespace gradnet
