#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tiltlab/rng.hpp"
#include "tiltlab/tensor.hpp"

// Reverse-mode automatic differentiation over dense tensors. The op catalog
// is exactly what a small masked-LM encoder needs: matmul, broadcast add,
// embedding lookup, layer norm, gelu, softmax, dropout, cross entropy, plus
// structural reshapes for attention heads.
//
// Graphs are built by value-semantics Var handles; a node keeps its parents
// alive, so a forward value with requires_grad=false retains nothing.
// Every reduction (matmul inner products, layer norm stats, softmax sums,
// cross entropy, gradient pullbacks over broadcast dims) accumulates one
// precision level above the working type: double for float graphs, long
// double for double and long double graphs. Long double graphs exist so the
// finite-difference oracle can evaluate the function with a noise floor well
// below the 1e-6 relative tolerance asked of 64-bit gradients.

namespace tiltlab::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::string name;  // non-empty only for named parameter leaves
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor<T> value, bool requires_grad, std::string name = "") {
    Var v;
    v.node_ = std::make_shared<Node<T>>();
    v.node_->value = std::move(value);
    v.node_->requires_grad = requires_grad;
    v.node_->name = std::move(name);
    return v;
  }

  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value() const { return node_->value; }
  const std::vector<std::size_t>& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  NodePtr<T> node() const { return node_; }
  bool defined() const { return node_ != nullptr; }

  static Var from_node(NodePtr<T> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  NodePtr<T> node_;
};

template <typename T>
using Gradients = std::map<std::string, Tensor<T>>;

// ---------------------------------------------------------------------------
// internals
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
NodePtr<T> make_op(Tensor<T> value, std::vector<NodePtr<T>> parents,
                   std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

template <typename T>
void ensure_grad(Node<T>& n) {
  if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.shape());
}

// Accumulator type: one precision level above the working type.
template <typename T>
using acc_t = std::conditional_t<std::is_same_v<T, float>, double, long double>;

// All three kernels accumulate inner products in acc_t<T>, so each output
// element suffers one rounding instead of K of them. This is what keeps
// 32-bit gradients of analytically-zero parameters (e.g. the key bias, which
// only shifts attention scores uniformly) down at representation noise.

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void mm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k, bool acc) {
  using A = acc_t<T>;
  std::vector<A> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    std::fill(row.begin(), row.end(), A{});
    for (std::size_t p = 0; p < k; ++p) {
      A av = static_cast<A>(arow[p]);
      if (av == A{}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * static_cast<A>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) {
      crow[j] = static_cast<T>(acc ? static_cast<A>(crow[j]) + row[j] : row[j]);
    }
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k, bool acc) {
  using A = acc_t<T>;
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      A s{};
      for (std::size_t p = 0; p < k; ++p) {
        s += static_cast<A>(arow[p]) * static_cast<A>(brow[p]);
      }
      crow[j] = static_cast<T>(acc ? static_cast<A>(crow[j]) + s : s);
    }
  }
}

// C[P,Q] (+)= X[M,P]^T * Y[M,Q]
template <typename T>
void mm_tn(const T* x, const T* y, T* c, std::size_t m, std::size_t p, std::size_t q, bool acc) {
  using A = acc_t<T>;
  std::vector<A> buf(p * q, A{});
  for (std::size_t i = 0; i < m; ++i) {
    const T* xrow = x + i * p;
    const T* yrow = y + i * q;
    for (std::size_t a = 0; a < p; ++a) {
      A xv = static_cast<A>(xrow[a]);
      if (xv == A{}) continue;
      A* brow = buf.data() + a * q;
      for (std::size_t b = 0; b < q; ++b) brow[b] += xv * static_cast<A>(yrow[b]);
    }
  }
  for (std::size_t i = 0; i < p * q; ++i) {
    c[i] = static_cast<T>(acc ? static_cast<A>(c[i]) + buf[i] : buf[i]);
  }
}

inline std::vector<std::size_t> broadcast_shape(const std::vector<std::size_t>& a,
                                                const std::vector<std::size_t>& b,
                                                const char* op) {
  std::size_t r = std::max(a.size(), b.size());
  std::vector<std::size_t> out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                  TensorF::shape_str(a) + " and " + TensorF::shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Per-out-dimension element strides for an operand, 0 on broadcast dims.
inline std::vector<std::size_t> broadcast_strides(const std::vector<std::size_t>& shape,
                                                  const std::vector<std::size_t>& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t lead = out.size() - shape.size();
  std::size_t s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[lead + i] = (shape[i] == 1) ? 0 : s;
    s *= shape[i];
  }
  return strides;
}

// Applies fn(out_index, a_offset, b_offset) over every element of
// `out_shape`, both operand offsets advanced odometer-style.
template <typename Fn>
void for_each_broadcast2(const std::vector<std::size_t>& out_shape,
                         const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                         Fn&& fn) {
  std::size_t total = 1;
  for (std::size_t e : out_shape) total *= e;
  if (total == 0) return;
  std::size_t r = out_shape.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t offa = 0, offb = 0;
  for (std::size_t lin = 0;; ++lin) {
    fn(lin, offa, offb);
    if (lin + 1 == total) break;
    for (std::size_t d = r; d-- > 0;) {
      idx[d]++;
      offa += sa[d];
      offb += sb[d];
      if (idx[d] < out_shape[d]) break;
      offa -= sa[d] * out_shape[d];
      offb -= sb[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// op catalog
// ---------------------------------------------------------------------------

// A [..., M, K] times B, where B is either a shared 2-D weight or batched with
// the same leading dims as A. transpose_b multiplies by B^T (B given as
// [..., N, K]).
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  auto fail = [&] {
    throw std::invalid_argument("matmul: incompatible shapes " + TensorF::shape_str(as) +
                                " and " + TensorF::shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) fail();
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as[as.size() - 1];
  const std::size_t bk = transpose_b ? bs[bs.size() - 1] : bs[bs.size() - 2];
  const std::size_t n = transpose_b ? bs[bs.size() - 2] : bs[bs.size() - 1];
  if (bk != k) fail();
  const bool shared_b = bs.size() == 2;
  if (!shared_b) {
    if (bs.size() != as.size()) fail();
    for (std::size_t i = 0; i + 2 < as.size(); ++i)
      if (as[i] != bs[i]) fail();
  }
  std::size_t groups = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) groups *= as[i];

  std::vector<std::size_t> out_shape(as);
  out_shape.back() = n;
  Tensor<T> out(out_shape);

  const T* ap = a.value().data();
  const T* bp = b.value().data();
  T* cp = out.data();
  for (std::size_t g = 0; g < groups; ++g) {
    const T* bg = shared_b ? bp : bp + g * n * k;
    if (transpose_b) {
      detail::mm_nt(ap + g * m * k, bg, cp + g * m * n, m, n, k, false);
    } else {
      detail::mm_nn(ap + g * m * k, bg, cp + g * m * n, m, n, k, false);
    }
  }

  auto an = a.node(), bn = b.node();
  auto node = detail::make_op<T>(
      std::move(out), {an, bn},
      [an, bn, m, n, k, groups, shared_b, transpose_b](Node<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
          detail::ensure_grad(*an);
          T* da = an->grad.data();
          const T* bp2 = bn->value.data();
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const T* bg = shared_b ? bp2 : bp2 + gi * n * k;
            if (transpose_b) {
              detail::mm_nn(g + gi * m * n, bg, da + gi * m * k, m, k, n, true);
            } else {
              detail::mm_nt(g + gi * m * n, bg, da + gi * m * k, m, k, n, true);
            }
          }
        }
        if (bn->requires_grad) {
          detail::ensure_grad(*bn);
          T* db = bn->grad.data();
          const T* ap2 = an->value.data();
          for (std::size_t gi = 0; gi < groups; ++gi) {
            T* dbg = shared_b ? db : db + gi * n * k;
            if (transpose_b) {
              detail::mm_tn(g + gi * m * n, ap2 + gi * m * k, dbg, m, n, k, true);
            } else {
              detail::mm_tn(ap2 + gi * m * k, g + gi * m * n, dbg, m, k, n, true);
            }
          }
        }
      });
  return Var<T>::from_node(node);
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto out_shape = detail::broadcast_shape(a.shape(), b.shape(), "add");
  const auto sa = detail::broadcast_strides(a.shape(), out_shape);
  const auto sb = detail::broadcast_strides(b.shape(), out_shape);
  Tensor<T> out(out_shape);
  const T* ap = a.value().data();
  const T* bp = b.value().data();
  T* op = out.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) op[i] = ap[i] + bp[i];
  } else {
    detail::for_each_broadcast2(out_shape, sa, sb,
                                [&](std::size_t lin, std::size_t oa, std::size_t ob) {
                                  op[lin] = ap[oa] + bp[ob];
                                });
  }
  auto an = a.node(), bn = b.node();
  auto node = detail::make_op<T>(std::move(out), {an, bn}, [an, bn, sa, sb](Node<T>& self) {
    const T* g = self.grad.data();
    auto pull = [&](Node<T>& tgt, const std::vector<std::size_t>& st) {
      detail::ensure_grad(tgt);
      T* dst = tgt.grad.data();
      if (tgt.value.shape() == self.value.shape()) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += g[i];
      } else {
        // reduction over broadcast dims: sum wide, round once
        using A = detail::acc_t<T>;
        std::vector<A> acc(tgt.value.size(), A{});
        detail::for_each_broadcast2(self.value.shape(), st, st,
                                    [&](std::size_t lin, std::size_t off, std::size_t) {
                                      acc[off] += static_cast<A>(g[lin]);
                                    });
        for (std::size_t i = 0; i < acc.size(); ++i) {
          dst[i] = static_cast<T>(static_cast<A>(dst[i]) + acc[i]);
        }
      }
    };
    if (an->requires_grad) pull(*an, sa);
    if (bn->requires_grad) pull(*bn, sb);
  });
  return Var<T>::from_node(node);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto out_shape = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  const auto sa = detail::broadcast_strides(a.shape(), out_shape);
  const auto sb = detail::broadcast_strides(b.shape(), out_shape);
  Tensor<T> out(out_shape);
  const T* ap = a.value().data();
  const T* bp = b.value().data();
  T* op = out.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) op[i] = ap[i] * bp[i];
  } else {
    detail::for_each_broadcast2(out_shape, sa, sb,
                                [&](std::size_t lin, std::size_t oa, std::size_t ob) {
                                  op[lin] = ap[oa] * bp[ob];
                                });
  }
  auto an = a.node(), bn = b.node();
  auto node = detail::make_op<T>(std::move(out), {an, bn}, [an, bn, sa, sb](Node<T>& self) {
    const T* g = self.grad.data();
    const T* av = an->value.data();
    const T* bv = bn->value.data();
    auto pull = [&](Node<T>& tgt, const T* other, const std::vector<std::size_t>& st,
                    const std::vector<std::size_t>& so) {
      detail::ensure_grad(tgt);
      T* dst = tgt.grad.data();
      using A = detail::acc_t<T>;
      std::vector<A> acc(tgt.value.size(), A{});
      detail::for_each_broadcast2(self.value.shape(), st, so,
                                  [&](std::size_t lin, std::size_t ot, std::size_t oo) {
                                    acc[ot] += static_cast<A>(g[lin]) * static_cast<A>(other[oo]);
                                  });
      for (std::size_t i = 0; i < acc.size(); ++i) {
        dst[i] = static_cast<T>(static_cast<A>(dst[i]) + acc[i]);
      }
    };
    if (an->requires_grad) pull(*an, bv, sa, sb);
    if (bn->requires_grad) pull(*bn, av, sb, sa);
  });
  return Var<T>::from_node(node);
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out(a.shape());
  const T* ap = a.value().data();
  T* op = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) op[i] = ap[i] * c;
  auto an = a.node();
  auto node = detail::make_op<T>(std::move(out), {an}, [an, c](Node<T>& self) {
    detail::ensure_grad(*an);
    T* da = an->grad.data();
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += g[i] * c;
  });
  return Var<T>::from_node(node);
}

// out[..., :] = table[ids[...], :]
template <typename T>
Var<T> embedding_lookup(const Var<T>& table, const Tensor<TokenId>& ids) {
  const auto& ts = table.shape();
  if (ts.size() != 2) {
    throw std::invalid_argument("embedding_lookup: table must be 2-D, got " +
                                TensorF::shape_str(ts));
  }
  const std::size_t v = ts[0], d = ts[1];
  std::vector<std::size_t> out_shape = ids.shape();
  out_shape.push_back(d);
  Tensor<T> out(out_shape);
  const T* tp = table.value().data();
  T* op = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    TokenId id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                  " out of range for table " + TensorF::shape_str(ts));
    }
    std::copy(tp + static_cast<std::size_t>(id) * d, tp + (static_cast<std::size_t>(id) + 1) * d,
              op + i * d);
  }
  auto tn = table.node();
  auto ids_copy = ids;
  auto node = detail::make_op<T>(std::move(out), {tn}, [tn, ids_copy, v, d](Node<T>& self) {
    detail::ensure_grad(*tn);
    T* dt = tn->grad.data();
    const T* g = self.grad.data();
    using A = detail::acc_t<T>;
    std::vector<A> acc(v * d, A{});
    for (std::size_t i = 0; i < ids_copy.size(); ++i) {
      A* row = acc.data() + static_cast<std::size_t>(ids_copy[i]) * d;
      const T* grow = g + i * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += static_cast<A>(grow[j]);
    }
    for (std::size_t i = 0; i < v * d; ++i) {
      if (acc[i] != A{}) dt[i] = static_cast<T>(static_cast<A>(dt[i]) + acc[i]);
    }
  });
  return Var<T>::from_node(node);
}

// Last-axis layer norm with learnable gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const auto& xs = x.shape();
  if (xs.empty()) throw std::invalid_argument("layer_norm: scalar input");
  const std::size_t d = xs.back();
  if (gain.shape() != std::vector<std::size_t>{d} || bias.shape() != std::vector<std::size_t>{d}) {
    throw std::invalid_argument("layer_norm: gain/bias shape mismatch with " +
                                TensorF::shape_str(xs));
  }
  const std::size_t rows = x.value().size() / d;
  using A = detail::acc_t<T>;
  Tensor<T> out(xs);
  auto stats = std::make_shared<std::vector<A>>(2 * rows);  // mean, rstd per row
  const T* xp = x.value().data();
  const T* gp = gain.value().data();
  const T* bp = bias.value().data();
  T* op = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xp + r * d;
    A mean{};
    for (std::size_t i = 0; i < d; ++i) mean += static_cast<A>(row[i]);
    mean /= static_cast<A>(d);
    A var{};
    for (std::size_t i = 0; i < d; ++i) {
      A c = static_cast<A>(row[i]) - mean;
      var += c * c;
    }
    var /= static_cast<A>(d);
    A rstd = A{1} / std::sqrt(var + static_cast<A>(eps));
    (*stats)[2 * r] = mean;
    (*stats)[2 * r + 1] = rstd;
    T* orow = op + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      orow[i] = static_cast<T>((static_cast<A>(row[i]) - mean) * rstd) * gp[i] + bp[i];
    }
  }

  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  auto node = detail::make_op<T>(
      std::move(out), {xn, gn, bn}, [xn, gn, bn, stats, rows, d](Node<T>& self) {
        const T* g = self.grad.data();
        const T* xp2 = xn->value.data();
        const T* gp2 = gn->value.data();
        if (xn->requires_grad) detail::ensure_grad(*xn);
        if (gn->requires_grad) detail::ensure_grad(*gn);
        if (bn->requires_grad) detail::ensure_grad(*bn);
        std::vector<A> dg_acc, db_acc;
        if (gn->requires_grad) dg_acc.assign(d, A{});
        if (bn->requires_grad) db_acc.assign(d, A{});
        for (std::size_t r = 0; r < rows; ++r) {
          const A mean = (*stats)[2 * r];
          const A rstd = (*stats)[2 * r + 1];
          const T* xrow = xp2 + r * d;
          const T* grow = g + r * d;
          for (std::size_t i = 0; i < d; ++i) {
            A xhat = (static_cast<A>(xrow[i]) - mean) * rstd;
            if (gn->requires_grad) dg_acc[i] += static_cast<A>(grow[i]) * xhat;
            if (bn->requires_grad) db_acc[i] += static_cast<A>(grow[i]);
          }
          if (xn->requires_grad) {
            A s1{}, s2{};
            for (std::size_t i = 0; i < d; ++i) {
              A dxhat = static_cast<A>(grow[i]) * static_cast<A>(gp2[i]);
              A xhat = (static_cast<A>(xrow[i]) - mean) * rstd;
              s1 += dxhat;
              s2 += dxhat * xhat;
            }
            T* dx = xn->grad.data() + r * d;
            const A inv_d = A{1} / static_cast<A>(d);
            for (std::size_t i = 0; i < d; ++i) {
              A dxhat = static_cast<A>(grow[i]) * static_cast<A>(gp2[i]);
              A xhat = (static_cast<A>(xrow[i]) - mean) * rstd;
              dx[i] = static_cast<T>(static_cast<A>(dx[i]) +
                                     rstd * (dxhat - s1 * inv_d - xhat * s2 * inv_d));
            }
          }
        }
        if (gn->requires_grad) {
          T* dg = gn->grad.data();
          for (std::size_t i = 0; i < d; ++i) {
            dg[i] = static_cast<T>(static_cast<A>(dg[i]) + dg_acc[i]);
          }
        }
        if (bn->requires_grad) {
          T* db = bn->grad.data();
          for (std::size_t i = 0; i < d; ++i) {
            db[i] = static_cast<T>(static_cast<A>(db[i]) + db_acc[i]);
          }
        }
      });
  return Var<T>::from_node(node);
}

// tanh-approximation gelu: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
Var<T> gelu(const Var<T>& x) {
  using A = detail::acc_t<T>;
  constexpr A c0 = static_cast<A>(0.7978845608028654L);  // sqrt(2/pi)
  constexpr A c1 = static_cast<A>(0.044715L);
  Tensor<T> out(x.shape());
  const T* xp = x.value().data();
  T* op = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    A xv = static_cast<A>(xp[i]);
    op[i] = static_cast<T>(A{0.5} * xv * (A{1} + std::tanh(c0 * (xv + c1 * xv * xv * xv))));
  }
  auto xn = x.node();
  auto node = detail::make_op<T>(std::move(out), {xn}, [xn](Node<T>& self) {
    detail::ensure_grad(*xn);
    T* dx = xn->grad.data();
    const T* xp2 = xn->value.data();
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      A xv = static_cast<A>(xp2[i]);
      A u = c0 * (xv + c1 * xv * xv * xv);
      A t = std::tanh(u);
      A du = c0 * (A{1} + A{3} * c1 * xv * xv);
      A d = A{0.5} * (A{1} + t) + A{0.5} * xv * (A{1} - t * t) * du;
      dx[i] += static_cast<T>(static_cast<A>(g[i]) * d);
    }
  });
  return Var<T>::from_node(node);
}

// Softmax over the last axis, numerically stabilized.
template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
  const auto& xs = x.shape();
  if (xs.empty()) throw std::invalid_argument("softmax: scalar input");
  const std::size_t d = xs.back();
  const std::size_t rows = x.value().size() / d;
  using A = detail::acc_t<T>;
  Tensor<T> out(xs);
  const T* xp = x.value().data();
  T* op = out.data();
  std::vector<A> es(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xp + r * d;
    T* orow = op + r * d;
    T mx = row[0];
    for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
    A sum{};
    for (std::size_t i = 0; i < d; ++i) {
      es[i] = std::exp(static_cast<A>(row[i]) - static_cast<A>(mx));
      sum += es[i];
    }
    A inv = A{1} / sum;
    for (std::size_t i = 0; i < d; ++i) orow[i] = static_cast<T>(es[i] * inv);
  }
  auto xn = x.node();
  auto node = detail::make_op<T>(std::move(out), {xn}, [xn, rows, d](Node<T>& self) {
    detail::ensure_grad(*xn);
    T* dx = xn->grad.data();
    const T* y = self.value.data();
    const T* g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yrow = y + r * d;
      const T* grow = g + r * d;
      A dot{};
      for (std::size_t i = 0; i < d; ++i) dot += static_cast<A>(grow[i]) * static_cast<A>(yrow[i]);
      T* dxrow = dx + r * d;
      for (std::size_t i = 0; i < d; ++i) {
        dxrow[i] += static_cast<T>(static_cast<A>(yrow[i]) * (static_cast<A>(grow[i]) - dot));
      }
    }
  });
  return Var<T>::from_node(node);
}

// Inverted dropout. train=false or p=0 is the identity (same node).
template <typename T>
Var<T> dropout(const Var<T>& x, double p, std::uint64_t seed, bool train) {
  if (!train || p == 0.0) return x;
  if (p < 0.0 || p >= 1.0) {
    throw std::invalid_argument("dropout: p must be in [0,1), got " + std::to_string(p));
  }
  Rng rng(seed);
  auto mask = std::make_shared<std::vector<T>>(x.value().size());
  const double keep = 1.0 - p;
  const T inv_keep = static_cast<T>(1.0 / keep);
  for (auto& m : *mask) m = rng.uniform() < keep ? inv_keep : T{};
  Tensor<T> out(x.shape());
  const T* xp = x.value().data();
  T* op = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) op[i] = xp[i] * (*mask)[i];
  auto xn = x.node();
  auto node = detail::make_op<T>(std::move(out), {xn}, [xn, mask](Node<T>& self) {
    detail::ensure_grad(*xn);
    T* dx = xn->grad.data();
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += g[i] * (*mask)[i];
  });
  return Var<T>::from_node(node);
}

// Mean cross entropy over positions whose target != ignore_id.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const Tensor<TokenId>& targets, TokenId ignore_id) {
  const auto& ls = logits.shape();
  if (ls.empty()) throw std::invalid_argument("cross_entropy: scalar logits");
  const std::size_t v = ls.back();
  const std::size_t rows = logits.value().size() / v;
  if (targets.size() != rows) {
    throw std::invalid_argument("cross_entropy: incompatible shapes " + TensorF::shape_str(ls) +
                                " and " + TensorF::shape_str(targets.shape()));
  }
  using A = detail::acc_t<T>;
  auto lse = std::make_shared<std::vector<A>>(rows);
  const T* lp = logits.value().data();
  A total{};
  std::size_t kept = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    TokenId t = targets[r];
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw std::invalid_argument("cross_entropy: target id " + std::to_string(t) +
                                  " out of range for vocab " + std::to_string(v));
    }
    const T* row = lp + r * v;
    A mx = static_cast<A>(row[0]);
    for (std::size_t i = 1; i < v; ++i) mx = std::max(mx, static_cast<A>(row[i]));
    A sum{};
    for (std::size_t i = 0; i < v; ++i) sum += std::exp(static_cast<A>(row[i]) - mx);
    A l = mx + std::log(sum);
    (*lse)[r] = l;
    total += l - static_cast<A>(row[t]);
    ++kept;
  }
  if (kept == 0) {
    throw std::invalid_argument("cross_entropy: no positions to score (all targets ignored)");
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<A>(kept)));
  auto ln = logits.node();
  auto tgt = targets;
  auto node = detail::make_op<T>(
      std::move(out), {ln}, [ln, tgt, lse, rows, v, kept, ignore_id](Node<T>& self) {
        detail::ensure_grad(*ln);
        T* dl = ln->grad.data();
        const T* lp2 = ln->value.data();
        const A gscale = static_cast<A>(self.grad[0]) / static_cast<A>(kept);
        for (std::size_t r = 0; r < rows; ++r) {
          TokenId t = tgt[r];
          if (t == ignore_id) continue;
          const T* row = lp2 + r * v;
          T* drow = dl + r * v;
          const A l = (*lse)[r];
          for (std::size_t i = 0; i < v; ++i) {
            A p = std::exp(static_cast<A>(row[i]) - l);
            A delta = (static_cast<TokenId>(i) == t) ? A{1} : A{};
            drow[i] += static_cast<T>(gscale * (p - delta));
          }
        }
      });
  return Var<T>::from_node(node);
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  detail::acc_t<T> s{};
  const T* xp = x.value().data();
  for (std::size_t i = 0; i < x.value().size(); ++i) s += static_cast<detail::acc_t<T>>(xp[i]);
  auto xn = x.node();
  auto node = detail::make_op<T>(Tensor<T>::scalar(static_cast<T>(s)), {xn}, [xn](Node<T>& self) {
    detail::ensure_grad(*xn);
    T* dx = xn->grad.data();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < xn->grad.size(); ++i) dx[i] += g;
  });
  return Var<T>::from_node(node);
}

// [B,T,D] -> [B,H,T,D/H]
template <typename T>
Var<T> split_heads(const Var<T>& x, std::size_t n_heads) {
  const auto& xs = x.shape();
  if (xs.size() != 3 || xs[2] % n_heads != 0) {
    throw std::invalid_argument("split_heads: need [B,T,D] with D divisible by heads, got " +
                                TensorF::shape_str(xs));
  }
  const std::size_t b = xs[0], t = xs[1], d = xs[2], dk = d / n_heads;
  Tensor<T> out({b, n_heads, t, dk});
  const T* xp = x.value().data();
  T* op = out.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t ti = 0; ti < t; ++ti)
        std::copy(xp + (bi * t + ti) * d + h * dk, xp + (bi * t + ti) * d + (h + 1) * dk,
                  op + ((bi * n_heads + h) * t + ti) * dk);
  auto xn = x.node();
  auto node = detail::make_op<T>(std::move(out), {xn}, [xn, b, t, d, dk, n_heads](Node<T>& self) {
    detail::ensure_grad(*xn);
    T* dx = xn->grad.data();
    const T* g = self.grad.data();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t h = 0; h < n_heads; ++h)
        for (std::size_t ti = 0; ti < t; ++ti) {
          const T* grow = g + ((bi * n_heads + h) * t + ti) * dk;
          T* dxrow = dx + (bi * t + ti) * d + h * dk;
          for (std::size_t k = 0; k < dk; ++k) dxrow[k] += grow[k];
        }
  });
  return Var<T>::from_node(node);
}

// [B,H,T,dk] -> [B,T,H*dk]
template <typename T>
Var<T> merge_heads(const Var<T>& x) {
  const auto& xs = x.shape();
  if (xs.size() != 4) {
    throw std::invalid_argument("merge_heads: need [B,H,T,dk], got " + TensorF::shape_str(xs));
  }
  const std::size_t b = xs[0], h = xs[1], t = xs[2], dk = xs[3];
  const std::size_t d = h * dk;
  Tensor<T> out({b, t, d});
  const T* xp = x.value().data();
  T* op = out.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t hi = 0; hi < h; ++hi)
      for (std::size_t ti = 0; ti < t; ++ti)
        std::copy(xp + ((bi * h + hi) * t + ti) * dk, xp + ((bi * h + hi) * t + ti + 1) * dk,
                  op + (bi * t + ti) * d + hi * dk);
  auto xn = x.node();
  auto node = detail::make_op<T>(std::move(out), {xn}, [xn, b, h, t, dk, d](Node<T>& self) {
    detail::ensure_grad(*xn);
    T* dx = xn->grad.data();
    const T* g = self.grad.data();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t ti = 0; ti < t; ++ti) {
          const T* grow = g + (bi * t + ti) * d + hi * dk;
          T* dxrow = dx + ((bi * h + hi) * t + ti) * dk;
          for (std::size_t k = 0; k < dk; ++k) dxrow[k] += grow[k];
        }
  });
  return Var<T>::from_node(node);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Returns one gradient per named
// parameter; parameters the loss never touched get zeros.
template <typename T>
Gradients<T> backward(const Var<T>& loss, const std::vector<Var<T>>& params) {
  if (loss.value().size() != 1 || !loss.value().shape().empty()) {
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                TensorF::shape_str(loss.value().shape()));
  }
  if (loss.requires_grad()) {
    // iterative post-order topological sort
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    loss.node()->grad = Tensor<T>::scalar(T{1});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backprop && n->grad.size() != 0) n->backprop(*n);
    }
  }
  Gradients<T> grads;
  for (const auto& p : params) {
    if (p.name().empty()) {
      throw std::invalid_argument("backward: parameters must be named leaves");
    }
    if (p.node()->grad.size() != 0) {
      grads[p.name()] = p.node()->grad;
    } else {
      grads[p.name()] = Tensor<T>(p.value().shape());
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// finite-difference oracle
// ---------------------------------------------------------------------------

using ParamList = std::vector<std::pair<std::string, TensorD>>;
using ParamListLd = std::vector<std::pair<std::string, Tensor<long double>>>;

struct FdOptions {
  double eps = 1e-4;
  std::size_t min_coords_per_tensor = 64;
  std::uint64_t seed = 0x5eed;
};

namespace detail {

// Central differences of `f` with Richardson extrapolation: the h^2
// truncation term of D(h) cancels against D(h/2), leaving O(h^4). Without
// this, curvature along embedding coordinates alone costs ~1e-5 relative
// error at eps=1e-4. E is the evaluation scalar; long double evaluation
// drops the subtraction noise floor below the 1e-6 tolerance asked of
// 64-bit gradients, which plain double cannot meet on coordinates whose
// gradient magnitude sits near the 1e-8 denominator floor.
template <typename E>
std::map<std::string, double> fd_check_impl(
    const std::function<E(const std::vector<std::pair<std::string, Tensor<E>>>&)>& f,
    std::vector<std::pair<std::string, Tensor<E>>> params,
    const std::map<std::string, TensorD>& analytic, const FdOptions& opts) {
  if (opts.eps <= 0) throw std::invalid_argument("finite_diff_check: eps must be > 0");
  Rng rng(opts.seed);
  std::map<std::string, double> max_rel;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& [name, tensor] = params[pi];
    auto git = analytic.find(name);
    if (git == analytic.end()) {
      throw std::invalid_argument("finite_diff_check: no analytic gradient for " + name);
    }
    const TensorD& g = git->second;
    std::vector<std::size_t> coords;
    if (tensor.size() <= opts.min_coords_per_tensor) {
      coords.resize(tensor.size());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      std::set<std::size_t> chosen;
      while (chosen.size() < opts.min_coords_per_tensor) {
        chosen.insert(static_cast<std::size_t>(rng.below(tensor.size())));
      }
      coords.assign(chosen.begin(), chosen.end());
    }
    double worst = 0;
    for (std::size_t c : coords) {
      const E orig = tensor[c];
      auto central = [&](E h) {
        tensor[c] = orig + h;
        const E fp = f(params);
        tensor[c] = orig - h;
        const E fm = f(params);
        tensor[c] = orig;
        return (fp - fm) / (E{2} * h);
      };
      const E d1 = central(static_cast<E>(opts.eps));
      const E d2 = central(static_cast<E>(opts.eps) / E{2});
      const double fd = static_cast<double>((E{4} * d2 - d1) / E{3});
      const double an = g[c];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
      worst = std::max(worst, rel);
    }
    max_rel[name] = worst;
  }
  return max_rel;
}

}  // namespace detail

// Relative error per coordinate is |fd - g| / max(|fd|, |g|, 1e-8); the
// per-parameter maximum is returned.
inline std::map<std::string, double> finite_diff_check(
    const std::function<double(const ParamList&)>& f, ParamList params,
    const std::map<std::string, TensorD>& analytic, const FdOptions& opts = {}) {
  return detail::fd_check_impl<double>(f, std::move(params), analytic, opts);
}

// Same check with the function evaluated in long double. Use this when the
// analytic side is a 64-bit graph; the oracle must be quieter than the thing
// it judges.
inline std::map<std::string, double> finite_diff_check_ld(
    const std::function<long double(const ParamListLd&)>& f, ParamListLd params,
    const std::map<std::string, TensorD>& analytic, const FdOptions& opts = {}) {
  return detail::fd_check_impl<long double>(f, std::move(params), analytic, opts);
}

// Convenience wrapper for double graphs: builds the graph from `build`, runs
// backward, then checks it against central differences of the same function.
inline std::map<std::string, double> gradcheck(
    const std::function<Var<double>(const std::vector<Var<double>>&)>& build,
    const ParamList& params, const FdOptions& opts = {}) {
  auto make_leaves = [&](const ParamList& pl, bool rg) {
    std::vector<Var<double>> leaves;
    leaves.reserve(pl.size());
    for (const auto& [name, t] : pl) leaves.push_back(Var<double>::leaf(t, rg, name));
    return leaves;
  };
  auto leaves = make_leaves(params, true);
  auto loss = build(leaves);
  auto grads = backward(loss, leaves);
  auto eval = [&](const ParamList& pl) {
    auto ls = make_leaves(pl, false);
    return static_cast<double>(build(ls).value()[0]);
  };
  return finite_diff_check(eval, params, grads, opts);
}

}  // namespace tiltlab::ag
