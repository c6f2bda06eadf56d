#include <algorithm>
#include <cmath>

#include "rangevit/ops.hpp"

namespace rangevit {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  RV_CHECK(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a, b});
  auto ov = out.value_mut();
  auto av = a.value(), bv = b.value();
  for (int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] + bv[i];
  NodePtr<T> an = a.node(), bn = b.node();
  out.set_backward([an, bn](detail::TensorNode<T>& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (an->requires_grad) an->grad[i] += self.grad[i];
      if (bn->requires_grad) bn->grad[i] += self.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a, b});
  auto ov = out.value_mut();
  auto av = a.value(), bv = b.value();
  for (int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] - bv[i];
  NodePtr<T> an = a.node(), bn = b.node();
  out.set_backward([an, bn](detail::TensorNode<T>& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (an->requires_grad) an->grad[i] += self.grad[i];
      if (bn->requires_grad) bn->grad[i] -= self.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a, b});
  auto ov = out.value_mut();
  auto av = a.value(), bv = b.value();
  for (int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] * bv[i];
  NodePtr<T> an = a.node(), bn = b.node();
  out.set_backward([an, bn](detail::TensorNode<T>& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (an->requires_grad) an->grad[i] += self.grad[i] * bn->value[i];
      if (bn->requires_grad) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "div");
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a, b});
  auto ov = out.value_mut();
  auto av = a.value(), bv = b.value();
  for (int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] / bv[i];
  NodePtr<T> an = a.node(), bn = b.node();
  out.set_backward([an, bn](detail::TensorNode<T>& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      T inv = T(1) / bn->value[i];
      if (an->requires_grad) an->grad[i] += self.grad[i] * inv;
      if (bn->requires_grad) bn->grad[i] -= self.grad[i] * an->value[i] * inv * inv;
    }
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] + s;
  NodePtr<T> an = a.node();
  out.set_backward([an](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] * s;
  NodePtr<T> an = a.node();
  out.set_backward([an, s](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
  });
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) ov[i] = std::exp(av[i]);
  NodePtr<T> an = a.node();
  out.set_backward([an](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * self.value[i];
  });
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) ov[i] = std::log(av[i]);
  NodePtr<T> an = a.node();
  out.set_backward([an](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] / an->value[i];
  });
  return out;
}

template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T p) {
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) ov[i] = std::pow(av[i], p);
  NodePtr<T> an = a.node();
  out.set_backward([an, p](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      T x = an->value[i];
      T d;
      if (p == T(0)) {
        d = T(0);
      } else if (x == T(0)) {
        d = (p == T(1)) ? T(1) : T(0);
      } else {
        d = p * std::pow(x, p - T(1));
      }
      an->grad[i] += self.grad[i] * d;
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
  NodePtr<T> an = a.node();
  out.set_backward([an](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (an->value[i] > T(0)) an->grad[i] += self.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] > T(0) ? av[i] : slope * av[i];
  NodePtr<T> an = a.node();
  out.set_backward([an, slope](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * (an->value[i] > T(0) ? T(1) : slope);
  });
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (int64_t i = 0; i < out.numel(); ++i)
    ov[i] = T(0.5) * av[i] * (T(1) + std::erf(av[i] * inv_sqrt2));
  NodePtr<T> an = a.node();
  out.set_backward([an, inv_sqrt2](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    const T inv_sqrt2pi = T(0.39894228040143267794);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      T x = an->value[i];
      T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      an->grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  RV_CHECK(shape_numel(shape) == a.numel(),
           "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<T> out = Tensor<T>::make_op(std::move(shape), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  std::copy(av.begin(), av.end(), ov.begin());
  NodePtr<T> an = a.node();
  out.set_backward([an](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  const Shape& in_shape = a.shape();
  const int nd = static_cast<int>(in_shape.size());
  RV_CHECK(static_cast<int>(perm.size()) == nd, "permute: rank mismatch");
  std::vector<bool> seen(nd, false);
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) {
    RV_CHECK(perm[i] >= 0 && perm[i] < nd && !seen[perm[i]], "permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = in_shape[perm[i]];
  }

  // strides of the input, then walk output indices in order
  std::vector<int64_t> in_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  std::vector<int64_t> src_strides(nd);
  for (int i = 0; i < nd; ++i) src_strides[i] = in_strides[perm[i]];

  Tensor<T> out = Tensor<T>::make_op(out_shape, {a});
  auto ov = out.value_mut();
  auto av = a.value();
  const int64_t n = out.numel();
  std::vector<int64_t> idx(nd, 0);
  // index map reused verbatim by the adjoint
  std::vector<int64_t> src_index(n);
  int64_t src = 0;
  for (int64_t flat = 0; flat < n; ++flat) {
    src_index[flat] = src;
    ov[flat] = av[src];
    for (int axis = nd - 1; axis >= 0; --axis) {
      idx[axis]++;
      src += src_strides[axis];
      if (idx[axis] < out_shape[axis]) break;
      idx[axis] = 0;
      src -= src_strides[axis] * out_shape[axis];
    }
  }
  NodePtr<T> an = a.node();
  out.set_backward([an, src_index = std::move(src_index)](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[src_index[i]] += self.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t len) {
  const Shape& s = a.shape();
  RV_CHECK(axis >= 0 && axis < static_cast<int>(s.size()), "slice: bad axis");
  RV_CHECK(start >= 0 && len >= 0 && start + len <= s[axis],
           "slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
               ") out of bounds for dim " + std::to_string(s[axis]));
  Shape out_shape = s;
  out_shape[axis] = len;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= s[i];

  Tensor<T> out = Tensor<T>::make_op(std::move(out_shape), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  const int64_t in_axis = s[axis];
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < len; ++j)
      std::copy_n(av.begin() + (o * in_axis + start + j) * inner, inner,
                  ov.begin() + (o * len + j) * inner);
  NodePtr<T> an = a.node();
  out.set_backward([an, outer, inner, in_axis, start, len](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < len; ++j) {
        const T* g = self.grad.data() + (o * len + j) * inner;
        T* dst = an->grad.data() + (o * in_axis + start + j) * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
      }
  });
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  RV_CHECK(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  RV_CHECK(axis >= 0 && axis < static_cast<int>(s0.size()), "concat: bad axis");
  int64_t axis_total = 0;
  for (const Tensor<T>& p : parts) {
    const Shape& s = p.shape();
    RV_CHECK(s.size() == s0.size(), "concat: rank mismatch");
    for (int i = 0; i < static_cast<int>(s.size()); ++i)
      RV_CHECK(i == axis || s[i] == s0[i], "concat: shape mismatch on axis " + std::to_string(i));
    axis_total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (int i = axis + 1; i < static_cast<int>(s0.size()); ++i) inner *= s0[i];

  Tensor<T> out = Tensor<T>::make_op(std::move(out_shape), parts);
  auto ov = out.value_mut();
  std::vector<int64_t> axis_sizes, axis_offsets;
  int64_t off = 0;
  for (const Tensor<T>& p : parts) {
    axis_sizes.push_back(p.shape()[axis]);
    axis_offsets.push_back(off);
    off += p.shape()[axis];
  }
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    auto pv = parts[pi].value();
    const int64_t a = axis_sizes[pi];
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * a * inner, a * inner,
                  ov.begin() + (o * axis_total + axis_offsets[pi]) * inner);
  }
  std::vector<NodePtr<T>> nodes;
  for (const Tensor<T>& p : parts) nodes.push_back(p.node());
  out.set_backward([nodes, axis_sizes, axis_offsets, outer, inner,
                    axis_total](detail::TensorNode<T>& self) {
    for (size_t pi = 0; pi < nodes.size(); ++pi) {
      if (!nodes[pi]->requires_grad) continue;
      const int64_t a = axis_sizes[pi];
      for (int64_t o = 0; o < outer; ++o) {
        const T* g = self.grad.data() + (o * axis_total + axis_offsets[pi]) * inner;
        T* dst = nodes[pi]->grad.data() + o * a * inner;
        for (int64_t i = 0; i < a * inner; ++i) dst[i] += g[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::make_op({1}, {a});
  auto av = a.value();
  T acc = T(0);
  for (int64_t i = 0; i < a.numel(); ++i) acc += av[i];
  out.value_mut()[0] = acc;
  NodePtr<T> an = a.node();
  out.set_backward([an](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[0];
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  RV_CHECK(a.numel() > 0, "mean: empty tensor");
  Tensor<T> s = sum(a);
  return mul_scalar(s, T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<int>& idx) {
  RV_CHECK(a.ndim() == 2, "gather_rows: expected rank-2 input");
  const int64_t n = a.dim(0), k = a.dim(1);
  RV_CHECK(static_cast<int64_t>(idx.size()) == n, "gather_rows: index count mismatch");
  Tensor<T> out = Tensor<T>::make_op({n}, {a});
  auto ov = out.value_mut();
  auto av = a.value();
  for (int64_t i = 0; i < n; ++i) {
    RV_CHECK(idx[i] >= 0 && idx[i] < k, "gather_rows: column index out of range");
    ov[i] = av[i * k + idx[i]];
  }
  NodePtr<T> an = a.node();
  out.set_backward([an, idx, k](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i)
      an->grad[static_cast<int64_t>(i) * k + idx[i]] += self.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> take_rows(const Tensor<T>& a, const std::vector<int>& idx) {
  RV_CHECK(a.ndim() == 2, "take_rows: expected rank-2 input");
  const int64_t n = a.dim(0), k = a.dim(1);
  Tensor<T> out = Tensor<T>::make_op({static_cast<int64_t>(idx.size()), k}, {a});
  auto ov = out.value_mut();
  auto av = a.value();
  for (size_t i = 0; i < idx.size(); ++i) {
    RV_CHECK(idx[i] >= 0 && idx[i] < n, "take_rows: row index out of range");
    std::copy_n(av.begin() + static_cast<int64_t>(idx[i]) * k, k,
                ov.begin() + static_cast<int64_t>(i) * k);
  }
  NodePtr<T> an = a.node();
  out.set_backward([an, idx, k](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (size_t i = 0; i < idx.size(); ++i) {
      const T* g = self.grad.data() + static_cast<int64_t>(i) * k;
      T* dst = an->grad.data() + static_cast<int64_t>(idx[i]) * k;
      for (int64_t j = 0; j < k; ++j) dst[j] += g[j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  RV_CHECK(a.ndim() == 2 && b.ndim() == 2, "matmul: expected rank-2 inputs");
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  RV_CHECK(k == k2, "matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::make_op({m, n}, {a, b});
  auto ov = out.value_mut();
  auto av = a.value(), bv = b.value();
  for (int64_t i = 0; i < m; ++i) {
    T* orow = ov.data() + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const T aik = av[i * k + kk];
      const T* brow = bv.data() + kk * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  NodePtr<T> an = a.node(), bn = b.node();
  out.set_backward([an, bn, m, k, n](detail::TensorNode<T>& self) {
    if (an->requires_grad) {
      // dA = dC * B^T
      for (int64_t i = 0; i < m; ++i) {
        const T* grow = self.grad.data() + i * n;
        T* arow = an->grad.data() + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
          const T* brow = bn->value.data() + kk * n;
          T acc = T(0);
          for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          arow[kk] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      // dB = A^T * dC
      for (int64_t i = 0; i < m; ++i) {
        const T* grow = self.grad.data() + i * n;
        const T* arow = an->value.data() + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
          T* brow = bn->grad.data() + kk * n;
          const T aik = arow[kk];
          for (int64_t j = 0; j < n; ++j) brow[j] += aik * grow[j];
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  RV_CHECK(w.ndim() == 2, "linear: weight must be rank-2 (out x in)");
  const int64_t out_dim = w.dim(0), in_dim = w.dim(1);
  RV_CHECK(x.numel() % in_dim == 0 && x.dim(x.ndim() - 1) == in_dim,
           "linear: input trailing dim " + std::to_string(x.dim(x.ndim() - 1)) +
               " does not match weight in dim " + std::to_string(in_dim));
  const int64_t rows = x.numel() / in_dim;
  const bool has_bias = b.defined();
  if (has_bias)
    RV_CHECK(b.numel() == out_dim, "linear: bias size mismatch");

  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  Tensor<T> out = Tensor<T>::make_op(std::move(out_shape), inputs);
  auto ov = out.value_mut();
  auto xv = x.value(), wv = w.value();
  for (int64_t r = 0; r < rows; ++r) {
    T* orow = ov.data() + r * out_dim;
    if (has_bias) {
      auto bvv = b.value();
      std::copy_n(bvv.begin(), out_dim, orow);
    }
    const T* xrow = xv.data() + r * in_dim;
    for (int64_t o = 0; o < out_dim; ++o) {
      const T* wrow = wv.data() + o * in_dim;
      T acc = T(0);
      for (int64_t i = 0; i < in_dim; ++i) acc += xrow[i] * wrow[i];
      orow[o] += acc;
    }
  }
  NodePtr<T> xn = x.node(), wn = w.node();
  NodePtr<T> bnode = has_bias ? b.node() : nullptr;
  out.set_backward([xn, wn, bnode, rows, in_dim, out_dim](detail::TensorNode<T>& self) {
    for (int64_t r = 0; r < rows; ++r) {
      const T* grow = self.grad.data() + r * out_dim;
      const T* xrow = xn->value.data() + r * in_dim;
      if (xn->requires_grad) {
        T* dx = xn->grad.data() + r * in_dim;
        for (int64_t o = 0; o < out_dim; ++o) {
          const T g = grow[o];
          const T* wrow = wn->value.data() + o * in_dim;
          for (int64_t i = 0; i < in_dim; ++i) dx[i] += g * wrow[i];
        }
      }
      if (wn->requires_grad) {
        for (int64_t o = 0; o < out_dim; ++o) {
          const T g = grow[o];
          T* dwrow = wn->grad.data() + o * in_dim;
          for (int64_t i = 0; i < in_dim; ++i) dwrow[i] += g * xrow[i];
        }
      }
      if (bnode && bnode->requires_grad) {
        for (int64_t o = 0; o < out_dim; ++o) bnode->grad[o] += grow[o];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  RV_CHECK(a.ndim() >= 1, "softmax: scalar input");
  const int64_t k = a.dim(a.ndim() - 1);
  RV_CHECK(k > 0, "softmax: empty trailing axis");
  const int64_t rows = a.numel() / k;
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * k;
    T* y = ov.data() + r * k;
    T mx = x[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, x[i]);
    T denom = T(0);
    for (int64_t i = 0; i < k; ++i) {
      y[i] = std::exp(x[i] - mx);
      denom += y[i];
    }
    const T inv = T(1) / denom;
    for (int64_t i = 0; i < k; ++i) y[i] *= inv;
  }
  NodePtr<T> an = a.node();
  out.set_backward([an, rows, k](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * k;
      const T* g = self.grad.data() + r * k;
      T dot = T(0);
      for (int64_t i = 0; i < k; ++i) dot += g[i] * y[i];
      T* dx = an->grad.data() + r * k;
      for (int64_t i = 0; i < k; ++i) dx[i] += y[i] * (g[i] - dot);
    }
  });
  return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  RV_CHECK(a.ndim() >= 1, "log_softmax: scalar input");
  const int64_t k = a.dim(a.ndim() - 1);
  RV_CHECK(k > 0, "log_softmax: empty trailing axis");
  const int64_t rows = a.numel() / k;
  Tensor<T> out = Tensor<T>::make_op(a.shape(), {a});
  auto ov = out.value_mut();
  auto av = a.value();
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * k;
    T* y = ov.data() + r * k;
    T mx = x[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, x[i]);
    T denom = T(0);
    for (int64_t i = 0; i < k; ++i) denom += std::exp(x[i] - mx);
    const T lse = mx + std::log(denom);
    for (int64_t i = 0; i < k; ++i) y[i] = x[i] - lse;
  }
  NodePtr<T> an = a.node();
  out.set_backward([an, rows, k](detail::TensorNode<T>& self) {
    if (!an->requires_grad) return;
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * k;
      const T* g = self.grad.data() + r * k;
      T gsum = T(0);
      for (int64_t i = 0; i < k; ++i) gsum += g[i];
      T* dx = an->grad.data() + r * k;
      for (int64_t i = 0; i < k; ++i) dx[i] += g[i] - std::exp(y[i]) * gsum;
    }
  });
  return out;
}

#define RV_INSTANTIATE_BASIC(T)                                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                  \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                  \
  template Tensor<T> neg(const Tensor<T>&);                                            \
  template Tensor<T> exp(const Tensor<T>&);                                            \
  template Tensor<T> log(const Tensor<T>&);                                            \
  template Tensor<T> pow_scalar(const Tensor<T>&, T);                                  \
  template Tensor<T> relu(const Tensor<T>&);                                           \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                  \
  template Tensor<T> gelu(const Tensor<T>&);                                           \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                 \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);               \
  template Tensor<T> slice(const Tensor<T>&, int, int64_t, int64_t);                   \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                       \
  template Tensor<T> sum(const Tensor<T>&);                                            \
  template Tensor<T> mean(const Tensor<T>&);                                           \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<int>&);           \
  template Tensor<T> take_rows(const Tensor<T>&, const std::vector<int>&);             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> softmax(const Tensor<T>&);                                        \
  template Tensor<T> log_softmax(const Tensor<T>&);

RV_INSTANTIATE_BASIC(float)
RV_INSTANTIATE_BASIC(double)

#undef RV_INSTANTIATE_BASIC

}  // namespace rangevit
