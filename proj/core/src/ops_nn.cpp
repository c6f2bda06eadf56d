#include <algorithm>
#include <cmath>

#include "rangevit/ops.hpp"

namespace rangevit {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

// Shared batch-norm body. Channel element (o, c, i) lives at (o*C + c)*inner + i,
// which covers both the 2d case (outer = B, inner = H*W) and the 1d case
// (outer = N, inner = 1).
template <typename T>
Tensor<T> batch_norm_impl(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                          Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                          T momentum, T eps, int64_t outer, int64_t C, int64_t inner) {
  RV_CHECK(gain.numel() == C && bias.numel() == C, "batch_norm: affine size mismatch");
  RV_CHECK(running_mean.numel() == C && running_var.numel() == C,
           "batch_norm: running statistic size mismatch");
  const int64_t per_channel = outer * inner;
  RV_CHECK(per_channel > 0, "batch_norm: empty input");

  std::vector<T> mu(C), sigma(C);
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      T m = T(0);
      for (int64_t o = 0; o < outer; ++o) {
        const T* p = x.value().data() + (o * C + c) * inner;
        for (int64_t i = 0; i < inner; ++i) m += p[i];
      }
      m /= static_cast<T>(per_channel);
      T v = T(0);
      for (int64_t o = 0; o < outer; ++o) {
        const T* p = x.value().data() + (o * C + c) * inner;
        for (int64_t i = 0; i < inner; ++i) {
          T d = p[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<T>(per_channel);
      mu[c] = m;
      sigma[c] = std::sqrt(v + eps);
      T v_unbiased = per_channel > 1 ? v * static_cast<T>(per_channel) /
                                           static_cast<T>(per_channel - 1)
                                     : v;
      running_mean.value_mut()[c] = (T(1) - momentum) * running_mean.value()[c] + momentum * m;
      running_var.value_mut()[c] = (T(1) - momentum) * running_var.value()[c] + momentum * v_unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mu[c] = running_mean.value()[c];
      sigma[c] = std::sqrt(running_var.value()[c] + eps);
    }
  }

  Tensor<T> out = Tensor<T>::make_op(x.shape(), {x, gain, bias});
  auto ov = out.value_mut();
  auto xv = x.value();
  auto gv = gain.value(), bv = bias.value();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t c = 0; c < C; ++c) {
      const T g = gv[c], b = bv[c], m = mu[c], inv_s = T(1) / sigma[c];
      const T* px = xv.data() + (o * C + c) * inner;
      T* py = ov.data() + (o * C + c) * inner;
      for (int64_t i = 0; i < inner; ++i) py[i] = g * (px[i] - m) * inv_s + b;
    }

  NodePtr<T> xn = x.node(), gn = gain.node(), bn = bias.node();
  out.set_backward([xn, gn, bn, mu = std::move(mu), sigma = std::move(sigma), training, outer, C,
                    inner, per_channel](detail::TensorNode<T>& self) {
    for (int64_t c = 0; c < C; ++c) {
      const T m = mu[c], inv_s = T(1) / sigma[c], g = gn->value[c];
      T sum_dy = T(0), sum_dy_xhat = T(0);
      for (int64_t o = 0; o < outer; ++o) {
        const int64_t base = (o * C + c) * inner;
        for (int64_t i = 0; i < inner; ++i) {
          const T dy = self.grad[base + i];
          sum_dy += dy;
          sum_dy_xhat += dy * (xn->value[base + i] - m) * inv_s;
        }
      }
      if (gn->requires_grad) gn->grad[c] += sum_dy_xhat;
      if (bn->requires_grad) bn->grad[c] += sum_dy;
      if (!xn->requires_grad) continue;
      if (training) {
        const T n = static_cast<T>(per_channel);
        for (int64_t o = 0; o < outer; ++o) {
          const int64_t base = (o * C + c) * inner;
          for (int64_t i = 0; i < inner; ++i) {
            const T xhat = (xn->value[base + i] - m) * inv_s;
            xn->grad[base + i] +=
                g * inv_s * (self.grad[base + i] - sum_dy / n - xhat * sum_dy_xhat / n);
          }
        }
      } else {
        for (int64_t o = 0; o < outer; ++o) {
          const int64_t base = (o * C + c) * inner;
          for (int64_t i = 0; i < inner; ++i)
            xn->grad[base + i] += g * inv_s * self.grad[base + i];
        }
      }
    }
  });
  return out;
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  RV_CHECK(x.ndim() >= 1, "layer_norm: scalar input");
  const int64_t d = x.dim(x.ndim() - 1);
  RV_CHECK(gain.numel() == d && bias.numel() == d, "layer_norm: affine size mismatch");
  const int64_t rows = x.numel() / d;

  std::vector<T> mu(rows), sigma(rows);
  Tensor<T> out = Tensor<T>::make_op(x.shape(), {x, gain, bias});
  auto ov = out.value_mut();
  auto xv = x.value();
  auto gv = gain.value(), bv = bias.value();
  for (int64_t r = 0; r < rows; ++r) {
    const T* px = xv.data() + r * d;
    T m = T(0);
    for (int64_t i = 0; i < d; ++i) m += px[i];
    m /= static_cast<T>(d);
    T v = T(0);
    for (int64_t i = 0; i < d; ++i) {
      T dd = px[i] - m;
      v += dd * dd;
    }
    v /= static_cast<T>(d);
    mu[r] = m;
    sigma[r] = std::sqrt(v + eps);
    const T inv_s = T(1) / sigma[r];
    T* py = ov.data() + r * d;
    for (int64_t i = 0; i < d; ++i) py[i] = gv[i] * (px[i] - m) * inv_s + bv[i];
  }

  NodePtr<T> xn = x.node(), gn = gain.node(), bn = bias.node();
  out.set_backward(
      [xn, gn, bn, mu = std::move(mu), sigma = std::move(sigma), rows, d](detail::TensorNode<T>& self) {
        for (int64_t r = 0; r < rows; ++r) {
          const T m = mu[r], inv_s = T(1) / sigma[r];
          const T* px = xn->value.data() + r * d;
          const T* dy = self.grad.data() + r * d;
          T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
          for (int64_t i = 0; i < d; ++i) {
            const T xhat = (px[i] - m) * inv_s;
            const T dxhat = dy[i] * gn->value[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            if (gn->requires_grad) gn->grad[i] += dy[i] * xhat;
            if (bn->requires_grad) bn->grad[i] += dy[i];
          }
          if (!xn->requires_grad) continue;
          T* dx = xn->grad.data() + r * d;
          const T n = static_cast<T>(d);
          for (int64_t i = 0; i < d; ++i) {
            const T xhat = (px[i] - m) * inv_s;
            const T dxhat = dy[i] * gn->value[i];
            dx[i] += inv_s * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
          }
        }
      });
  return out;
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                       Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                       T eps) {
  RV_CHECK(x.ndim() == 4, "batch_norm2d: expected B x C x H x W input");
  return batch_norm_impl(x, gain, bias, running_mean, running_var, training, momentum, eps,
                         x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
}

template <typename T>
Tensor<T> batch_norm1d(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                       Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                       T eps) {
  RV_CHECK(x.ndim() == 2, "batch_norm1d: expected N x C input");
  return batch_norm_impl(x, gain, bias, running_mean, running_var, training, momentum, eps,
                         x.dim(0), x.dim(1), int64_t{1});
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOpts& opts) {
  RV_CHECK(input.ndim() == 4, "conv2d: expected B x C x H x W input, got " +
                                  shape_str(input.shape()));
  RV_CHECK(weight.ndim() == 4, "conv2d: expected Cout x Cin x Kh x Kw weight");
  const int64_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Cout = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
  RV_CHECK(weight.dim(1) == Cin, "conv2d: input has " + std::to_string(Cin) +
                                     " channels but weight expects " + std::to_string(weight.dim(1)));
  const int sh = opts.stride.h, sw = opts.stride.w;
  const int ph = opts.pad.h, pw = opts.pad.w;
  const int dh = opts.dilation.h, dw = opts.dilation.w;
  RV_CHECK(sh > 0 && sw > 0 && dh > 0 && dw > 0 && ph >= 0 && pw >= 0,
           "conv2d: invalid stride/pad/dilation");
  const int64_t OH = (H + 2 * ph - (KH - 1) * static_cast<int64_t>(dh) - 1) / sh + 1;
  const int64_t OW = (W + 2 * pw - (KW - 1) * static_cast<int64_t>(dw) - 1) / sw + 1;
  RV_CHECK(OH > 0 && OW > 0, "conv2d: zero-size output for input " + shape_str(input.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) RV_CHECK(bias.numel() == Cout, "conv2d: bias size mismatch");

  // valid output range so that the tapped input index stays in bounds
  auto out_range = [](int64_t in_size, int64_t out_size, int stride, int pad, int dil,
                      int64_t k, int64_t* lo, int64_t* hi) {
    const int64_t off = k * dil - pad;  // in = out*stride + off
    int64_t l = off < 0 ? (-off + stride - 1) / stride : 0;
    int64_t h = (in_size - 1 - off) / stride;
    *lo = std::max<int64_t>(0, l);
    *hi = std::min(out_size - 1, h);
  };

  std::vector<Tensor<T>> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  Tensor<T> out = Tensor<T>::make_op({B, Cout, OH, OW}, inputs);
  auto ov = out.value_mut();
  auto iv = input.value();
  auto wv = weight.value();

  for (int64_t b = 0; b < B; ++b) {
    for (int64_t co = 0; co < Cout; ++co) {
      T* oplane = ov.data() + (b * Cout + co) * OH * OW;
      if (has_bias) {
        const T bval = bias.value()[co];
        for (int64_t i = 0; i < OH * OW; ++i) oplane[i] = bval;
      }
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const T* iplane = iv.data() + (b * Cin + ci) * H * W;
        const T* wbase = wv.data() + (co * Cin + ci) * KH * KW;
        for (int64_t kh = 0; kh < KH; ++kh) {
          int64_t oh0, oh1;
          out_range(H, OH, sh, ph, dh, kh, &oh0, &oh1);
          for (int64_t kw = 0; kw < KW; ++kw) {
            int64_t ow0, ow1;
            out_range(W, OW, sw, pw, dw, kw, &ow0, &ow1);
            if (oh0 > oh1 || ow0 > ow1) continue;
            const T wval = wbase[kh * KW + kw];
            for (int64_t oh = oh0; oh <= oh1; ++oh) {
              const int64_t ih = oh * sh - ph + kh * dh;
              const T* irow = iplane + ih * W - pw + kw * dw;
              T* orow = oplane + oh * OW;
              if (sw == 1) {
                for (int64_t ow = ow0; ow <= ow1; ++ow) orow[ow] += wval * irow[ow];
              } else {
                for (int64_t ow = ow0; ow <= ow1; ++ow) orow[ow] += wval * irow[ow * sw];
              }
            }
          }
        }
      }
    }
  }

  NodePtr<T> in_n = input.node(), w_n = weight.node();
  NodePtr<T> b_n = has_bias ? bias.node() : nullptr;
  out.set_backward([in_n, w_n, b_n, B, Cin, Cout, H, W, OH, OW, KH, KW, sh, sw, ph, pw, dh, dw,
                    out_range](detail::TensorNode<T>& self) {
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t co = 0; co < Cout; ++co) {
        const T* gplane = self.grad.data() + (b * Cout + co) * OH * OW;
        if (b_n && b_n->requires_grad) {
          T acc = T(0);
          for (int64_t i = 0; i < OH * OW; ++i) acc += gplane[i];
          b_n->grad[co] += acc;
        }
        for (int64_t ci = 0; ci < Cin; ++ci) {
          const T* iplane = in_n->value.data() + (b * Cin + ci) * H * W;
          T* diplane = in_n->requires_grad ? in_n->grad.data() + (b * Cin + ci) * H * W : nullptr;
          const T* wbase = w_n->value.data() + (co * Cin + ci) * KH * KW;
          T* dwbase = w_n->requires_grad ? w_n->grad.data() + (co * Cin + ci) * KH * KW : nullptr;
          for (int64_t kh = 0; kh < KH; ++kh) {
            int64_t oh0, oh1;
            out_range(H, OH, sh, ph, dh, kh, &oh0, &oh1);
            for (int64_t kw = 0; kw < KW; ++kw) {
              int64_t ow0, ow1;
              out_range(W, OW, sw, pw, dw, kw, &ow0, &ow1);
              if (oh0 > oh1 || ow0 > ow1) continue;
              const T wval = wbase[kh * KW + kw];
              T wacc = T(0);
              for (int64_t oh = oh0; oh <= oh1; ++oh) {
                const int64_t ih = oh * sh - ph + kh * dh;
                const int64_t ibase = ih * W - pw + kw * dw;
                const T* grow = gplane + oh * OW;
                if (diplane) {
                  T* drow = diplane + ibase;
                  for (int64_t ow = ow0; ow <= ow1; ++ow) drow[ow * sw] += wval * grow[ow];
                }
                if (dwbase) {
                  const T* irow = iplane + ibase;
                  for (int64_t ow = ow0; ow <= ow1; ++ow) wacc += grow[ow] * irow[ow * sw];
                }
              }
              if (dwbase) dwbase[kh * KW + kw] += wacc;
            }
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, Size2 kernel, Size2 stride, Size2 pad) {
  RV_CHECK(input.ndim() == 4, "avg_pool2d: expected B x C x H x W input");
  RV_CHECK(kernel.h > 0 && kernel.w > 0 && stride.h > 0 && stride.w > 0 && pad.h >= 0 &&
               pad.w >= 0,
           "avg_pool2d: invalid kernel/stride/pad");
  const int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t OH = (H + 2 * pad.h - kernel.h) / stride.h + 1;
  const int64_t OW = (W + 2 * pad.w - kernel.w) / stride.w + 1;
  RV_CHECK(OH > 0 && OW > 0, "avg_pool2d: zero-size output");
  const T inv_count = T(1) / static_cast<T>(kernel.h * kernel.w);

  Tensor<T> out = Tensor<T>::make_op({B, C, OH, OW}, {input});
  auto ov = out.value_mut();
  auto iv = input.value();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* iplane = iv.data() + bc * H * W;
    T* oplane = ov.data() + bc * OH * OW;
    for (int64_t oh = 0; oh < OH; ++oh) {
      const int64_t ih0 = oh * stride.h - pad.h;
      const int64_t kh0 = std::max<int64_t>(0, -ih0);
      const int64_t kh1 = std::min<int64_t>(kernel.h, H - ih0);
      for (int64_t ow = 0; ow < OW; ++ow) {
        const int64_t iw0 = ow * stride.w - pad.w;
        const int64_t kw0 = std::max<int64_t>(0, -iw0);
        const int64_t kw1 = std::min<int64_t>(kernel.w, W - iw0);
        T acc = T(0);
        for (int64_t kh = kh0; kh < kh1; ++kh) {
          const T* irow = iplane + (ih0 + kh) * W + iw0;
          for (int64_t kw = kw0; kw < kw1; ++kw) acc += irow[kw];
        }
        oplane[oh * OW + ow] = acc * inv_count;
      }
    }
  }
  NodePtr<T> in_n = input.node();
  out.set_backward([in_n, B, C, H, W, OH, OW, kernel, stride, pad,
                    inv_count](detail::TensorNode<T>& self) {
    if (!in_n->requires_grad) return;
    for (int64_t bc = 0; bc < B * C; ++bc) {
      T* dplane = in_n->grad.data() + bc * H * W;
      const T* gplane = self.grad.data() + bc * OH * OW;
      for (int64_t oh = 0; oh < OH; ++oh) {
        const int64_t ih0 = oh * stride.h - pad.h;
        const int64_t kh0 = std::max<int64_t>(0, -ih0);
        const int64_t kh1 = std::min<int64_t>(kernel.h, H - ih0);
        for (int64_t ow = 0; ow < OW; ++ow) {
          const int64_t iw0 = ow * stride.w - pad.w;
          const int64_t kw0 = std::max<int64_t>(0, -iw0);
          const int64_t kw1 = std::min<int64_t>(kernel.w, W - iw0);
          const T g = gplane[oh * OW + ow] * inv_count;
          for (int64_t kh = kh0; kh < kh1; ++kh) {
            T* drow = dplane + (ih0 + kh) * W + iw0;
            for (int64_t kw = kw0; kw < kw1; ++kw) drow[kw] += g;
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& input, int rh, int rw) {
  RV_CHECK(input.ndim() == 4, "pixel_shuffle: expected B x C x H x W input");
  RV_CHECK(rh > 0 && rw > 0, "pixel_shuffle: invalid upscale factors");
  const int64_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  RV_CHECK(Cin % (static_cast<int64_t>(rh) * rw) == 0,
           "pixel_shuffle: " + std::to_string(Cin) + " channels not divisible by " +
               std::to_string(rh * rw));
  const int64_t C = Cin / (static_cast<int64_t>(rh) * rw);
  const int64_t OH = H * rh, OW = W * rw;

  Tensor<T> out = Tensor<T>::make_op({B, C, OH, OW}, {input});
  auto ov = out.value_mut();
  auto iv = input.value();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < rh; ++i)
        for (int64_t j = 0; j < rw; ++j) {
          const T* iplane = iv.data() + ((b * Cin + (c * rh + i) * rw + j)) * H * W;
          for (int64_t h = 0; h < H; ++h) {
            T* orow = ov.data() + ((b * C + c) * OH + h * rh + i) * OW + j;
            const T* irow = iplane + h * W;
            for (int64_t w = 0; w < W; ++w) orow[w * rw] = irow[w];
          }
        }
  NodePtr<T> in_n = input.node();
  out.set_backward([in_n, B, C, Cin, H, W, OH, OW, rh, rw](detail::TensorNode<T>& self) {
    if (!in_n->requires_grad) return;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < rh; ++i)
          for (int64_t j = 0; j < rw; ++j) {
            T* dplane = in_n->grad.data() + ((b * Cin + (c * rh + i) * rw + j)) * H * W;
            for (int64_t h = 0; h < H; ++h) {
              const T* grow = self.grad.data() + ((b * C + c) * OH + h * rh + i) * OW + j;
              T* drow = dplane + h * W;
              for (int64_t w = 0; w < W; ++w) drow[w] += grow[w * rw];
            }
          }
  });
  return out;
}

template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& input, int rh, int rw) {
  RV_CHECK(input.ndim() == 4, "space_to_depth: expected B x C x H x W input");
  RV_CHECK(rh > 0 && rw > 0, "space_to_depth: invalid factors");
  const int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  RV_CHECK(H % rh == 0 && W % rw == 0, "space_to_depth: spatial dims not divisible by factors");
  const int64_t OH = H / rh, OW = W / rw;
  const int64_t Cout = C * rh * rw;

  Tensor<T> out = Tensor<T>::make_op({B, Cout, OH, OW}, {input});
  auto ov = out.value_mut();
  auto iv = input.value();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < rh; ++i)
        for (int64_t j = 0; j < rw; ++j) {
          T* oplane = ov.data() + ((b * Cout + (c * rh + i) * rw + j)) * OH * OW;
          for (int64_t oh = 0; oh < OH; ++oh) {
            const T* irow = iv.data() + ((b * C + c) * H + oh * rh + i) * W + j;
            T* orow = oplane + oh * OW;
            for (int64_t ow = 0; ow < OW; ++ow) orow[ow] = irow[ow * rw];
          }
        }
  NodePtr<T> in_n = input.node();
  out.set_backward([in_n, B, C, Cout, H, W, OH, OW, rh, rw](detail::TensorNode<T>& self) {
    if (!in_n->requires_grad) return;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < rh; ++i)
          for (int64_t j = 0; j < rw; ++j) {
            const T* gplane = self.grad.data() + ((b * Cout + (c * rh + i) * rw + j)) * OH * OW;
            for (int64_t oh = 0; oh < OH; ++oh) {
              T* drow = in_n->grad.data() + ((b * C + c) * H + oh * rh + i) * W + j;
              const T* grow = gplane + oh * OW;
              for (int64_t ow = 0; ow < OW; ++ow) drow[ow * rw] += grow[ow];
            }
          }
  });
  return out;
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, const std::vector<std::array<double, 2>>& coords) {
  RV_CHECK(map.ndim() == 3, "bilinear_sample: expected C x H x W map");
  const int64_t C = map.dim(0), H = map.dim(1), W = map.dim(2);
  RV_CHECK(H > 0 && W > 0, "bilinear_sample: empty map");
  const int64_t N = static_cast<int64_t>(coords.size());

  struct Tap {
    int64_t i0, i1, j0, j1;
    T fy, fx;
  };
  std::vector<Tap> taps(N);
  for (int64_t n = 0; n < N; ++n) {
    const double row = coords[n][0], col = coords[n][1];
    RV_CHECK(std::isfinite(row) && std::isfinite(col),
             "bilinear_sample: non-finite coordinate at point " + std::to_string(n));
    // pixel centers sit at (i + 0.5, j + 0.5)
    double y = std::clamp(row - 0.5, 0.0, static_cast<double>(H - 1));
    double x = std::clamp(col - 0.5, 0.0, static_cast<double>(W - 1));
    int64_t i0 = static_cast<int64_t>(std::floor(y));
    int64_t j0 = static_cast<int64_t>(std::floor(x));
    i0 = std::min(i0, H - 1);
    j0 = std::min(j0, W - 1);
    taps[n] = {i0, std::min(i0 + 1, H - 1), j0, std::min(j0 + 1, W - 1),
               static_cast<T>(y - static_cast<double>(i0)),
               static_cast<T>(x - static_cast<double>(j0))};
  }

  Tensor<T> out = Tensor<T>::make_op({N, C}, {map});
  auto ov = out.value_mut();
  auto mv = map.value();
  for (int64_t n = 0; n < N; ++n) {
    const Tap& t = taps[n];
    const T w00 = (T(1) - t.fy) * (T(1) - t.fx), w01 = (T(1) - t.fy) * t.fx;
    const T w10 = t.fy * (T(1) - t.fx), w11 = t.fy * t.fx;
    for (int64_t c = 0; c < C; ++c) {
      const T* plane = mv.data() + c * H * W;
      ov[n * C + c] = w00 * plane[t.i0 * W + t.j0] + w01 * plane[t.i0 * W + t.j1] +
                      w10 * plane[t.i1 * W + t.j0] + w11 * plane[t.i1 * W + t.j1];
    }
  }
  NodePtr<T> mn = map.node();
  out.set_backward([mn, taps = std::move(taps), C, H, W, N](detail::TensorNode<T>& self) {
    if (!mn->requires_grad) return;
    for (int64_t n = 0; n < N; ++n) {
      const Tap& t = taps[n];
      const T w00 = (T(1) - t.fy) * (T(1) - t.fx), w01 = (T(1) - t.fy) * t.fx;
      const T w10 = t.fy * (T(1) - t.fx), w11 = t.fy * t.fx;
      for (int64_t c = 0; c < C; ++c) {
        const T g = self.grad[n * C + c];
        T* plane = mn->grad.data() + c * H * W;
        plane[t.i0 * W + t.j0] += g * w00;
        plane[t.i0 * W + t.j1] += g * w01;
        plane[t.i1 * W + t.j0] += g * w10;
        plane[t.i1 * W + t.j1] += g * w11;
      }
    }
  });
  return out;
}

namespace {

template <typename T>
Tensor<T> attention_single(const Tensor<T>& x, const AttentionParams<T>& p) {
  const int64_t D = x.dim(1);
  RV_CHECK(p.heads > 0 && D % p.heads == 0,
           "attention_block: dim " + std::to_string(D) + " not divisible by " +
               std::to_string(p.heads) + " heads");
  const int64_t dh = D / p.heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Tensor<T> h = layer_norm(x, p.ln1_gain, p.ln1_bias);
  Tensor<T> qkv = linear(h, p.qkv_weight, p.qkv_bias);  // T x 3D
  Tensor<T> q = slice(qkv, 1, 0, D);
  Tensor<T> k = slice(qkv, 1, D, D);
  Tensor<T> v = slice(qkv, 1, 2 * D, D);

  std::vector<Tensor<T>> head_outs;
  head_outs.reserve(p.heads);
  for (int hd = 0; hd < p.heads; ++hd) {
    Tensor<T> qh = slice(q, 1, hd * dh, dh);
    Tensor<T> kh = slice(k, 1, hd * dh, dh);
    Tensor<T> vh = slice(v, 1, hd * dh, dh);
    Tensor<T> att = softmax(mul_scalar(matmul(qh, permute(kh, {1, 0})), scale));
    head_outs.push_back(matmul(att, vh));
  }
  Tensor<T> merged = p.heads == 1 ? head_outs[0] : concat(head_outs, 1);
  Tensor<T> x1 = add(x, linear(merged, p.proj_weight, p.proj_bias));

  Tensor<T> h2 = layer_norm(x1, p.ln2_gain, p.ln2_bias);
  Tensor<T> f = linear(gelu(linear(h2, p.fc1_weight, p.fc1_bias)), p.fc2_weight, p.fc2_bias);
  return add(x1, f);
}

}  // namespace

template <typename T>
Tensor<T> attention_block(const Tensor<T>& tokens, const AttentionParams<T>& p) {
  if (tokens.ndim() == 2) return attention_single(tokens, p);
  RV_CHECK(tokens.ndim() == 3, "attention_block: expected T x D or B x T x D tokens");
  const int64_t B = tokens.dim(0), Tn = tokens.dim(1), D = tokens.dim(2);
  Tensor<T> flat = reshape(tokens, {B * Tn, D});
  std::vector<Tensor<T>> outs;
  outs.reserve(B);
  for (int64_t b = 0; b < B; ++b)
    outs.push_back(attention_single(slice(flat, 0, b * Tn, Tn), p));
  Tensor<T> cat = B == 1 ? outs[0] : concat(outs, 0);
  return reshape(cat, {B, Tn, D});
}

#define RV_INSTANTIATE_NN(T)                                                                      \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                  Tensor<T>&, Tensor<T>&, bool, T, T);                           \
  template Tensor<T> batch_norm1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                  Tensor<T>&, Tensor<T>&, bool, T, T);                           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                \
                            const Conv2dOpts&);                                                  \
  template Tensor<T> avg_pool2d(const Tensor<T>&, Size2, Size2, Size2);                          \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, int, int);                                  \
  template Tensor<T> space_to_depth(const Tensor<T>&, int, int);                                 \
  template Tensor<T> bilinear_sample(const Tensor<T>&,                                           \
                                     const std::vector<std::array<double, 2>>&);                 \
  template Tensor<T> attention_block(const Tensor<T>&, const AttentionParams<T>&);

RV_INSTANTIATE_NN(float)
RV_INSTANTIATE_NN(double)

#undef RV_INSTANTIATE_NN

}  // namespace rangevit
