#pragma once

#include <array>
#include <vector>

#include "rangevit/tensor.hpp"

namespace rangevit {

// Closed operation set of the autodiff engine. Every op records an exact
// adjoint; gradient accumulation always adds into existing grads.

// ---- elementwise ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
// x^p for x >= 0; d/dx at x == 0 is taken as 0 when p > 1
template <typename T> Tensor<T> pow_scalar(const Tensor<T>& a, T p);

// ---- activations ----
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(0.01));
template <typename T> Tensor<T> gelu(const Tensor<T>& a);  // exact erf form

// ---- shape ----
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm);
template <typename T> Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t len);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

// ---- reductions / row selection ----
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
// rows: N x K, idx[i] in [0, K) -> N (one column picked per row)
template <typename T> Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<int>& idx);
// rows: N x K, take rows idx[i] in [0, N) -> len(idx) x K
template <typename T> Tensor<T> take_rows(const Tensor<T>& a, const std::vector<int>& idx);

// ---- linear algebra ----
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);  // (m,k)x(k,n)
// x: rows x in (higher-rank x is treated as rows = numel/in), w: out x in, b: out or undefined
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// ---- normalization / softmax ----
template <typename T> Tensor<T> softmax(const Tensor<T>& a);      // last axis
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a);  // last axis
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

// Batch normalization. In training mode the batch statistics are used and the
// running buffers (plain leaf tensors, not part of the graph) are updated in
// place with momentum; in eval mode the running statistics are used.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x,  // B x C x H x W
                       const Tensor<T>& gain, const Tensor<T>& bias,
                       Tensor<T>& running_mean, Tensor<T>& running_var,
                       bool training, T momentum = T(0.1), T eps = T(1e-5));
template <typename T>
Tensor<T> batch_norm1d(const Tensor<T>& x,  // N x C
                       const Tensor<T>& gain, const Tensor<T>& bias,
                       Tensor<T>& running_mean, Tensor<T>& running_var,
                       bool training, T momentum = T(0.1), T eps = T(1e-5));

// ---- spatial ----
struct Conv2dOpts {
  Size2 stride{1, 1};
  Size2 pad{0, 0};
  Size2 dilation{1, 1};
};
// input: B x Cin x H x W, weight: Cout x Cin x Kh x Kw, bias: Cout or undefined
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOpts& opts = {});

// average pooling, zero padded, divisor always kernel.h * kernel.w
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, Size2 kernel, Size2 stride, Size2 pad);

// B x (C*rh*rw) x H x W -> B x C x (H*rh) x (W*rw); space_to_depth is the exact inverse
template <typename T> Tensor<T> pixel_shuffle(const Tensor<T>& input, int rh, int rw);
template <typename T> Tensor<T> space_to_depth(const Tensor<T>& input, int rh, int rw);

// map: C x H x W, coords: N continuous (row, col) pairs; pixel (i, j) has its
// center at (i + 0.5, j + 0.5). Coordinates are clamped to the pixel-center
// rectangle before interpolation. Gradient flows into the map only.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, const std::vector<std::array<double, 2>>& coords);

// ---- transformer block ----
template <typename T>
struct AttentionParams {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> qkv_weight, qkv_bias;    // (3D x D), (3D); rows ordered q, k, v
  Tensor<T> proj_weight, proj_bias;  // (D x D), (D)
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> fc1_weight, fc1_bias;  // (Dff x D), (Dff)
  Tensor<T> fc2_weight, fc2_bias;  // (D x Dff), (D)
  int heads = 1;
};

// Pre-norm block: x + proj(MHSA(LN(x))), then x + FFN(LN(x)) with GELU.
// tokens: T x D or B x T x D.
template <typename T>
Tensor<T> attention_block(const Tensor<T>& tokens, const AttentionParams<T>& p);

}  // namespace rangevit
