#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "mambatrack/tensor.hpp"

namespace mambatrack {

enum class Act { kSilu, kGelu, kSigmoid, kSoftplus };

namespace scalar {

/// Sigmoid clamped so the result is strictly inside (0,1) for all finite x.
inline double sigmoid(double x) {
  if (x > 36.0) x = 36.0;
  if (x < -36.0) x = -36.0;
  return 1.0 / (1.0 + std::exp(-x));
}

/// Softplus floored at the smallest positive double so the (0,inf) range
/// holds even where exp underflows.
inline double softplus(double x) {
  const double y = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  return y > 0.0 ? y : std::numeric_limits<double>::denorm_min();
}

inline double silu(double x) { return x * sigmoid(x); }

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double act(double x, Act kind) {
  switch (kind) {
    case Act::kSilu: return silu(x);
    case Act::kGelu: return gelu(x);
    case Act::kSigmoid: return sigmoid(x);
    case Act::kSoftplus: return softplus(x);
  }
  return x;
}

inline double act_grad(double x, Act kind) {
  switch (kind) {
    case Act::kSilu: {
      const double s = sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case Act::kGelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
      return cdf + x * pdf;
    }
    case Act::kSigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case Act::kSoftplus: return sigmoid(x);
  }
  return 1.0;
}

}  // namespace scalar

namespace ops {

// Elementwise (same shape unless noted).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor abs(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
/// x * s with a 1-element tensor s broadcast over x.
Tensor scale_by(const Tensor& x, const Tensor& s);

Tensor activation(const Tensor& x, Act kind);
inline Tensor silu(const Tensor& x) { return activation(x, Act::kSilu); }
inline Tensor gelu(const Tensor& x) { return activation(x, Act::kGelu); }
inline Tensor sigmoid(const Tensor& x) { return activation(x, Act::kSigmoid); }
inline Tensor softplus(const Tensor& x) { return activation(x, Act::kSoftplus); }

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_rows(const Tensor& x);   // [L,D] -> [D]
Tensor l2_norm(const Tensor& x);     // -> scalar

// Shape moves (all produce fresh storage; recorded as permutations).
Tensor reshape(const Tensor& x, std::vector<int64_t> shape);
Tensor concat_cols(const Tensor& a, const Tensor& b);      // [L,Da],[L,Db] -> [L,Da+Db]
Tensor slice_rows(const Tensor& x, int64_t start, int64_t len);
Tensor reverse_rows(const Tensor& x);
Tensor select(const Tensor& x, int64_t flat_index);        // -> scalar
Tensor stack_scalars(const std::vector<Tensor>& xs);       // k scalars -> [k]
/// [S,S,C] -> [(S/p)^2, p*p*C]; tokens row-major over the patch grid.
Tensor extract_patches(const Tensor& grid, int64_t patch);

/// out[..,j] = sum_i x[..,i] * W[i,j] (+ b[j]). Trailing dim of x must equal
/// W rows; leading dims pass through.
Tensor linear(const Tensor& x, const Tensor& W, const Tensor* b = nullptr);

/// Per-channel 1-D convolution over [L,D] with kernel [K,D]. Causal: left
/// zero padding K-1, out[t] depends on x[t-K+1..t] and kernel[K-1] hits x[t].
/// Non-causal: symmetric padding (K-1)/2.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, bool causal);

/// Per-row normalization over the trailing dimension with affine gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Same-padded 2-D convolution, x [H,W,Cin], kernel [kh,kw,Cin,Cout].
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor* bias = nullptr);

/// x + b with b broadcast over the trailing dimension.
Tensor add_bias(const Tensor& x, const Tensor& b);

}  // namespace ops
}  // namespace mambatrack
