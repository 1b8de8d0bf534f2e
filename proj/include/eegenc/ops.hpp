// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Elementwise binary ops follow numpy
// broadcasting; axes may be negative.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "eegenc/rng.hpp"
#include "eegenc/tensor.hpp"

namespace eegenc {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& x, double s) { return mul_scalar(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return mul_scalar(x, s); }

Tensor exp(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x, int axis = -1);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor permute(const Tensor& x, const std::vector<int>& order);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
// Selects the final element along `axis` and drops that axis.
Tensor index_last(const Tensor& x, int axis);
// Rows of `table` [V, D] gathered by `indices` -> [indices.size(), D].
Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> indices);

// Inverted dropout: scales kept values by 1/(1-p) when training, identity otherwise.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

// [..., m, k] x [..., k, n] -> [..., m, n] with broadcast batch dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dOptions {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_top = 0;
  std::size_t pad_bottom = 0;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  std::size_t dilation_h = 1;
  std::size_t dilation_w = 1;

  static Conv2dOptions symmetric(std::size_t stride_h, std::size_t stride_w, std::size_t pad_h, std::size_t pad_w) {
    return {stride_h, stride_w, pad_h, pad_h, pad_w, pad_w, 1, 1};
  }
};

// Cross-correlation of x [B,Cin,H,W] with w [Cout,Cin,kh,kw] -> [B,Cout,H',W'].
Tensor conv2d(const Tensor& x, const Tensor& w, const Conv2dOptions& options = {});
// Convenience form with symmetric padding.
Tensor conv2d(const Tensor& x, const Tensor& w, std::pair<std::size_t, std::size_t> stride,
              std::pair<std::size_t, std::size_t> padding);

// Windowed mean over [B,C,H,W]; floor-mode output size.
Tensor avg_pool2d(const Tensor& x, std::pair<std::size_t, std::size_t> kernel,
                  std::pair<std::size_t, std::size_t> stride);

}  // namespace eegenc
