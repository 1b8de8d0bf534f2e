// SPDX-License-Identifier: Apache-2.0
//
// Causal dilated temporal convolution network over [B,T,d] sequences.
#pragma once

#include <optional>
#include <vector>

#include "eegenc/nn.hpp"

namespace eegenc::nn {

// 1-D convolution that only looks backwards: output t sees inputs
// t - (kernel-1)*dilation .. t via (kernel-1)*dilation zeros of left padding.
struct CausalConv1d {
  Tensor weight;  // [out, in, kernel]
  Tensor bias;    // [out]
  std::size_t dilation = 1;

  CausalConv1d() = default;
  CausalConv1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation, Rng& rng);

  std::size_t kernel() const { return weight.shape()[2]; }
  std::size_t left_padding() const { return (kernel() - 1) * dilation; }
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

// x [B,T,in] -> [B,T,out]
Tensor causal_conv1d(const Tensor& x, const CausalConv1d& conv);

struct TcnBlock {
  CausalConv1d conv1;
  CausalConv1d conv2;
  RmsNormLayer norm1;
  RmsNormLayer norm2;
  std::optional<LinearLayer> residual_proj;  // present iff in and out widths differ
  double elu_alpha = 1.0;

  TcnBlock() = default;
  TcnBlock(std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation, double rms_eps, Rng& rng);
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

// elu(norm2(conv2(elu(norm1(conv1(x)))))) + residual(x)
Tensor tcn_block_forward(const Tensor& x, const TcnBlock& block);

struct TcnStack {
  std::vector<TcnBlock> blocks;  // dilations 1, 2, 4, ...

  TcnStack() = default;
  TcnStack(std::size_t blocks, std::size_t width, std::size_t kernel, double rms_eps, Rng& rng);

  // 1 + 2 (k - 1) (2^L - 1) for L blocks of two convolutions each.
  std::size_t receptive_field() const;
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

std::size_t tcn_receptive_field(std::size_t blocks, std::size_t kernel);

Tensor tcn_forward(const Tensor& x, const TcnStack& stack);

}  // namespace eegenc::nn
