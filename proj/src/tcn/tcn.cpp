// SPDX-License-Identifier: Apache-2.0
#include "eegenc/tcn.hpp"

#include <cmath>

#include "eegenc/errors.hpp"

namespace eegenc::nn {

CausalConv1d::CausalConv1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation_, Rng& rng)
    : dilation(dilation_) {
  if (kernel == 0 || dilation == 0) throw ContractError("CausalConv1d: kernel and dilation must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
  weight = uniform_parameter({out, in, kernel}, bound, rng);
  bias = uniform_parameter({out}, bound, rng);
}

void CausalConv1d::collect(const std::string& prefix, ParameterRefs& refs) const {
  refs.add(prefix + ".weight", weight);
  refs.add(prefix + ".bias", bias);
}

Tensor causal_conv1d(const Tensor& x, const CausalConv1d& conv) {
  const Shape& s = x.shape();
  const Shape& ws = conv.weight.shape();
  if (s.size() != 3 || s[2] != ws[1]) {
    throw DimensionError("causal_conv1d: input " + shape_str(s) + " does not match weight " + shape_str(ws));
  }
  // Lay time along H so conv2d's top padding is the causal left padding.
  Tensor planes = reshape(permute(x, {0, 2, 1}), {s[0], s[2], s[1], 1});
  Tensor kernel = reshape(conv.weight, {ws[0], ws[1], ws[2], 1});
  Conv2dOptions opt;
  opt.pad_top = conv.left_padding();
  opt.dilation_h = conv.dilation;
  Tensor y = conv2d(planes, kernel, opt);  // [B,out,T,1]
  return permute(reshape(y, {s[0], ws[0], s[1]}), {0, 2, 1}) + conv.bias;
}

TcnBlock::TcnBlock(std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation, double rms_eps,
                   Rng& rng)
    : conv1(in, out, kernel, dilation, rng),
      conv2(out, out, kernel, dilation, rng),
      norm1(out, rms_eps),
      norm2(out, rms_eps) {
  if (in != out) residual_proj.emplace(in, out, rng);
}

void TcnBlock::collect(const std::string& prefix, ParameterRefs& refs) const {
  conv1.collect(prefix + ".conv1", refs);
  conv2.collect(prefix + ".conv2", refs);
  norm1.collect(prefix + ".norm1", refs);
  norm2.collect(prefix + ".norm2", refs);
  if (residual_proj) residual_proj->collect(prefix + ".residual_proj", refs);
}

Tensor tcn_block_forward(const Tensor& x, const TcnBlock& block) {
  Tensor h = elu(rms_norm(causal_conv1d(x, block.conv1), block.norm1), block.elu_alpha);
  h = elu(rms_norm(causal_conv1d(h, block.conv2), block.norm2), block.elu_alpha);
  return h + (block.residual_proj ? linear(x, *block.residual_proj) : x);
}

TcnStack::TcnStack(std::size_t count, std::size_t width, std::size_t kernel, double rms_eps, Rng& rng) {
  if (count == 0) throw ContractError("TcnStack: at least one block is required");
  blocks.reserve(count);
  std::size_t dilation = 1;
  for (std::size_t i = 0; i < count; ++i, dilation *= 2) blocks.emplace_back(width, width, kernel, dilation, rms_eps, rng);
}

std::size_t tcn_receptive_field(std::size_t blocks, std::size_t kernel) {
  return 1 + 2 * (kernel - 1) * ((std::size_t{1} << blocks) - 1);
}

std::size_t TcnStack::receptive_field() const {
  std::size_t field = 1;
  for (const auto& b : blocks) field += b.conv1.left_padding() + b.conv2.left_padding();
  return field;
}

void TcnStack::collect(const std::string& prefix, ParameterRefs& refs) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), refs);
}

Tensor tcn_forward(const Tensor& x, const TcnStack& stack) {
  if (x.rank() != 3) throw DimensionError("tcn_forward: expected [B,T,d], got " + shape_str(x.shape()));
  Tensor h = x;
  for (const auto& block : stack.blocks) h = tcn_block_forward(h, block);
  return h;
}

}  // namespace eegenc::nn
