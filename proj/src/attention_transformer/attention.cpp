// SPDX-License-Identifier: Apache-2.0
#include "eegenc/attention.hpp"

#include <algorithm>
#include <cmath>

#include "eegenc/errors.hpp"

namespace eegenc::nn {

namespace {
constexpr double kMaskValue = -1e30;

// [B,T,d] -> [B,H,T,dh]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const Shape& s = x.shape();
  return permute(reshape(x, {s[0], s[1], heads, s[2] / heads}), {0, 2, 1, 3});
}

// [B,H,T,dh] -> [B,T,d]
Tensor merge_heads(const Tensor& x) {
  const Shape& s = x.shape();
  return reshape(permute(x, {0, 2, 1, 3}), {s[0], s[2], s[1] * s[3]});
}
}  // namespace

Tensor causal_mask(std::size_t length) {
  std::vector<double> values(length * length, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = i + 1; j < length; ++j) values[i * length + j] = kMaskValue;
  }
  return Tensor({length, length}, std::move(values));
}

std::vector<std::int64_t> relative_position_indices(std::size_t length, std::size_t k_clip) {
  const auto k = static_cast<std::int64_t>(k_clip);
  std::vector<std::int64_t> idx(length * length);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j < length; ++j) {
      const std::int64_t rel = static_cast<std::int64_t>(j) - static_cast<std::int64_t>(i);
      idx[i * length + j] = std::clamp(rel, -k, k) + k;
    }
  }
  return idx;
}

AttentionLayer::AttentionLayer(std::size_t d_model, std::size_t heads_, std::size_t k_clip_, Rng& rng,
                               bool relative_positions)
    : q_proj(d_model, d_model, rng),
      k_proj(d_model, d_model, rng),
      v_proj(d_model, d_model, rng),
      o_proj(d_model, d_model, rng),
      heads(heads_),
      k_clip(k_clip_) {
  if (heads == 0 || d_model % heads != 0) {
    throw ContractError("AttentionLayer: d_model " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
  if (relative_positions) {
    const std::size_t dh = d_model / heads;
    rel_pos_k_table = uniform_parameter({2 * k_clip + 1, dh}, 1.0 / std::sqrt(static_cast<double>(dh)), rng);
  }
}

void AttentionLayer::collect(const std::string& prefix, ParameterRefs& refs) const {
  q_proj.collect(prefix + ".q_proj", refs);
  k_proj.collect(prefix + ".k_proj", refs);
  v_proj.collect(prefix + ".v_proj", refs);
  o_proj.collect(prefix + ".o_proj", refs);
  if (rel_pos_k_table.defined()) refs.add(prefix + ".rel_pos_k_table", rel_pos_k_table);
}

Tensor attend(const Tensor& x, const AttentionLayer& layer, AttentionMask mask) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] != layer.d_model()) {
    throw DimensionError("attend: expected [B,T," + std::to_string(layer.d_model()) + "], got " + shape_str(s));
  }
  const std::size_t batch = s[0];
  const std::size_t length = s[1];
  const std::size_t heads = layer.heads;
  const std::size_t dh = layer.d_head();

  Tensor q = split_heads(linear(x, layer.q_proj), heads);
  Tensor k = split_heads(linear(x, layer.k_proj), heads);
  Tensor v = split_heads(linear(x, layer.v_proj), heads);

  Tensor scores = matmul(q, transpose(k, -1, -2));  // [B,H,T,T]
  if (layer.rel_pos_k_table.defined()) {
    const auto idx = relative_position_indices(length, layer.k_clip);
    // rel[t, :, j] = a_clip(j - t), laid out for a per-query-position matmul.
    Tensor rel = transpose(reshape(embedding_lookup(layer.rel_pos_k_table, idx), {length, length, dh}), -1, -2);
    Tensor q_rows = reshape(q, {batch, heads, length, 1, dh});
    scores = scores + reshape(matmul(q_rows, rel), {batch, heads, length, length});
  }
  scores = mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask == AttentionMask::causal) scores = scores + causal_mask(length);

  Tensor weights = softmax(scores, -1);
  return linear(merge_heads(matmul(weights, v)), layer.o_proj);
}

// ---- stable (pre-norm) transformer -----------------------------------------

TransformerBlock::TransformerBlock(std::size_t d_model, std::size_t heads, std::size_t ffn_hidden, std::size_t k_clip,
                                   double rms_eps, Rng& rng)
    : attn(d_model, heads, k_clip, rng),
      ffn(d_model, ffn_hidden, rng),
      norm1(d_model, rms_eps),
      norm2(d_model, rms_eps) {}

void TransformerBlock::collect(const std::string& prefix, ParameterRefs& refs) const {
  attn.collect(prefix + ".attn", refs);
  ffn.collect(prefix + ".ffn", refs);
  norm1.collect(prefix + ".norm1", refs);
  norm2.collect(prefix + ".norm2", refs);
}

Tensor block_forward(const Tensor& x, const TransformerBlock& block, AttentionMask mask) {
  Tensor y = x + attend(rms_norm(x, block.norm1), block.attn, mask);
  return y + feed_forward(rms_norm(y, block.norm2), block.ffn);
}

StableTransformer::StableTransformer(std::size_t layers, std::size_t d_model, std::size_t heads,
                                     std::size_t ffn_hidden, std::size_t k_clip, double rms_eps, Rng& rng)
    : final_norm(d_model, rms_eps) {
  if (layers == 0) throw ContractError("StableTransformer: at least one block is required");
  blocks.reserve(layers);
  for (std::size_t i = 0; i < layers; ++i) blocks.emplace_back(d_model, heads, ffn_hidden, k_clip, rms_eps, rng);
}

void StableTransformer::collect(const std::string& prefix, ParameterRefs& refs) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), refs);
  final_norm.collect(prefix + ".final_norm", refs);
}

Tensor stack_forward(const Tensor& x, const StableTransformer& model, AttentionMask mask) {
  Tensor h = x;
  for (const auto& block : model.blocks) h = block_forward(h, block, mask);
  return rms_norm(h, model.final_norm);
}

// ---- vanilla reference -----------------------------------------------------

VanillaBlock::VanillaBlock(std::size_t d_model, std::size_t heads, std::size_t ffn_hidden, Rng& rng)
    : attn(d_model, heads, 0, rng, false),
      ff_in(d_model, ffn_hidden, rng),
      ff_out(ffn_hidden, d_model, rng),
      norm1(d_model),
      norm2(d_model) {}

void VanillaBlock::collect(const std::string& prefix, ParameterRefs& refs) const {
  attn.collect(prefix + ".attn", refs);
  ff_in.collect(prefix + ".ff_in", refs);
  ff_out.collect(prefix + ".ff_out", refs);
  norm1.collect(prefix + ".norm1", refs);
  norm2.collect(prefix + ".norm2", refs);
}

VanillaTransformer::VanillaTransformer(std::size_t layers, std::size_t d_model, std::size_t heads,
                                       std::size_t ffn_hidden, std::size_t max_length, Rng& rng) {
  if (layers == 0) throw ContractError("VanillaTransformer: at least one block is required");
  positions = uniform_parameter({max_length, d_model}, 0.02, rng);
  blocks.reserve(layers);
  for (std::size_t i = 0; i < layers; ++i) blocks.emplace_back(d_model, heads, ffn_hidden, rng);
}

void VanillaTransformer::collect(const std::string& prefix, ParameterRefs& refs) const {
  refs.add(prefix + ".positions", positions);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), refs);
}

Tensor vanilla_forward(const Tensor& x, const VanillaTransformer& model, AttentionMask mask) {
  const std::size_t length = x.dim(1);
  if (length > model.positions.shape()[0]) {
    throw DimensionError("vanilla_forward: sequence length " + std::to_string(length) + " exceeds position table");
  }
  Tensor h = x + slice(model.positions, 0, 0, length);
  for (const auto& block : model.blocks) {
    Tensor y = layer_norm(h + attend(h, block.attn, mask), block.norm1);
    h = layer_norm(y + linear(relu(linear(y, block.ff_in)), block.ff_out), block.norm2);
  }
  return h;
}

}  // namespace eegenc::nn
