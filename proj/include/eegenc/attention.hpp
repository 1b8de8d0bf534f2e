// SPDX-License-Identifier: Apache-2.0
//
// Multi-head self-attention with clipped relative-position key biases,
// pre-norm transformer blocks, and the post-norm reference variant used for
// ablations.
#pragma once

#include <cstdint>
#include <vector>

#include "eegenc/nn.hpp"

namespace eegenc::nn {

enum class AttentionMask { causal, none };

// Additive mask [T,T]: 0 where j <= i, -1e30 where j > i.
Tensor causal_mask(std::size_t length);

// Flattened [T*T] row indices into the relative-position table:
// clamp(j - i, -k_clip, k_clip) + k_clip.
std::vector<std::int64_t> relative_position_indices(std::size_t length, std::size_t k_clip);

struct AttentionLayer {
  LinearLayer q_proj;
  LinearLayer k_proj;
  LinearLayer v_proj;
  LinearLayer o_proj;
  std::size_t heads = 1;
  std::size_t k_clip = 0;
  Tensor rel_pos_k_table;  // [2*k_clip+1, d_head]; undefined when relative positions are off

  AttentionLayer() = default;
  AttentionLayer(std::size_t d_model, std::size_t heads, std::size_t k_clip, Rng& rng, bool relative_positions = true);

  std::size_t d_model() const { return q_proj.out_features(); }
  std::size_t d_head() const { return d_model() / heads; }
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

// x [B,T,d] -> [B,T,d]. score(i,j) = q_i . (k_j + a_clip(j-i)) / sqrt(d_head).
Tensor attend(const Tensor& x, const AttentionLayer& layer, AttentionMask mask);

struct TransformerBlock {
  AttentionLayer attn;
  SwiGluFeedForward ffn;
  RmsNormLayer norm1;
  RmsNormLayer norm2;

  TransformerBlock() = default;
  TransformerBlock(std::size_t d_model, std::size_t heads, std::size_t ffn_hidden, std::size_t k_clip, double rms_eps,
                   Rng& rng);
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

// y = x + attend(norm1(x)); out = y + ffn(norm2(y))
Tensor block_forward(const Tensor& x, const TransformerBlock& block, AttentionMask mask);

struct StableTransformer {
  std::vector<TransformerBlock> blocks;
  RmsNormLayer final_norm;

  StableTransformer() = default;
  StableTransformer(std::size_t layers, std::size_t d_model, std::size_t heads, std::size_t ffn_hidden,
                    std::size_t k_clip, double rms_eps, Rng& rng);
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

Tensor stack_forward(const Tensor& x, const StableTransformer& model, AttentionMask mask);

// Reference encoder: learned absolute positions, post-norm LayerNorm, ReLU FFN.
struct VanillaBlock {
  AttentionLayer attn;
  LinearLayer ff_in;
  LinearLayer ff_out;
  LayerNormLayer norm1;
  LayerNormLayer norm2;

  VanillaBlock() = default;
  VanillaBlock(std::size_t d_model, std::size_t heads, std::size_t ffn_hidden, Rng& rng);
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

struct VanillaTransformer {
  Tensor positions;  // [max_length, d_model]
  std::vector<VanillaBlock> blocks;

  VanillaTransformer() = default;
  VanillaTransformer(std::size_t layers, std::size_t d_model, std::size_t heads, std::size_t ffn_hidden,
                     std::size_t max_length, Rng& rng);
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

Tensor vanilla_forward(const Tensor& x, const VanillaTransformer& model, AttentionMask mask);

}  // namespace eegenc::nn
