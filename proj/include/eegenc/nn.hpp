// SPDX-License-Identifier: Apache-2.0
//
// Activations, normalisation layers, affine maps and the smoothed loss.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "eegenc/ops.hpp"
#include "eegenc/rng.hpp"
#include "eegenc/tensor.hpp"

namespace eegenc::nn {

// Which parameters receive the optimizer's decoupled weight decay.
enum class DecayGroup { mlp_decayed, undecayed };

struct NamedParameter {
  std::string name;
  Tensor value;
  DecayGroup group = DecayGroup::undecayed;
};

// Handles to learnable tensors and to non-learnable state (running stats).
struct ParameterRefs {
  std::vector<NamedParameter> params;
  std::vector<NamedParameter> buffers;

  void add(std::string name, const Tensor& t, DecayGroup group = DecayGroup::undecayed) {
    params.push_back({std::move(name), t, group});
  }
  void add_buffer(std::string name, const Tensor& t) { buffers.push_back({std::move(name), t, DecayGroup::undecayed}); }
};

// Leaf tensor drawn from U(-bound, bound), marked as requiring grad.
Tensor uniform_parameter(Shape shape, double bound, Rng& rng);

struct LinearLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]; undefined when the layer has no bias
  DecayGroup decay_group = DecayGroup::undecayed;

  LinearLayer() = default;
  LinearLayer(std::size_t in, std::size_t out, Rng& rng, DecayGroup group = DecayGroup::undecayed,
              bool with_bias = true);

  std::size_t in_features() const { return weight.shape()[1]; }
  std::size_t out_features() const { return weight.shape()[0]; }
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

// x [..., in] -> [..., out]
Tensor linear(const Tensor& x, const LinearLayer& layer);

struct RmsNormLayer {
  static constexpr double kDefaultEpsilon = 1e-8;

  Tensor gain;  // [d], initialised to ones
  double epsilon = kDefaultEpsilon;

  RmsNormLayer() = default;
  explicit RmsNormLayer(std::size_t dim, double eps = kDefaultEpsilon);
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

// gain * x / sqrt(mean(x^2) + eps), mean over the last axis.
Tensor rms_norm(const Tensor& x, const RmsNormLayer& layer);

// Classic layer normalisation; used only by the post-norm reference transformer.
struct LayerNormLayer {
  Tensor gain;
  Tensor shift;
  double epsilon = 1e-5;

  LayerNormLayer() = default;
  explicit LayerNormLayer(std::size_t dim);
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

Tensor layer_norm(const Tensor& x, const LayerNormLayer& layer);

// Per-channel batch normalisation over [B,C,H,W].
struct BatchNormLayer {
  Tensor gain;          // [C]
  Tensor shift;         // [C]
  Tensor running_mean;  // [C], buffer
  Tensor running_var;   // [C], buffer
  double momentum = 0.1;
  double epsilon = 1e-5;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t channels);
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

// Training mode normalises with batch statistics and updates the running
// estimates; eval mode uses the running estimates.
Tensor batch_norm(const Tensor& x, BatchNormLayer& layer, bool training);

Tensor elu(const Tensor& x, double alpha = 1.0);

// Swish_beta(z) = z * sigmoid(beta * z)
Tensor swish(const Tensor& z, double beta = 1.0);

// Swish_beta(x W + b) ⊙ (x V + c)
Tensor swiglu(const Tensor& x, const LinearLayer& gate, const LinearLayer& value, double beta = 1.0);

// Gated feed-forward block: out_proj(swiglu(x, gate, value)).
struct SwiGluFeedForward {
  LinearLayer gate;
  LinearLayer value;
  LinearLayer out_proj;
  double beta = 1.0;

  SwiGluFeedForward() = default;
  SwiGluFeedForward(std::size_t d_model, std::size_t hidden, Rng& rng);
  void collect(const std::string& prefix, ParameterRefs& refs) const;
};

Tensor feed_forward(const Tensor& x, const SwiGluFeedForward& ffn);

// Mean over the batch of -sum_k q_k log softmax(logits)_k with
// q = (1 - smoothing) * onehot + smoothing / K.
Tensor cross_entropy_smoothed(const Tensor& logits, std::span<const int> labels, double smoothing);

}  // namespace eegenc::nn
