// SPDX-License-Identifier: Apache-2.0
//
// The full encoder: convolutional downsampling projector, parallel
// dropout + dual-stream (TCN / transformer) branches, and per-branch heads
// whose logits are averaged.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eegenc/attention.hpp"
#include "eegenc/nn.hpp"
#include "eegenc/tcn.hpp"

namespace eegenc::model {

struct ModelConfig {
  std::size_t in_channels = 22;
  std::size_t in_time = 1125;
  std::size_t conv1_out = 16;
  std::size_t conv1_kernel_t = 64;
  // 1 reads the "(64,1)" figure annotation as a kernel size; 64 gives the literal stride reading.
  std::size_t conv1_stride = 1;
  std::size_t conv2_out = 32;
  std::size_t conv3_out = 32;
  std::size_t conv3_kernel_t = 16;
  std::size_t pool_kernel = 7;
  std::size_t pool_stride = 7;
  double dropout_p = 0.3;
  std::size_t d_model = 32;
  std::size_t n_layers = 4;
  std::size_t n_heads = 2;
  std::size_t n_branches = 5;
  std::size_t k_clip = 16;
  std::size_t tcn_blocks = 2;
  std::size_t tcn_kernel = 4;
  std::size_t n_classes = 4;
  std::size_t ffn_hidden = 64;
  double rms_eps = 1e-8;
  double elu_alpha = 1.0;
  double swish_beta = 1.0;
  bool use_transformer = true;
  bool vanilla_transformer = false;
  bool shared_head = false;

  // Throws ContractError naming the first violated constraint.
  void validate() const;
  // Temporal length after the conv1 stride and both pools.
  std::size_t projected_length() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

struct Projector {
  Tensor conv1;  // [conv1_out, 1, conv1_kernel_t, 1], no bias
  Tensor conv2;  // [conv2_out, conv1_out, 1, in_channels], no bias
  nn::BatchNormLayer norm2;
  Tensor conv3;  // [conv3_out, conv2_out, conv3_kernel_t, 1], no bias
  nn::BatchNormLayer norm3;

  Projector() = default;
  Projector(const ModelConfig& config, Rng& rng);
  void collect(const std::string& prefix, nn::ParameterRefs& refs) const;
};

// x [B,1,in_time,in_channels] -> [B,T',d_model]
Tensor projector_forward(const Tensor& x, Projector& projector, const ModelConfig& config, bool training, Rng& rng);

struct DstsBlock {
  nn::TcnStack tcn;
  std::optional<nn::StableTransformer> transformer;
  std::optional<nn::VanillaTransformer> vanilla;
  std::optional<nn::LinearLayer> head_mlp;  // absent when the head is shared across branches

  void collect(const std::string& prefix, nn::ParameterRefs& refs) const;
};

DstsBlock make_dsts_block(const ModelConfig& config, Rng& rng);

// Sum of the last-timestep states of both pathways: [B,T',d] -> [B,d].
Tensor dsts_features(const Tensor& h, const DstsBlock& block);
// head_mlp(dsts_features(h)): [B,T',d] -> [B,n_classes]
Tensor dsts_forward(const Tensor& h, const DstsBlock& block);

class EEGEncoder {
 public:
  EEGEncoder(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  Projector& projector() { return projector_; }
  std::vector<DstsBlock>& branches() { return branches_; }
  const std::vector<DstsBlock>& branches() const { return branches_; }
  std::optional<nn::LinearLayer>& shared_head() { return shared_head_; }

  // Dropout probability used at every dropout site.
  void set_dropout(double p);
  // Reseeds the generator that draws dropout masks.
  void reseed_dropout(std::uint64_t seed) { dropout_rng_ = Rng(seed); }
  Rng& dropout_rng() { return dropout_rng_; }

  // Per-branch logits for input x [B,1,in_time,in_channels].
  std::vector<Tensor> branch_logits(const Tensor& x, bool training);
  // Arithmetic mean of the branch logits: [B,n_classes].
  Tensor forward(const Tensor& x, bool training);

  nn::ParameterRefs parameters() const;
  std::size_t parameter_count() const;

  // Named tensors (parameters then buffers) in a fixed order.
  std::vector<std::pair<std::string, Tensor>> state() const;
  // Copies values from named tensors; every model tensor must be present with a matching shape.
  void load_state(const std::vector<std::pair<std::string, Tensor>>& entries);

 private:
  ModelConfig config_;
  Projector projector_;
  std::vector<DstsBlock> branches_;
  std::optional<nn::LinearLayer> shared_head_;
  Rng dropout_rng_;
};

// Mean of branch logits, accumulated in branch order and scaled by 1/n.
Tensor mean_of(const std::vector<Tensor>& parts);

// ---- checkpoint container ---------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'E', 'E', 'G', 'E', 'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> entries;

  const Tensor* find(const std::string& name) const;
};

void write_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::string& path);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

}  // namespace eegenc::model
