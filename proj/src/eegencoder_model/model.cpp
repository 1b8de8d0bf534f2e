// SPDX-License-Identifier: Apache-2.0
#include "eegenc/model.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include "../common/binary_io.hpp"
#include "eegenc/errors.hpp"

namespace eegenc::model {

// ---- config -----------------------------------------------------------------

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ContractError(std::string("model config: ") + name + " must be positive");
  };
  positive(in_channels, "in_channels");
  positive(in_time, "in_time");
  positive(conv1_out, "conv1_out");
  positive(conv1_kernel_t, "conv1_kernel_t");
  positive(conv1_stride, "conv1_stride");
  positive(conv2_out, "conv2_out");
  positive(conv3_out, "conv3_out");
  positive(conv3_kernel_t, "conv3_kernel_t");
  positive(pool_kernel, "pool_kernel");
  positive(pool_stride, "pool_stride");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(n_branches, "n_branches");
  positive(k_clip, "k_clip");
  positive(tcn_blocks, "tcn_blocks");
  positive(tcn_kernel, "tcn_kernel");
  positive(n_classes, "n_classes");
  positive(ffn_hidden, "ffn_hidden");
  if (d_model != conv3_out) {
    throw ContractError("model config: d_model (" + std::to_string(d_model) + ") must equal conv3_out (" +
                        std::to_string(conv3_out) + ")");
  }
  if (d_model % n_heads != 0) throw ContractError("model config: d_model must be divisible by n_heads");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ContractError("model config: dropout_p must lie in [0, 1)");
  if (!(rms_eps > 0.0)) throw ContractError("model config: rms_eps must be positive");
  if (!(elu_alpha > 0.0)) throw ContractError("model config: elu_alpha must be positive");
  if (vanilla_transformer && !use_transformer) {
    throw ContractError("model config: vanilla_transformer requires the transformer pathway");
  }
  if (tcn_blocks >= 32) throw ContractError("model config: tcn_blocks too large");
  projected_length();
}

std::size_t ModelConfig::projected_length() const {
  const std::size_t after_conv1 = (in_time - 1) / conv1_stride + 1;
  auto pool = [&](std::size_t len, const char* stage) {
    if (len < pool_kernel) {
      throw DimensionError(std::string("model config: ") + stage + " sees length " + std::to_string(len) +
                           ", shorter than pool kernel " + std::to_string(pool_kernel));
    }
    return (len - pool_kernel) / pool_stride + 1;
  };
  return pool(pool(after_conv1, "first pool"), "second pool");
}

nlohmann::json ModelConfig::to_json() const {
  return {
      {"in_channels", in_channels},
      {"in_time", in_time},
      {"conv1_out", conv1_out},
      {"conv1_kernel_t", conv1_kernel_t},
      {"conv1_stride", conv1_stride},
      {"conv2_out", conv2_out},
      {"conv3_out", conv3_out},
      {"conv3_kernel_t", conv3_kernel_t},
      {"pool_kernel", pool_kernel},
      {"pool_stride", pool_stride},
      {"dropout_p", dropout_p},
      {"d_model", d_model},
      {"n_layers", n_layers},
      {"n_heads", n_heads},
      {"n_branches", n_branches},
      {"k_clip", k_clip},
      {"tcn_blocks", tcn_blocks},
      {"tcn_kernel", tcn_kernel},
      {"n_classes", n_classes},
      {"ffn_hidden", ffn_hidden},
      {"rms_eps", rms_eps},
      {"elu_alpha", elu_alpha},
      {"swish_beta", swish_beta},
      {"use_transformer", use_transformer},
      {"vanilla_transformer", vanilla_transformer},
      {"shared_head", shared_head},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("in_channels", c.in_channels);
  get("in_time", c.in_time);
  get("conv1_out", c.conv1_out);
  get("conv1_kernel_t", c.conv1_kernel_t);
  get("conv1_stride", c.conv1_stride);
  get("conv2_out", c.conv2_out);
  get("conv3_out", c.conv3_out);
  get("conv3_kernel_t", c.conv3_kernel_t);
  get("pool_kernel", c.pool_kernel);
  get("pool_stride", c.pool_stride);
  get("dropout_p", c.dropout_p);
  get("d_model", c.d_model);
  get("n_layers", c.n_layers);
  get("n_heads", c.n_heads);
  get("n_branches", c.n_branches);
  get("k_clip", c.k_clip);
  get("tcn_blocks", c.tcn_blocks);
  get("tcn_kernel", c.tcn_kernel);
  get("n_classes", c.n_classes);
  get("ffn_hidden", c.ffn_hidden);
  get("rms_eps", c.rms_eps);
  get("elu_alpha", c.elu_alpha);
  get("swish_beta", c.swish_beta);
  get("use_transformer", c.use_transformer);
  get("vanilla_transformer", c.vanilla_transformer);
  get("shared_head", c.shared_head);
  return c;
}

// ---- projector --------------------------------------------------------------

Projector::Projector(const ModelConfig& c, Rng& rng)
    : conv1(nn::uniform_parameter({c.conv1_out, 1, c.conv1_kernel_t, 1},
                                  1.0 / std::sqrt(static_cast<double>(c.conv1_kernel_t)), rng)),
      conv2(nn::uniform_parameter({c.conv2_out, c.conv1_out, 1, c.in_channels},
                                  1.0 / std::sqrt(static_cast<double>(c.conv1_out * c.in_channels)), rng)),
      norm2(c.conv2_out),
      conv3(nn::uniform_parameter({c.conv3_out, c.conv2_out, c.conv3_kernel_t, 1},
                                  1.0 / std::sqrt(static_cast<double>(c.conv2_out * c.conv3_kernel_t)), rng)),
      norm3(c.conv3_out) {}

void Projector::collect(const std::string& prefix, nn::ParameterRefs& refs) const {
  refs.add(prefix + ".conv1.weight", conv1);
  refs.add(prefix + ".conv2.weight", conv2);
  norm2.collect(prefix + ".norm2", refs);
  refs.add(prefix + ".conv3.weight", conv3);
  norm3.collect(prefix + ".norm3", refs);
}

namespace {
// 'same' temporal padding; even kernels put the extra zero at the end.
Conv2dOptions same_temporal(std::size_t kernel, std::size_t stride) {
  Conv2dOptions opt;
  opt.stride_h = stride;
  opt.pad_top = (kernel - 1) / 2;
  opt.pad_bottom = kernel - 1 - opt.pad_top;
  return opt;
}
}  // namespace

Tensor projector_forward(const Tensor& x, Projector& p, const ModelConfig& c, bool training, Rng& rng) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != c.in_time || s[3] != c.in_channels) {
    throw DimensionError("projector: expected input [B,1," + std::to_string(c.in_time) + "," +
                         std::to_string(c.in_channels) + "] (time " + std::to_string(c.in_time) + ", channels " +
                         std::to_string(c.in_channels) + "), got " + shape_str(s));
  }
  const std::pair<std::size_t, std::size_t> pool_k{c.pool_kernel, 1};
  const std::pair<std::size_t, std::size_t> pool_s{c.pool_stride, 1};

  Tensor h = conv2d(x, p.conv1, same_temporal(c.conv1_kernel_t, c.conv1_stride));  // [B,F1,T,C]
  h = conv2d(h, p.conv2);                                                           // [B,F2,T,1]
  h = nn::elu(nn::batch_norm(h, p.norm2, training), c.elu_alpha);
  h = dropout(avg_pool2d(h, pool_k, pool_s), c.dropout_p, training, rng);
  h = conv2d(h, p.conv3, same_temporal(c.conv3_kernel_t, 1));
  h = nn::elu(nn::batch_norm(h, p.norm3, training), c.elu_alpha);
  h = dropout(avg_pool2d(h, pool_k, pool_s), c.dropout_p, training, rng);  // [B,d,T',1]
  const Shape& hs = h.shape();
  return transpose(reshape(h, {hs[0], hs[1], hs[2]}), 1, 2);
}

// ---- dual-stream block -------------------------------------------------------

void DstsBlock::collect(const std::string& prefix, nn::ParameterRefs& refs) const {
  tcn.collect(prefix + ".tcn", refs);
  if (transformer) transformer->collect(prefix + ".transformer", refs);
  if (vanilla) vanilla->collect(prefix + ".vanilla", refs);
  if (head_mlp) head_mlp->collect(prefix + ".head", refs);
}

DstsBlock make_dsts_block(const ModelConfig& c, Rng& rng) {
  DstsBlock block;
  block.tcn = nn::TcnStack(c.tcn_blocks, c.d_model, c.tcn_kernel, c.rms_eps, rng);
  for (auto& b : block.tcn.blocks) b.elu_alpha = c.elu_alpha;
  if (c.use_transformer) {
    if (c.vanilla_transformer) {
      block.vanilla.emplace(c.n_layers, c.d_model, c.n_heads, c.ffn_hidden, c.projected_length(), rng);
    } else {
      block.transformer.emplace(c.n_layers, c.d_model, c.n_heads, c.ffn_hidden, c.k_clip, c.rms_eps, rng);
      for (auto& b : block.transformer->blocks) b.ffn.beta = c.swish_beta;
    }
  }
  if (!c.shared_head) block.head_mlp.emplace(c.d_model, c.n_classes, rng, nn::DecayGroup::mlp_decayed);
  return block;
}

Tensor dsts_features(const Tensor& h, const DstsBlock& block) {
  if (h.rank() != 3) throw DimensionError("dsts: expected [B,T,d], got " + shape_str(h.shape()));
  Tensor features = index_last(nn::tcn_forward(h, block.tcn), 1);
  if (block.transformer) {
    features = features + index_last(nn::stack_forward(h, *block.transformer, nn::AttentionMask::causal), 1);
  } else if (block.vanilla) {
    features = features + index_last(nn::vanilla_forward(h, *block.vanilla, nn::AttentionMask::causal), 1);
  }
  return features;
}

Tensor dsts_forward(const Tensor& h, const DstsBlock& block) {
  if (!block.head_mlp) throw StateError("dsts_forward: block has no head of its own (shared head configured)");
  return nn::linear(dsts_features(h, block), *block.head_mlp);
}

// ---- encoder ----------------------------------------------------------------

Tensor mean_of(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("mean_of: no inputs");
  Tensor acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) acc = acc + parts[i];
  return mul_scalar(acc, 1.0 / static_cast<double>(parts.size()));
}

EEGEncoder::EEGEncoder(const ModelConfig& config, std::uint64_t seed)
    : config_(config), dropout_rng_(seed ^ 0xD1B54A32D192ED03ULL) {
  config_.validate();
  Rng rng(seed);
  projector_ = Projector(config_, rng);
  branches_.reserve(config_.n_branches);
  for (std::size_t i = 0; i < config_.n_branches; ++i) branches_.push_back(make_dsts_block(config_, rng));
  if (config_.shared_head) shared_head_.emplace(config_.d_model, config_.n_classes, rng, nn::DecayGroup::mlp_decayed);
}

void EEGEncoder::set_dropout(double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ContractError("dropout must lie in [0, 1)");
  config_.dropout_p = p;
}

std::vector<Tensor> EEGEncoder::branch_logits(const Tensor& x, bool training) {
  Tensor h = projector_forward(x, projector_, config_, training, dropout_rng_);
  std::vector<Tensor> logits;
  logits.reserve(branches_.size());
  for (const auto& branch : branches_) {
    Tensor features = dsts_features(dropout(h, config_.dropout_p, training, dropout_rng_), branch);
    logits.push_back(nn::linear(features, branch.head_mlp ? *branch.head_mlp : *shared_head_));
  }
  return logits;
}

Tensor EEGEncoder::forward(const Tensor& x, bool training) { return mean_of(branch_logits(x, training)); }

nn::ParameterRefs EEGEncoder::parameters() const {
  nn::ParameterRefs refs;
  projector_.collect("projector", refs);
  for (std::size_t i = 0; i < branches_.size(); ++i) branches_[i].collect("branch" + std::to_string(i), refs);
  if (shared_head_) shared_head_->collect("head", refs);
  return refs;
}

std::size_t EEGEncoder::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters().params) n += p.value.numel();
  return n;
}

std::vector<std::pair<std::string, Tensor>> EEGEncoder::state() const {
  auto refs = parameters();
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& p : refs.params) out.emplace_back(p.name, p.value);
  for (const auto& b : refs.buffers) out.emplace_back(b.name, b.value);
  return out;
}

void EEGEncoder::load_state(const std::vector<std::pair<std::string, Tensor>>& entries) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : entries) by_name[name] = &t;
  for (auto& [name, target] : state()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor " + name);
    if (it->second->shape() != target.shape()) {
      throw ShapeMismatchError("checkpoint tensor " + name + " has shape " + shape_str(it->second->shape()) +
                               ", model expects " + shape_str(target.shape()));
    }
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), target.mutable_data().begin());
  }
}

// ---- checkpoint container ----------------------------------------------------

namespace {
constexpr std::uint8_t kDtypeFloat64 = 1;
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.u32(kCheckpointVersion);
  const std::string config = checkpoint.config.to_json().dump();
  w.u32(static_cast<std::uint32_t>(config.size()));
  w.bytes(config.data(), config.size());
  w.u32(static_cast<std::uint32_t>(checkpoint.entries.size()));
  for (const auto& [name, tensor] : checkpoint.entries) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(kDtypeFloat64);
    w.u32(static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) w.u64(d);
    for (double v : tensor.data()) w.f64(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  char magic[sizeof(kCheckpointMagic)];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw BadMagicError("not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw BadMagicError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const std::uint32_t config_len = r.u32();
  std::string config(config_len, '\0');
  r.bytes(config.data(), config_len);
  try {
    ck.config = ModelConfig::from_json(nlohmann::json::parse(config));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const std::uint8_t dtype = r.u8();
    if (dtype != kDtypeFloat64) throw FormatError("checkpoint tensor " + name + " has unknown dtype tag");
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.u64());
      if (d == 0) throw FormatError("checkpoint tensor " + name + " has a zero dimension");
      numel *= d;
    }
    r.need(numel * 8);
    std::vector<double> values(numel);
    for (double& v : values) v = r.f64();
    ck.entries.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint has trailing bytes");
  return ck;
}

void write_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  detail::write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path)); }

}  // namespace eegenc::model
