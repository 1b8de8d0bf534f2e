// SPDX-License-Identifier: Apache-2.0
#include "eegenc/nn.hpp"

#include <cmath>
#include <memory>

#include "../tensor_core/gemm.hpp"
#include "eegenc/errors.hpp"

namespace eegenc::nn {

Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(values), true);
}

// ---- linear ----------------------------------------------------------------

LinearLayer::LinearLayer(std::size_t in, std::size_t out, Rng& rng, DecayGroup group, bool with_bias)
    : decay_group(group) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = uniform_parameter({out, in}, bound, rng);
  if (with_bias) bias = uniform_parameter({out}, bound, rng);
}

void LinearLayer::collect(const std::string& prefix, ParameterRefs& refs) const {
  refs.add(prefix + ".weight", weight, decay_group);
  if (bias.defined()) refs.add(prefix + ".bias", bias, decay_group);
}

Tensor linear(const Tensor& x, const LinearLayer& layer) {
  const Shape& sx = x.shape();
  const std::size_t in = layer.in_features();
  const std::size_t out = layer.out_features();
  if (sx.back() != in) {
    throw DimensionError("linear: input " + shape_str(sx) + " does not match weight " +
                         shape_str(layer.weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = sx;
  out_shape.back() = out;

  auto vx = x.data();
  auto vw = layer.weight.data();
  std::vector<double> y(rows * out);
  detail::gemm(false, true, rows, out, in, vx.data(), vw.data(), y.data(), false);
  const bool has_bias = layer.bias.defined();
  if (has_bias) {
    auto vb = layer.bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < out; ++o) y[r * out + o] += vb[o];
    }
  }

  std::vector<Tensor> inputs{x, layer.weight};
  if (has_bias) inputs.push_back(layer.bias);
  const Tensor w = layer.weight;
  return record_op("linear", out_shape, std::move(y), std::move(inputs),
                   [x, w, rows, in, out, has_bias](std::span<const double> g, std::span<const std::span<double>> gin) {
                     if (!gin[0].empty()) {
                       detail::gemm(false, false, rows, in, out, g.data(), w.data().data(), gin[0].data(), true);
                     }
                     if (!gin[1].empty()) {
                       detail::gemm(true, false, out, in, rows, g.data(), x.data().data(), gin[1].data(), true);
                     }
                     if (has_bias && !gin[2].empty()) {
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t o = 0; o < out; ++o) gin[2][o] += g[r * out + o];
                       }
                     }
                   });
}

// ---- RMSNorm ---------------------------------------------------------------

RmsNormLayer::RmsNormLayer(std::size_t dim, double eps) : gain(Tensor::full({dim}, 1.0, true)), epsilon(eps) {
  if (!(eps > 0.0)) throw ContractError("RmsNormLayer: epsilon must be positive");
}

void RmsNormLayer::collect(const std::string& prefix, ParameterRefs& refs) const { refs.add(prefix + ".gain", gain); }

Tensor rms_norm(const Tensor& x, const RmsNormLayer& layer) {
  const std::size_t n = x.shape().back();
  if (layer.gain.numel() != n) {
    throw DimensionError("rms_norm: last dimension of " + shape_str(x.shape()) + " does not match gain " +
                         shape_str(layer.gain.shape()));
  }
  const std::size_t rows = x.numel() / n;
  auto vx = x.data();
  auto vg = layer.gain.data();
  auto inv = std::make_shared<std::vector<double>>(rows);
  std::vector<double> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = vx.data() + r * n;
    double ms = 0.0;
    for (std::size_t i = 0; i < n; ++i) ms += row[i] * row[i];
    ms /= static_cast<double>(n);
    const double s = 1.0 / std::sqrt(ms + layer.epsilon);
    (*inv)[r] = s;
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] = vg[i] * row[i] * s;
  }
  const Tensor gain = layer.gain;
  return record_op("rms_norm", x.shape(), std::move(y), {x, gain},
                   [x, gain, inv, rows, n](std::span<const double> g, std::span<const std::span<double>> gin) {
                     auto vx = x.data();
                     auto vg = gain.data();
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* row = vx.data() + r * n;
                       const double* gr = g.data() + r * n;
                       const double s = (*inv)[r];
                       if (!gin[1].empty()) {
                         for (std::size_t i = 0; i < n; ++i) gin[1][i] += gr[i] * row[i] * s;
                       }
                       if (!gin[0].empty()) {
                         double dot = 0.0;
                         for (std::size_t i = 0; i < n; ++i) dot += gr[i] * vg[i] * row[i];
                         const double c = s * s * s * dot / static_cast<double>(n);
                         double* dx = gin[0].data() + r * n;
                         for (std::size_t i = 0; i < n; ++i) dx[i] += s * gr[i] * vg[i] - c * row[i];
                       }
                     }
                   });
}

// ---- LayerNorm -------------------------------------------------------------

LayerNormLayer::LayerNormLayer(std::size_t dim)
    : gain(Tensor::full({dim}, 1.0, true)), shift(Tensor::zeros({dim}, true)) {}

void LayerNormLayer::collect(const std::string& prefix, ParameterRefs& refs) const {
  refs.add(prefix + ".gain", gain);
  refs.add(prefix + ".shift", shift);
}

Tensor layer_norm(const Tensor& x, const LayerNormLayer& layer) {
  const std::size_t n = x.shape().back();
  if (layer.gain.numel() != n) {
    throw DimensionError("layer_norm: last dimension of " + shape_str(x.shape()) + " does not match gain");
  }
  const std::size_t rows = x.numel() / n;
  auto vx = x.data();
  auto vg = layer.gain.data();
  auto vb = layer.shift.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv = std::make_shared<std::vector<double>>(rows);
  std::vector<double> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = vx.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += row[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(n);
    const double s = 1.0 / std::sqrt(var + layer.epsilon);
    (*inv)[r] = s;
    for (std::size_t i = 0; i < n; ++i) {
      const double h = (row[i] - mu) * s;
      (*xhat)[r * n + i] = h;
      y[r * n + i] = vg[i] * h + vb[i];
    }
  }
  const Tensor gain = layer.gain;
  return record_op("layer_norm", x.shape(), std::move(y), {x, gain, layer.shift},
                   [gain, xhat, inv, rows, n](std::span<const double> g, std::span<const std::span<double>> gin) {
                     auto vg = gain.data();
                     const double dn = static_cast<double>(n);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* gr = g.data() + r * n;
                       const double* h = xhat->data() + r * n;
                       if (!gin[1].empty()) {
                         for (std::size_t i = 0; i < n; ++i) gin[1][i] += gr[i] * h[i];
                       }
                       if (!gin[2].empty()) {
                         for (std::size_t i = 0; i < n; ++i) gin[2][i] += gr[i];
                       }
                       if (!gin[0].empty()) {
                         double sum_d = 0.0;
                         double sum_dh = 0.0;
                         for (std::size_t i = 0; i < n; ++i) {
                           const double d = gr[i] * vg[i];
                           sum_d += d;
                           sum_dh += d * h[i];
                         }
                         double* dx = gin[0].data() + r * n;
                         for (std::size_t i = 0; i < n; ++i) {
                           dx[i] += (*inv)[r] / dn * (dn * gr[i] * vg[i] - sum_d - h[i] * sum_dh);
                         }
                       }
                     }
                   });
}

// ---- BatchNorm -------------------------------------------------------------

BatchNormLayer::BatchNormLayer(std::size_t channels)
    : gain(Tensor::full({channels}, 1.0, true)),
      shift(Tensor::zeros({channels}, true)),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0)) {}

void BatchNormLayer::collect(const std::string& prefix, ParameterRefs& refs) const {
  refs.add(prefix + ".gain", gain);
  refs.add(prefix + ".shift", shift);
  refs.add_buffer(prefix + ".running_mean", running_mean);
  refs.add_buffer(prefix + ".running_var", running_var);
}

Tensor batch_norm(const Tensor& x, BatchNormLayer& layer, bool training) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("batch_norm: expected [B,C,H,W], got " + shape_str(s));
  const std::size_t batch = s[0];
  const std::size_t channels = s[1];
  const std::size_t plane = s[2] * s[3];
  if (layer.gain.numel() != channels) {
    throw DimensionError("batch_norm: " + std::to_string(channels) + " channels but layer has " +
                         std::to_string(layer.gain.numel()));
  }
  const std::size_t count = batch * plane;
  auto vx = x.data();
  auto vg = layer.gain.data();
  auto vb = layer.shift.data();

  std::vector<double> mean(channels);
  std::vector<double> var(channels);
  if (training) {
    if (count < 2) throw ContractError("batch_norm: training mode needs more than one value per channel");
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = vx.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      mean[c] = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = vx.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mean[c]) * (p[i] - mean[c]);
      }
      var[c] = sq / static_cast<double>(count);
    }
    auto rm = layer.running_mean.mutable_data();
    auto rv = layer.running_var.mutable_data();
    const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
    for (std::size_t c = 0; c < channels; ++c) {
      rm[c] = (1.0 - layer.momentum) * rm[c] + layer.momentum * mean[c];
      rv[c] = (1.0 - layer.momentum) * rv[c] + layer.momentum * var[c] * unbias;
    }
  } else {
    auto rm = layer.running_mean.data();
    auto rv = layer.running_var.data();
    std::copy(rm.begin(), rm.end(), mean.begin());
    std::copy(rv.begin(), rv.end(), var.begin());
  }

  auto inv = std::make_shared<std::vector<double>>(channels);
  for (std::size_t c = 0; c < channels; ++c) (*inv)[c] = 1.0 / std::sqrt(var[c] + layer.epsilon);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> y(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (vx[base + i] - mean[c]) * (*inv)[c];
        (*xhat)[base + i] = h;
        y[base + i] = vg[c] * h + vb[c];
      }
    }
  }

  const Tensor gain = layer.gain;
  return record_op(
      "batch_norm", s, std::move(y), {x, gain, layer.shift},
      [gain, xhat, inv, batch, channels, plane, count, training](std::span<const double> g,
                                                                 std::span<const std::span<double>> gin) {
        auto vg = gain.data();
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_g = 0.0;
          double sum_gh = 0.0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g += g[base + i];
              sum_gh += g[base + i] * (*xhat)[base + i];
            }
          }
          if (!gin[1].empty()) gin[1][c] += sum_gh;
          if (!gin[2].empty()) gin[2][c] += sum_g;
          if (gin[0].empty()) continue;
          const double scale = vg[c] * (*inv)[c];
          const double m = static_cast<double>(count);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              if (training) {
                gin[0][base + i] += scale / m * (m * g[base + i] - sum_g - (*xhat)[base + i] * sum_gh);
              } else {
                gin[0][base + i] += scale * g[base + i];
              }
            }
          }
        }
      });
}

// ---- activations -----------------------------------------------------------

Tensor elu(const Tensor& x, double alpha) {
  if (!(alpha > 0.0)) throw ContractError("elu: alpha must be positive");
  auto v = x.data();
  std::vector<double> y(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) y[i] = v[i] > 0.0 ? v[i] : alpha * std::expm1(v[i]);
  return record_op("elu", x.shape(), std::move(y), {x},
                   [x, alpha](std::span<const double> g, std::span<const std::span<double>> gin) {
                     auto v = x.data();
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       gin[0][i] += g[i] * (v[i] > 0.0 ? 1.0 : alpha * std::exp(v[i]));
                     }
                   });
}

Tensor swish(const Tensor& z, double beta) { return mul(z, sigmoid(mul_scalar(z, beta))); }

Tensor swiglu(const Tensor& x, const LinearLayer& gate, const LinearLayer& value, double beta) {
  if (gate.out_features() != value.out_features()) {
    throw DimensionError("swiglu: gate width " + std::to_string(gate.out_features()) + " differs from value width " +
                         std::to_string(value.out_features()));
  }
  return mul(swish(linear(x, gate), beta), linear(x, value));
}

SwiGluFeedForward::SwiGluFeedForward(std::size_t d_model, std::size_t hidden, Rng& rng)
    : gate(d_model, hidden, rng), value(d_model, hidden, rng), out_proj(hidden, d_model, rng) {}

void SwiGluFeedForward::collect(const std::string& prefix, ParameterRefs& refs) const {
  gate.collect(prefix + ".gate", refs);
  value.collect(prefix + ".value", refs);
  out_proj.collect(prefix + ".out_proj", refs);
}

Tensor feed_forward(const Tensor& x, const SwiGluFeedForward& ffn) {
  return linear(swiglu(x, ffn.gate, ffn.value, ffn.beta), ffn.out_proj);
}

// ---- loss ------------------------------------------------------------------

Tensor cross_entropy_smoothed(const Tensor& logits, std::span<const int> labels, double smoothing) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw DimensionError("cross_entropy_smoothed: logits must be [B,K], got " + shape_str(s));
  const std::size_t batch = s[0];
  const std::size_t classes = s[1];
  if (labels.size() != batch) {
    throw ContractError("cross_entropy_smoothed: " + std::to_string(labels.size()) + " labels for batch of " +
                        std::to_string(batch));
  }
  if (!(smoothing >= 0.0 && smoothing < 1.0)) {
    throw ContractError("cross_entropy_smoothed: smoothing must lie in [0, 1)");
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ContractError("cross_entropy_smoothed: label " + std::to_string(label) + " outside [0, " +
                          std::to_string(classes) + ")");
    }
  }
  const double off = smoothing / static_cast<double>(classes);
  const double on = 1.0 - smoothing + off;
  auto v = logits.data();
  auto probs = std::make_shared<std::vector<double>>(v.size());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = v.data() + b * classes;
    double mx = row[0];
    for (std::size_t k = 1; k < classes; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < classes; ++k) z += std::exp(row[k] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t k = 0; k < classes; ++k) {
      const double log_p = row[k] - log_z;
      (*probs)[b * classes + k] = std::exp(log_p);
      const double q = static_cast<std::size_t>(labels[b]) == k ? on : off;
      total -= q * log_p;
    }
  }
  total /= static_cast<double>(batch);
  std::vector<int> targets(labels.begin(), labels.end());
  return record_op("cross_entropy_smoothed", {1}, {total}, {logits},
                   [probs, targets, batch, classes, on, off](std::span<const double> g,
                                                             std::span<const std::span<double>> gin) {
                     const double scale = g[0] / static_cast<double>(batch);
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t k = 0; k < classes; ++k) {
                         const double q = static_cast<std::size_t>(targets[b]) == k ? on : off;
                         gin[0][b * classes + k] += scale * ((*probs)[b * classes + k] - q);
                       }
                     }
                   });
}

}  // namespace eegenc::nn
