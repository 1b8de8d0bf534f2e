// SPDX-License-Identifier: Apache-2.0
#include "eegenc/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "eegenc/errors.hpp"

namespace eegenc::train {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ContractError("train config: batch_size must be positive");
  if (epochs == 0) throw ContractError("train config: epochs must be positive");
  if (!(lr > 0.0)) throw ContractError("train config: lr must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw ContractError("train config: label_smoothing must lie in [0, 1)");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("train config: dropout must lie in [0, 1)");
  if (!(mlp_weight_decay >= 0.0)) throw ContractError("train config: mlp_weight_decay must be non-negative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},           {"epochs", epochs},   {"lr", lr},
          {"label_smoothing", label_smoothing}, {"dropout", dropout}, {"mlp_weight_decay", mlp_weight_decay},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("lr", c.lr);
  get("label_smoothing", c.label_smoothing);
  get("dropout", c.dropout);
  get("mlp_weight_decay", c.mlp_weight_decay);
  get("seed", c.seed);
  return c;
}

// ---- optimizer ----------------------------------------------------------------

void adam_step(std::span<const nn::NamedParameter> params, AdamState& state, double lr, double weight_decay) {
  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first_moment[i].assign(params[i].value.numel(), 0.0);
      state.second_moment[i].assign(params[i].value.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    if (!p.value.has_grad()) throw ContractError("adam_step: parameter " + p.name + " has no gradient");
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor value = params[i].value;
    auto w = value.mutable_data();
    auto g = value.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != w.size()) throw ContractError("adam_step: moment shape mismatch for " + params[i].name);
    const double decay = params[i].group == nn::DecayGroup::mlp_decayed ? lr * weight_decay : 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      w[k] = w[k] - decay * w[k] - lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

// ---- training loop ----------------------------------------------------------------

namespace {

NamedTensors snapshot(const model::EEGEncoder& model) {
  NamedTensors out;
  for (const auto& [name, t] : model.state()) out.emplace_back(name, t.detach());
  return out;
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

TrainResult train(model::EEGEncoder& model, const data::TrialSet& train_set, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.empty()) throw ContractError("train: empty training set");
  train_set.validate();

  model.set_dropout(config.dropout);
  model.reseed_dropout(config.seed * 0x9E3779B97F4A7C15ULL + 1);
  Rng shuffle_rng(config.seed ^ 0x5851F42D4C957F2DULL);
  const auto params = model.parameters().params;
  const std::size_t classes = model.config().n_classes;

  TrainResult result;
  result.best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
      const Tensor x = data::make_batch(train_set, idx);
      const std::vector<int> labels = data::batch_labels(train_set, idx);

      for (const auto& p : params) {
        Tensor handle = p.value;
        handle.clear_grad();
      }
      Tape tape;
      Tensor logits;
      Tensor loss;
      {
        TapeScope scope(tape);
        logits = model.forward(x, true);
        loss = nn::cross_entropy_smoothed(logits, labels, config.label_smoothing);
      }
      tape.backward(loss);
      adam_step(params, result.optimizer, config.lr, config.mlp_weight_decay);

      loss_sum += loss.item() * static_cast<double>(idx.size());
      auto lv = logits.data();
      for (std::size_t b = 0; b < idx.size(); ++b) {
        if (argmax_row(lv.subspan(b * classes, classes)) == static_cast<std::size_t>(labels[b])) ++correct;
      }
    }

    EpochStats stats{epoch, loss_sum / static_cast<double>(order.size()),
                     static_cast<double>(correct) / static_cast<double>(order.size())};
    result.history.push_back(stats);
    if (stats.loss < result.best_loss) {
      result.best_loss = stats.loss;
      result.best_epoch = epoch;
      result.best_state = snapshot(model);
    }
    if (on_epoch && !on_epoch(stats, model)) break;
  }
  for (const auto& p : params) {
    Tensor handle = p.value;
    handle.clear_grad();
  }
  return result;
}

// ---- evaluation ------------------------------------------------------------------

double cohen_kappa(const std::vector<std::vector<std::int64_t>>& confusion) {
  const std::size_t k = confusion.size();
  double n = 0.0;
  double diag = 0.0;
  std::vector<double> rows(k, 0.0);
  std::vector<double> cols(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    if (confusion[i].size() != k) throw DimensionError("cohen_kappa: confusion matrix must be square");
    for (std::size_t j = 0; j < k; ++j) {
      const auto c = static_cast<double>(confusion[i][j]);
      if (c < 0) throw ContractError("cohen_kappa: negative count");
      n += c;
      rows[i] += c;
      cols[j] += c;
      if (i == j) diag += c;
    }
  }
  if (n == 0.0) throw ContractError("cohen_kappa: empty confusion matrix");
  const double observed = diag / n;
  double expected = 0.0;
  for (std::size_t i = 0; i < k; ++i) expected += (rows[i] / n) * (cols[i] / n);
  // All mass on one class for both raters: agreement is total and chance-level alike.
  if (expected >= 1.0) return 1.0;
  return (observed - expected) / (1.0 - expected);
}

EvalReport report_from_confusion(std::vector<std::vector<std::int64_t>> confusion) {
  EvalReport r;
  const std::size_t k = confusion.size();
  std::int64_t diag = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::int64_t row = 0;
    for (std::size_t j = 0; j < confusion[i].size(); ++j) {
      row += confusion[i][j];
      r.total += confusion[i][j];
    }
    diag += confusion[i][i];
    r.per_class_recall.push_back(row > 0 ? static_cast<double>(confusion[i][i]) / static_cast<double>(row) : 0.0);
  }
  if (r.total == 0) throw ContractError("evaluate: no trials");
  r.accuracy = static_cast<double>(diag) / static_cast<double>(r.total);
  r.kappa = cohen_kappa(confusion);
  r.confusion = std::move(confusion);
  return r;
}

std::vector<int> predict(model::EEGEncoder& model, const data::TrialSet& set, std::size_t batch_size) {
  if (set.empty()) throw ContractError("predict: empty trial set");
  NoGradScope no_grad;
  const std::size_t classes = model.config().n_classes;
  std::vector<int> out;
  out.reserve(set.size());
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(set.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor logits = model.forward(data::make_batch(set, idx), false);
    auto lv = logits.data();
    for (std::size_t b = 0; b < idx.size(); ++b) out.push_back(static_cast<int>(argmax_row(lv.subspan(b * classes, classes))));
  }
  return out;
}

EvalReport evaluate(model::EEGEncoder& model, const data::TrialSet& set, std::size_t batch_size) {
  if (set.empty()) throw ContractError("evaluate: empty trial set");
  const std::size_t classes = model.config().n_classes;
  const auto predictions = predict(model, set, batch_size);
  std::vector<std::vector<std::int64_t>> confusion(classes, std::vector<std::int64_t>(classes, 0));
  for (std::size_t i = 0; i < set.size(); ++i) {
    const int truth = set.trials[i].label;
    if (truth < 0 || static_cast<std::size_t>(truth) >= classes) throw LabelRangeError("evaluate: label out of range");
    ++confusion[static_cast<std::size_t>(truth)][static_cast<std::size_t>(predictions[i])];
  }
  return report_from_confusion(std::move(confusion));
}

nlohmann::json EvalReport::to_json() const {
  return {{"confusion", confusion},
          {"accuracy", accuracy},
          {"kappa", kappa},
          {"per_class_recall", per_class_recall},
          {"n_eval", total}};
}

std::string history_csv(const std::vector<EpochStats>& history) {
  std::string out = "epoch,loss,train_acc\n";
  char line[128];
  for (const auto& h : history) {
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g\n", h.epoch, h.loss, h.train_accuracy);
    out += line;
  }
  return out;
}

// ---- checkpoints ----------------------------------------------------------------------

model::Checkpoint make_checkpoint(const model::EEGEncoder& model, const std::optional<data::Scaler>& scaler,
                                  const AdamState* optimizer) {
  model::Checkpoint ck;
  ck.config = model.config();
  for (const auto& [name, t] : model.state()) ck.entries.emplace_back(name, t.detach());
  if (scaler) {
    const std::size_t channels = scaler->mean.size();
    ck.entries.emplace_back("scaler.mean", Tensor({channels}, scaler->mean));
    ck.entries.emplace_back("scaler.std", Tensor({channels}, scaler->std));
    ck.entries.emplace_back("scaler.mode",
                            Tensor::scalar(scaler->mode == data::ScalerMode::per_channel ? 0.0 : 1.0));
  }
  if (optimizer && optimizer->step > 0) {
    const auto params = model.parameters().params;
    ck.entries.emplace_back("adam.step", Tensor::scalar(static_cast<double>(optimizer->step)));
    for (std::size_t i = 0; i < params.size() && i < optimizer->first_moment.size(); ++i) {
      ck.entries.emplace_back("adam.m." + params[i].name,
                              Tensor(params[i].value.shape(), optimizer->first_moment[i]));
      ck.entries.emplace_back("adam.v." + params[i].name,
                              Tensor(params[i].value.shape(), optimizer->second_moment[i]));
    }
  }
  return ck;
}

model::EEGEncoder restore_model(const model::Checkpoint& checkpoint, std::optional<data::Scaler>* scaler) {
  model::EEGEncoder m(checkpoint.config, 0);
  m.load_state(checkpoint.entries);
  if (scaler) {
    scaler->reset();
    const Tensor* mean = checkpoint.find("scaler.mean");
    const Tensor* stdev = checkpoint.find("scaler.std");
    if (mean && stdev) {
      data::Scaler s;
      s.mean.assign(mean->data().begin(), mean->data().end());
      s.std.assign(stdev->data().begin(), stdev->data().end());
      const Tensor* mode = checkpoint.find("scaler.mode");
      s.mode = (mode && mode->item() != 0.0) ? data::ScalerMode::global : data::ScalerMode::per_channel;
      *scaler = std::move(s);
    }
  }
  return m;
}

}  // namespace eegenc::train
