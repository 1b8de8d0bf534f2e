// SPDX-License-Identifier: Apache-2.0
//
// Adam with decoupled, group-selective weight decay; the mini-batch training
// loop; accuracy / Cohen's kappa evaluation.
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eegenc/data.hpp"
#include "eegenc/model.hpp"
#include "eegenc/nn.hpp"

namespace eegenc::train {

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 500;
  double lr = 0.001;
  double label_smoothing = 0.1;
  double dropout = 0.3;
  double mlp_weight_decay = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// One Adam update with bias correction. Parameters in the mlp_decayed group
// additionally shrink by lr * weight_decay * p. Every parameter must carry a
// gradient.
void adam_step(std::span<const nn::NamedParameter> params, AdamState& state, double lr, double weight_decay);

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct TrainResult {
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  double best_loss = 0.0;
  NamedTensors best_state;  // snapshot taken at the lowest epoch loss
  AdamState optimizer;
};

// Return false to stop after the current epoch.
using EpochCallback = std::function<bool(const EpochStats&, model::EEGEncoder&)>;

TrainResult train(model::EEGEncoder& model, const data::TrialSet& train_set, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

struct EvalReport {
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
  double accuracy = 0.0;
  double kappa = 0.0;
  std::vector<double> per_class_recall;
  std::int64_t total = 0;

  nlohmann::json to_json() const;
  bool operator==(const EvalReport&) const = default;
};

// Accuracy, kappa and recall from a confusion matrix.
EvalReport report_from_confusion(std::vector<std::vector<std::int64_t>> confusion);
double cohen_kappa(const std::vector<std::vector<std::int64_t>>& confusion);

std::vector<int> predict(model::EEGEncoder& model, const data::TrialSet& set, std::size_t batch_size = 64);
EvalReport evaluate(model::EEGEncoder& model, const data::TrialSet& set, std::size_t batch_size = 64);

std::string history_csv(const std::vector<EpochStats>& history);

// Model, scaler and (optionally) optimizer moments as one checkpoint.
model::Checkpoint make_checkpoint(const model::EEGEncoder& model, const std::optional<data::Scaler>& scaler,
                                  const AdamState* optimizer = nullptr);
// Rebuilds a model from a checkpoint and returns the stored scaler, if any.
model::EEGEncoder restore_model(const model::Checkpoint& checkpoint, std::optional<data::Scaler>* scaler = nullptr);

}  // namespace eegenc::train
