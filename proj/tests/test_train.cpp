// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "eegenc/errors.hpp"
#include "eegenc/train.hpp"
#include "support.hpp"

using namespace eegenc;
using namespace eegenc::train;
using testing::bit_equal;
using testing::random_tensor;

namespace {

using Confusion = std::vector<std::vector<std::int64_t>>;

// Kappa by expanding the matrix into per-trial labels and counting chance
// agreement over every (true, predicted) pair of trials.
double brute_kappa(const Confusion& m) {
  std::vector<int> truth, pred;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j)
      for (std::int64_t n = 0; n < m[i][j]; ++n) {
        truth.push_back(static_cast<int>(i));
        pred.push_back(static_cast<int>(j));
      }
  const double total = static_cast<double>(truth.size());
  double agree = 0.0, chance_pairs = 0.0;
  for (std::size_t a = 0; a < truth.size(); ++a) {
    agree += truth[a] == pred[a];
    for (std::size_t b = 0; b < pred.size(); ++b) chance_pairs += truth[a] == pred[b];
  }
  const double po = agree / total, pe = chance_pairs / (total * total);
  return (po - pe) / (1.0 - pe);
}

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.in_channels = 4;
  c.in_time = 140;
  c.conv1_out = 4;
  c.conv1_kernel_t = 8;
  c.conv2_out = 8;
  c.conv3_out = 8;
  c.conv3_kernel_t = 4;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_branches = 2;
  c.k_clip = 4;
  c.ffn_hidden = 16;
  return c;
}

data::TrialSet small_data(std::size_t n, std::uint64_t seed) {
  const auto set = data::synth_trials(n, seed, 0.0, {4, 140, 1, data::Session::train_session});
  return data::apply_scaler(set, data::fit_scaler(set));
}

TrainConfig small_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.lr = 0.01;
  t.seed = 5;
  return t;
}

}  // namespace

TEST_SUITE("adam") {
  TEST_CASE("first step moves each weight by about lr against the gradient sign") {
    Rng rng(1);
    Tensor w = random_tensor({3, 4}, rng, -1, 1, true);
    const auto before = testing::values(w);
    w.zero_grad();
    auto g = w.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (i % 2 ? 1.0 : -1.0) * (0.1 + static_cast<double>(i));
    const std::vector<nn::NamedParameter> params = {{"w", w, nn::DecayGroup::undecayed}};
    AdamState state;
    adam_step(params, state, 0.01, 0.5);
    for (std::size_t i = 0; i < before.size(); ++i) {
      const double delta = w.data()[i] - before[i];
      CHECK(std::abs(std::abs(delta) - 0.01) < 1e-8);
      CHECK((delta > 0) == (g[i] < 0));
    }
    CHECK(state.step == 1);
  }

  TEST_CASE("decoupled decay shrinks only the head group") {
    Rng rng(2);
    Tensor head = random_tensor({2, 3}, rng, -1, 1, true);
    Tensor body = random_tensor({5}, rng, -1, 1, true);
    const auto h0 = testing::values(head), b0 = testing::values(body);
    const std::vector<nn::NamedParameter> params = {{"head", head, nn::DecayGroup::mlp_decayed},
                                                    {"body", body, nn::DecayGroup::undecayed}};
    AdamState state;
    const double lr = 0.001, wd = 0.5;
    for (int step = 1; step <= 10; ++step) {
      head.zero_grad();
      body.zero_grad();
      adam_step(params, state, lr, wd);
      const double factor = std::pow(1.0 - lr * wd, step);
      for (std::size_t i = 0; i < h0.size(); ++i) CHECK(std::abs(head.data()[i] - h0[i] * factor) < 1e-12);
      CHECK(bit_equal(body.data(), b0));
    }
  }

  TEST_CASE("zero gradient and zero decay leave parameters unchanged") {
    Rng rng(3);
    Tensor w = random_tensor({4}, rng, -1, 1, true);
    const auto w0 = testing::values(w);
    const std::vector<nn::NamedParameter> params = {{"w", w, nn::DecayGroup::mlp_decayed}};
    AdamState state;
    w.zero_grad();
    adam_step(params, state, 0.1, 0.0);
    CHECK(bit_equal(w.data(), w0));
  }

  TEST_CASE("missing gradients and mismatched state are contract errors") {
    Tensor w = Tensor::zeros({2}, true);
    const std::vector<nn::NamedParameter> params = {{"w", w, nn::DecayGroup::undecayed}};
    AdamState state;
    CHECK_THROWS_AS(adam_step(params, state, 0.1, 0.0), ContractError);
    w.zero_grad();
    adam_step(params, state, 0.1, 0.0);
    Tensor extra = Tensor::zeros({1}, true);
    extra.zero_grad();
    const std::vector<nn::NamedParameter> more = {{"w", w, nn::DecayGroup::undecayed},
                                                  {"x", extra, nn::DecayGroup::undecayed}};
    CHECK_THROWS_AS(adam_step(more, state, 0.1, 0.0), ContractError);
  }
}

TEST_SUITE("metrics") {
  TEST_CASE("kappa matches the brute-force oracle on random matrices") {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t k = 2 + rng.below(4);
      Confusion m(k, std::vector<std::int64_t>(k));
      for (auto& row : m)
        for (auto& v : row) v = static_cast<std::int64_t>(rng.below(9));
      m[0][0] += 1;
      const double kappa = cohen_kappa(m);
      if (std::isfinite(brute_kappa(m))) CHECK(kappa == doctest::Approx(brute_kappa(m)).epsilon(1e-12));
      CHECK(kappa <= 1.0);
      CHECK(kappa >= -1.0);
    }
  }

  TEST_CASE("perfect agreement is kappa 1; balanced classes follow (acc - 1/4) / (3/4)") {
    CHECK(cohen_kappa({{3, 0}, {0, 5}}) == 1.0);
    CHECK(cohen_kappa({{4, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}}) == 1.0);
    const Confusion m = {{62, 3, 4, 3}, {3, 62, 3, 4}, {4, 4, 62, 2}, {3, 3, 3, 63}};
    const EvalReport r = report_from_confusion(m);
    CHECK(r.total == 288);
    CHECK(r.accuracy == doctest::Approx(0.864583).epsilon(1e-6));
    CHECK(r.kappa == doctest::Approx(0.819444).epsilon(1e-6));
    CHECK(std::abs(r.kappa - (r.accuracy - 0.25) / 0.75) < 1e-12);
    CHECK(r.per_class_recall[3] == doctest::Approx(63.0 / 72.0));
    const auto j = r.to_json();
    CHECK(j.at("n_eval") == 288);
    CHECK(j.at("confusion")[2][3] == 2);
    CHECK_THROWS_AS(report_from_confusion({}), ContractError);
    CHECK_THROWS_AS(report_from_confusion({{0, 0}, {0, 0}}), ContractError);
  }

  TEST_CASE("history csv uses round-trip precision") {
    const std::string csv = history_csv({{0, 0.1, 0.5}, {1, 1.0 / 3.0, 1.0}});
    CHECK(csv.rfind("epoch,loss,train_acc\n", 0) == 0);
    CHECK(csv.find("0.33333333333333331") != std::string::npos);
  }
}

TEST_SUITE("config") {
  TEST_CASE("train config validation and json round trip") {
    TrainConfig t;
    t.validate();
    t.seed = 77;
    t.lr = 0.02;
    CHECK(TrainConfig::from_json(t.to_json()).to_json() == t.to_json());
    TrainConfig bad = t;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = t;
    bad.label_smoothing = 1.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = t;
    bad.lr = -1;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = t;
    bad.dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
  }
}

TEST_SUITE("training") {
  TEST_CASE("loss drops over twenty epochs on separable data") {
    model::EEGEncoder model(small_config(), 5);
    const auto result = train::train(model, small_data(16, 1), small_train(21));
    REQUIRE(result.history.size() == 21);
    CHECK(result.history.back().loss < result.history.front().loss);
    CHECK(result.history.front().loss == doctest::Approx(std::log(4.0)).epsilon(0.2));
    CHECK(result.best_loss <= result.history.back().loss);
    CHECK(result.optimizer.step == 21 * 2);
  }

  TEST_CASE("a fixed seed reproduces history and weights bit for bit") {
    const auto set = small_data(12, 2);
    model::EEGEncoder a(small_config(), 5), b(small_config(), 5);
    const auto ra = train::train(a, set, small_train(3));
    const auto rb = train::train(b, set, small_train(3));
    CHECK(history_csv(ra.history) == history_csv(rb.history));
    CHECK(model::encode_checkpoint(make_checkpoint(a, std::nullopt, &ra.optimizer)) ==
          model::encode_checkpoint(make_checkpoint(b, std::nullopt, &rb.optimizer)));
  }

  TEST_CASE("the callback can stop early") {
    model::EEGEncoder model(small_config(), 5);
    std::size_t calls = 0;
    const auto result = train::train(model, small_data(8, 3), small_train(50), [&](const EpochStats& s, model::EEGEncoder&) {
      ++calls;
      return s.epoch < 1;
    });
    CHECK(calls == 2);
    CHECK(result.history.size() == 2);
  }

  TEST_CASE("save, load and evaluate gives the same report") {
    const auto raw = data::synth_trials(12, 4, 0.0, {4, 140, 1, data::Session::train_session});
    const auto scaler = data::fit_scaler(raw);
    const auto set = data::apply_scaler(raw, scaler);
    model::EEGEncoder model(small_config(), 5);
    const auto result = train::train(model, set, small_train(4));
    const EvalReport before = evaluate(model, set, 5);
    CHECK(before.total == 12);
    CHECK(predict(model, set, 64) == predict(model, set, 1));

    const auto bytes = model::encode_checkpoint(make_checkpoint(model, scaler, &result.optimizer));
    std::optional<data::Scaler> loaded_scaler;
    model::EEGEncoder restored = restore_model(model::decode_checkpoint(bytes), &loaded_scaler);
    REQUIRE(loaded_scaler.has_value());
    CHECK(loaded_scaler->mean == scaler.mean);
    CHECK(loaded_scaler->std == scaler.std);
    CHECK(evaluate(restored, set) == before);
    CHECK(bit_equal(restored.forward(data::make_batch(set, {0, 1}), false).data(),
                    model.forward(data::make_batch(set, {0, 1}), false).data()));
  }

  TEST_CASE("empty training or evaluation sets are rejected") {
    model::EEGEncoder model(small_config(), 5);
    CHECK_THROWS_AS(train::train(model, data::TrialSet{}, small_train(1)), ContractError);
    CHECK_THROWS_AS(evaluate(model, data::TrialSet{}), ContractError);
  }
}
