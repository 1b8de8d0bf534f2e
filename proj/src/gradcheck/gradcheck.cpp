// SPDX-License-Identifier: Apache-2.0
#include "eegenc/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>

#include "eegenc/attention.hpp"
#include "eegenc/errors.hpp"
#include "eegenc/model.hpp"
#include "eegenc/nn.hpp"
#include "eegenc/ops.hpp"
#include "eegenc/tcn.hpp"

namespace eegenc::gradcheck {

bool SuiteReport::passed() const {
  return std::all_of(cases.begin(), cases.end(), [](const CaseResult& c) { return c.passed; });
}

double SuiteReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& c : cases) worst = std::max(worst, c.max_rel_error);
  return worst;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

Tensor random_leaf(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v), true);
}

namespace {

double weighted_sum(const Tensor& out, const std::vector<double>& weights) {
  auto d = out.data();
  if (d.size() != weights.size()) throw DimensionError("gradcheck: forward changed its output size");
  double s = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) s += d[i] * weights[i];
  return s;
}

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= limit) return idx;
  for (std::size_t i = 0; i < limit; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

CaseResult check_case(const GradCase& gc, const CheckOptions& options) {
  Rng rng(options.seed);
  Problem problem = gc.build(rng);
  CaseResult result;
  result.name = gc.name;

  Tensor probe;
  {
    NoGradScope no_grad;
    probe = problem.forward();
  }
  std::vector<double> weights(probe.numel());
  for (auto& w : weights) w = rng.uniform(-1.0, 1.0);

  for (auto& [name, leaf] : problem.leaves) leaf.clear_grad();
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      const Tensor out = problem.forward();
      loss = sum(mul(out, Tensor(out.shape(), weights)));
    }
    tape.backward(loss);
  }

  auto objective = [&] {
    NoGradScope no_grad;
    return weighted_sum(problem.forward(), weights);
  };

  for (auto& [name, leaf] : problem.leaves) {
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) {
      auto g = leaf.grad();
      analytic.assign(g.begin(), g.end());
    }
    leaf.clear_grad();
    for (std::size_t k : pick_coords(leaf.numel(), options.max_coords, rng)) {
      auto values = leaf.mutable_data();
      const double saved = values[k];
      values[k] = saved + options.step;
      const double plus = objective();
      values = leaf.mutable_data();
      values[k] = saved - options.step;
      const double minus = objective();
      values = leaf.mutable_data();
      values[k] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double err = relative_error(analytic[k], numeric, options.denominator_floor);
      ++result.coords_checked;
      if (result.worst_leaf.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_leaf = name;
      }
    }
  }
  result.passed = std::isfinite(result.max_rel_error) && result.max_rel_error < options.tolerance;
  return result;
}

// ---- suite ------------------------------------------------------------------

namespace {

std::vector<GradCase>& registry() {
  static std::vector<GradCase> extra;
  return extra;
}

using Leaves = std::vector<std::pair<std::string, Tensor>>;

// Re-draws every parameter from U(-1, 1), except norm gains which are drawn
// near one so activations stay well scaled, and lists them as leaves.
Leaves randomized_gains(const nn::ParameterRefs& refs, Rng& rng) {
  Leaves out;
  for (const auto& p : refs.params) {
    Tensor t = p.value;
    const bool is_gain = p.name.ends_with("gain");
    for (auto& v : t.mutable_data()) v = is_gain ? rng.uniform(0.5, 1.5) : rng.uniform(-1.0, 1.0);
    out.emplace_back(p.name, t);
  }
  return out;
}

GradCase unary(std::string name, Shape shape, std::function<Tensor(const Tensor&)> fn) {
  return {std::move(name), [shape, fn](Rng& rng) {
            Tensor x = random_leaf(shape, rng);
            return Problem{{{"x", x}}, [x, fn] { return fn(x); }};
          }};
}

GradCase binary(std::string name, Shape sa, Shape sb, std::function<Tensor(const Tensor&, const Tensor&)> fn) {
  return {std::move(name), [sa, sb, fn](Rng& rng) {
            Tensor a = random_leaf(sa, rng);
            Tensor b = random_leaf(sb, rng);
            return Problem{{{"a", a}, {"b", b}}, [a, b, fn] { return fn(a, b); }};
          }};
}

template <typename Module, typename Make, typename Fwd>
GradCase module_case(std::string name, Shape input, Make make, Fwd fwd) {
  return {std::move(name), [input, make, fwd](Rng& rng) {
            auto module = std::make_shared<Module>(make(rng));
            nn::ParameterRefs refs;
            module->collect("m", refs);
            Leaves leaves = randomized_gains(refs, rng);
            Tensor x = random_leaf(input, rng);
            leaves.insert(leaves.begin(), {"x", x});
            return Problem{std::move(leaves), [module, x, fwd] { return fwd(x, *module); }};
          }};
}

model::ModelConfig miniature_config() {
  model::ModelConfig c;
  c.in_time = 63;
  c.in_channels = 3;
  c.conv2_out = 8;
  c.conv3_out = 8;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_branches = 1;
  c.k_clip = 4;
  c.ffn_hidden = 16;
  c.dropout_p = 0.0;
  return c;
}

GradCase model_case(std::string name, model::ModelConfig config, std::size_t batch) {
  return {std::move(name), [config, batch](Rng& rng) {
            auto m = std::make_shared<model::EEGEncoder>(config, rng.next_u64());
            m->set_dropout(0.0);
            Leaves leaves = randomized_gains(m->parameters(), rng);
            Tensor x = random_leaf({batch, 1, config.in_time, config.in_channels}, rng);
            leaves.insert(leaves.begin(), {"x", x});
            return Problem{std::move(leaves), [m, x] { return m->forward(x, true); }};
          }};
}

}  // namespace

void register_case(GradCase gc) { registry().push_back(std::move(gc)); }
void clear_registered_cases() { registry().clear(); }

bool matches_filter(const std::string& name, const std::string& filter) {
  if (filter.empty() || name == filter) return true;
  return name.size() > filter.size() && name.compare(0, filter.size(), filter) == 0 && name[filter.size()] == '/';
}

std::vector<GradCase> default_suite() {
  using nn::AttentionMask;
  std::vector<GradCase> s;

  // tensor_core
  s.push_back(binary("add", {2, 3, 4}, {3, 1}, [](const Tensor& a, const Tensor& b) { return add(a, b); }));
  s.push_back(binary("sub", {3, 1}, {2, 1, 4}, [](const Tensor& a, const Tensor& b) { return sub(a, b); }));
  s.push_back(binary("mul", {2, 3, 4}, {4}, [](const Tensor& a, const Tensor& b) { return mul(a, b); }));
  s.push_back(unary("add_scalar", {5}, [](const Tensor& x) { return add_scalar(x, 0.7); }));
  s.push_back(unary("mul_scalar", {5}, [](const Tensor& x) { return mul_scalar(x, -1.3); }));
  s.push_back(unary("exp", {2, 3}, [](const Tensor& x) { return exp(x); }));
  s.push_back(unary("sigmoid", {2, 3}, [](const Tensor& x) { return sigmoid(x); }));
  s.push_back(unary("relu", {2, 5}, [](const Tensor& x) { return relu(x); }));
  s.push_back(unary("softmax/last", {3, 4}, [](const Tensor& x) { return softmax(x, -1); }));
  s.push_back(unary("softmax/middle", {2, 3, 4}, [](const Tensor& x) { return softmax(x, 1); }));
  s.push_back(unary("sum/all", {2, 3}, [](const Tensor& x) { return sum(x); }));
  s.push_back(unary("sum/axis", {2, 3, 4}, [](const Tensor& x) { return sum(x, 1, false); }));
  s.push_back(unary("mean/all", {2, 3}, [](const Tensor& x) { return mean(x); }));
  s.push_back(unary("mean/axis", {2, 3, 4}, [](const Tensor& x) { return mean(x, -1, true); }));
  s.push_back(unary("reshape", {2, 6}, [](const Tensor& x) { return reshape(x, {3, 4}); }));
  s.push_back(unary("transpose", {2, 3, 4}, [](const Tensor& x) { return transpose(x, 0, 2); }));
  s.push_back(unary("permute", {2, 3, 4}, [](const Tensor& x) { return permute(x, {1, 2, 0}); }));
  s.push_back(binary("concat", {2, 3}, {2, 2}, [](const Tensor& a, const Tensor& b) { return concat({a, b}, 1); }));
  s.push_back(unary("slice", {4, 5}, [](const Tensor& x) { return slice(x, 1, 1, 3); }));
  s.push_back(unary("index_last", {2, 4, 3}, [](const Tensor& x) { return index_last(x, 1); }));
  s.push_back(unary("embedding_lookup", {5, 3}, [](const Tensor& x) {
    const std::vector<std::int64_t> idx = {0, 4, 4, 2, 0, 1};
    return embedding_lookup(x, idx);
  }));
  s.push_back(unary("dropout", {4, 6}, [](const Tensor& x) {
    Rng masks(99);
    return dropout(x, 0.4, true, masks);
  }));
  s.push_back(binary("matmul/plain", {3, 4}, {4, 2}, [](const Tensor& a, const Tensor& b) { return matmul(a, b); }));
  s.push_back(
      binary("matmul/broadcast", {2, 3, 4}, {4, 5}, [](const Tensor& a, const Tensor& b) { return matmul(a, b); }));
  s.push_back(binary("conv2d/padded", {2, 2, 7, 5}, {3, 2, 3, 2}, [](const Tensor& a, const Tensor& b) {
    Conv2dOptions o;
    o.pad_top = 2;
    o.pad_bottom = 1;
    o.pad_left = 1;
    return conv2d(a, b, o);
  }));
  s.push_back(binary("conv2d/strided_dilated", {1, 2, 9, 4}, {2, 2, 3, 1}, [](const Tensor& a, const Tensor& b) {
    Conv2dOptions o;
    o.stride_h = 2;
    o.dilation_h = 2;
    o.pad_top = 2;
    return conv2d(a, b, o);
  }));
  s.push_back(unary("avg_pool2d", {2, 2, 15, 3}, [](const Tensor& x) { return avg_pool2d(x, {7, 1}, {7, 1}); }));

  // nn_primitives
  s.push_back(module_case<nn::LinearLayer>(
      "linear", {2, 3, 4}, [](Rng& r) { return nn::LinearLayer(4, 5, r); },
      [](const Tensor& x, const nn::LinearLayer& l) { return nn::linear(x, l); }));
  s.push_back(module_case<nn::RmsNormLayer>(
      "rms_norm", {3, 6}, [](Rng&) { return nn::RmsNormLayer(6); },
      [](const Tensor& x, const nn::RmsNormLayer& l) { return nn::rms_norm(x, l); }));
  s.push_back(module_case<nn::LayerNormLayer>(
      "layer_norm", {3, 6}, [](Rng&) { return nn::LayerNormLayer(6); },
      [](const Tensor& x, const nn::LayerNormLayer& l) { return nn::layer_norm(x, l); }));
  s.push_back(module_case<nn::BatchNormLayer>(
      "batch_norm", {3, 2, 4, 2}, [](Rng&) { return nn::BatchNormLayer(2); },
      [](const Tensor& x, const nn::BatchNormLayer& l) {
        auto copy = l;
        return nn::batch_norm(x, copy, true);
      }));
  s.push_back(unary("elu", {3, 4}, [](const Tensor& x) { return nn::elu(x, 1.0); }));
  s.push_back(unary("elu/alpha", {3, 4}, [](const Tensor& x) { return nn::elu(mul_scalar(x, 2.0), 0.5); }));
  s.push_back(unary("swish", {3, 4}, [](const Tensor& x) { return nn::swish(x, 1.0); }));
  s.push_back(module_case<nn::SwiGluFeedForward>(
      "swiglu", {2, 3, 4}, [](Rng& r) { return nn::SwiGluFeedForward(4, 8, r); },
      [](const Tensor& x, const nn::SwiGluFeedForward& f) { return nn::swiglu(x, f.gate, f.value, f.beta); }));
  s.push_back(module_case<nn::SwiGluFeedForward>(
      "feed_forward", {2, 3, 4}, [](Rng& r) { return nn::SwiGluFeedForward(4, 8, r); },
      [](const Tensor& x, const nn::SwiGluFeedForward& f) { return nn::feed_forward(x, f); }));
  s.push_back(unary("cross_entropy_smoothed", {5, 4}, [](const Tensor& x) {
    const std::vector<int> labels = {0, 3, 1, 2, 3};
    return nn::cross_entropy_smoothed(mul_scalar(x, 3.0), labels, 0.1);
  }));
  s.push_back(unary("cross_entropy_smoothed/hard", {3, 4}, [](const Tensor& x) {
    const std::vector<int> labels = {2, 0, 1};
    return nn::cross_entropy_smoothed(x, labels, 0.0);
  }));

  // attention_transformer (d=8, T=5, heads=2)
  s.push_back(module_case<nn::AttentionLayer>(
      "attend/causal", {2, 5, 8}, [](Rng& r) { return nn::AttentionLayer(8, 2, 3, r); },
      [](const Tensor& x, const nn::AttentionLayer& l) { return nn::attend(x, l, AttentionMask::causal); }));
  s.push_back(module_case<nn::AttentionLayer>(
      "attend/unmasked", {2, 5, 8}, [](Rng& r) { return nn::AttentionLayer(8, 2, 3, r); },
      [](const Tensor& x, const nn::AttentionLayer& l) { return nn::attend(x, l, AttentionMask::none); }));
  s.push_back(module_case<nn::TransformerBlock>(
      "transformer_block", {2, 5, 8}, [](Rng& r) { return nn::TransformerBlock(8, 2, 16, 3, 1e-8, r); },
      [](const Tensor& x, const nn::TransformerBlock& b) { return nn::block_forward(x, b, AttentionMask::causal); }));
  s.push_back(module_case<nn::StableTransformer>(
      "transformer_stack", {2, 5, 8}, [](Rng& r) { return nn::StableTransformer(2, 8, 2, 16, 3, 1e-8, r); },
      [](const Tensor& x, const nn::StableTransformer& m) { return nn::stack_forward(x, m, AttentionMask::causal); }));
  s.push_back(module_case<nn::VanillaTransformer>(
      "vanilla_transformer", {2, 5, 8}, [](Rng& r) { return nn::VanillaTransformer(1, 8, 2, 16, 5, r); },
      [](const Tensor& x, const nn::VanillaTransformer& m) {
        return nn::vanilla_forward(x, m, AttentionMask::causal);
      }));

  // tcn
  s.push_back(module_case<nn::CausalConv1d>(
      "causal_conv1d", {2, 6, 3}, [](Rng& r) { return nn::CausalConv1d(3, 4, 3, 2, r); },
      [](const Tensor& x, const nn::CausalConv1d& c) { return nn::causal_conv1d(x, c); }));
  s.push_back(module_case<nn::TcnBlock>(
      "tcn_block/residual_proj", {2, 6, 3}, [](Rng& r) { return nn::TcnBlock(3, 4, 3, 1, 1e-8, r); },
      [](const Tensor& x, const nn::TcnBlock& b) { return nn::tcn_block_forward(x, b); }));
  s.push_back(module_case<nn::TcnStack>(
      "tcn_stack", {2, 6, 4}, [](Rng& r) { return nn::TcnStack(2, 4, 2, 1e-8, r); },
      [](const Tensor& x, const nn::TcnStack& t) { return nn::tcn_forward(x, t); }));

  // eegencoder_model
  {
    auto cfg = miniature_config();
    cfg.in_time = 245;  // T' = 5 so the pathways see more than one step
    s.push_back(module_case<model::DstsBlock>(
        "dsts_block", {2, 5, 8}, [cfg](Rng& r) { return model::make_dsts_block(cfg, r); },
        [](const Tensor& x, const model::DstsBlock& b) { return model::dsts_forward(x, b); }));
    s.push_back(module_case<model::Projector>(
        "projector", {3, 1, 63, 3}, [](Rng& r) { return model::Projector(miniature_config(), r); },
        [](const Tensor& x, const model::Projector& p) {
          auto copy = p;
          Rng unused(0);
          return model::projector_forward(x, copy, miniature_config(), true, unused);
        }));
    s.push_back(model_case("model/longer", cfg, 3));
    auto two = miniature_config();
    two.n_branches = 2;
    two.shared_head = true;
    s.push_back(model_case("model/shared_head", two, 2));
    auto vanilla = miniature_config();
    vanilla.vanilla_transformer = true;
    s.push_back(model_case("model/vanilla", vanilla, 2));
    auto tcn_only = miniature_config();
    tcn_only.use_transformer = false;
    s.push_back(model_case("model/no_transformer", tcn_only, 2));
  }
  s.push_back(model_case("model", miniature_config(), 3));

  for (const auto& extra : registry()) s.push_back(extra);
  return s;
}

SuiteReport run_suite(const std::vector<GradCase>& cases, const CheckOptions& options, const std::string& filter) {
  SuiteReport report;
  const auto start = std::chrono::steady_clock::now();
  for (const auto& gc : cases) {
    if (!matches_filter(gc.name, filter)) continue;
    report.cases.push_back(check_case(gc, options));
  }
  if (report.cases.empty()) throw ContractError("gradcheck: no case matches '" + filter + "'");
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace eegenc::gradcheck
