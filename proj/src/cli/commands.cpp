// SPDX-License-Identifier: Apache-2.0
#include "eegenc/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "eegenc/data.hpp"
#include "eegenc/errors.hpp"
#include "eegenc/gradcheck.hpp"
#include "eegenc/model.hpp"
#include "eegenc/train.hpp"

#ifndef EEGENC_BUILD_ID
#define EEGENC_BUILD_ID "unknown"
#endif

namespace eegenc::cli {

const char* build_id() { return EEGENC_BUILD_ID; }

namespace {

namespace fs = std::filesystem;
using model::ModelConfig;
using train::TrainConfig;

// Checkpoint and data disagree about the trial geometry.
class MismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Options whose values are copied onto a base config only when given on the
// command line, so a manifest can supply the rest.
template <typename Config>
struct Overrides {
  Config staging;
  std::vector<std::pair<CLI::Option*, std::function<void(Config&)>>> setters;

  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& flag, T Config::*field, const std::string& help) {
    auto* opt = app->add_option(flag, staging.*field, help)->capture_default_str();
    setters.emplace_back(opt, [this, field](Config& c) { c.*field = staging.*field; });
    return opt;
  }
  CLI::Option* add_switch(CLI::App* app, const std::string& flag, bool Config::*field, bool value,
                          const std::string& help) {
    auto* opt = app->add_flag(flag, help);
    setters.emplace_back(opt, [field, value](Config& c) { c.*field = value; });
    return opt;
  }
  void apply(Config& c) const {
    for (const auto& [opt, set] : setters) {
      if (opt->count() > 0) set(c);
    }
  }
};

struct ModelFlags : Overrides<ModelConfig> {
  std::size_t d_model = ModelConfig{}.d_model;
  CLI::Option* in_channels = nullptr;
  CLI::Option* in_time = nullptr;
  CLI::Option* d_model_opt = nullptr;

  void attach(CLI::App* app) {
    in_channels = add(app, "--in-channels", &ModelConfig::in_channels, "EEG channels (default: taken from the data)");
    in_time = add(app, "--in-time", &ModelConfig::in_time, "Samples per trial (default: taken from the data)");
    add(app, "--conv1-filters", &ModelConfig::conv1_out, "Temporal convolution filters");
    add(app, "--conv1-kernel", &ModelConfig::conv1_kernel_t, "Temporal convolution kernel length");
    add(app, "--conv1-stride", &ModelConfig::conv1_stride, "Temporal convolution stride");
    add(app, "--conv2-filters", &ModelConfig::conv2_out, "Spatial convolution filters");
    d_model_opt = app->add_option("--d-model", d_model, "Sequence width (third convolution filters)")
                      ->capture_default_str();
    add(app, "--conv3-kernel", &ModelConfig::conv3_kernel_t, "Third convolution kernel length");
    add(app, "--pool-kernel", &ModelConfig::pool_kernel, "Average pooling window");
    add(app, "--pool-stride", &ModelConfig::pool_stride, "Average pooling stride");
    add(app, "--branches", &ModelConfig::n_branches, "Parallel dual-stream branches");
    add(app, "--layers", &ModelConfig::n_layers, "Transformer layers per branch");
    add(app, "--heads", &ModelConfig::n_heads, "Attention heads");
    add(app, "--k-clip", &ModelConfig::k_clip, "Relative position clipping distance");
    add(app, "--tcn-blocks", &ModelConfig::tcn_blocks, "Residual TCN blocks per branch");
    add(app, "--tcn-kernel", &ModelConfig::tcn_kernel, "TCN kernel length");
    add(app, "--ffn-hidden", &ModelConfig::ffn_hidden, "Gated feed-forward hidden width");
    add(app, "--rms-eps", &ModelConfig::rms_eps, "RMSNorm epsilon");
    add(app, "--elu-alpha", &ModelConfig::elu_alpha, "ELU alpha");
    add(app, "--swish-beta", &ModelConfig::swish_beta, "Swish beta inside the gated feed-forward");
    add_switch(app, "--no-transformer-path", &ModelConfig::use_transformer, false,
               "Drop the transformer pathway (TCN only)");
    add_switch(app, "--vanilla-transformer", &ModelConfig::vanilla_transformer, true,
               "Use the post-norm, ReLU, absolute-position transformer");
    add_switch(app, "--shared-head", &ModelConfig::shared_head, true, "Share one classification head across branches");
  }

  void apply_all(ModelConfig& c) const {
    apply(c);
    if (d_model_opt->count() > 0) {
      c.d_model = d_model;
      c.conv3_out = d_model;
    }
  }
};

struct TrainFlags : Overrides<TrainConfig> {
  void attach(CLI::App* app) {
    add(app, "--seed", &TrainConfig::seed, "Seed for initialisation, dropout and batch order");
    add(app, "--epochs", &TrainConfig::epochs, "Training epochs");
    add(app, "--batch-size", &TrainConfig::batch_size, "Mini-batch size");
    add(app, "--lr", &TrainConfig::lr, "Adam learning rate");
    add(app, "--label-smoothing", &TrainConfig::label_smoothing, "Label smoothing factor");
    add(app, "--dropout", &TrainConfig::dropout, "Dropout probability");
    add(app, "--weight-decay", &TrainConfig::mlp_weight_decay, "Decoupled weight decay for the head MLPs");
  }
};

// Where trials come from: a file or the synthetic generator.
struct DataSource {
  std::string path;
  std::size_t synthetic = 0;
  double difficulty = 0.0;
  std::uint64_t seed = 0;
  int subject = -1;
  bool merge_subjects = false;

  nlohmann::json to_json() const {
    nlohmann::json j;
    if (synthetic > 0) {
      j = {{"kind", "synthetic"}, {"trials", synthetic}, {"difficulty", difficulty}, {"seed", seed}};
    } else {
      j = {{"kind", "file"}, {"path", path}};
    }
    j["subject"] = subject;
    j["merge_subjects"] = merge_subjects;
    return j;
  }
  static DataSource from_json(const nlohmann::json& j) {
    DataSource d;
    if (j.at("kind") == "synthetic") {
      d.synthetic = j.at("trials").get<std::size_t>();
      d.difficulty = j.at("difficulty").get<double>();
      d.seed = j.at("seed").get<std::uint64_t>();
    } else {
      d.path = j.at("path").get<std::string>();
    }
    d.subject = j.value("subject", -1);
    d.merge_subjects = j.value("merge_subjects", false);
    return d;
  }

  data::TrialSet load() const {
    if (synthetic > 0) return data::synth_trials(synthetic, seed, difficulty);
    if (path.empty()) throw UsageError("no data: pass --data FILE or --synthetic N");
    return data::load_trialset(path);
  }
};

data::TrialSet pick_subject(const data::TrialSet& set, int subject, bool merge) {
  if (subject >= 0) {
    auto out = data::select(set, std::nullopt, subject);
    if (out.empty()) throw IoError("data has no trials for subject " + std::to_string(subject));
    return out;
  }
  std::set<int> subjects;
  for (const auto& t : set.trials) subjects.insert(t.subject_id);
  if (subjects.size() > 1 && !merge) {
    throw UsageError("data holds " + std::to_string(subjects.size()) +
                     " subjects; pass --subject ID or --merge-subjects");
  }
  return set;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// Adopts the data geometry unless the user fixed it, in which case it must agree.
void fit_geometry(ModelConfig& cfg, const data::TrialSet& set, bool channels_fixed, bool time_fixed) {
  const std::size_t channels = set.channels();
  const std::size_t samples = set.samples();
  if (channels_fixed && cfg.in_channels != channels) {
    throw MismatchError("data has " + std::to_string(channels) + " channels, model expects " +
                        std::to_string(cfg.in_channels));
  }
  if (time_fixed && cfg.in_time != samples) {
    throw MismatchError("data has " + std::to_string(samples) + " samples per trial, model expects " +
                        std::to_string(cfg.in_time));
  }
  cfg.in_channels = channels;
  cfg.in_time = samples;
}

// ---- train ----------------------------------------------------------------------

struct TrainCommand {
  ModelFlags model_flags;
  TrainFlags train_flags;
  DataSource source;
  CLI::Option* data_opts[5] = {};
  CLI::Option* data_seed_opt = nullptr;
  std::uint64_t data_seed = 0;
  std::string manifest;
  std::string out_dir;
  std::size_t log_every = 1;
  bool quiet = false;

  void attach(CLI::App* app) {
    data_opts[0] = app->add_option("--data", source.path, "EEGTRIAL1 file with training trials");
    data_opts[1] = app->add_option("--synthetic", source.synthetic, "Train on N synthetic trials instead of a file");
    data_opts[2] = app->add_option("--difficulty", source.difficulty, "Noise level of synthetic trials")
                       ->capture_default_str();
    data_opts[3] = app->add_option("--subject", source.subject, "Train on one subject's trials");
    data_opts[4] = app->add_flag("--merge-subjects", source.merge_subjects, "Pool every subject's trials");
    data_seed_opt = app->add_option("--data-seed", data_seed, "Seed for synthetic trials (default: --seed)");
    app->add_option("--manifest", manifest, "Re-run from a manifest.json written by an earlier run");
    app->add_option("--out", out_dir, "Output directory")->required();
    app->add_option("--log-every", log_every, "Print every Nth epoch")->capture_default_str();
    app->add_flag("--quiet", quiet, "Only print the final summary");
    model_flags.attach(app);
    train_flags.attach(app);
  }

  int run(std::ostream& out) {
    ModelConfig mcfg;
    TrainConfig tcfg;
    DataSource src;
    bool have_manifest = false;
    if (!manifest.empty()) {
      const auto j = read_json(manifest);
      try {
        mcfg = ModelConfig::from_json(j.at("model"));
        tcfg = TrainConfig::from_json(j.at("train"));
        src = DataSource::from_json(j.at("data"));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(manifest + ": " + e.what());
      }
      have_manifest = true;
    }
    model_flags.apply_all(mcfg);
    train_flags.apply(tcfg);
    mcfg.dropout_p = tcfg.dropout;

    const bool data_given = std::any_of(std::begin(data_opts), std::end(data_opts),
                                        [](const CLI::Option* o) { return o->count() > 0; });
    if (data_given || !have_manifest) {
      src = source;
      src.seed = data_seed_opt->count() > 0 ? data_seed : tcfg.seed;
    }
    if (!src.path.empty() && src.synthetic > 0) throw UsageError("pass either --data or --synthetic, not both");
    tcfg.validate();

    data::TrialSet all = pick_subject(src.load(), src.subject, src.merge_subjects);
    data::TrialSet train_set = data::select(all, data::Session::train_session);
    if (train_set.empty()) throw IoError("data has no train-session trials");
    fit_geometry(mcfg, train_set, model_flags.in_channels->count() > 0 || have_manifest,
                 model_flags.in_time->count() > 0 || have_manifest);
    mcfg.validate();

    const data::Scaler scaler = data::fit_scaler(train_set);
    const data::TrialSet scaled = data::apply_scaler(train_set, scaler);

    model::EEGEncoder net(mcfg, tcfg.seed);
    if (!quiet) {
      out << "training " << net.parameter_count() << " parameters on " << scaled.size() << " trials ("
          << scaled.channels() << " x " << scaled.samples() << ")\n";
    }
    auto log = [&](const train::EpochStats& s, model::EEGEncoder&) {
      if (!quiet && (s.epoch % std::max<std::size_t>(log_every, 1) == 0 || s.epoch + 1 == tcfg.epochs)) {
        char line[128];
        std::snprintf(line, sizeof(line), "epoch %4zu  loss %.6f  train_acc %.4f\n", s.epoch, s.loss,
                      s.train_accuracy);
        out << line << std::flush;
      }
      return true;
    };
    const train::TrainResult result = train::train(net, scaled, tcfg, log);

    const fs::path dir(out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    model::write_checkpoint((dir / "checkpoint.bin").string(), train::make_checkpoint(net, scaler, &result.optimizer));
    model::EEGEncoder best(mcfg, tcfg.seed);
    best.load_state(result.best_state);
    model::write_checkpoint((dir / "checkpoint_best.bin").string(), train::make_checkpoint(best, scaler));
    write_text(dir / "history.csv", train::history_csv(result.history));

    nlohmann::json run_manifest = {{"build_id", build_id()},
                                   {"command", "train"},
                                   {"seed", tcfg.seed},
                                   {"model", mcfg.to_json()},
                                   {"train", tcfg.to_json()},
                                   {"data", src.to_json()},
                                   {"outputs",
                                    {{"checkpoint", "checkpoint.bin"},
                                     {"best_checkpoint", "checkpoint_best.bin"},
                                     {"history", "history.csv"}}}};
    write_text(dir / "manifest.json", run_manifest.dump(2) + "\n");

    const auto& last = result.history.back();
    char line[160];
    std::snprintf(line, sizeof(line), "done: %zu epochs, final loss %.6f, train_acc %.4f, best loss %.6f at epoch %zu\n",
                  result.history.size(), last.loss, last.train_accuracy, result.best_loss, result.best_epoch);
    out << line;
    return kOk;
  }
};

// ---- eval -------------------------------------------------------------------------

struct EvalCommand {
  std::string checkpoint;
  DataSource source;
  std::string session = "eval";
  CLI::Option* session_opt = nullptr;
  std::string out_path;
  std::size_t batch_size = 64;

  void attach(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required();
    app->add_option("--data", source.path, "EEGTRIAL1 file with evaluation trials");
    app->add_option("--synthetic", source.synthetic, "Evaluate on N synthetic trials");
    app->add_option("--difficulty", source.difficulty, "Noise level of synthetic trials")->capture_default_str();
    app->add_option("--seed", source.seed, "Seed for synthetic trials")->capture_default_str();
    app->add_option("--subject", source.subject, "Evaluate one subject's trials");
    app->add_flag("--merge-subjects", source.merge_subjects, "Pool every subject's trials");
    session_opt = app->add_option("--session", session, "Trials to score: train, eval or all (file data only)")
                      ->check(CLI::IsMember({"train", "eval", "all"}))
                      ->capture_default_str();
    app->add_option("--batch-size", batch_size, "Inference batch size")->capture_default_str();
    app->add_option("--out", out_path, "Also write the report JSON here");
  }

  int run(std::ostream& out) {
    if (!source.path.empty() && source.synthetic > 0) throw UsageError("pass either --data or --synthetic, not both");
    if (batch_size == 0) throw UsageError("--batch-size must be positive");
    const model::Checkpoint ck = model::read_checkpoint(checkpoint);
    std::optional<data::Scaler> scaler;
    model::EEGEncoder net = train::restore_model(ck, &scaler);

    data::TrialSet set = pick_subject(source.load(), source.subject, source.merge_subjects);
    const bool filter_session = source.synthetic == 0 || session_opt->count() > 0;
    if (filter_session && session != "all") set = data::select(set, data::parse_session(session));
    if (set.empty()) throw IoError("no trials to evaluate");
    set.validate();
    const auto& cfg = net.config();
    if (set.channels() != cfg.in_channels || set.samples() != cfg.in_time) {
      throw MismatchError("data trials are " + std::to_string(set.channels()) + " x " + std::to_string(set.samples()) +
                          " but the checkpoint expects " + std::to_string(cfg.in_channels) + " x " +
                          std::to_string(cfg.in_time));
    }
    if (scaler) {
      if (scaler->mean.size() != set.channels()) throw MismatchError("checkpoint scaler does not match the channels");
      set = data::apply_scaler(set, *scaler);
    }
    const train::EvalReport report = train::evaluate(net, set, batch_size);
    nlohmann::json j = report.to_json();
    j["checkpoint"] = checkpoint;
    const std::string text = j.dump(2) + "\n";
    out << text;
    if (!out_path.empty()) write_text(out_path, text);
    return kOk;
  }
};

// ---- gradcheck -------------------------------------------------------------------

struct GradcheckCommand {
  std::string op;
  gradcheck::CheckOptions options;
  bool list = false;

  void attach(CLI::App* app) {
    app->add_option("--op", op, "Only check this op (or its op/variant cases)");
    app->add_option("--max-coords", options.max_coords, "Coordinates sampled per tensor")->capture_default_str();
    app->add_option("--seed", options.seed, "Seed for inputs and sampled coordinates")->capture_default_str();
    app->add_flag("--list", list, "List case names and exit");
  }

  int run(std::ostream& out, std::ostream& err) {
    const auto cases = gradcheck::default_suite();
    if (list) {
      for (const auto& c : cases) out << c.name << "\n";
      return kOk;
    }
    const auto report = gradcheck::run_suite(cases, options, op);
    std::vector<std::string> failed;
    for (const auto& c : report.cases) {
      char line[200];
      std::snprintf(line, sizeof(line), "%-28s max_rel_err %.3e  coords %4zu  %s\n", c.name.c_str(), c.max_rel_error,
                    c.coords_checked, c.passed ? "ok" : "FAIL");
      out << line;
      if (!c.passed) failed.push_back(c.name + " (" + c.worst_leaf + ")");
    }
    char summary[160];
    std::snprintf(summary, sizeof(summary), "%zu cases, worst %.3e, tolerance %.0e, %.2f s\n", report.cases.size(),
                  report.max_rel_error(), options.tolerance, report.seconds);
    out << summary;
    if (failed.empty()) return kOk;
    err << "gradient check failed for:";
    for (const auto& f : failed) err << " " << f;
    err << "\n";
    return kCheckFailed;
  }
};

// ---- convert / synth -----------------------------------------------------------

struct ConvertCommand {
  std::string manifest;
  std::string out_path;

  void attach(CLI::App* app) {
    app->add_option("--manifest", manifest, "JSON manifest listing one CSV per trial")->required();
    app->add_option("--out", out_path, "EEGTRIAL1 file to write")->required();
  }

  int run(std::ostream& out) {
    const auto set = data::import_csv(manifest);
    data::save_trialset(out_path, set);
    out << "wrote " << set.size() << " trials (" << (set.empty() ? 0 : set.channels()) << " x "
        << (set.empty() ? 0 : set.samples()) << ") to " << out_path << "\n";
    return kOk;
  }
};

struct SynthCommand {
  std::size_t n = 64;
  std::size_t eval_trials = 0;
  std::uint64_t seed = 0;
  double difficulty = 0.0;
  data::SynthOptions options;
  std::string session = "train";
  std::string out_path;

  void attach(CLI::App* app) {
    app->add_option("--n", n, "Trials to generate")->capture_default_str();
    app->add_option("--eval-trials", eval_trials, "Additional eval-session trials")->capture_default_str();
    app->add_option("--seed", seed, "Generator seed")->capture_default_str();
    app->add_option("--difficulty", difficulty, "Gaussian noise standard deviation")->capture_default_str();
    app->add_option("--channels", options.channels, "Channels per trial")->capture_default_str();
    app->add_option("--samples", options.samples, "Samples per trial")->capture_default_str();
    app->add_option("--subject", options.subject_id, "Subject id stored with each trial")->capture_default_str();
    app->add_option("--session", session, "Session tag of the --n trials: train or eval")
        ->check(CLI::IsMember({"train", "eval"}))
        ->capture_default_str();
    app->add_option("--out", out_path, "EEGTRIAL1 file to write")->required();
  }

  int run(std::ostream& out) {
    data::SynthOptions opts = options;
    opts.session = data::parse_session(session);
    data::TrialSet set = data::synth_trials(n, seed, difficulty, opts);
    if (eval_trials > 0) {
      opts.session = data::Session::eval_session;
      auto extra = data::synth_trials(eval_trials, seed + 1, difficulty, opts);
      set.trials.insert(set.trials.end(), extra.trials.begin(), extra.trials.end());
    }
    data::save_trialset(out_path, set);
    out << "wrote " << set.size() << " synthetic trials to " << out_path << "\n";
    return kOk;
  }
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"EEG motor-imagery sequence classifier", "eegencoder"};
  app.require_subcommand(1);
  app.set_version_flag("--version", build_id());

  TrainCommand train_cmd;
  EvalCommand eval_cmd;
  GradcheckCommand grad_cmd;
  ConvertCommand convert_cmd;
  SynthCommand synth_cmd;
  auto* train_app = app.add_subcommand("train", "Train a model and write checkpoint, history and manifest");
  auto* eval_app = app.add_subcommand("eval", "Score a checkpoint on trials and report accuracy and kappa");
  auto* grad_app = app.add_subcommand("gradcheck", "Compare autodiff gradients with finite differences");
  auto* convert_app = app.add_subcommand("convert", "Convert CSV trials listed in a manifest to EEGTRIAL1");
  auto* synth_app = app.add_subcommand("synth", "Write synthetic class-conditional trials as EEGTRIAL1");
  train_cmd.attach(train_app);
  eval_cmd.attach(eval_app);
  grad_cmd.attach(grad_app);
  convert_cmd.attach(convert_app);
  synth_cmd.attach(synth_app);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (train_app->parsed()) return train_cmd.run(out);
    if (eval_app->parsed()) return eval_cmd.run(out);
    if (grad_app->parsed()) return grad_cmd.run(out, err);
    if (convert_app->parsed()) return convert_cmd.run(out);
    if (synth_app->parsed()) return synth_cmd.run(out);
  } catch (const MismatchError& e) {
    err << "error: " << e.what() << "\n";
    return kMismatch;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kConfigError;
}

int main_entry(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace eegenc::cli
