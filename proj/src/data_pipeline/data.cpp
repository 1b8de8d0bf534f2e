// SPDX-License-Identifier: Apache-2.0
#include "eegenc/data.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "../common/binary_io.hpp"
#include "eegenc/errors.hpp"
#include "eegenc/rng.hpp"

namespace eegenc::data {

const char* session_name(Session s) { return s == Session::train_session ? "train" : "eval"; }

Session parse_session(const std::string& name) {
  if (name == "train" || name == "train_session" || name == "0") return Session::train_session;
  if (name == "eval" || name == "eval_session" || name == "1") return Session::eval_session;
  throw ContractError("unknown session '" + name + "' (expected train or eval)");
}

std::size_t TrialSet::channels() const {
  if (trials.empty()) throw ContractError("empty trial set has no shape");
  return trials.front().signal.shape()[0];
}

std::size_t TrialSet::samples() const {
  if (trials.empty()) throw ContractError("empty trial set has no shape");
  return trials.front().signal.shape()[1];
}

void TrialSet::validate() const {
  if (trials.empty()) return;
  const Shape& first = trials.front().signal.shape();
  if (first.size() != 2) throw ShapeMismatchError("trial signal must be [channels, samples]");
  for (std::size_t i = 0; i < trials.size(); ++i) {
    if (trials[i].signal.shape() != first) {
      throw ShapeMismatchError("trial " + std::to_string(i) + " has shape " + shape_str(trials[i].signal.shape()) +
                               ", expected " + shape_str(first));
    }
    if (trials[i].label < 0 || trials[i].label >= kNumClasses) {
      throw LabelRangeError("trial " + std::to_string(i) + " has label " + std::to_string(trials[i].label));
    }
  }
}

// ---- scaling ------------------------------------------------------------------

Scaler fit_scaler(const TrialSet& set, ScalerMode mode) {
  std::vector<const Trial*> train;
  for (const auto& t : set.trials) {
    if (t.session == Session::train_session) train.push_back(&t);
  }
  if (train.empty()) throw ContractError("fit_scaler: no train-session trials");
  const std::size_t channels = train.front()->signal.shape()[0];
  const std::size_t samples = train.front()->signal.shape()[1];

  std::vector<double> sum(channels, 0.0);
  for (const Trial* t : train) {
    if (t->signal.shape() != Shape{channels, samples}) throw ShapeMismatchError("fit_scaler: inconsistent trial shapes");
    auto v = t->signal.data();
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t s = 0; s < samples; ++s) sum[c] += v[c * samples + s];
    }
  }
  Scaler scaler;
  scaler.mode = mode;
  const double per_channel = static_cast<double>(train.size() * samples);
  std::vector<double> mean(channels);
  if (mode == ScalerMode::per_channel) {
    for (std::size_t c = 0; c < channels; ++c) mean[c] = sum[c] / per_channel;
  } else {
    double total = 0.0;
    for (double s : sum) total += s;
    std::fill(mean.begin(), mean.end(), total / (per_channel * static_cast<double>(channels)));
  }
  std::vector<double> sq(channels, 0.0);
  for (const Trial* t : train) {
    auto v = t->signal.data();
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t s = 0; s < samples; ++s) {
        const double d = v[c * samples + s] - mean[c];
        sq[c] += d * d;
      }
    }
  }
  std::vector<double> stdev(channels);
  if (mode == ScalerMode::per_channel) {
    for (std::size_t c = 0; c < channels; ++c) stdev[c] = std::sqrt(sq[c] / per_channel);
  } else {
    double total = 0.0;
    for (double s : sq) total += s;
    std::fill(stdev.begin(), stdev.end(), std::sqrt(total / (per_channel * static_cast<double>(channels))));
  }
  for (double& s : stdev) s = std::max(s, Scaler::kStdFloor);
  scaler.mean = std::move(mean);
  scaler.std = std::move(stdev);
  return scaler;
}

TrialSet apply_scaler(const TrialSet& set, const Scaler& scaler) {
  TrialSet out;
  out.scaler = scaler;
  out.trials.reserve(set.trials.size());
  for (const auto& t : set.trials) {
    const std::size_t channels = t.signal.shape()[0];
    const std::size_t samples = t.signal.shape()[1];
    if (channels != scaler.mean.size()) {
      throw DimensionError("apply_scaler: trial has " + std::to_string(channels) + " channels, scaler has " +
                           std::to_string(scaler.mean.size()));
    }
    auto v = t.signal.data();
    std::vector<double> scaled(v.size());
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t s = 0; s < samples; ++s) {
        scaled[c * samples + s] = (v[c * samples + s] - scaler.mean[c]) / scaler.std[c];
      }
    }
    out.trials.push_back({Tensor(t.signal.shape(), std::move(scaled)), t.label, t.subject_id, t.session});
  }
  return out;
}

TrialSet select(const TrialSet& set, std::optional<Session> session, int subject) {
  TrialSet out;
  out.scaler = set.scaler;
  for (const auto& t : set.trials) {
    if (session && t.session != *session) continue;
    if (subject >= 0 && t.subject_id != subject) continue;
    out.trials.push_back(t);
  }
  return out;
}

// ---- EEGTRIAL1 ------------------------------------------------------------------

std::vector<std::uint8_t> encode_trialset(const TrialSet& set) {
  set.validate();
  const std::size_t channels = set.empty() ? 0 : set.channels();
  const std::size_t samples = set.empty() ? 0 : set.samples();
  const auto limit = static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max());
  if (set.size() > limit || channels > limit || samples > limit) throw FormatError("trial set too large for EEGTRIAL1");
  detail::ByteWriter w;
  w.bytes(kTrialMagic, sizeof(kTrialMagic));
  w.i32(static_cast<std::int32_t>(set.size()));
  w.i32(static_cast<std::int32_t>(channels));
  w.i32(static_cast<std::int32_t>(samples));
  for (const auto& t : set.trials) {
    w.i32(t.label);
    w.i32(t.subject_id);
    w.i32(static_cast<std::int32_t>(t.session));
    for (double v : t.signal.data()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

TrialSet decode_trialset(const std::vector<std::uint8_t>& bytes, const TrialManifest& manifest) {
  detail::ByteReader r(bytes, "EEGTRIAL1");
  char magic[sizeof(kTrialMagic)];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kTrialMagic, sizeof(kTrialMagic) - 1) != 0) {
    throw BadMagicError("not an EEGTRIAL file (bad magic)");
  }
  if (magic[sizeof(kTrialMagic) - 1] != kTrialMagic[sizeof(kTrialMagic) - 1]) {
    throw BadMagicError(std::string("unsupported EEGTRIAL version '") + magic[sizeof(kTrialMagic) - 1] + "'");
  }
  const std::int32_t n = r.i32();
  const std::int32_t channels = r.i32();
  const std::int32_t samples = r.i32();
  if (n < 0 || channels <= 0 || samples <= 0) {
    throw ShapeMismatchError("EEGTRIAL1 header has invalid shape {" + std::to_string(n) + ", " +
                             std::to_string(channels) + ", " + std::to_string(samples) + "}");
  }
  const auto c = static_cast<std::size_t>(channels);
  const auto s = static_cast<std::size_t>(samples);
  if (manifest.channels && *manifest.channels != c) {
    throw ShapeMismatchError("EEGTRIAL1 file has " + std::to_string(c) + " channels, expected " +
                             std::to_string(*manifest.channels));
  }
  if (manifest.samples && *manifest.samples != s) {
    throw ShapeMismatchError("EEGTRIAL1 file has " + std::to_string(s) + " samples, expected " +
                             std::to_string(*manifest.samples));
  }
  const std::size_t record = 12 + 4 * c * s;
  r.need(record * static_cast<std::size_t>(n));

  TrialSet set;
  set.trials.reserve(static_cast<std::size_t>(n));
  for (std::int32_t i = 0; i < n; ++i) {
    Trial t;
    t.label = r.i32();
    t.subject_id = r.i32();
    const std::int32_t session = r.i32();
    if (t.label < 0 || t.label >= kNumClasses) {
      throw LabelRangeError("EEGTRIAL1 trial " + std::to_string(i) + " has label " + std::to_string(t.label));
    }
    if (session != 0 && session != 1) {
      throw FormatError("EEGTRIAL1 trial " + std::to_string(i) + " has session tag " + std::to_string(session));
    }
    t.session = static_cast<Session>(session);
    std::vector<double> values(c * s);
    for (double& v : values) v = static_cast<double>(r.f32());
    t.signal = Tensor({c, s}, std::move(values));
    set.trials.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("EEGTRIAL1 file has trailing bytes");
  return set;
}

void save_trialset(const std::string& path, const TrialSet& set) { detail::write_file(path, encode_trialset(set)); }

TrialSet load_trialset(const std::string& path, const TrialManifest& manifest) {
  return decode_trialset(detail::read_file(path), manifest);
}

TrialSet import_csv(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest " + manifest_path);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + manifest_path + " is not valid JSON: " + e.what());
  }
  const fs::path base = fs::path(manifest_path).parent_path();
  struct Entry {
    fs::path file;
    Trial trial;
  };
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<Entry> entries;
  try {
    channels = manifest.at("channels").get<std::size_t>();
    samples = manifest.at("samples").get<std::size_t>();
    for (const auto& entry : manifest.at("trials")) {
      Entry e;
      e.file = base / entry.at("file").get<std::string>();
      e.trial.label = entry.at("label").get<int>();
      e.trial.subject_id = entry.value("subject", 0);
      e.trial.session = parse_session(entry.value("session", std::string("train")));
      entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + manifest_path + ": " + e.what());
  } catch (const ContractError& e) {
    throw FormatError("manifest " + manifest_path + ": " + e.what());
  }
  if (channels == 0 || samples == 0) throw ShapeMismatchError("manifest declares an empty trial shape");

  TrialSet set;
  for (auto& [file, t] : entries) {
    if (t.label < 0 || t.label >= kNumClasses) {
      throw LabelRangeError(file.string() + ": label " + std::to_string(t.label) + " out of range");
    }
    std::ifstream csv(file);
    if (!csv) throw IoError("cannot open " + file.string());
    std::vector<double> values;
    values.reserve(channels * samples);
    std::string line;
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::stringstream ss(line);
      std::string cell;
      std::size_t cols = 0;
      while (std::getline(ss, cell, ',')) {
        try {
          std::size_t used = 0;
          const double v = std::stod(cell, &used);
          if (cell.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(cell);
          values.push_back(static_cast<double>(static_cast<float>(v)));
        } catch (const std::logic_error&) {
          throw FormatError(file.string() + ": row " + std::to_string(rows + 1) + " has non-numeric value '" + cell +
                            "'");
        }
        ++cols;
      }
      if (cols != samples) {
        throw ShapeMismatchError(file.string() + ": row " + std::to_string(rows + 1) + " has " +
                                 std::to_string(cols) + " values, expected " + std::to_string(samples));
      }
      ++rows;
    }
    if (rows != channels) {
      throw ShapeMismatchError(file.string() + ": " + std::to_string(rows) + " rows, expected " +
                               std::to_string(channels));
    }
    t.signal = Tensor({channels, samples}, std::move(values));
    set.trials.push_back(std::move(t));
  }
  return set;
}

// ---- synthetic data -----------------------------------------------------------------

TrialSet synth_trials(std::size_t n, std::uint64_t seed, double difficulty, const SynthOptions& options) {
  if (n < static_cast<std::size_t>(kNumClasses)) throw ContractError("synth_trials: need at least 4 trials");
  if (difficulty < 0.0) throw ContractError("synth_trials: difficulty must be non-negative");
  if (options.channels == 0 || options.samples == 0) throw ContractError("synth_trials: empty trial shape");
  Rng rng(seed);
  TrialSet set;
  set.trials.reserve(n);
  const std::size_t channels = options.channels;
  const std::size_t samples = options.samples;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % kNumClasses);
    const double freq = kClassFrequencies[label];
    std::vector<double> values(channels * samples, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
      const bool driven = static_cast<int>(c % kNumClasses) == label;
      const double amplitude = rng.uniform(0.8, 1.2);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (std::size_t s = 0; s < samples; ++s) {
        double v = 0.0;
        if (driven) v = amplitude * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(s) / kSampleRateHz + phase);
        if (difficulty > 0.0) v += difficulty * rng.normal();
        values[c * samples + s] = static_cast<double>(static_cast<float>(v));
      }
    }
    set.trials.push_back({Tensor({channels, samples}, std::move(values)), label, options.subject_id, options.session});
  }
  return set;
}

Tensor make_batch(const TrialSet& set, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("make_batch: no trials selected");
  const std::size_t channels = set.channels();
  const std::size_t samples = set.samples();
  std::vector<double> values(indices.size() * channels * samples);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto v = set.trials.at(indices[b]).signal.data();
    double* dst = values.data() + b * samples * channels;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t s = 0; s < samples; ++s) dst[s * channels + c] = v[c * samples + s];
    }
  }
  return Tensor({indices.size(), 1, samples, channels}, std::move(values));
}

std::vector<int> batch_labels(const TrialSet& set, const std::vector<std::size_t>& indices) {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (std::size_t i : indices) labels.push_back(set.trials.at(i).label);
  return labels;
}

}  // namespace eegenc::data
