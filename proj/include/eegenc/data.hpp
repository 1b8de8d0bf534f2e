// SPDX-License-Identifier: Apache-2.0
//
// EEG trial containers, standard scaling, the EEGTRIAL1 interchange format,
// CSV import and synthetic class-conditional trials.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "eegenc/tensor.hpp"

namespace eegenc::data {

inline constexpr int kNumClasses = 4;
inline constexpr double kSampleRateHz = 250.0;

enum class Session : std::int32_t { train_session = 0, eval_session = 1 };

const char* session_name(Session s);
Session parse_session(const std::string& name);

struct Trial {
  Tensor signal;  // [channels, samples]
  int label = 0;  // 0 left hand, 1 right hand, 2 feet, 3 tongue
  int subject_id = 0;
  Session session = Session::train_session;
};

enum class ScalerMode { per_channel, global };

struct Scaler {
  static constexpr double kStdFloor = 1e-8;

  ScalerMode mode = ScalerMode::per_channel;
  std::vector<double> mean;  // one entry per channel (repeated in global mode)
  std::vector<double> std;
};

struct TrialSet {
  std::vector<Trial> trials;
  std::optional<Scaler> scaler;

  bool empty() const { return trials.empty(); }
  std::size_t size() const { return trials.size(); }
  std::size_t channels() const;
  std::size_t samples() const;

  // Throws when trials disagree in shape or carry an out-of-range label.
  void validate() const;
};

// Statistics pooled over every time sample of the train-session trials only.
Scaler fit_scaler(const TrialSet& set, ScalerMode mode = ScalerMode::per_channel);
TrialSet apply_scaler(const TrialSet& set, const Scaler& scaler);

// Filters: subject < 0 keeps every subject.
TrialSet select(const TrialSet& set, std::optional<Session> session, int subject = -1);

// ---- EEGTRIAL1 ------------------------------------------------------------

inline constexpr char kTrialMagic[9] = {'E', 'E', 'G', 'T', 'R', 'I', 'A', 'L', '1'};

// Expected geometry, checked on load when given.
struct TrialManifest {
  std::optional<std::size_t> channels;
  std::optional<std::size_t> samples;
};

std::vector<std::uint8_t> encode_trialset(const TrialSet& set);
TrialSet decode_trialset(const std::vector<std::uint8_t>& bytes, const TrialManifest& manifest = {});
void save_trialset(const std::string& path, const TrialSet& set);
TrialSet load_trialset(const std::string& path, const TrialManifest& manifest = {});

// Manifest JSON listing one CSV per trial; each CSV holds one row per channel.
TrialSet import_csv(const std::string& manifest_path);

// ---- synthetic data -----------------------------------------------------------

struct SynthOptions {
  std::size_t channels = 22;
  std::size_t samples = 1125;
  int subject_id = 1;
  Session session = Session::train_session;
};

// Class frequencies in Hz, indexed by label.
inline constexpr double kClassFrequencies[kNumClasses] = {8.0, 12.0, 20.0, 26.0};

// Balanced labels (trial i has label i % 4). Class c drives channels with
// index % 4 == c with a sinusoid at kClassFrequencies[c]; every channel gets
// Gaussian noise of standard deviation `difficulty`. Values are float-exact.
TrialSet synth_trials(std::size_t n, std::uint64_t seed, double difficulty, const SynthOptions& options = {});

// Batch tensor [B,1,samples,channels] for trials[indices].
Tensor make_batch(const TrialSet& set, const std::vector<std::size_t>& indices);
std::vector<int> batch_labels(const TrialSet& set, const std::vector<std::size_t>& indices);

}  // namespace eegenc::data
