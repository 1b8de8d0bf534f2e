// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference checks of reverse-mode gradients.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "eegenc/rng.hpp"
#include "eegenc/tensor.hpp"

namespace eegenc::gradcheck {

struct CheckOptions {
  double step = 1e-4;
  double tolerance = 1e-3;
  double denominator_floor = 1e-6;
  // Per leaf; larger leaves are checked at this many randomly chosen coordinates.
  std::size_t max_coords = 48;
  std::uint64_t seed = 1;
};

// A differentiable function of some leaf tensors. `forward` must be
// deterministic and read the leaves' current values on every call.
struct Problem {
  std::vector<std::pair<std::string, Tensor>> leaves;
  std::function<Tensor()> forward;
};

struct GradCase {
  std::string name;  // "op" or "op/variant"
  std::function<Problem(Rng&)> build;
};

struct CaseResult {
  std::string name;
  double max_rel_error = 0.0;
  std::string worst_leaf;
  std::size_t coords_checked = 0;
  bool passed = false;
};

struct SuiteReport {
  std::vector<CaseResult> cases;
  double seconds = 0.0;

  bool passed() const;
  double max_rel_error() const;
};

// Relative error |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

// Uniform [-1, 1] leaf that requires grad.
Tensor random_leaf(Shape shape, Rng& rng);

CaseResult check_case(const GradCase& gc, const CheckOptions& options = {});

// Cases covering every differentiable op and composite module, ending with the
// miniature end-to-end model.
std::vector<GradCase> default_suite();

// Extra cases appended to default_suite() (used to inject negative controls).
void register_case(GradCase gc);
void clear_registered_cases();

// True when `name` is selected by `filter`: empty, equal, or a "filter/" prefix.
bool matches_filter(const std::string& name, const std::string& filter);

SuiteReport run_suite(const std::vector<GradCase>& cases, const CheckOptions& options = {},
                      const std::string& filter = "");

}  // namespace eegenc::gradcheck
