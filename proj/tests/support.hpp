// SPDX-License-Identifier: Apache-2.0
//
// Small helpers shared by the unit tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <span>
#include <vector>

#include "eegenc/rng.hpp"
#include "eegenc/tensor.hpp"

namespace testing {

inline eegenc::Tensor random_tensor(eegenc::Shape shape, eegenc::Rng& rng, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = false) {
  std::vector<double> v(eegenc::shape_numel(shape));
  for (auto& e : v) e = rng.uniform(lo, hi);
  return eegenc::Tensor(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

inline std::vector<double> values(const eegenc::Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace testing
