// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace eegenc::detail {

// C[M,N] (+)= op(A) * op(B) on row-major buffers. op(A) is M x K; when
// trans_a is set A is stored K x M. Likewise for B.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate);

}  // namespace eegenc::detail
