// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "eegenc/errors.hpp"
#include "eegenc/gradcheck.hpp"
#include "eegenc/tcn.hpp"
#include "support.hpp"

using namespace eegenc;
using namespace eegenc::nn;
using testing::bit_equal;
using testing::max_abs_diff;
using testing::random_tensor;
using testing::values;

namespace {

void zero(Tensor t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

}  // namespace

TEST_CASE("causal conv matches a direct sum over past samples") {
  Rng rng(1);
  CausalConv1d conv(3, 2, 3, 2, rng);
  CHECK(conv.left_padding() == 4);
  Tensor x = random_tensor({2, 9, 3}, rng);
  const Tensor y = causal_conv1d(x, conv);
  REQUIRE(y.shape() == Shape{2, 9, 2});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 9; ++t)
      for (std::size_t o = 0; o < 2; ++o) {
        double expect = conv.bias.at({o});
        for (std::size_t k = 0; k < 3; ++k) {
          // tap k reaches back (kernel - 1 - k) * dilation steps
          const long src = static_cast<long>(t) - static_cast<long>((2 - k) * 2);
          if (src < 0) continue;
          for (std::size_t i = 0; i < 3; ++i)
            expect += conv.weight.at({o, i, k}) * x.at({b, static_cast<std::size_t>(src), i});
        }
        CHECK(y.at({b, t, o}) == doctest::Approx(expect).epsilon(1e-13));
      }
}

TEST_CASE("output length equals input length for random geometries") {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t kernel = 1 + rng.below(5);
    const std::size_t dilation = 1 + rng.below(4);
    const std::size_t length = 1 + rng.below(12);
    CausalConv1d conv(2, 3, kernel, dilation, rng);
    CHECK(causal_conv1d(random_tensor({1, length, 2}, rng), conv).shape() == Shape{1, length, 3});
    TcnStack stack(1 + rng.below(3), 4, kernel, 1e-8, rng);
    CHECK(tcn_forward(random_tensor({2, length, 4}, rng), stack).shape() == Shape{2, length, 4});
  }
}

TEST_CASE("zero weights with identity residual pass the input through") {
  Rng rng(3);
  TcnStack stack(2, 4, 4, 1e-8, rng);
  for (auto& block : stack.blocks) {
    CHECK_FALSE(block.residual_proj.has_value());
    zero(block.conv1.weight);
    zero(block.conv1.bias);
    zero(block.conv2.weight);
    zero(block.conv2.bias);
  }
  Tensor x = random_tensor({2, 7, 4}, rng);
  CHECK(bit_equal(tcn_forward(x, stack).data(), x.data()));
}

TEST_CASE("a width change adds a residual projection") {
  Rng rng(4);
  TcnBlock block(3, 5, 2, 1, 1e-8, rng);
  CHECK(block.residual_proj.has_value());
  CHECK(tcn_block_forward(random_tensor({1, 4, 3}, rng), block).shape() == Shape{1, 4, 5});
}

TEST_CASE("perturbing the future leaves earlier outputs unchanged") {
  Rng rng(5);
  TcnStack stack(3, 4, 3, 1e-8, rng);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor x = random_tensor({2, 10, 4}, rng);
    const std::size_t t = rng.below(10);
    auto v = values(x);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t p = t; p < 10; ++p)
        for (std::size_t d = 0; d < 4; ++d) v[(b * 10 + p) * 4 + d] += rng.uniform(-2, 2);
    const Tensor y0 = tcn_forward(x, stack);
    const Tensor y1 = tcn_forward(Tensor(x.shape(), v), stack);
    for (std::size_t b = 0; b < 2; ++b) {
      CHECK(bit_equal(y0.data().subspan(b * 40, t * 4), y1.data().subspan(b * 40, t * 4)));
    }
  }
}

TEST_CASE("receptive field follows 1 + 2(k-1)(2^L - 1)") {
  CHECK(tcn_receptive_field(2, 4) == 19);
  CHECK(tcn_receptive_field(1, 2) == 3);
  CHECK(tcn_receptive_field(3, 3) == 29);
  Rng rng(6);
  TcnStack stack(2, 4, 4, 1e-8, rng);
  CHECK(stack.receptive_field() == 19);
  CHECK(stack.blocks[0].conv1.dilation == 1);
  CHECK(stack.blocks[1].conv2.dilation == 2);

  // Empirically: the last output moves when sample T-19 changes but not T-20.
  const std::size_t length = 30;
  Tensor x = random_tensor({1, length, 4}, rng);
  auto bumped = [&](std::size_t pos) {
    auto v = values(x);
    v[pos * 4] += 1.0;
    return tcn_forward(Tensor(x.shape(), v), stack);
  };
  const Tensor base = tcn_forward(x, stack);
  auto last = [&](const Tensor& y) { return y.data().subspan((length - 1) * 4, 4); };
  CHECK_FALSE(bit_equal(last(base), last(bumped(length - 19))));
  CHECK(bit_equal(last(base), last(bumped(length - 20))));
}

TEST_CASE("constructor and shape errors") {
  Rng rng(7);
  CHECK_THROWS_AS(CausalConv1d(2, 2, 0, 1, rng), ContractError);
  CHECK_THROWS_AS(TcnStack(0, 4, 3, 1e-8, rng), ContractError);
  CausalConv1d conv(2, 2, 2, 1, rng);
  CHECK_THROWS_AS(causal_conv1d(Tensor::zeros({1, 4, 3}), conv), DimensionError);
}

TEST_CASE("finite-difference check on a tiny configuration") {
  const auto suite = gradcheck::default_suite();
  for (const char* op : {"causal_conv1d", "tcn_block", "tcn_stack"}) {
    for (const auto& c : gradcheck::run_suite(suite, {}, op).cases) {
      INFO(c.name);
      CHECK(c.max_rel_error < 1e-3);
    }
  }
}
