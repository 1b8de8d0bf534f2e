// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "eegenc/attention.hpp"
#include "eegenc/errors.hpp"
#include "eegenc/gradcheck.hpp"
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

// x with positions > t replaced by fresh random values.
Tensor perturb_after(const Tensor& x, std::size_t t, Rng& rng) {
  auto v = values(x);
  const std::size_t batch = x.dim(0), length = x.dim(1), width = x.dim(2);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = t + 1; p < length; ++p)
      for (std::size_t d = 0; d < width; ++d) v[(b * length + p) * width + d] = rng.uniform(-3.0, 3.0);
  return Tensor(x.shape(), std::move(v));
}

bool prefix_equal(const Tensor& a, const Tensor& b, std::size_t t) {
  const std::size_t batch = a.dim(0), length = a.dim(1), width = a.dim(2);
  for (std::size_t i = 0; i < batch; ++i) {
    const auto off = i * length * width;
    if (!bit_equal(a.data().subspan(off, (t + 1) * width), b.data().subspan(off, (t + 1) * width))) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("masks") {
  TEST_CASE("causal mask blocks strictly future positions") {
    const Tensor m = causal_mask(4);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) CHECK(m.at({i, j}) == (j > i ? -1e30 : 0.0));
    const Tensor p = softmax(add(Tensor::zeros({4, 4}), m), -1);
    CHECK(p.at({0, 1}) == 0.0);
    CHECK(p.at({2, 3}) == 0.0);
    CHECK(p.at({3, 0}) == 0.25);
  }

  TEST_CASE("relative positions clip at k") {
    const std::size_t k = 3;
    const auto idx = relative_position_indices(8, k);
    REQUIRE(idx.size() == 64);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        const long rel = static_cast<long>(j) - static_cast<long>(i);
        const long expect = std::clamp(rel, -3L, 3L) + 3;
        CHECK(idx[i * 8 + j] == expect);
        if (rel >= 3) CHECK(idx[i * 8 + j] == 6);
        if (rel <= -3) CHECK(idx[i * 8 + j] == 0);
      }
    Rng rng(1);
    AttentionLayer layer(8, 2, k, rng);
    CHECK(layer.rel_pos_k_table.shape() == Shape{7, 4});
    // distances at or beyond the clip share one table row
    const std::vector<std::int64_t> far = {idx[0 * 8 + 5], idx[1 * 8 + 7], idx[0 * 8 + 3]};
    const Tensor rows = embedding_lookup(layer.rel_pos_k_table, far);
    CHECK(bit_equal(rows.data().subspan(0, 4), rows.data().subspan(4, 4)));
    CHECK(bit_equal(rows.data().subspan(0, 4), rows.data().subspan(8, 4)));
  }
}

TEST_SUITE("attend") {
  TEST_CASE("a single timestep reduces to o_proj(v_proj(x))") {
    Rng rng(2);
    AttentionLayer layer(8, 2, 4, rng);
    Tensor x = random_tensor({3, 1, 8}, rng);
    const Tensor y = attend(x, layer, AttentionMask::causal);
    const Tensor expect = linear(linear(x, layer.v_proj), layer.o_proj);
    CHECK(max_abs_diff(y.data(), expect.data()) < 1e-14);
  }

  TEST_CASE("identical positions stay identical without masking") {
    Rng rng(3);
    AttentionLayer layer(8, 2, 4, rng);
    zero(layer.rel_pos_k_table);
    Tensor row = random_tensor({1, 1, 8}, rng);
    const Tensor x = concat({row, row, row, row, row}, 1);
    const Tensor y = attend(x, layer, AttentionMask::none);
    for (std::size_t t = 1; t < 5; ++t) CHECK(max_abs_diff(y.data().subspan(0, 8), y.data().subspan(t * 8, 8)) < 1e-14);
  }

  TEST_CASE("causal attention ignores the future exactly") {
    Rng rng(4);
    AttentionLayer layer(8, 2, 3, rng);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = random_tensor({2, 6, 8}, rng);
      const std::size_t t = rng.below(6);
      CHECK(prefix_equal(attend(x, layer, AttentionMask::causal),
                         attend(perturb_after(x, t, rng), layer, AttentionMask::causal), t));
    }
    Tensor x = random_tensor({1, 6, 8}, rng);
    CHECK_FALSE(prefix_equal(attend(x, layer, AttentionMask::none),
                             attend(perturb_after(x, 2, rng), layer, AttentionMask::none), 2));
  }

  TEST_CASE("shape errors") {
    Rng rng(5);
    CHECK_THROWS_AS(AttentionLayer(10, 3, 2, rng), ContractError);
    AttentionLayer layer(8, 2, 2, rng);
    CHECK_THROWS_AS(attend(Tensor::zeros({1, 4, 6}), layer, AttentionMask::causal), DimensionError);
  }
}

TEST_SUITE("transformer") {
  TEST_CASE("zeroed output projections make a block the identity") {
    Rng rng(6);
    TransformerBlock block(8, 2, 16, 4, 1e-8, rng);
    zero(block.attn.o_proj.weight);
    zero(block.attn.o_proj.bias);
    zero(block.ffn.out_proj.weight);
    zero(block.ffn.out_proj.bias);
    Tensor x = random_tensor({2, 5, 8}, rng);
    CHECK(bit_equal(block_forward(x, block, AttentionMask::causal).data(), x.data()));
  }

  TEST_CASE("block is pre-norm: out - y equals ffn(norm2(y))") {
    Rng rng(7);
    TransformerBlock block(8, 2, 16, 4, 1e-8, rng);
    Tensor x = random_tensor({2, 5, 8}, rng);
    const Tensor y = add(x, attend(rms_norm(x, block.norm1), block.attn, AttentionMask::causal));
    const Tensor out = block_forward(x, block, AttentionMask::causal);
    const Tensor residual = feed_forward(rms_norm(y, block.norm2), block.ffn);
    CHECK(max_abs_diff(sub(out, y).data(), residual.data()) < 1e-14);
  }

  TEST_CASE("one-block stack is block_forward then final_norm") {
    Rng rng(8);
    StableTransformer stack(1, 8, 2, 16, 4, 1e-8, rng);
    Tensor x = random_tensor({2, 5, 8}, rng);
    const Tensor expect = rms_norm(block_forward(x, stack.blocks[0], AttentionMask::causal), stack.final_norm);
    CHECK(bit_equal(stack_forward(x, stack, AttentionMask::causal).data(), expect.data()));
    CHECK_THROWS_AS(StableTransformer(0, 8, 2, 16, 4, 1e-8, rng), ContractError);
  }

  TEST_CASE("default-size stack keeps [B,T,d]") {
    Rng rng(9);
    StableTransformer stack(4, 32, 2, 64, 16, 1e-8, rng);
    CHECK(stack_forward(random_tensor({2, 22, 32}, rng), stack, AttentionMask::causal).shape() == Shape{2, 22, 32});
  }

  TEST_CASE("stack and vanilla variant are causal") {
    Rng rng(10);
    StableTransformer stack(3, 8, 2, 16, 2, 1e-8, rng);
    VanillaTransformer vanilla(2, 8, 2, 16, 7, rng);
    for (int trial = 0; trial < 15; ++trial) {
      Tensor x = random_tensor({2, 7, 8}, rng);
      const std::size_t t = rng.below(7);
      const Tensor xp = perturb_after(x, t, rng);
      CHECK(prefix_equal(stack_forward(x, stack, AttentionMask::causal), stack_forward(xp, stack, AttentionMask::causal),
                         t));
      CHECK(prefix_equal(vanilla_forward(x, vanilla, AttentionMask::causal),
                         vanilla_forward(xp, vanilla, AttentionMask::causal), t));
    }
    CHECK_THROWS_AS(vanilla_forward(random_tensor({1, 8, 8}, rng), vanilla, AttentionMask::causal), DimensionError);
  }

  TEST_CASE("the stable stack has no absolute positions, the vanilla one does") {
    Rng rng(11);
    StableTransformer stack(1, 8, 2, 16, 4, 1e-8, rng);
    ParameterRefs refs;
    stack.collect("s", refs);
    for (const auto& p : refs.params) CHECK(p.name.find("position") == std::string::npos);
    VanillaTransformer vanilla(1, 8, 2, 16, 5, rng);
    ParameterRefs vrefs;
    vanilla.collect("v", vrefs);
    CHECK(vrefs.params.front().name == "v.positions");
    CHECK_FALSE(vanilla.blocks[0].attn.rel_pos_k_table.defined());
  }

  TEST_CASE("gradient reaches the input through eight pre-norm blocks") {
    Rng rng(12);
    StableTransformer deep(8, 8, 2, 16, 4, 1e-8, rng);
    Tensor x = random_tensor({2, 6, 8}, rng, -1, 1, true);
    Tensor weights = random_tensor({2, 6, 8}, rng);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = sum(mul(stack_forward(x, deep, AttentionMask::causal), weights));
    }
    tape.backward(loss);
    double norm = 0.0;
    for (double g : x.grad()) norm += g * g;
    CHECK(std::sqrt(norm) > 1e-12);
  }
}

TEST_CASE("finite-difference check on d=8, T=5, heads=2") {
  const auto suite = gradcheck::default_suite();
  for (const char* op : {"attend", "transformer_block", "transformer_stack", "vanilla_transformer"}) {
    for (const auto& c : gradcheck::run_suite(suite, {}, op).cases) {
      INFO(c.name);
      CHECK(c.max_rel_error < 1e-3);
    }
  }
}
