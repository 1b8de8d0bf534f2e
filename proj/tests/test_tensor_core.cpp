// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <numeric>

#include "eegenc/errors.hpp"
#include "eegenc/ops.hpp"
#include "eegenc/parallel.hpp"
#include "support.hpp"

using namespace eegenc;
using testing::max_abs_diff;
using testing::random_tensor;
using testing::values;

namespace {

// Direct triple loop, independent of the GEMM path.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

// Direct cross-correlation with explicit bounds checks instead of im2col.
std::vector<double> naive_conv2d(const Tensor& x, const Tensor& w, const Conv2dOptions& o) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  const std::size_t B = sx[0], Ci = sx[1], H = sx[2], W = sx[3];
  const std::size_t Co = sw[0], kh = sw[2], kw = sw[3];
  const std::size_t Ho = (H + o.pad_top + o.pad_bottom - o.dilation_h * (kh - 1) - 1) / o.stride_h + 1;
  const std::size_t Wo = (W + o.pad_left + o.pad_right - o.dilation_w * (kw - 1) - 1) / o.stride_w + 1;
  std::vector<double> out(B * Co * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t p = 0; p < kh; ++p)
              for (std::size_t q = 0; q < kw; ++q) {
                const long r = static_cast<long>(i * o.stride_h + p * o.dilation_h) - static_cast<long>(o.pad_top);
                const long c = static_cast<long>(j * o.stride_w + q * o.dilation_w) - static_cast<long>(o.pad_left);
                if (r < 0 || c < 0 || r >= static_cast<long>(H) || c >= static_cast<long>(W)) continue;
                acc += x.at({b, ci, static_cast<std::size_t>(r), static_cast<std::size_t>(c)}) * w.at({co, ci, p, q});
              }
          out[((b * Co + co) * Ho + i) * Wo + j] = acc;
        }
  return out;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("construction validates shape against data") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimensionError);
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.at({1, 2}) == 6);
    CHECK(t.dim(-1) == 3);
    CHECK_THROWS_AS(t.item(), ContractError);
    CHECK_FALSE(t.has_grad());
  }

  TEST_CASE("grad buffers share the tensor shape") {
    Tensor t = Tensor::full({2, 2}, 1.0, true);
    t.zero_grad();
    CHECK(t.has_grad());
    CHECK(t.grad().size() == 4);
    t.clear_grad();
    CHECK_FALSE(t.has_grad());
    CHECK_THROWS_AS(t.grad(), StateError);
  }
}

TEST_SUITE("ops") {
  TEST_CASE("matmul examples") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {1, 2, 3, 4});
    CHECK(values(matmul(eye, m)) == values(m));
    CHECK(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item() == 11.0);
    const auto zero = values(matmul(Tensor::zeros({3, 2}), m));
    CHECK(std::all_of(zero.begin(), zero.end(), [](double v) { return v == 0.0; }));
  }

  TEST_CASE("matmul matches a triple loop with broadcast batches") {
    Rng rng(3);
    Tensor a = random_tensor({2, 3, 4, 5}, rng);
    Tensor b = random_tensor({5, 6}, rng);
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 3, 4, 6});
    const auto av = values(a);
    const auto bv = values(b);
    for (std::size_t batch = 0; batch < 6; ++batch) {
      std::vector<double> slice(av.begin() + batch * 20, av.begin() + (batch + 1) * 20);
      const auto expect = naive_matmul(slice, bv, 4, 5, 6);
      const auto got = c.data().subspan(batch * 24, 24);
      CHECK(max_abs_diff(got, expect) < 1e-12);
    }
  }

  TEST_CASE("matmul shape errors name both shapes") {
    try {
      matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2,3]") != std::string::npos);
      CHECK(msg.find("[4,2]") != std::string::npos);
    }
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 2, 3}), Tensor::zeros({3, 3, 2})), DimensionError);
  }

  TEST_CASE("conv2d examples") {
    Tensor x({1, 1, 4, 1}, {1, 2, 3, 4});
    CHECK(values(conv2d(x, Tensor({1, 1, 2, 1}, {1, 1}))) == std::vector<double>{3, 5, 7});
    CHECK(values(conv2d(x, Tensor({1, 1, 1, 1}, {1}))) == values(x));
    const auto zero = values(conv2d(x, Tensor::zeros({2, 1, 2, 1})));
    CHECK(std::all_of(zero.begin(), zero.end(), [](double v) { return v == 0.0; }));
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 1, 5, 1})), DimensionError);
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 1, 1})), DimensionError);
  }

  TEST_CASE("conv2d output size and values match a direct loop") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      Conv2dOptions o;
      o.stride_h = 1 + rng.below(3);
      o.stride_w = 1 + rng.below(2);
      o.pad_top = rng.below(3);
      o.pad_bottom = rng.below(3);
      o.pad_left = rng.below(2);
      o.pad_right = rng.below(2);
      o.dilation_h = 1 + rng.below(2);
      const std::size_t kh = 1 + rng.below(3);
      const std::size_t kw = 1 + rng.below(2);
      Tensor x = random_tensor({2, 2, 9, 4}, rng);
      Tensor w = random_tensor({3, 2, kh, kw}, rng);
      const Tensor y = conv2d(x, w, o);
      const std::size_t ho = (9 + o.pad_top + o.pad_bottom - o.dilation_h * (kh - 1) - 1) / o.stride_h + 1;
      const std::size_t wo = (4 + o.pad_left + o.pad_right - (kw - 1) - 1) / o.stride_w + 1;
      CHECK(y.shape() == Shape{2, 3, ho, wo});
      CHECK(max_abs_diff(y.data(), naive_conv2d(x, w, o)) < 1e-12);
    }
  }

  TEST_CASE("symmetric padding gives floor((H + 2p - k) / s) + 1") {
    Tensor y = conv2d(Tensor::zeros({1, 1, 10, 5}), Tensor::zeros({1, 1, 3, 2}), {2, 1}, {1, 0});
    CHECK(y.shape() == Shape{1, 1, (10 + 2 - 3) / 2 + 1, 4});
  }

  TEST_CASE("avg_pool2d examples") {
    Tensor seq({1, 1, 7, 1}, {1, 2, 3, 4, 5, 6, 7});
    CHECK(avg_pool2d(seq, {7, 1}, {7, 1}).item() == doctest::Approx(4.0).epsilon(1e-15));
    Tensor constant = Tensor::full({2, 3, 14, 2}, 2.5);
    const auto pooled = values(avg_pool2d(constant, {7, 1}, {7, 1}));
    CHECK(std::all_of(pooled.begin(), pooled.end(), [](double v) { return std::abs(v - 2.5) < 1e-15; }));
    Tensor long_axis = Tensor::zeros({1, 1, 1125, 1});
    const Tensor once = avg_pool2d(long_axis, {7, 1}, {7, 1});
    CHECK(once.dim(2) == 160);
    CHECK(avg_pool2d(once, {7, 1}, {7, 1}).dim(2) == 22);
    CHECK_THROWS_AS(avg_pool2d(Tensor::zeros({1, 1, 6, 1}), {7, 1}, {7, 1}), DimensionError);
  }

  TEST_CASE("broadcasting follows numpy rules") {
    Tensor a = Tensor::full({2, 1, 3}, 1.0);
    Tensor b({4, 1}, {1, 2, 3, 4});
    Tensor c = add(a, b);
    CHECK(c.shape() == Shape{2, 4, 3});
    CHECK(c.at({1, 3, 2}) == 5.0);
    CHECK(sub(b, a).at({0, 2, 1}) == 2.0);
    CHECK(mul(b, Tensor::scalar(2.0)).at({3, 0}) == 8.0);
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  }

  TEST_CASE("softmax rows sum to one and survive large logits") {
    Rng rng(5);
    Tensor x = random_tensor({7, 9}, rng, -30.0, 30.0);
    const Tensor p = softmax(x, -1);
    for (std::size_t r = 0; r < 7; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 9; ++c) s += p.at({r, c});
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    const Tensor big = softmax(Tensor({1, 3}, {1000.0, 1000.0, -1e30}), -1);
    CHECK(big.at({0, 0}) == 0.5);
    CHECK(big.at({0, 2}) == 0.0);
  }

  TEST_CASE("reductions") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(sum(x).item() == 21.0);
    CHECK(mean(x).item() == 3.5);
    CHECK(values(sum(x, 0)) == std::vector<double>{5, 7, 9});
    CHECK(mean(x, 1, true).shape() == Shape{2, 1});
    CHECK(values(mean(x, -1)) == std::vector<double>{2, 5});
    CHECK_THROWS_AS(sum(x, 2), DimensionError);
  }

  TEST_CASE("shape ops round-trip") {
    Rng rng(9);
    Tensor x = random_tensor({2, 3, 4}, rng);
    CHECK(values(transpose(transpose(x, 0, 2), 0, 2)) == values(x));
    const Tensor p = permute(x, {2, 0, 1});
    CHECK(p.shape() == Shape{4, 2, 3});
    CHECK(p.at({3, 1, 2}) == x.at({1, 2, 3}));
    CHECK(values(permute(p, {1, 2, 0})) == values(x));
    CHECK(values(reshape(x, {6, 4})) == values(x));
    CHECK_THROWS_AS(reshape(x, {5, 5}), DimensionError);
    CHECK_THROWS_AS(permute(x, {0, 0, 1}), DimensionError);

    const Tensor joined = concat({slice(x, 1, 0, 1), slice(x, 1, 1, 2)}, 1);
    CHECK(values(joined) == values(x));
    CHECK_THROWS_AS(slice(x, 1, 2, 2), DimensionError);
    const Tensor last = index_last(x, 1);
    CHECK(last.shape() == Shape{2, 4});
    CHECK(last.at({1, 3}) == x.at({1, 2, 3}));
  }

  TEST_CASE("embedding_lookup gathers rows and rejects bad indices") {
    Tensor table({3, 2}, {1, 2, 3, 4, 5, 6});
    const std::vector<std::int64_t> idx = {2, 0, 2};
    CHECK(values(embedding_lookup(table, idx)) == std::vector<double>{5, 6, 1, 2, 5, 6});
    const std::vector<std::int64_t> bad = {3};
    CHECK_THROWS_AS(embedding_lookup(table, bad), ContractError);
  }

  TEST_CASE("dropout is inverted and identity at eval") {
    Rng rng(1);
    Tensor x = Tensor::full({100, 100}, 1.0);
    const auto eval = values(dropout(x, 0.3, false, rng));
    CHECK(eval == values(x));
    const auto kept = values(dropout(x, 0.3, true, rng));
    std::size_t zeros = 0;
    double total = 0.0;
    for (double v : kept) {
      if (v == 0.0) {
        ++zeros;
      } else {
        CHECK(v == doctest::Approx(1.0 / 0.7));
      }
      total += v;
    }
    CHECK(zeros > 2700);
    CHECK(zeros < 3300);
    CHECK(total / 10000.0 == doctest::Approx(1.0).epsilon(0.05));
    CHECK(values(dropout(x, 0.0, true, rng)) == values(x));
    CHECK_THROWS_AS(dropout(x, 1.0, true, rng), ContractError);
  }

  TEST_CASE("elementwise functions") {
    Tensor x({3}, {-1.0, 0.0, 2.0});
    CHECK(values(relu(x)) == std::vector<double>{0, 0, 2});
    CHECK(sigmoid(x).at({1}) == 0.5);
    CHECK(exp(x).at({0}) == doctest::Approx(std::exp(-1.0)));
    CHECK(values(add_scalar(x, 1.0)) == std::vector<double>{0, 1, 3});
    CHECK(values(x * 2.0) == std::vector<double>{-2, 0, 4});
  }
}

TEST_SUITE("autodiff") {
  TEST_CASE("sum gives all-ones and sum of squares gives 2x") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    {
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = sum(x);
      }
      tape.backward(loss);
      CHECK(values(Tensor(x.shape(), {x.grad().begin(), x.grad().end()})) == std::vector<double>(6, 1.0));
      CHECK(tape.consumed());
      CHECK_THROWS_AS(tape.backward(loss), StateError);
    }
    Tensor y({3}, {1, 2, 3}, true);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = sum(mul(y, y));
    }
    backward(loss);
    CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{2, 4, 6});
  }

  TEST_CASE("non-scalar loss is a contract error") {
    Tensor x = Tensor::full({2}, 1.0, true);
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = mul_scalar(x, 2.0);
    }
    CHECK_THROWS_AS(tape.backward(y), ContractError);
    CHECK_THROWS_AS(backward(x), ContractError);
  }

  TEST_CASE("detached tensors get no gradient") {
    Tensor x = Tensor::full({3}, 2.0, true);
    Tape tape;
    Tensor loss;
    Tensor frozen;
    {
      TapeScope scope(tape);
      frozen = mul_scalar(x, 3.0).detach();
      loss = sum(mul(x, frozen));
    }
    tape.backward(loss);
    CHECK_FALSE(frozen.has_grad());
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>(3, 6.0));
  }

  TEST_CASE("no tape or NoGradScope records nothing") {
    Tensor x = Tensor::full({2}, 1.0, true);
    CHECK_FALSE(recording_active());
    CHECK_FALSE(mul(x, x).requires_grad());
    Tape tape;
    TapeScope scope(tape);
    CHECK(recording_active());
    {
      NoGradScope off;
      CHECK_FALSE(recording_active());
      CHECK_FALSE(add(x, x).requires_grad());
    }
    CHECK(add(x, x).requires_grad());
  }

  TEST_CASE("gradients accumulate linearly across backward passes") {
    Rng rng(21);
    Tensor a = random_tensor({3, 4}, rng, -1, 1, true);
    Tensor b = random_tensor({4, 2}, rng, -1, 1, true);
    auto loss1 = [&] { return sum(exp(matmul(a, b))); };
    auto loss2 = [&] { return mean(mul(softmax(a, 0), a)); };
    auto run = [](auto&& f) {
      Tape tape;
      Tensor l;
      {
        TapeScope scope(tape);
        l = f();
      }
      tape.backward(l);
    };
    run([&] { return add(loss1(), loss2()); });
    const auto ga_joint = testing::values(Tensor(a.shape(), {a.grad().begin(), a.grad().end()}));
    const auto gb_joint = std::vector<double>(b.grad().begin(), b.grad().end());
    a.clear_grad();
    b.clear_grad();
    run(loss1);
    run(loss2);
    CHECK(max_abs_diff(a.grad(), ga_joint) < 1e-12);
    CHECK(max_abs_diff(b.grad(), gb_joint) < 1e-12);
  }

  TEST_CASE("a value used twice receives both contributions") {
    Tensor x = Tensor::full({1}, 3.0, true);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      Tensor y = mul(x, x);
      loss = sum(add(y, mul_scalar(x, 5.0)));
    }
    tape.backward(loss);
    CHECK(x.grad()[0] == 11.0);
  }

  TEST_CASE("debug mode reports non-finite results") {
    set_debug_checks(true);
    CHECK_THROWS_AS(exp(Tensor::full({1}, 1000.0)), NumericError);
    set_debug_checks(false);
    CHECK(std::isinf(exp(Tensor::full({1}, 1000.0)).item()));
  }

  TEST_CASE("identical inputs give bit-identical results") {
    auto run = [] {
      Rng rng(77);
      Tensor x = random_tensor({2, 3, 16, 5}, rng);
      Tensor w = random_tensor({4, 3, 5, 2}, rng);
      return values(softmax(conv2d(x, w, Conv2dOptions::symmetric(1, 1, 2, 1)), -1));
    };
    CHECK(testing::bit_equal(run(), run()));
  }
}

TEST_SUITE("runtime") {
  TEST_CASE("rng streams are reproducible and in range") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng r(1);
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < 20000; ++i) {
      const double u = r.uniform();
      CHECK((u >= 0.0 && u < 1.0));
      CHECK(r.below(7) < 7);
      const double n = r.normal();
      s += n;
      s2 += n * n;
    }
    CHECK(std::abs(s / 20000) < 0.05);
    CHECK(std::abs(s2 / 20000 - 1.0) < 0.05);
  }

  TEST_CASE("parallel_for visits every index once and rethrows") {
    setenv("DSTS_THREADS", "3", 1);
    CHECK(worker_threads() == 3);
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
    CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
    CHECK_THROWS_AS(parallel_for(10, [](std::size_t i) {
                      if (i == 7) throw ContractError("boom");
                    }),
                    ContractError);
    unsetenv("DSTS_THREADS");
  }

  TEST_CASE("conv2d gradients do not depend on the worker count") {
    auto grads = [](const char* threads) {
      setenv("DSTS_THREADS", threads, 1);
      Rng rng(8);
      Tensor x = random_tensor({6, 2, 12, 3}, rng, -1, 1, true);
      Tensor w = random_tensor({3, 2, 4, 2}, rng, -1, 1, true);
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = sum(mul(conv2d(x, w), conv2d(x, w)));
      }
      tape.backward(loss);
      std::vector<double> out(w.grad().begin(), w.grad().end());
      out.insert(out.end(), x.grad().begin(), x.grad().end());
      unsetenv("DSTS_THREADS");
      return out;
    };
    CHECK(testing::bit_equal(grads("1"), grads("4")));
  }
}
