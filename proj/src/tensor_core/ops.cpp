// SPDX-License-Identifier: Apache-2.0
#include "eegenc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "eegenc/errors.hpp"
#include "eegenc/parallel.hpp"
#include "gemm.hpp"

namespace eegenc {

namespace {

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into outer * n * inner.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// ---- broadcasting --------------------------------------------------------

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides of `in` laid against `out`, zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t oi = i + (out.size() - in.size());
    strides[oi] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Visits every output position with the matching flat offsets into a and b.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t n = shape_numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out[d]) {
        ia += sa[d];
        ib += sb[d];
        break;
      }
      ia -= sa[d] * (out[d] - 1);
      ib -= sb[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
}

// Generic broadcasting binary op. Fwd(a,b) -> value; DA/DB(a,b,g) -> partials.
template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const Shape& shape_a = a.shape();
  const Shape& shape_b = b.shape();
  auto va = a.data();
  auto vb = b.data();

  if (shape_a == shape_b) {
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(va[i], vb[i]);
    return record_op(name, shape_a, std::move(out), {a, b},
                     [a, b, da, db](std::span<const double> g, std::span<const std::span<double>> gin) {
                       auto xa = a.data();
                       auto xb = b.data();
                       if (!gin[0].empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += da(xa[i], xb[i], g[i]);
                       }
                       if (!gin[1].empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] += db(xa[i], xb[i], g[i]);
                       }
                     });
  }

  Shape out_shape = broadcast_shapes(shape_a, shape_b, name);
  auto sa = broadcast_strides(shape_a, out_shape);
  auto sb = broadcast_strides(shape_b, out_shape);
  std::vector<double> out(shape_numel(out_shape));
  for_each_broadcast(out_shape, sa, sb,
                     [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = fwd(va[ia], vb[ib]); });
  return record_op(name, out_shape, std::move(out), {a, b},
                   [a, b, da, db, out_shape, sa, sb](std::span<const double> g,
                                                     std::span<const std::span<double>> gin) {
                     auto xa = a.data();
                     auto xb = b.data();
                     for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                       if (!gin[0].empty()) gin[0][ia] += da(xa[ia], xb[ib], g[o]);
                       if (!gin[1].empty()) gin[1][ib] += db(xa[ia], xb[ib], g[o]);
                     });
                   });
}

template <typename Fwd, typename Deriv>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = fwd(v[i]);
  return record_op(name, x.shape(), std::move(out), {x},
                   [x, deriv](std::span<const double> g, std::span<const std::span<double>> gin) {
                     auto xv = x.data();
                     for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * deriv(xv[i]);
                   });
}

double sigmoid_scalar(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

// ---- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(
      "add_scalar", x, [s](double v) { return v + s; }, [](double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary_op(
      "mul_scalar", x, [s](double v) { return v * s; }, [s](double) { return s; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op("sigmoid", x, sigmoid_scalar, [](double v) {
    const double s = sigmoid_scalar(v);
    return s * (1.0 - s);
  });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& x, int axis) {
  const Shape& shape = x.shape();
  const auto s = split_at(shape, normalize_axis(axis, shape.size(), "softmax"));
  auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = v[base];
      for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, v[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double e = std::exp(v[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= total;
    }
  }
  auto probs = std::make_shared<std::vector<double>>(out);
  return record_op("softmax", shape, std::move(out), {x},
                   [probs, s](std::span<const double> g, std::span<const std::span<double>> gin) {
                     const auto& p = *probs;
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       for (std::size_t in = 0; in < s.inner; ++in) {
                         const std::size_t base = o * s.n * s.inner + in;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * p[base + j * s.inner];
                         for (std::size_t j = 0; j < s.n; ++j) {
                           const std::size_t k = base + j * s.inner;
                           gin[0][k] += p[k] * (g[k] - dot);
                         }
                       }
                     }
                   });
}

// ---- reductions ----------------------------------------------------------

Tensor sum(const Tensor& x) {
  auto v = x.data();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  return record_op("sum", {1}, {total}, {x}, [](std::span<const double> g, std::span<const std::span<double>> gin) {
    for (double& d : gin[0]) d += g[0];
  });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const Shape& shape = x.shape();
  const std::size_t ax = normalize_axis(axis, shape.size(), "sum");
  const auto s = split_at(shape, ax);
  auto v = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.n; ++j) {
      const double* row = v.data() + (o * s.n + j) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t in = 0; in < s.inner; ++in) dst[in] += row[in];
    }
  }
  Shape out_shape = shape;
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    if (out_shape.empty()) out_shape = {1};
  }
  return record_op("sum_axis", out_shape, std::move(out), {x},
                   [s](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       for (std::size_t j = 0; j < s.n; ++j) {
                         double* dst = gin[0].data() + (o * s.n + j) * s.inner;
                         const double* src = g.data() + o * s.inner;
                         for (std::size_t in = 0; in < s.inner; ++in) dst[in] += src[in];
                       }
                     }
                   });
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const double n = static_cast<double>(x.dim(axis));
  return mul_scalar(sum(x, axis, keepdim), 1.0 / n);
}

// ---- shape manipulation --------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto v = x.data();
  return record_op("reshape", std::move(shape), std::vector<double>(v.begin(), v.end()), {x},
                   [](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                   });
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  const Shape& shape = x.shape();
  const std::size_t rank = shape.size();
  if (order.size() != rank) throw DimensionError("permute: order length does not match rank " + shape_str(shape));
  std::vector<std::size_t> axes(rank);
  std::vector<bool> seen(rank, false);
  for (std::size_t i = 0; i < rank; ++i) {
    axes[i] = normalize_axis(order[i], rank, "permute");
    if (seen[axes[i]]) throw DimensionError("permute: repeated axis");
    seen[axes[i]] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = shape[axes[i]];

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * shape[i + 1];
  // Stride in the input for a unit step along each output axis.
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) step[i] = in_strides[axes[i]];

  // map[o] = input offset of output element o
  const std::size_t n = x.numel();
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < n; ++o) {
      (*map)[o] = off;
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < out_shape[d]) {
          off += step[d];
          break;
        }
        off -= step[d] * (out_shape[d] - 1);
        idx[d] = 0;
      }
    }
  }
  auto v = x.data();
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = v[(*map)[o]];
  return record_op("permute", out_shape, std::move(out), {x},
                   [map](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (std::size_t o = 0; o < g.size(); ++o) gin[0][(*map)[o]] += g[o];
                   });
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  const std::size_t rank = x.rank();
  std::vector<int> order(rank);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[normalize_axis(axis0, rank, "transpose")], order[normalize_axis(axis1, rank, "transpose")]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) {
        throw DimensionError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
      }
    }
    sizes.push_back(s[ax]);
    out_shape[ax] += s[ax];
  }
  const auto so = split_at(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto v = parts[p].data();
    const std::size_t chunk = sizes[p] * so.inner;
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(v.data() + o * chunk, chunk, out.data() + o * so.n * so.inner + offset * so.inner);
    }
    offset += sizes[p];
  }
  return record_op("concat", out_shape, std::move(out), parts,
                   [sizes, so](std::span<const double> g, std::span<const std::span<double>> gin) {
                     std::size_t offset = 0;
                     for (std::size_t p = 0; p < sizes.size(); ++p) {
                       const std::size_t chunk = sizes[p] * so.inner;
                       if (!gin[p].empty()) {
                         for (std::size_t o = 0; o < so.outer; ++o) {
                           const double* src = g.data() + o * so.n * so.inner + offset * so.inner;
                           double* dst = gin[p].data() + o * chunk;
                           for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                         }
                       }
                       offset += sizes[p];
                     }
                   });
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const Shape& shape = x.shape();
  const std::size_t ax = normalize_axis(axis, shape.size(), "slice");
  if (length == 0 || start + length > shape[ax]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis of size " + std::to_string(shape[ax]));
  }
  const auto s = split_at(shape, ax);
  Shape out_shape = shape;
  out_shape[ax] = length;
  auto v = x.data();
  std::vector<double> out(s.outer * length * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(v.data() + (o * s.n + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
  }
  return record_op("slice", out_shape, std::move(out), {x},
                   [s, start, length](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       const double* src = g.data() + o * length * s.inner;
                       double* dst = gin[0].data() + (o * s.n + start) * s.inner;
                       for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
                     }
                   });
}

Tensor index_last(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank(), "index_last");
  Tensor last = slice(x, static_cast<int>(ax), x.shape()[ax] - 1, 1);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  if (out_shape.empty()) out_shape = {1};
  return reshape(last, out_shape);
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> indices) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be [V,D], got " + shape_str(table.shape()));
  const std::size_t rows = table.shape()[0];
  const std::size_t width = table.shape()[1];
  if (indices.empty()) throw ContractError("embedding_lookup: empty index list");
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(indices.size());
  for (auto i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= rows) {
      throw ContractError("embedding_lookup: index " + std::to_string(i) + " outside table of " +
                          std::to_string(rows) + " rows");
    }
    idx->push_back(static_cast<std::size_t>(i));
  }
  auto v = table.data();
  std::vector<double> out(idx->size() * width);
  for (std::size_t r = 0; r < idx->size(); ++r) std::copy_n(v.data() + (*idx)[r] * width, width, out.data() + r * width);
  return record_op("embedding_lookup", {idx->size(), width}, std::move(out), {table},
                   [idx, width](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (std::size_t r = 0; r < idx->size(); ++r) {
                       double* dst = gin[0].data() + (*idx)[r] * width;
                       const double* src = g.data() + r * width;
                       for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
                     }
                   });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: probability must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const double scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  for (double& m : *mask) m = rng.uniform() < p ? 0.0 : scale;
  auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * (*mask)[i];
  return record_op("dropout", x.shape(), std::move(out), {x},
                   [mask](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * (*mask)[i];
                   });
}

// ---- matmul --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  if (sb[sb.size() - 2] != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(sa) + " and " + shape_str(sb));
  }
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  Shape batch;
  try {
    batch = broadcast_shapes(batch_a, batch_b, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dimensions of " + shape_str(sa) + " and " + shape_str(sb) +
                         " do not broadcast");
  }
  const auto stride_a = broadcast_strides(batch_a, batch);
  const auto stride_b = broadcast_strides(batch_b, batch);
  // Per output batch, the matrix index into a and b.
  auto pairs = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>();
  if (batch.empty()) {
    pairs->emplace_back(0, 0);
  } else {
    for_each_broadcast(batch, stride_a, stride_b,
                       [&](std::size_t, std::size_t ia, std::size_t ib) { pairs->emplace_back(ia, ib); });
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  auto va = a.data();
  auto vb = b.data();
  std::vector<double> out(pairs->size() * m * n);
  for (std::size_t i = 0; i < pairs->size(); ++i) {
    const auto [ia, ib] = (*pairs)[i];
    detail::gemm(false, false, m, n, k, va.data() + ia * m * k, vb.data() + ib * k * n, out.data() + i * m * n, false);
  }
  return record_op("matmul", out_shape, std::move(out), {a, b},
                   [a, b, pairs, m, n, k](std::span<const double> g, std::span<const std::span<double>> gin) {
                     auto xa = a.data();
                     auto xb = b.data();
                     for (std::size_t i = 0; i < pairs->size(); ++i) {
                       const auto [ia, ib] = (*pairs)[i];
                       const double* gi = g.data() + i * m * n;
                       if (!gin[0].empty()) {
                         detail::gemm(false, true, m, k, n, gi, xb.data() + ib * k * n, gin[0].data() + ia * m * k,
                                      true);
                       }
                       if (!gin[1].empty()) {
                         detail::gemm(true, false, k, n, m, xa.data() + ia * m * k, gi, gin[1].data() + ib * k * n,
                                      true);
                       }
                     }
                   });
}

// ---- convolution and pooling ---------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, oh, ow;
  Conv2dOptions opt;

  std::size_t patch() const { return cin * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

// col[(ci*kh+i)*kw+j, oy*ow+ox] = x[ci, oy*sh + i*dh - pt, ox*sw + j*dw - pl], zero outside.
void im2col(const ConvGeometry& g, const double* x, double* col) {
  const auto& o = g.opt;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* dst = col + ((ci * g.kh + i) * g.kw + j) * g.positions();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * o.stride_h + i * o.dilation_h) -
                                   static_cast<std::ptrdiff_t>(o.pad_top);
          double* row = dst + oy * g.ow;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(row, g.ow, 0.0);
            continue;
          }
          const double* src = x + (ci * g.h + static_cast<std::size_t>(y)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * o.stride_w + j * o.dilation_w) -
                                      static_cast<std::ptrdiff_t>(o.pad_left);
            row[ox] = (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[xx];
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* dx) {
  const auto& o = g.opt;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* src = col + ((ci * g.kh + i) * g.kw + j) * g.positions();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * o.stride_h + i * o.dilation_h) -
                                   static_cast<std::ptrdiff_t>(o.pad_top);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = dx + (ci * g.h + static_cast<std::size_t>(y)) * g.w;
          const double* row = src + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * o.stride_w + j * o.dilation_w) -
                                      static_cast<std::ptrdiff_t>(o.pad_left);
            if (xx >= 0 && xx < static_cast<std::ptrdiff_t>(g.w)) dst[xx] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Conv2dOptions& options) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4) {
    throw DimensionError("conv2d: expected x [B,Cin,H,W] and w [Cout,Cin,kh,kw], got " + shape_str(sx) + " and " +
                         shape_str(sw));
  }
  if (sw[1] != sx[1]) {
    throw DimensionError("conv2d: input channels " + std::to_string(sx[1]) + " do not match kernel " + shape_str(sw));
  }
  if (options.stride_h == 0 || options.stride_w == 0 || options.dilation_h == 0 || options.dilation_w == 0) {
    throw ContractError("conv2d: stride and dilation must be positive");
  }
  ConvGeometry g{sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], 0, 0, options};
  const std::size_t span_h = (g.kh - 1) * options.dilation_h + 1;
  const std::size_t span_w = (g.kw - 1) * options.dilation_w + 1;
  const std::size_t padded_h = g.h + options.pad_top + options.pad_bottom;
  const std::size_t padded_w = g.w + options.pad_left + options.pad_right;
  if (span_h > padded_h || span_w > padded_w) {
    throw DimensionError("conv2d: kernel " + shape_str(sw) + " larger than padded input " + shape_str(sx));
  }
  g.oh = (padded_h - span_h) / options.stride_h + 1;
  g.ow = (padded_w - span_w) / options.stride_w + 1;

  const std::size_t in_size = g.cin * g.h * g.w;
  const std::size_t out_size = g.cout * g.positions();
  auto vx = x.data();
  auto vw = w.data();
  std::vector<double> out(g.batch * out_size);
  parallel_for(g.batch, [&](std::size_t b) {
    std::vector<double> col(g.patch() * g.positions());
    im2col(g, vx.data() + b * in_size, col.data());
    detail::gemm(false, false, g.cout, g.positions(), g.patch(), vw.data(), col.data(), out.data() + b * out_size,
                 false);
  });

  return record_op(
      "conv2d", {g.batch, g.cout, g.oh, g.ow}, std::move(out), {x, w},
      [x, w, g, in_size, out_size](std::span<const double> grad, std::span<const std::span<double>> gin) {
        auto vx = x.data();
        auto vw = w.data();
        const bool need_x = !gin[0].empty();
        const bool need_w = !gin[1].empty();
        const std::size_t wsize = g.cout * g.patch();
        // Per-sample weight gradients, reduced in sample order afterwards.
        std::vector<double> dw_parts(need_w ? g.batch * wsize : 0, 0.0);
        parallel_for(g.batch, [&](std::size_t b) {
          std::vector<double> col(g.patch() * g.positions());
          const double* gb = grad.data() + b * out_size;
          if (need_w) {
            im2col(g, vx.data() + b * in_size, col.data());
            detail::gemm(false, true, g.cout, g.patch(), g.positions(), gb, col.data(), dw_parts.data() + b * wsize,
                         false);
          }
          if (need_x) {
            detail::gemm(true, false, g.patch(), g.positions(), g.cout, vw.data(), gb, col.data(), false);
            col2im(g, col.data(), gin[0].data() + b * in_size);
          }
        });
        if (need_w) {
          for (std::size_t b = 0; b < g.batch; ++b) {
            const double* part = dw_parts.data() + b * wsize;
            for (std::size_t i = 0; i < wsize; ++i) gin[1][i] += part[i];
          }
        }
      });
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::pair<std::size_t, std::size_t> stride,
              std::pair<std::size_t, std::size_t> padding) {
  return conv2d(x, w, Conv2dOptions::symmetric(stride.first, stride.second, padding.first, padding.second));
}

Tensor avg_pool2d(const Tensor& x, std::pair<std::size_t, std::size_t> kernel,
                  std::pair<std::size_t, std::size_t> stride) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("avg_pool2d: expected [B,C,H,W], got " + shape_str(s));
  const auto [kh, kw] = kernel;
  const auto [sh, sw] = stride;
  if (kh == 0 || kw == 0 || sh == 0 || sw == 0) throw ContractError("avg_pool2d: kernel and stride must be positive");
  if (kh > s[2] || kw > s[3]) {
    throw DimensionError("avg_pool2d: kernel (" + std::to_string(kh) + "," + std::to_string(kw) +
                         ") does not fit input " + shape_str(s));
  }
  const std::size_t planes = s[0] * s[1];
  const std::size_t h = s[2];
  const std::size_t w = s[3];
  const std::size_t oh = (h - kh) / sh + 1;
  const std::size_t ow = (w - kw) / sw + 1;
  const double inv = 1.0 / static_cast<double>(kh * kw);
  auto v = x.data();
  std::vector<double> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t i = 0; i < kh; ++i) {
          const double* row = v.data() + (p * h + oy * sh + i) * w + ox * sw;
          for (std::size_t j = 0; j < kw; ++j) acc += row[j];
        }
        out[(p * oh + oy) * ow + ox] = acc * inv;
      }
    }
  }
  return record_op("avg_pool2d", {s[0], s[1], oh, ow}, std::move(out), {x},
                   [=](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (std::size_t p = 0; p < planes; ++p) {
                       for (std::size_t oy = 0; oy < oh; ++oy) {
                         for (std::size_t ox = 0; ox < ow; ++ox) {
                           const double gv = g[(p * oh + oy) * ow + ox] * inv;
                           for (std::size_t i = 0; i < kh; ++i) {
                             double* row = gin[0].data() + (p * h + oy * sh + i) * w + ox * sw;
                             for (std::size_t j = 0; j < kw; ++j) row[j] += gv;
                           }
                         }
                       }
                     }
                   });
}

}  // namespace eegenc
