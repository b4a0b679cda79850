#pragma once

// Oracles shared by the unit and acceptance tests. Nothing here calls the
// library's closed-form cost or gradient code.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "autospace/genome.hpp"
#include "autospace/supernet.hpp"
#include "autospace/tape.hpp"

namespace oracle {

using autospace::Rng;
using autospace::Shape;
using autospace::Tape;
using autospace::Tensor;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<double> v(shape.numel());
  for (double& x : v) x = d(rng);
  return Tensor::from(shape, std::move(v), requires_grad);
}

/// ||a - b|| / max(||a||, ||b||), with a floor so all-zero pairs compare equal.
inline double rel_err(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
  return std::sqrt(diff) / scale;
}

/// Central differences of a scalar function of `leaves` (each element moved
/// by +-h), compared with one reverse pass. Returns the worst leaf error.
inline double fd_check(std::vector<Tensor> leaves, const std::function<Tensor(Tape&)>& loss_fn, double h = 1e-5) {
  for (Tensor& t : leaves) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape tape(autospace::Precision::kFloat64);
    tape.backward(loss_fn(tape));
  }
  double worst = 0.0;
  for (Tensor& t : leaves) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + h;
      double up, down;
      {
        Tape tape(autospace::Precision::kFloat64);
        up = loss_fn(tape).item();
      }
      t.data()[i] = saved - h;
      {
        Tape tape(autospace::Precision::kFloat64);
        down = loss_fn(tape).item();
      }
      t.data()[i] = saved;
      numeric[i] = (up - down) / (2 * h);
    }
    worst = std::max(worst, rel_err(analytic, numeric));
    t.clear_grad();
  }
  return worst;
}

/// Counts every multiply-add of a k x k convolution by walking output
/// positions, output channels, input channels of the group and taps.
inline std::uint64_t walk_conv(int c_in, int c_out, int k, int groups, int h_out, int w_out) {
  std::uint64_t count = 0;
  for (int y = 0; y < h_out; ++y)
    for (int x = 0; x < w_out; ++x)
      for (int o = 0; o < c_out; ++o)
        for (int i = 0; i < c_in / groups; ++i)
          for (int t = 0; t < k * k; ++t) ++count;
  return count;
}

/// MACs of the realized cell: IN expansion, each convolutional edge,
/// OUT projection.
inline std::uint64_t walk_cell(const autospace::CellGenome& g, const autospace::LayerShape& s) {
  using autospace::Op;
  const int inner = g.ratio * s.c_in;
  const int h = s.h / s.stride, w = s.w / s.stride;
  std::uint64_t count = walk_conv(s.c_in, inner, 1, 1, h, w);
  for (Op op : g.edges) {
    if (op == Op::kConv1x1) count += walk_conv(inner, inner, 1, 1, h, w);
    if (op == Op::kConv3x3) count += walk_conv(inner, inner, 3, 1, h, w);
    if (op == Op::kDwConv3x3) count += walk_conv(inner, inner, 3, inner, h, w);
  }
  return count + walk_conv(inner, s.c_out, 1, 1, h, w);
}

/// Stem conv + cells + linear head of a full network.
inline std::uint64_t walk_network(const std::vector<autospace::CellGenome>& cells, const autospace::ChannelPlan& plan) {
  const int sh = (plan.image_h + 2 - 3) / 2 + 1, sw = (plan.image_w + 2 - 3) / 2 + 1;
  std::uint64_t count = walk_conv(plan.image_channels, plan.stem_channels, 3, 1, sh, sw);
  int c = plan.stem_channels, h = sh, w = sw;
  for (std::size_t l = 0; l < cells.size(); ++l) {
    autospace::LayerShape s{c, plan.channels[l], h, w, plan.strides[l]};
    count += walk_cell(cells[l], s);
    c = plan.channels[l];
    h /= plan.strides[l];
    w /= plan.strides[l];
  }
  for (int i = 0; i < c; ++i)
    for (int o = 0; o < plan.classes; ++o) ++count;
  return count;
}

inline autospace::CellGenome random_cell(Rng& rng) {
  autospace::IdSource ids;
  return autospace::random_genome(rng, ids);
}

}  // namespace oracle
