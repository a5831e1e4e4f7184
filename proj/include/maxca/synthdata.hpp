#pragma once

#include "maxca/metrics.hpp"
#include "maxca/regnet.hpp"

namespace maxca {

// Synthetic blob volumes with a known smooth, fold-free deformation.
// Stands in for clinical data at desk scale: the fixed image is the moving
// image warped by a ground-truth control-point field.
struct SynthSpec {
  Shape extents{32, 32, 32};
  int label_count = 5;          // foreground blobs
  int cp_spacing = 8;           // control-point spacing in voxels
  double max_amplitude = 4.0;   // displacement clamp in voxels
  double sigma_lo = 0.05;       // blob stddev range, as a fraction of extent
  double sigma_hi = 0.11;
  double noise = 0.02;
  std::uint64_t seed = 0;
  int max_retries = 25;

  void validate() const {
    if (extents.size() != 3) throw TensorError("synth spec: extents must be 3-D");
    if (label_count < 1 || cp_spacing < 2) throw TensorError("synth spec: invalid parameters");
    if (sigma_lo <= 0 || sigma_hi < sigma_lo) throw TensorError("synth spec: bad sigma range");
    if (max_amplitude > static_cast<double>(cp_spacing) / 2.0)
      throw TensorError("synth spec: amplitude must be <= spacing/2 to keep fields fold-free");
  }
};

struct SynthPair {
  Tensor<float> fixed, moving;   // [1][H][W][D], intensities in [0,1]
  LabelMap labels_fixed, labels_moving;
  Tensor<float> u_true;          // [3][H][W][D]
};

namespace detail {

// Trilinear interpolation of a coarse control grid at voxel resolution.
inline Tensor<float> control_grid_to_field(const Tensor<float>& grid, const Shape& extents,
                                           int spacing) {
  const std::int64_t H = extents[0], W = extents[1], D = extents[2];
  const std::int64_t gh = grid.dim(1), gw = grid.dim(2), gd = grid.dim(3);
  Tensor<float> u(Shape{3, H, W, D});
  for (int comp = 0; comp < 3; ++comp)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        for (std::int64_t d = 0; d < D; ++d) {
          const double c[3] = {static_cast<double>(h) / spacing, static_cast<double>(w) / spacing,
                               static_cast<double>(d) / spacing};
          const std::int64_t g[3] = {gh, gw, gd};
          std::int64_t i0[3], i1[3];
          double fr[3];
          for (int a = 0; a < 3; ++a) {
            const auto lo = static_cast<std::int64_t>(std::floor(c[a]));
            i0[a] = std::min(lo, g[a] - 1);
            i1[a] = std::min(lo + 1, g[a] - 1);
            fr[a] = c[a] - static_cast<double>(lo);
          }
          double v = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) {
                const double wt = (a ? fr[0] : 1 - fr[0]) * (b ? fr[1] : 1 - fr[1]) *
                                  (e ? fr[2] : 1 - fr[2]);
                v += wt * grid.at(comp, a ? i1[0] : i0[0], b ? i1[1] : i0[1], e ? i1[2] : i0[2]);
              }
          u.at(comp, h, w, d) = static_cast<float>(v);
        }
  return u;
}

}  // namespace detail

// Deterministic in the seed: same spec -> bitwise-identical pair.
inline SynthPair gen_pair(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::int64_t H = spec.extents[0], W = spec.extents[1], D = spec.extents[2];
  const std::int64_t V = H * W * D;

  // (1) moving image: sum of anisotropic Gaussian bumps, one label per bump
  SynthPair pair;
  pair.moving = Tensor<float>(Shape{1, H, W, D});
  pair.labels_moving = LabelMap(Shape{1, H, W, D});
  std::uniform_real_distribution<double> ucent(0.2, 0.8);
  std::uniform_real_distribution<double> usig(spec.sigma_lo, spec.sigma_hi);
  std::uniform_real_distribution<double> uamp(0.6, 1.0);
  std::vector<double> best(static_cast<std::size_t>(V), 0.0);
  for (int lab = 1; lab <= spec.label_count; ++lab) {
    const double ch = ucent(rng) * H, cw = ucent(rng) * W, cd = ucent(rng) * D;
    const double sh = usig(rng) * H, sw = usig(rng) * W, sd = usig(rng) * D;
    const double amp = uamp(rng);
    std::int64_t vi = 0;
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        for (std::int64_t d = 0; d < D; ++d, ++vi) {
          const double e = std::pow((h - ch) / sh, 2) + std::pow((w - cw) / sw, 2) +
                           std::pow((d - cd) / sd, 2);
          const double bump = amp * std::exp(-0.5 * e);
          pair.moving[vi] += static_cast<float>(bump);
          // label = strongest bump above half its own amplitude
          if (bump > 0.5 * amp && bump > best[static_cast<std::size_t>(vi)]) {
            best[static_cast<std::size_t>(vi)] = bump;
            pair.labels_moving[vi] = static_cast<std::uint16_t>(lab);
          }
        }
  }

  // (2) fold-free ground-truth field from an amplitude-clamped control grid
  const std::int64_t gh = H / spec.cp_spacing + 2, gw = W / spec.cp_spacing + 2,
                     gd = D / spec.cp_spacing + 2;
  double amp = spec.max_amplitude;
  for (int attempt = 0;; ++attempt) {
    Tensor<float> grid(Shape{3, gh, gw, gd});
    fill_uniform(grid, rng, static_cast<float>(-amp), static_cast<float>(amp));
    pair.u_true = detail::control_grid_to_field(grid, spec.extents, spec.cp_spacing);
    if (njd_percent(pair.u_true) == 0.0) break;
    if (attempt >= spec.max_retries)
      throw TensorError("gen_pair: could not draw a fold-free field");
    amp *= 0.9;
  }

  // (3) fixed = warp(moving), labels by nearest-neighbor warp
  pair.fixed = warp_tensor(pair.moving, pair.u_true);
  pair.labels_fixed = warp_nearest(pair.labels_moving, pair.u_true);

  // (4) noise, (5) min-max normalization to [0,1]
  auto finish = [&](Tensor<float>& img) {
    if (spec.noise > 0) {
      std::normal_distribution<double> nd(0.0, spec.noise);
      for (std::int64_t i = 0; i < img.numel(); ++i) img[i] += static_cast<float>(nd(rng));
    }
    float lo = img[0], hi = img[0];
    for (std::int64_t i = 0; i < img.numel(); ++i) {
      lo = std::min(lo, img[i]);
      hi = std::max(hi, img[i]);
    }
    const float range = hi - lo;
    for (std::int64_t i = 0; i < img.numel(); ++i)
      img[i] = range > 0 ? (img[i] - lo) / range : 0.0f;
  };
  finish(pair.moving);
  finish(pair.fixed);
  return pair;
}

}  // namespace maxca
