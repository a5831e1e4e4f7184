#pragma once

#include "maxca/attention.hpp"

namespace maxca {

// ---------------------------------------------------------------------------
// Displacement-field warp. u is [3][H][W][D] in voxel units with component
// order (H-axis, W-axis, D-axis); output voxel x samples I at x + u(x).
// Out-of-bounds sample coordinates are clamped to the boundary.

enum class WarpMode { Trilinear, Nearest };

namespace detail {

template <typename T>
struct SamplePoint {
  std::int64_t i0[3], i1[3];
  T frac[3];
  bool clamped[3];
};

template <typename T>
SamplePoint<T> sample_point(const std::int64_t ext[3], const std::int64_t ix[3], const T* u,
                            std::int64_t voxel, std::int64_t stride) {
  SamplePoint<T> s;
  for (int a = 0; a < 3; ++a) {
    double c = static_cast<double>(ix[a]) + static_cast<double>(u[a * stride + voxel]);
    s.clamped[a] = c <= 0.0 || c >= static_cast<double>(ext[a] - 1);
    c = std::clamp(c, 0.0, static_cast<double>(ext[a] - 1));
    const auto lo = static_cast<std::int64_t>(std::floor(c));
    s.i0[a] = std::min(lo, ext[a] - 1);
    s.i1[a] = std::min(lo + 1, ext[a] - 1);
    s.frac[a] = static_cast<T>(c - static_cast<double>(lo));
  }
  return s;
}

}  // namespace detail

template <typename T>
Tensor<T> warp_tensor(const Tensor<T>& img, const Tensor<T>& u) {
  const std::int64_t C = img.dim(0);
  const std::int64_t ext[3] = {img.dim(1), img.dim(2), img.dim(3)};
  const std::int64_t V = ext[0] * ext[1] * ext[2];
  if (u.rank() != 4 || u.dim(0) != 3 || u.dim(1) != ext[0] || u.dim(2) != ext[1] ||
      u.dim(3) != ext[2])
    throw TensorError("warp: displacement field shape mismatch");
  Tensor<T> out(img.shape(), uninit);
  std::int64_t vi = 0;
  for (std::int64_t h = 0; h < ext[0]; ++h)
    for (std::int64_t w = 0; w < ext[1]; ++w)
      for (std::int64_t d = 0; d < ext[2]; ++d, ++vi) {
        const std::int64_t ix[3] = {h, w, d};
        auto s = detail::sample_point<T>(ext, ix, u.data(), vi, V);
        for (std::int64_t c = 0; c < C; ++c) {
          const T* src = img.data() + c * V;
          T val = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) {
                const T wt = (a ? s.frac[0] : T(1) - s.frac[0]) *
                             (b ? s.frac[1] : T(1) - s.frac[1]) *
                             (e ? s.frac[2] : T(1) - s.frac[2]);
                val += wt * src[((a ? s.i1[0] : s.i0[0]) * ext[1] + (b ? s.i1[1] : s.i0[1])) *
                                    ext[2] +
                                (e ? s.i1[2] : s.i0[2])];
              }
          out.data()[c * V + vi] = val;
        }
      }
  return out;
}

// Nearest-neighbor warp for label maps.
template <typename L, typename T>
Tensor<L> warp_nearest(const Tensor<L>& labels, const Tensor<T>& u) {
  const std::int64_t C = labels.dim(0);
  const std::int64_t ext[3] = {labels.dim(1), labels.dim(2), labels.dim(3)};
  const std::int64_t V = ext[0] * ext[1] * ext[2];
  Tensor<L> out(labels.shape());
  std::int64_t vi = 0;
  for (std::int64_t h = 0; h < ext[0]; ++h)
    for (std::int64_t w = 0; w < ext[1]; ++w)
      for (std::int64_t d = 0; d < ext[2]; ++d, ++vi) {
        std::int64_t src[3];
        const std::int64_t ix[3] = {h, w, d};
        for (int a = 0; a < 3; ++a) {
          double c = static_cast<double>(ix[a]) + static_cast<double>(u.data()[a * V + vi]);
          c = std::clamp(c, 0.0, static_cast<double>(ext[a] - 1));
          src[a] = static_cast<std::int64_t>(std::llround(c));
        }
        for (std::int64_t c = 0; c < C; ++c)
          out.data()[c * V + vi] = labels.data()[c * V + (src[0] * ext[1] + src[1]) * ext[2] + src[2]];
      }
  return out;
}

// Differentiable warp (w.r.t. both the image and the field).
template <typename T>
Var warp(Tape<T>& t, Var img, Var u) {
  const auto& vi = t.val(img);
  const auto& vu = t.val(u);
  Tensor<T> out = warp_tensor(vi, vu);
  return t.make(
      std::move(out),
      [=](Tape<T>& tp, std::int32_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const auto& image = tp.val(img);
        const auto& field = tp.val(u);
        Tensor<T>& gi = tp.grad_buf(img);
        Tensor<T>& gu = tp.grad_buf(u);
        const std::int64_t C = image.dim(0);
        const std::int64_t ext[3] = {image.dim(1), image.dim(2), image.dim(3)};
        const std::int64_t V = ext[0] * ext[1] * ext[2];
        std::int64_t vidx = 0;
        for (std::int64_t h = 0; h < ext[0]; ++h)
          for (std::int64_t w = 0; w < ext[1]; ++w)
            for (std::int64_t d = 0; d < ext[2]; ++d, ++vidx) {
              const std::int64_t ix[3] = {h, w, d};
              auto s = detail::sample_point<T>(ext, ix, field.data(), vidx, V);
              for (std::int64_t c = 0; c < C; ++c) {
                const T gv = g[c * V + vidx];
                if (gv == T(0)) continue;
                const T* src = image.data() + c * V;
                T* gsrc = gi.data() + c * V;
                T dax[3] = {0, 0, 0};
                for (int a = 0; a < 2; ++a)
                  for (int b = 0; b < 2; ++b)
                    for (int e = 0; e < 2; ++e) {
                      const T wh = a ? s.frac[0] : T(1) - s.frac[0];
                      const T ww = b ? s.frac[1] : T(1) - s.frac[1];
                      const T wd = e ? s.frac[2] : T(1) - s.frac[2];
                      const std::int64_t off =
                          ((a ? s.i1[0] : s.i0[0]) * ext[1] + (b ? s.i1[1] : s.i0[1])) * ext[2] +
                          (e ? s.i1[2] : s.i0[2]);
                      gsrc[off] += gv * wh * ww * wd;
                      const T cv = src[off];
                      dax[0] += (a ? T(1) : T(-1)) * ww * wd * cv;
                      dax[1] += (b ? T(1) : T(-1)) * wh * wd * cv;
                      dax[2] += (e ? T(1) : T(-1)) * wh * ww * cv;
                    }
                for (int a = 0; a < 3; ++a)
                  if (!s.clamped[a]) gu[a * V + vidx] += gv * dax[a];
              }
            }
      },
      "warp");
}

// ---------------------------------------------------------------------------
// Loss terms.

struct LossConfig {
  int ncc_window = 9;
  double sigma = 1.0;
  double eps = 1e-5;

  void validate() const {
    if (ncc_window < 3 || ncc_window % 2 == 0)
      throw TensorError("loss config: NCC window must be odd and >= 3");
    if (sigma < 0) throw TensorError("loss config: sigma must be >= 0");
  }
};

// Negative local NCC with zero-padded running-sum windows:
// cc = (sum (a-am)(b-bm))^2 / (sum (a-am)^2 * sum (b-bm)^2 + eps),
// loss = -mean over voxels of cc; value in [-1, 0].
template <typename T>
Var ncc_loss(Tape<T>& t, Var a, Var b, int w, T eps) {
  if (w < 3 || w % 2 == 0) throw TensorError("ncc: window must be odd and >= 3");
  if (!t.val(a).same_shape(t.val(b))) throw TensorError("ncc: shape mismatch");
  const T n = static_cast<T>(static_cast<std::int64_t>(w) * w * w);
  Var sa = box_sum(t, a, w);
  Var sb = box_sum(t, b, w);
  Var saa = box_sum(t, mul(t, a, a), w);
  Var sbb = box_sum(t, mul(t, b, b), w);
  Var sab = box_sum(t, mul(t, a, b), w);
  Var cross = sub(t, sab, scale(t, mul(t, sa, sb), T(1) / n));
  // rounding can push a centered second moment a hair below zero
  Var var_a = relu(t, sub(t, saa, scale(t, mul(t, sa, sa), T(1) / n)));
  Var var_b = relu(t, sub(t, sbb, scale(t, mul(t, sb, sb), T(1) / n)));
  Var cc = div(t, mul(t, cross, cross), add_const(t, mul(t, var_a, var_b), eps));
  return scale(t, mean_all(t, cc), T(-1));
}

// Mean over voxels of the summed squared forward differences of u;
// the trailing face along each axis contributes zero.
template <typename T>
Var forward_diff(Tape<T>& t, Var x, int axis) {
  const auto& vx = t.val(x);
  std::int64_t outer, ext, inner;
  detail::axis_split(vx.shape(), axis, outer, ext, inner);
  Tensor<T> out(vx.shape());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = 0; j + 1 < ext; ++j) {
      const T* cur = vx.data() + (o * ext + j) * inner;
      const T* nxt = cur + inner;
      T* dst = out.data() + (o * ext + j) * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] = nxt[i] - cur[i];
    }
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T>& gx = tp.grad_buf(x);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t j = 0; j + 1 < ext; ++j) {
        const T* gv = g.data() + (o * ext + j) * inner;
        T* cur = gx.data() + (o * ext + j) * inner;
        T* nxt = cur + inner;
        for (std::int64_t i = 0; i < inner; ++i) {
          nxt[i] += gv[i];
          cur[i] -= gv[i];
        }
      }
  });
}

template <typename T>
Var diffusion_reg(Tape<T>& t, Var u) {
  const auto& vu = t.val(u);
  if (vu.rank() != 4 || vu.dim(0) != 3) throw TensorError("diffusion_reg: expects [3][H][W][D]");
  const std::int64_t V = vu.numel() / 3;
  Var total;
  for (int axis = 1; axis <= 3; ++axis) {
    Var d = forward_diff(t, u, axis);
    Var s = sum_all(t, mul(t, d, d));
    total = total.valid() ? add(t, total, s) : s;
  }
  return scale(t, total, T(1) / static_cast<T>(V));
}

// L = ncc(I_f, I_m o u) + sigma * diffusion(u)
template <typename T>
Var total_loss(Tape<T>& t, Var fixed, Var moving, Var u, const LossConfig& cfg) {
  cfg.validate();
  Var warped = warp(t, moving, u);
  Var sim = ncc_loss(t, fixed, warped, cfg.ncc_window, static_cast<T>(cfg.eps));
  if (cfg.sigma == 0) return sim;
  return add(t, sim, scale(t, diffusion_reg(t, u), static_cast<T>(cfg.sigma)));
}

// ---------------------------------------------------------------------------
// XCAMorph: direct Unet-style registration network with attention blocks in
// the encoder and Conv blocks in the decoder.

enum class BlockKind { Maxca, DenseXca, DenseSaPlusConv, CnnBaseline };

inline BlockKind block_kind_from_string(const std::string& s) {
  if (s == "maxca") return BlockKind::Maxca;
  if (s == "dense_xca") return BlockKind::DenseXca;
  if (s == "dense_sa_plus_conv") return BlockKind::DenseSaPlusConv;
  if (s == "cnn_baseline") return BlockKind::CnnBaseline;
  throw TensorError("unknown block kind: " + s);
}

inline std::string block_kind_to_string(BlockKind k) {
  switch (k) {
    case BlockKind::Maxca: return "maxca";
    case BlockKind::DenseXca: return "dense_xca";
    case BlockKind::DenseSaPlusConv: return "dense_sa_plus_conv";
    case BlockKind::CnnBaseline: return "cnn_baseline";
  }
  return "?";
}

struct NetConfig {
  std::string preset = "tiny";
  std::vector<std::int64_t> enc_channels{8, 16, 32, 64};
  std::vector<int> heads{2, 4, 8, 16};
  std::vector<int> region{4, 4, 4, 2};
  std::vector<std::int64_t> dec_channels{32, 16, 8};
  BlockKind block = BlockKind::Maxca;
  bool no_local = false;
  bool no_global = false;
  bool linear_projection = false;
  bool nearest_upsample = false;
  std::int64_t sa_voxel_guard = 16 * 16 * 16;

  static NetConfig tiny() { return NetConfig{}; }

  static NetConfig paper_shape_check() {
    NetConfig c;
    c.preset = "paper-shape-check";
    c.enc_channels = {24, 48, 96, 192, 384};
    c.heads = {2, 4, 8, 16, 32};
    c.region = {8, 8, 6, 6, 4};
    c.dec_channels = {192, 96, 48, 24};
    return c;
  }

  static NetConfig from_preset(const std::string& name) {
    if (name == "tiny") return tiny();
    if (name == "paper-shape-check") return paper_shape_check();
    throw TensorError("unknown preset: " + name);
  }

  std::size_t levels() const { return enc_channels.size(); }

  void validate(const Shape& spatial) const {
    if (enc_channels.size() < 2 || heads.size() != enc_channels.size() ||
        region.size() != enc_channels.size() || dec_channels.size() != enc_channels.size() - 1)
      throw TensorError("net config: level counts inconsistent");
    for (std::size_t l = 1; l < enc_channels.size(); ++l)
      if (enc_channels[l] != 2 * enc_channels[l - 1])
        throw TensorError("net config: patch merging requires channel doubling per level");
    if (spatial.size() != 3) throw TensorError("net config: spatial shape must be 3-D");
    Shape s = spatial;
    for (std::size_t l = 0; l < enc_channels.size(); ++l) {
      for (auto e : s) {
        if (e % region[l] != 0)
          throw TensorError("net config: level " + std::to_string(l) + " extents " + shape_str(s) +
                            " not divisible by region size " + std::to_string(region[l]));
        if (l + 1 < enc_channels.size() && e % 2 != 0)
          throw TensorError("net config: level extents must stay even for patch merging");
      }
      for (auto& e : s) e /= 2;
    }
  }
};

template <typename T>
struct EncoderStage {
  std::unique_ptr<MaxcaBlock<T>> maxca;
  std::unique_ptr<DenseXcaBlock<T>> dense_xca;
  std::unique_ptr<DenseSaBlock<T>> dense_sa;
  std::unique_ptr<ConvBlock<T>> conv;

  Var operator()(Tape<T>& t, Var x) {
    if (maxca) return (*maxca)(t, x);
    if (dense_xca) return (*dense_xca)(t, x);
    if (dense_sa) return (*dense_sa)(t, x);
    return (*conv)(t, x);
  }

  void params(std::vector<Param<T>*>& out) {
    if (maxca) maxca->params(out);
    if (dense_xca) dense_xca->params(out);
    if (dense_sa) dense_sa->params(out);
    if (conv) conv->params(out);
  }
};

template <typename T>
class XcamorphNet {
 public:
  XcamorphNet(NetConfig cfg, Shape spatial, Rng& rng) : cfg_(std::move(cfg)), spatial_(spatial) {
    cfg_.validate(spatial_);
    const std::size_t L = cfg_.levels();
    stem_ = Conv3dLayer<T>("stem", 2, cfg_.enc_channels[0], 3, rng);
    Shape s = spatial_;
    for (std::size_t l = 0; l < L; ++l) {
      stages_.push_back(make_stage(l, s, rng));
      if (l + 1 < L) {
        merges_.emplace_back("merge" + std::to_string(l), cfg_.enc_channels[l], rng);
        for (auto& e : s) e /= 2;
      }
    }
    std::int64_t prev = cfg_.enc_channels[L - 1];
    for (std::size_t i = 0; i < cfg_.dec_channels.size(); ++i) {
      const std::size_t skip_level = L - 2 - i;
      dec_blocks_.emplace_back("dec" + std::to_string(i),
                               prev + cfg_.enc_channels[skip_level], cfg_.dec_channels[i], rng);
      prev = cfg_.dec_channels[i];
    }
    head_ = Conv3dLayer<T>("head", prev, 3, 3, rng);
    head_.init_near_zero(rng, static_cast<T>(1e-5));
  }

  const NetConfig& config() const { return cfg_; }
  const Shape& spatial() const { return spatial_; }

  // fixed/moving are [1][H][W][D]; result is the displacement field Var.
  Var operator()(Tape<T>& t, Var fixed, Var moving) {
    Var x = concat(t, {fixed, moving}, 0);
    x = stem_(t, x);
    std::vector<Var> skips;
    for (std::size_t l = 0; l < stages_.size(); ++l) {
      x = stages_[l](t, x);
      skips.push_back(x);
      if (l + 1 < stages_.size()) x = merges_[l](t, x);
    }
    Var y = skips.back();
    for (std::size_t i = 0; i < dec_blocks_.size(); ++i) {
      y = cfg_.nearest_upsample ? upsample_nearest2(t, y) : upsample_trilinear2(t, y);
      y = concat(t, {y, skips[stages_.size() - 2 - i]}, 0);
      y = dec_blocks_[i](t, y);
    }
    return head_(t, y);
  }

  Tensor<T> predict(const Tensor<T>& fixed, const Tensor<T>& moving) {
    Tape<T> t;
    t.set_recording(false);
    Var u = (*this)(t, t.leaf(fixed), t.leaf(moving));
    return t.val(u);
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    stem_.params(out);
    for (auto& s : stages_) s.params(out);
    for (auto& m : merges_) m.params(out);
    for (auto& d : dec_blocks_) d.params(out);
    head_.params(out);
    return out;
  }

  void zero_grads() {
    for (auto* p : params()) p->zero_grad();
  }

 private:
  EncoderStage<T> make_stage(std::size_t l, const Shape& s, Rng& rng) {
    EncoderStage<T> st;
    const std::int64_t c = cfg_.enc_channels[l];
    const int h = cfg_.heads[l];
    const std::string name = "enc" + std::to_string(l);
    const std::int64_t voxels = s[0] * s[1] * s[2];
    switch (cfg_.block) {
      case BlockKind::Maxca: {
        MaxcaConfig mc;
        mc.channels = c;
        mc.heads = h;
        mc.region = cfg_.region[l];
        mc.use_local = !cfg_.no_local;
        mc.use_global = !cfg_.no_global;
        mc.proj = cfg_.linear_projection ? MaxcaConfig::Proj::Linear : MaxcaConfig::Proj::Conv3;
        st.maxca = std::make_unique<MaxcaBlock<T>>(name, mc, rng);
        break;
      }
      case BlockKind::DenseXca:
        st.dense_xca = std::make_unique<DenseXcaBlock<T>>(name, c, h, rng);
        break;
      case BlockKind::DenseSaPlusConv:
        if (voxels > cfg_.sa_voxel_guard)
          st.conv = std::make_unique<ConvBlock<T>>(name, c, c, rng);
        else
          st.dense_sa = std::make_unique<DenseSaBlock<T>>(name, c, h, rng);
        break;
      case BlockKind::CnnBaseline:
        st.conv = std::make_unique<ConvBlock<T>>(name, c, c, rng);
        break;
    }
    return st;
  }

  NetConfig cfg_;
  Shape spatial_;
  Conv3dLayer<T> stem_;
  std::vector<EncoderStage<T>> stages_;
  std::vector<PatchMergingLayer<T>> merges_;
  std::vector<ConvBlock<T>> dec_blocks_;
  Conv3dLayer<T> head_;
};

}  // namespace maxca
