#pragma once

#include "maxca/nn.hpp"

namespace maxca {

// Size of the attention maps allocated by the most recent attend call;
// the bench command checks the resolution scaling of these numbers.
struct AttnStats {
  std::size_t map_bytes_per_problem = 0;  // one head on one batch element
  std::size_t total_map_bytes = 0;        // summed over a whole block forward
  void reset() { *this = AttnStats{}; }
};
inline AttnStats& attn_stats() {
  static AttnStats s;
  return s;
}

struct MaxcaConfig {
  std::int64_t channels = 0;
  int heads = 1;
  int region = 1;
  bool use_local = true;
  bool use_global = true;
  enum class Proj { Conv3, Linear };
  Proj proj = Proj::Conv3;
  bool learnable_tau = true;
  bool pre_norm = false;
  int se_reduction = 4;

  // Appendix-style default: one head per 12 channels.
  static int default_heads(std::int64_t channels) {
    return std::max<int>(1, static_cast<int>(std::llround(static_cast<double>(channels) / 12.0)));
  }

  void validate() const {
    if (channels < 1 || heads < 1 || channels % heads != 0)
      throw TensorError("maxca config: channels must be divisible by heads");
    if (region < 1) throw TensorError("maxca config: region size must be >= 1");
    if (!use_local && !use_global)
      throw TensorError("maxca config: at least one branch must be enabled");
  }
};

// ---------------------------------------------------------------------------
// Region split/merge: [C][H][W][D] <-> [G][R^3][C], both orders lexicographic.

template <typename T>
Var region_split(Tape<T>& t, Var x, int R) {
  const auto& vx = t.val(x);
  if (vx.rank() != 4) throw TensorError("region_split: expects [C][H][W][D]");
  const std::int64_t C = vx.dim(0), H = vx.dim(1), W = vx.dim(2), D = vx.dim(3);
  if (R < 1 || H % R || W % R || D % R)
    throw TensorError("region_split: extents " + shape_str(vx.shape()) +
                      " not divisible by region size " + std::to_string(R));
  Var y = reshape(t, x, Shape{C, H / R, R, W / R, R, D / R, R});
  y = permute(t, y, {1, 3, 5, 2, 4, 6, 0});
  return reshape(t, y, Shape{(H / R) * (W / R) * (D / R), static_cast<std::int64_t>(R) * R * R, C});
}

template <typename T>
Var region_merge(Tape<T>& t, Var x, int R, std::int64_t H, std::int64_t W, std::int64_t D) {
  const auto& vx = t.val(x);
  if (vx.rank() != 3) throw TensorError("region_merge: expects [G][R^3][C]");
  const std::int64_t C = vx.dim(2);
  if (vx.dim(0) * vx.dim(1) != H * W * D || vx.dim(1) != static_cast<std::int64_t>(R) * R * R)
    throw TensorError("region_merge: extents inconsistent with region geometry");
  Var y = reshape(t, x, Shape{H / R, W / R, D / R, R, R, R, C});
  y = permute(t, y, {6, 0, 3, 1, 4, 2, 5});
  return reshape(t, y, Shape{C, H, W, D});
}

// ---------------------------------------------------------------------------
// XCA core: channel-to-channel attention over the d x d cross-covariance of
// token-normalized queries and keys. Q,K,V are [B][N][d]; tau is rank-0.
// The attention map is column-stochastic: A[i][j] weights value channel i
// in output channel j, and each column sums to 1.

template <typename T>
Var xca_attend(Tape<T>& t, Var q, Var k, Var v, Var tau, T eps = static_cast<T>(1e-6)) {
  const auto& vq = t.val(q);
  if (vq.rank() != 3) throw TensorError("xca_attend: expects [B][N][d]");
  const std::int64_t B = vq.dim(0), N = vq.dim(1), d = vq.dim(2);
  if (N == 0 || d == 0) throw TensorError("xca_attend: empty token or channel axis");
  Var qn = l2_normalize(t, q, 1, eps);
  Var kn = l2_normalize(t, k, 1, eps);
  Var cov = matmul(t, permute(t, kn, {0, 2, 1}), qn);  // [B][d][d]
  cov = mul(t, cov, tau);
  Var attn = softmax(t, cov, 1);  // columns (value-channel axis) sum to 1
  auto& stats = attn_stats();
  stats.map_bytes_per_problem = static_cast<std::size_t>(d * d) * sizeof(T);
  stats.total_map_bytes += static_cast<std::size_t>(B * d * d) * sizeof(T);
  return matmul(t, v, attn);  // [B][N][d]
}

// Standard scaled-dot-product self-attention (the quadratic reference).
template <typename T>
Var sa_attend(Tape<T>& t, Var q, Var k, Var v) {
  const auto& vq = t.val(q);
  const std::int64_t B = vq.dim(0), N = vq.dim(1), d = vq.dim(2);
  Var scores = matmul(t, q, permute(t, k, {0, 2, 1}));  // [B][N][N]
  scores = scale(t, scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  Var attn = softmax(t, scores, 2);  // rows sum to 1
  auto& stats = attn_stats();
  stats.map_bytes_per_problem = static_cast<std::size_t>(N * N) * sizeof(T);
  stats.total_map_bytes += static_cast<std::size_t>(B * N * N) * sizeof(T);
  return matmul(t, attn, v);
}

// ---------------------------------------------------------------------------
// Shared residual channel-attention tail:
// layer_norm -> conv3 -> leaky_relu(0.2) -> conv3 -> SE -> + residual.

template <typename T>
struct ChannelAttentionTail {
  LayerNormLayer<T> ln;
  Conv3dLayer<T> c1, c2;
  SELayer<T> se;

  ChannelAttentionTail() = default;
  ChannelAttentionTail(const std::string& name, std::int64_t c, int se_reduction, Rng& rng) {
    ln = LayerNormLayer<T>(name + ".ln", c);
    c1 = Conv3dLayer<T>(name + ".c1", c, c, 3, rng);
    c2 = Conv3dLayer<T>(name + ".c2", c, c, 3, rng);
    se = SELayer<T>(name + ".se", c, se_reduction, rng);
  }

  Var operator()(Tape<T>& t, Var x) {
    Var y = ln(t, x);
    y = leaky_relu(t, c1(t, y), static_cast<T>(0.2));
    y = c2(t, y);
    y = se(t, y);
    return add(t, x, y);
  }

  void params(std::vector<Param<T>*>& out) {
    ln.params(out);
    c1.params(out);
    c2.params(out);
    se.params(out);
  }
};

namespace detail {

// Per-head temperatures as one [heads] parameter; heads are contiguous
// channel groups of width d = C/heads.
template <typename T>
std::vector<Var> head_taus(Tape<T>& t, Param<T>& tau, int heads, bool learnable) {
  std::vector<Var> out;
  if (learnable) {
    Var tv = t.param(tau);
    auto parts = split(t, tv, heads, 0);
    for (int h = 0; h < heads; ++h) out.push_back(reshape(t, parts[static_cast<std::size_t>(h)], Shape{}));
  } else {
    for (int h = 0; h < heads; ++h) out.push_back(t.leaf(Tensor<T>::scalar(T(1))));
  }
  return out;
}

// Multi-head XCA over [B][N][C]: channels split into `heads` groups.
template <typename T>
Var multihead_xca(Tape<T>& t, Var q, Var k, Var v, std::vector<Var>& taus, int heads) {
  auto qs = split(t, q, heads, 2);
  auto ks = split(t, k, heads, 2);
  auto vs = split(t, v, heads, 2);
  std::vector<Var> outs;
  for (int h = 0; h < heads; ++h)
    outs.push_back(xca_attend(t, qs[static_cast<std::size_t>(h)], ks[static_cast<std::size_t>(h)],
                              vs[static_cast<std::size_t>(h)], taus[static_cast<std::size_t>(h)]));
  return concat(t, outs, 2);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MAXCA block (two-branch multi-axis XCA with conv QKV projection).

template <typename T>
struct MaxcaBlock {
  MaxcaConfig cfg;
  Conv3dLayer<T> expand;   // 1x1x1 C -> 2C (or C -> C single-branch)
  Conv3dLayer<T> ql, kl, vl, qg, kg, vg;
  Conv3dLayer<T> reduce;   // 1x1x1 back to C
  Param<T> tau_local, tau_global;
  LayerNormLayer<T> pre_ln;
  ChannelAttentionTail<T> tail;

  MaxcaBlock() = default;
  MaxcaBlock(const std::string& name, MaxcaConfig config, Rng& rng) : cfg(config) {
    cfg.validate();
    const std::int64_t C = cfg.channels;
    const int branches = (cfg.use_local ? 1 : 0) + (cfg.use_global ? 1 : 0);
    const int pk = cfg.proj == MaxcaConfig::Proj::Conv3 ? 3 : 1;
    expand = Conv3dLayer<T>(name + ".expand", C, branches * C, 1, rng);
    if (cfg.use_local) {
      ql = Conv3dLayer<T>(name + ".local.q", C, C, pk, rng);
      kl = Conv3dLayer<T>(name + ".local.k", C, C, pk, rng);
      vl = Conv3dLayer<T>(name + ".local.v", C, C, pk, rng);
      tau_local = Param<T>(name + ".local.tau", Tensor<T>(Shape{cfg.heads}, T(1)));
    }
    if (cfg.use_global) {
      qg = Conv3dLayer<T>(name + ".global.q", C, C, pk, rng);
      kg = Conv3dLayer<T>(name + ".global.k", C, C, pk, rng);
      vg = Conv3dLayer<T>(name + ".global.v", C, C, pk, rng);
      tau_global = Param<T>(name + ".global.tau", Tensor<T>(Shape{cfg.heads}, T(1)));
    }
    reduce = Conv3dLayer<T>(name + ".reduce", branches * C, C, 1, rng);
    if (cfg.pre_norm) pre_ln = LayerNormLayer<T>(name + ".pre_ln", C);
    tail = ChannelAttentionTail<T>(name + ".tail", C, cfg.se_reduction, rng);
  }

  Var operator()(Tape<T>& t, Var f_in) {
    const auto& vin = t.val(f_in);
    const std::int64_t H = vin.dim(1), W = vin.dim(2), D = vin.dim(3);
    const int R = cfg.region;
    Var x = cfg.pre_norm ? pre_ln(t, f_in) : f_in;
    Var expanded = expand(t, x);
    std::vector<Var> branch_outs;
    int branch = 0;
    const int branches = (cfg.use_local ? 1 : 0) + (cfg.use_global ? 1 : 0);
    auto feats = branches == 2 ? split(t, expanded, 2, 0) : std::vector<Var>{expanded};
    if (cfg.use_local) {
      Var f = feats[static_cast<std::size_t>(branch++)];
      Var q = region_split(t, ql(t, f), R);
      Var k = region_split(t, kl(t, f), R);
      Var v = region_split(t, vl(t, f), R);
      // regional XCA: one attention problem per region, tokens = R^3
      auto taus = detail::head_taus(t, tau_local, cfg.heads, cfg.learnable_tau);
      Var y = detail::multihead_xca(t, q, k, v, taus, cfg.heads);
      branch_outs.push_back(region_merge(t, y, R, H, W, D));
    }
    if (cfg.use_global) {
      Var f = feats[static_cast<std::size_t>(branch++)];
      Var q = permute(t, region_split(t, qg(t, f), R), {1, 0, 2});
      Var k = permute(t, region_split(t, kg(t, f), R), {1, 0, 2});
      Var v = permute(t, region_split(t, vg(t, f), R), {1, 0, 2});
      // dilated XCA: one problem per intra-region offset, tokens = regions
      auto taus = detail::head_taus(t, tau_global, cfg.heads, cfg.learnable_tau);
      Var y = detail::multihead_xca(t, q, k, v, taus, cfg.heads);
      branch_outs.push_back(region_merge(t, permute(t, y, {1, 0, 2}), R, H, W, D));
    }
    Var merged = branch_outs.size() == 2 ? concat(t, branch_outs, 0) : branch_outs[0];
    Var out = add(t, f_in, reduce(t, merged));
    return tail(t, out);
  }

  void params(std::vector<Param<T>*>& out) {
    expand.params(out);
    if (cfg.use_local) {
      ql.params(out);
      kl.params(out);
      vl.params(out);
      if (cfg.learnable_tau) out.push_back(&tau_local);
    }
    if (cfg.use_global) {
      qg.params(out);
      kg.params(out);
      vg.params(out);
      if (cfg.learnable_tau) out.push_back(&tau_global);
    }
    reduce.params(out);
    if (cfg.pre_norm) pre_ln.params(out);
    tail.params(out);
  }
};

// ---------------------------------------------------------------------------
// Restormer-style reference: XCA over the whole voxel set, no regions.
// Mirrors the MAXCA single-branch parameter layout so the degenerate
// MAXCA configuration (single region, local only, linear projection) can
// be cross-checked against it with copied weights.

template <typename T>
struct DenseXcaBlock {
  MaxcaConfig cfg;
  Conv3dLayer<T> expand, q, k, v, reduce;
  Param<T> tau;
  ChannelAttentionTail<T> tail;

  DenseXcaBlock() = default;
  DenseXcaBlock(const std::string& name, std::int64_t channels, int heads, Rng& rng,
                int se_reduction = 4, bool learnable_tau = true) {
    cfg.channels = channels;
    cfg.heads = heads;
    cfg.learnable_tau = learnable_tau;
    cfg.se_reduction = se_reduction;
    cfg.use_global = false;
    cfg.validate();
    expand = Conv3dLayer<T>(name + ".expand", channels, channels, 1, rng);
    q = Conv3dLayer<T>(name + ".q", channels, channels, 1, rng);
    k = Conv3dLayer<T>(name + ".k", channels, channels, 1, rng);
    v = Conv3dLayer<T>(name + ".v", channels, channels, 1, rng);
    tau = Param<T>(name + ".tau", Tensor<T>(Shape{heads}, T(1)));
    reduce = Conv3dLayer<T>(name + ".reduce", channels, channels, 1, rng);
    tail = ChannelAttentionTail<T>(name + ".tail", channels, se_reduction, rng);
  }

  Var operator()(Tape<T>& t, Var f_in) {
    const auto& vin = t.val(f_in);
    const std::int64_t C = vin.dim(0);
    const std::int64_t V = vin.dim(1) * vin.dim(2) * vin.dim(3);
    Var f = expand(t, f_in);
    // flatten voxels to one token axis: [C][H][W][D] -> [1][V][C]
    auto flat = [&](Var z) {
      return permute(t, reshape(t, z, Shape{1, C, V}), {0, 2, 1});
    };
    Var qv = flat(q(t, f));
    Var kv = flat(k(t, f));
    Var vv = flat(v(t, f));
    auto taus = detail::head_taus(t, tau, cfg.heads, cfg.learnable_tau);
    Var y = detail::multihead_xca(t, qv, kv, vv, taus, cfg.heads);
    y = reshape(t, permute(t, y, {0, 2, 1}), vin.shape());
    Var out = add(t, f_in, reduce(t, y));
    return tail(t, out);
  }

  void params(std::vector<Param<T>*>& out) {
    expand.params(out);
    q.params(out);
    k.params(out);
    v.params(out);
    if (cfg.learnable_tau) out.push_back(&tau);
    reduce.params(out);
    tail.params(out);
  }
};

// ---------------------------------------------------------------------------
// Dense self-attention reference with its N x N map; guarded to small
// resolutions because that map is the point of the comparison.

template <typename T>
struct DenseSaBlock {
  std::int64_t channels = 0;
  int heads = 1;
  std::int64_t max_voxels = 16 * 16 * 16;
  Conv3dLayer<T> q, k, v, reduce;
  ChannelAttentionTail<T> tail;

  DenseSaBlock() = default;
  DenseSaBlock(const std::string& name, std::int64_t c, int h, Rng& rng, int se_reduction = 4)
      : channels(c), heads(h) {
    if (c % h != 0) throw TensorError("dense_sa: channels must be divisible by heads");
    q = Conv3dLayer<T>(name + ".q", c, c, 1, rng);
    k = Conv3dLayer<T>(name + ".k", c, c, 1, rng);
    v = Conv3dLayer<T>(name + ".v", c, c, 1, rng);
    reduce = Conv3dLayer<T>(name + ".reduce", c, c, 1, rng);
    tail = ChannelAttentionTail<T>(name + ".tail", c, se_reduction, rng);
  }

  Var operator()(Tape<T>& t, Var f_in) {
    const auto& vin = t.val(f_in);
    const std::int64_t C = vin.dim(0);
    const std::int64_t V = vin.dim(1) * vin.dim(2) * vin.dim(3);
    if (V > max_voxels)
      throw TensorError("dense_sa: resolution guard exceeded (" + std::to_string(V) + " voxels)");
    auto flat = [&](Var z) { return permute(t, reshape(t, z, Shape{1, C, V}), {0, 2, 1}); };
    Var qv = flat(q(t, f_in));
    Var kv = flat(k(t, f_in));
    Var vv = flat(v(t, f_in));
    auto qs = split(t, qv, heads, 2);
    auto ks = split(t, kv, heads, 2);
    auto vs = split(t, vv, heads, 2);
    std::vector<Var> outs;
    for (int h = 0; h < heads; ++h)
      outs.push_back(sa_attend(t, qs[static_cast<std::size_t>(h)], ks[static_cast<std::size_t>(h)],
                               vs[static_cast<std::size_t>(h)]));
    Var y = concat(t, outs, 2);
    y = reshape(t, permute(t, y, {0, 2, 1}), vin.shape());
    Var out = add(t, f_in, reduce(t, y));
    return tail(t, out);
  }

  void params(std::vector<Param<T>*>& out) {
    q.params(out);
    k.params(out);
    v.params(out);
    reduce.params(out);
    tail.params(out);
  }
};

}  // namespace maxca
