#pragma once

#include "maxca/gradcheck.hpp"
#include "maxca/regnet.hpp"

namespace maxca {

// Finite-difference sweep over every differentiable operation, run in f64.
// Each row reports the worst relative error across all perturbed inputs.

struct GradSuiteRow {
  std::string op;
  double max_rel_err = 0.0;
  double tol = 1e-4;
  bool pass = false;
};

namespace detail {

inline Param<double> rand_param(const std::string& name, Shape shape, Rng& rng, double lo = -1.0,
                                double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  fill_uniform(t, rng, lo, hi);
  return Param<double>(name, std::move(t));
}

// Pushes values away from zero so kinked ops (relu, abs-like) are not
// finite-differenced across their kink.
inline void away_from_zero(Tensor<double>& t, double margin) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (std::abs(t[i]) < margin) t[i] = t[i] < 0 ? t[i] - margin : t[i] + margin;
}

// Trilinear warps are piecewise linear in the field with kinks at integer
// sample coordinates and at the clamping boundary; keep every sample
// coordinate comfortably inside a linear piece.
inline void sanitize_warp_field(Tensor<double>& u, const std::int64_t ext[3]) {
  const std::int64_t V = u.numel() / 3;
  for (int a = 0; a < 3; ++a) {
    std::int64_t vi = 0;
    for (std::int64_t h = 0; h < ext[0]; ++h)
      for (std::int64_t w = 0; w < ext[1]; ++w)
        for (std::int64_t d = 0; d < ext[2]; ++d, ++vi) {
          const std::int64_t ix = a == 0 ? h : a == 1 ? w : d;
          double& uv = u.data()[a * V + vi];
          double c = static_cast<double>(ix) + uv;
          c = std::clamp(c, 0.15, static_cast<double>(ext[a] - 1) - 0.15);
          const double frac = c - std::floor(c);
          if (frac < 0.15) c += 0.15 - frac;
          if (frac > 0.85) c -= frac - 0.85;
          uv = c - static_cast<double>(ix);
        }
  }
}

}  // namespace detail

inline std::vector<GradSuiteRow> run_grad_suite(std::uint64_t seed) {
  std::vector<GradSuiteRow> rows;
  Rng rng(seed);
  using P = Param<double>;
  using T = Tape<double>;
  auto check = [&](const std::string& op, double tol, std::vector<P*> ps,
                   const std::function<Var(T&)>& build) {
    auto r = grad_check(ps, build);
    rows.push_back({op, r.max_rel_err, tol, r.max_rel_err <= tol});
  };

  {  // elementwise binary ops and scalar broadcast
    P a = detail::rand_param("a", {2, 3, 4}, rng);
    P b = detail::rand_param("b", {2, 3, 4}, rng);
    detail::away_from_zero(b.value, 0.2);
    P s = detail::rand_param("s", {}, rng);
    detail::away_from_zero(s.value, 0.2);
    check("add", 1e-4, {&a, &b}, [&](T& t) { return sum_all(t, add(t, t.param(a), t.param(b))); });
    check("sub", 1e-4, {&a, &b}, [&](T& t) { return sum_all(t, sub(t, t.param(a), t.param(b))); });
    check("mul", 1e-4, {&a, &b}, [&](T& t) { return sum_all(t, mul(t, t.param(a), t.param(b))); });
    check("div", 1e-4, {&a, &b}, [&](T& t) { return sum_all(t, div(t, t.param(a), t.param(b))); });
    check("mul_scalar_broadcast", 1e-4, {&a, &s},
          [&](T& t) { return sum_all(t, mul(t, t.param(a), t.param(s))); });
    check("scale_add_const", 1e-4, {&a}, [&](T& t) {
      return sum_all(t, add_const(t, scale(t, t.param(a), 0.7), 0.3));
    });
  }
  {  // activations
    P a = detail::rand_param("a", {2, 3, 4}, rng);
    detail::away_from_zero(a.value, 0.05);
    check("relu", 1e-4, {&a}, [&](T& t) { return sum_all(t, relu(t, t.param(a))); });
    check("leaky_relu", 1e-4, {&a},
          [&](T& t) { return sum_all(t, leaky_relu(t, t.param(a), 0.2)); });
    check("sigmoid", 1e-4, {&a}, [&](T& t) { return sum_all(t, sigmoid(t, t.param(a))); });
  }
  {  // reductions and shape ops
    P a = detail::rand_param("a", {2, 3, 4}, rng);
    P w = detail::rand_param("w", {6, 4}, rng);
    check("mean_all", 1e-4, {&a}, [&](T& t) { return mean_all(t, t.param(a)); });
    check("reshape_permute", 1e-4, {&a, &w}, [&](T& t) {
      Var y = permute(t, t.param(a), {2, 0, 1});           // [4][2][3]
      y = reshape(t, y, Shape{4, 6});
      return sum_all(t, mul(t, y, permute(t, t.param(w), {1, 0})));
    });
    check("concat_split", 1e-4, {&a}, [&](T& t) {
      auto parts = split(t, t.param(a), 3, 1);
      Var back = concat(t, {parts[2], parts[0], parts[1]}, 1);
      return sum_all(t, mul(t, back, back));
    });
    P bias = detail::rand_param("bias", {3}, rng);
    check("add_bias", 1e-4, {&a, &bias},
          [&](T& t) { return sum_all(t, mul(t, add_bias(t, t.param(a), t.param(bias), 1),
                                            t.param(a))); });
  }
  {  // matmul / softmax / l2_normalize
    P q = detail::rand_param("q", {2, 3, 4}, rng);
    P k = detail::rand_param("k", {2, 4, 5}, rng);
    check("matmul", 1e-4, {&q, &k},
          [&](T& t) { return sum_all(t, matmul(t, t.param(q), t.param(k))); });
    P x = detail::rand_param("x", {2, 3, 4}, rng);
    P y = detail::rand_param("y", {2, 3, 4}, rng);
    check("softmax", 1e-4, {&x, &y}, [&](T& t) {
      return sum_all(t, mul(t, softmax(t, t.param(x), 1), t.param(y)));
    });
    check("l2_normalize", 1e-4, {&x, &y}, [&](T& t) {
      return sum_all(t, mul(t, l2_normalize(t, t.param(x), 1, 1e-6), t.param(y)));
    });
  }
  {  // conv3d: 1x1x1 GEMM, 3x3x3 im2col path, 3x3x3 direct path
    struct Case {
      const char* name;
      std::int64_t c, h, w, d;
      int k;
    } cases[] = {{"conv3d_k1", 3, 2, 3, 4, 1},
                 {"conv3d_k3_gemm", 2, 3, 4, 4, 3},
                 {"conv3d_k3_direct", 2, 2, 3, 24, 3}};
    for (const auto& cs : cases) {
      P x = detail::rand_param("x", {cs.c, cs.h, cs.w, cs.d}, rng);
      P w = detail::rand_param("w", {cs.c, cs.c, cs.k, cs.k, cs.k}, rng);
      P b = detail::rand_param("b", {cs.c}, rng);
      check(cs.name, 1e-4, {&x, &w, &b}, [&](T& t) {
        return sum_all(t, sigmoid(t, conv3d(t, t.param(x), t.param(w), t.param(b))));
      });
    }
  }
  {  // box filter and norms
    P x = detail::rand_param("x", {2, 3, 4, 5}, rng);
    P y = detail::rand_param("y", {2, 3, 4, 5}, rng);
    check("box_sum", 1e-4, {&x, &y},
          [&](T& t) { return sum_all(t, mul(t, box_sum(t, t.param(x), 3), t.param(y))); });
    InstanceNormLayer<double> inl("in", 2);
    fill_uniform(inl.gamma.value, rng, 0.5, 1.5);
    fill_uniform(inl.beta.value, rng, -0.5, 0.5);
    check("instance_norm", 1e-4, {&x, &y, &inl.gamma, &inl.beta},
          [&](T& t) { return sum_all(t, mul(t, inl(t, t.param(x)), t.param(y))); });
    LayerNormLayer<double> lnl("ln", 2);
    fill_uniform(lnl.gamma.value, rng, 0.5, 1.5);
    fill_uniform(lnl.beta.value, rng, -0.5, 0.5);
    check("layer_norm", 1e-4, {&x, &y, &lnl.gamma, &lnl.beta},
          [&](T& t) { return sum_all(t, mul(t, lnl(t, t.param(x)), t.param(y))); });
    SELayer<double> se("se", 2, 2, rng);
    check("se_layer", 1e-4, {&x, &y, &se.fc1.w, &se.fc1.b, &se.fc2.w, &se.fc2.b},
          [&](T& t) { return sum_all(t, mul(t, se(t, t.param(x)), t.param(y))); });
    P up = detail::rand_param("up", {2, 2, 2, 2}, rng);
    P ug = detail::rand_param("ug", {2, 4, 4, 4}, rng);
    check("upsample_trilinear2", 1e-4, {&up, &ug}, [&](T& t) {
      return sum_all(t, mul(t, upsample_trilinear2(t, t.param(up)), t.param(ug)));
    });
  }
  {  // attention cores
    P q = detail::rand_param("q", {2, 5, 3}, rng);
    P k = detail::rand_param("k", {2, 5, 3}, rng);
    P v = detail::rand_param("v", {2, 5, 3}, rng);
    P tau = detail::rand_param("tau", {}, rng, 0.5, 1.5);
    P g = detail::rand_param("g", {2, 5, 3}, rng);
    check("xca_attend", 1e-4, {&q, &k, &v, &tau, &g}, [&](T& t) {
      return sum_all(t, mul(t, xca_attend(t, t.param(q), t.param(k), t.param(v), t.param(tau)),
                            t.param(g)));
    });
    check("sa_attend", 1e-4, {&q, &k, &v, &g}, [&](T& t) {
      return sum_all(t, mul(t, sa_attend(t, t.param(q), t.param(k), t.param(v)), t.param(g)));
    });
    P f = detail::rand_param("f", {3, 4, 4, 4}, rng);
    P fg = detail::rand_param("fg", {3, 4, 4, 4}, rng);
    check("region_split_merge", 1e-4, {&f, &fg}, [&](T& t) {
      Var y = region_merge(t, region_split(t, t.param(f), 2), 2, 4, 4, 4);
      return sum_all(t, mul(t, y, t.param(fg)));
    });
  }
  {  // full attention blocks
    Rng brng(seed + 17);
    MaxcaConfig mc;
    mc.channels = 4;
    mc.heads = 2;
    mc.region = 2;
    mc.se_reduction = 2;
    MaxcaBlock<double> block("mb", mc, brng);
    P x = detail::rand_param("x", {4, 4, 4, 4}, rng, -0.5, 0.5);
    std::vector<P*> ps{&x};
    block.params(ps);
    check("maxca_block", 1e-4, ps,
          [&](T& t) { return sum_all(t, sigmoid(t, block(t, t.param(x)))); });

    DenseXcaBlock<double> dense("dxb", 4, 2, brng, 2);
    P xd = detail::rand_param("xd", {4, 3, 3, 3}, rng, -0.5, 0.5);
    std::vector<P*> psd{&xd};
    dense.params(psd);
    check("dense_xca_block", 1e-4, psd,
          [&](T& t) { return sum_all(t, sigmoid(t, dense(t, t.param(xd)))); });

    DenseSaBlock<double> sab("sab", 4, 2, brng, 2);
    P xs = detail::rand_param("xs", {4, 3, 3, 3}, rng, -0.5, 0.5);
    std::vector<P*> pss{&xs};
    sab.params(pss);
    check("dense_sa_block", 1e-4, pss,
          [&](T& t) { return sum_all(t, sigmoid(t, sab(t, t.param(xs)))); });
  }
  {  // losses and warp
    const std::int64_t ext[3] = {4, 4, 5};
    P img = detail::rand_param("img", {1, ext[0], ext[1], ext[2]}, rng, 0.0, 1.0);
    P fix = detail::rand_param("fix", {1, ext[0], ext[1], ext[2]}, rng, 0.0, 1.0);
    P u = detail::rand_param("u", {3, ext[0], ext[1], ext[2]}, rng, -0.8, 0.8);
    detail::sanitize_warp_field(u.value, ext);
    P g = detail::rand_param("g", {1, ext[0], ext[1], ext[2]}, rng);
    check("warp", 1e-3, {&img, &u, &g}, [&](T& t) {
      return sum_all(t, mul(t, warp(t, t.param(img), t.param(u)), t.param(g)));
    });
    check("ncc_loss", 1e-4, {&img, &fix},
          [&](T& t) { return ncc_loss(t, t.param(fix), t.param(img), 3, 1e-5); });
    check("diffusion_reg", 1e-4, {&u}, [&](T& t) { return diffusion_reg(t, t.param(u)); });
    LossConfig lc;
    lc.ncc_window = 3;
    lc.sigma = 0.5;
    check("total_loss", 1e-3, {&img, &fix, &u}, [&](T& t) {
      return total_loss(t, t.param(fix), t.param(img), t.param(u), lc);
    });
  }
  return rows;
}

inline bool grad_suite_ok(const std::vector<GradSuiteRow>& rows) {
  for (const auto& r : rows)
    if (!r.pass) return false;
  return !rows.empty();
}

}  // namespace maxca
