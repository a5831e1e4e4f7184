#include <catch2/catch_amalgamated.hpp>

#include "maxca/metrics.hpp"
#include "maxca/regnet.hpp"

using namespace maxca;

namespace {

double naive_diffusion(const Tensor<double>& u) {
  const std::int64_t H = u.dim(1), W = u.dim(2), D = u.dim(3);
  const std::int64_t V = H * W * D;
  double acc = 0;
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        for (std::int64_t d = 0; d < D; ++d) {
          const double cur = u.at(c, h, w, d);
          if (h + 1 < H) acc += std::pow(u.at(c, h + 1, w, d) - cur, 2);
          if (w + 1 < W) acc += std::pow(u.at(c, h, w + 1, d) - cur, 2);
          if (d + 1 < D) acc += std::pow(u.at(c, h, w, d + 1) - cur, 2);
        }
  return acc / static_cast<double>(V);
}

}  // namespace

TEST_CASE("zero field warps to the identity") {
  Rng rng(3);
  Tensor<float> img(Shape{1, 4, 5, 6});
  fill_uniform(img, rng, 0.0f, 1.0f);
  Tensor<float> u(Shape{3, 4, 5, 6});
  Tensor<float> out = warp_tensor(img, u);
  for (std::int64_t i = 0; i < img.numel(); ++i) CHECK(out[i] == img[i]);
}

TEST_CASE("unit translation along the last axis shifts the image") {
  Tensor<float> img(Shape{1, 1, 1, 5});
  for (int i = 0; i < 5; ++i) img[i] = static_cast<float>(i * i);
  Tensor<float> u(Shape{3, 1, 1, 5});
  for (int i = 0; i < 5; ++i) u.at(2, 0, 0, i) = 1.0f;  // sample at d + 1
  Tensor<float> out = warp_tensor(img, u);
  for (int i = 0; i < 4; ++i) CHECK(out[i] == img[i + 1]);
  CHECK(out[4] == img[4]);  // clamped at the boundary
}

TEST_CASE("nearest warp rounds sample coordinates") {
  LabelMap labels(Shape{1, 1, 1, 4});
  for (int i = 0; i < 4; ++i) labels[i] = static_cast<std::uint16_t>(i);
  Tensor<float> u(Shape{3, 1, 1, 4});
  u.at(2, 0, 0, 0) = 0.6f;   // rounds to 1
  u.at(2, 0, 0, 1) = 0.4f;   // rounds back to 1
  u.at(2, 0, 0, 3) = 5.0f;   // clamped to 3
  LabelMap out = warp_nearest(labels, u);
  CHECK(out[0] == 1);
  CHECK(out[1] == 1);
  CHECK(out[2] == 2);
  CHECK(out[3] == 3);
}

TEST_CASE("ncc of an image with itself is minus one") {
  Rng rng(11);
  Tensor<double> img(Shape{1, 5, 5, 5});
  fill_uniform(img, rng, 0.0, 1.0);
  Tape<double> t;
  t.set_recording(false);
  const double v = t.val(ncc_loss(t, t.leaf(img), t.leaf(img), 3, 1e-9))[0];
  CHECK(v == Catch::Approx(-1.0).margin(1e-3));
}

TEST_CASE("diffusion regularizer matches the explicit-loop oracle") {
  Rng rng(17);
  Tensor<double> u(Shape{3, 3, 4, 5});
  fill_uniform(u, rng, -2.0, 2.0);
  Tape<double> t;
  t.set_recording(false);
  CHECK(t.val(diffusion_reg(t, t.leaf(u)))[0] ==
        Catch::Approx(naive_diffusion(u)).epsilon(1e-10));
}

TEST_CASE("total loss composes similarity and regularity") {
  Rng rng(23);
  Tensor<double> fix(Shape{1, 4, 4, 4}), mov(Shape{1, 4, 4, 4}), u(Shape{3, 4, 4, 4});
  fill_uniform(fix, rng, 0.0, 1.0);
  fill_uniform(mov, rng, 0.0, 1.0);
  fill_uniform(u, rng, -0.4, 0.4);
  LossConfig lc;
  lc.ncc_window = 3;
  lc.sigma = 0.7;
  Tape<double> t;
  t.set_recording(false);
  const double total = t.val(total_loss(t, t.leaf(fix), t.leaf(mov), t.leaf(u), lc))[0];
  Tensor<double> warped = warp_tensor(mov, u);
  const double sim = t.val(ncc_loss(t, t.leaf(fix), t.leaf(warped), 3, 1e-5))[0];
  const double reg = t.val(diffusion_reg(t, t.leaf(u)))[0];
  CHECK(total == Catch::Approx(sim + 0.7 * reg).epsilon(1e-10));
}

TEST_CASE("net config validates divisibility per level") {
  NetConfig cfg = NetConfig::tiny();
  CHECK_NOTHROW(cfg.validate(Shape{32, 32, 32}));
  CHECK_NOTHROW(cfg.validate(Shape{16, 16, 16}));
  CHECK_THROWS_AS(cfg.validate(Shape{12, 12, 12}), TensorError);
  CHECK_THROWS_AS(cfg.validate(Shape{32, 32}), TensorError);
  NetConfig shape_check = NetConfig::paper_shape_check();
  CHECK_NOTHROW(shape_check.validate(Shape{192, 192, 192}));
}

TEST_CASE("fresh network predicts a near-zero field of the right shape") {
  Rng rng(31);
  XcamorphNet<float> net(NetConfig::tiny(), Shape{16, 16, 16}, rng);
  Tensor<float> fixed(Shape{1, 16, 16, 16}), moving(Shape{1, 16, 16, 16});
  fill_uniform(fixed, rng, 0.0f, 1.0f);
  fill_uniform(moving, rng, 0.0f, 1.0f);
  Tensor<float> u = net.predict(fixed, moving);
  REQUIRE(u.shape() == Shape{3, 16, 16, 16});
  double mx = 0;
  for (std::int64_t i = 0; i < u.numel(); ++i)
    mx = std::max(mx, std::abs(static_cast<double>(u[i])));
  CHECK(mx < 1e-2);  // near-identity initialization of the head
}

TEST_CASE("block kind round trips through strings") {
  for (auto k : {BlockKind::Maxca, BlockKind::DenseXca, BlockKind::DenseSaPlusConv,
                 BlockKind::CnnBaseline})
    CHECK(block_kind_from_string(block_kind_to_string(k)) == k);
  CHECK_THROWS_AS(block_kind_from_string("swin"), TensorError);
}

TEST_CASE("every encoder block kind runs a forward pass") {
  for (auto kind : {BlockKind::Maxca, BlockKind::DenseXca, BlockKind::DenseSaPlusConv,
                    BlockKind::CnnBaseline}) {
    Rng rng(37);
    NetConfig cfg = NetConfig::tiny();
    cfg.block = kind;
    XcamorphNet<float> net(cfg, Shape{16, 16, 16}, rng);
    Tensor<float> a(Shape{1, 16, 16, 16}), b(Shape{1, 16, 16, 16});
    fill_uniform(a, rng, 0.0f, 1.0f);
    fill_uniform(b, rng, 0.0f, 1.0f);
    CHECK(net.predict(a, b).shape() == Shape{3, 16, 16, 16});
  }
}
