#include <catch2/catch_amalgamated.hpp>

#include "maxca/tape.hpp"

using namespace maxca;

TEST_CASE("tensor shape and accessors") {
  Tensor<float> t(Shape{2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.at(1, 2) == 1.5f);
  t.at(1, 2) = 7.0f;
  CHECK(t[5] == 7.0f);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 0}), TensorError);
  CHECK_THROWS_AS(Tensor<float>::from_data({2, 2}, {1.0f, 2.0f}), TensorError);
  Tensor<float> s = Tensor<float>::scalar(3.0f);
  CHECK(s.rank() == 0);
  CHECK(s[0] == 3.0f);
}

TEST_CASE("memory accounting tracks live and peak bytes") {
  const std::size_t live0 = mem::stats().live;
  mem::reset_peak();
  {
    Tensor<float> a(Shape{256});
    CHECK(mem::stats().live == live0 + 1024);
    CHECK(mem::stats().peak >= live0 + 1024);
    Tensor<float> b = a;  // copy adds
    CHECK(mem::stats().live == live0 + 2048);
    Tensor<float> c = std::move(a);  // move does not
    CHECK(mem::stats().live == live0 + 2048);
  }
  CHECK(mem::stats().live == live0);
}

TEST_CASE("tape computes hand-checked gradients") {
  // y = sum((a + b) * a); dy/da = 2a + b, dy/db = a
  Tape<double> t;
  Param<double> a("a", Tensor<double>::from_data({2}, {1.0, -2.0}));
  Param<double> b("b", Tensor<double>::from_data({2}, {3.0, 0.5}));
  Var y = sum_all(t, mul(t, add(t, t.param(a), t.param(b)), t.param(a)));
  CHECK(t.val(y)[0] == Catch::Approx(1.0 * 4.0 + (-2.0) * (-1.5)));
  t.backward(y);
  CHECK(a.grad[0] == Catch::Approx(2.0 * 1.0 + 3.0));
  CHECK(a.grad[1] == Catch::Approx(2.0 * -2.0 + 0.5));
  CHECK(b.grad[0] == Catch::Approx(1.0));
  CHECK(b.grad[1] == Catch::Approx(-2.0));
}

TEST_CASE("gradients accumulate across multiple uses") {
  Tape<double> t;
  Param<double> a("a", Tensor<double>::from_data({}, {2.0}));
  Var x = t.param(a);
  Var y = add(t, mul(t, x, x), x);  // y = a^2 + a, dy/da = 2a + 1
  t.backward(y);
  CHECK(a.grad[0] == Catch::Approx(5.0));
}

TEST_CASE("split and concat round trip with correct gradients") {
  Tape<double> t;
  Param<double> a("a", Tensor<double>::from_data({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}));
  auto parts = split(t, t.param(a), 2, 1);
  Var back = concat(t, {parts[1], parts[0]}, 1);  // swap halves
  const auto& v = t.val(back);
  CHECK(v[0] == 3.0);
  CHECK(v[1] == 4.0);
  CHECK(v[2] == 1.0);
  Var y = sum_all(t, mul(t, back, back));
  t.backward(y);
  for (std::int64_t i = 0; i < 8; ++i) CHECK(a.grad[i] == Catch::Approx(2.0 * a.value[i]));
}

TEST_CASE("reshape and permute round trip values") {
  Tape<double> t;
  t.set_recording(false);
  Tensor<double> x(Shape{2, 3, 4});
  Rng rng(3);
  fill_uniform(x, rng, -1.0, 1.0);
  Var v = t.leaf(x);
  Var p = permute(t, v, {2, 0, 1});
  Var back = permute(t, p, {1, 2, 0});
  const auto& r = t.val(back);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(r[i] == x[i]);
  CHECK(t.val(p).shape() == Shape{4, 2, 3});
  Var rs = reshape(t, v, Shape{6, 4});
  CHECK(t.val(rs)[5] == x[5]);
}

TEST_CASE("softmax columns are stochastic and matmul matches hand case") {
  Tape<double> t;
  t.set_recording(false);
  Tensor<double> x(Shape{2, 3, 3});
  Rng rng(11);
  fill_uniform(x, rng, -2.0, 2.0);
  const auto& s = t.val(softmax(t, t.leaf(x), 1));
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t j = 0; j < 3; ++j) {
      double col = 0;
      for (std::int64_t i = 0; i < 3; ++i) col += s.at(b, i, j);
      CHECK(col == Catch::Approx(1.0).margin(1e-12));
    }
  // [1,2,2] x [1,2,1]
  Tensor<double> a = Tensor<double>::from_data({1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> b = Tensor<double>::from_data({1, 2, 1}, {5, 6});
  const auto& m = t.val(matmul(t, t.leaf(a), t.leaf(b)));
  CHECK(m[0] == 17.0);
  CHECK(m[1] == 39.0);
}

TEST_CASE("scalar broadcast multiply") {
  Tape<double> t;
  Param<double> a("a", Tensor<double>::from_data({3}, {1, 2, 3}));
  Param<double> s("s", Tensor<double>::scalar(2.5));
  Var y = sum_all(t, mul(t, t.param(a), t.param(s)));
  CHECK(t.val(y)[0] == Catch::Approx(15.0));
  t.backward(y);
  CHECK(s.grad[0] == Catch::Approx(6.0));
  CHECK(a.grad[1] == Catch::Approx(2.5));
}
