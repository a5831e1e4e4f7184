#include <catch2/catch_amalgamated.hpp>
#include <fstream>

#include "maxca/train.hpp"

using namespace maxca;

namespace {

std::filesystem::path tmp_dir() {
  auto p = std::filesystem::temp_directory_path() / "maxca_io_tests";
  std::filesystem::create_directories(p);
  return p;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("rvol round trip is bitwise for both dtypes") {
  Rng rng(1);
  Tensor<float> vol(Shape{3, 4, 5, 6});
  fill_uniform(vol, rng, -10.0f, 10.0f);
  const auto path = tmp_dir() / "a.rvol";
  write_rvol(path, vol);
  Tensor<float> back = read_rvol<float>(path);
  REQUIRE(back.shape() == vol.shape());
  REQUIRE(std::memcmp(back.data(), vol.data(), vol.bytes()) == 0);

  LabelMap labels(Shape{1, 3, 3, 3});
  std::uniform_int_distribution<int> pick(0, 9);
  for (std::int64_t i = 0; i < labels.numel(); ++i)
    labels[i] = static_cast<std::uint16_t>(pick(rng));
  const auto lpath = tmp_dir() / "l.rvol";
  write_rvol(lpath, labels);
  LabelMap lback = read_rvol<std::uint16_t>(lpath);
  REQUIRE(std::memcmp(lback.data(), labels.data(), labels.bytes()) == 0);
}

TEST_CASE("malformed rvol files raise typed errors") {
  const auto path = tmp_dir() / "bad.rvol";
  Tensor<float> vol(Shape{1, 2, 2, 2}, 1.0f);
  write_rvol(path, vol);
  auto bytes = slurp(path);

  SECTION("bad magic") {
    bytes[0] = 'X';
    std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    try {
      read_rvol<float>(path);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.code == IoErrorCode::BadMagic);
    }
  }
  SECTION("truncated payload") {
    std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 4));
    try {
      read_rvol<float>(path);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.code == IoErrorCode::TruncatedPayload);
    }
  }
  SECTION("trailing bytes") {
    bytes.push_back(0);
    std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    try {
      read_rvol<float>(path);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.code == IoErrorCode::TruncatedPayload);
    }
  }
  SECTION("dtype mismatch") {
    CHECK_THROWS_AS(read_rvol<std::uint16_t>(path), IoError);
  }
  SECTION("missing file") {
    CHECK_THROWS_AS(read_rvol<float>(tmp_dir() / "missing.rvol"), IoError);
  }
}

TEST_CASE("pgm slices quantize with round-half-up") {
  Tensor<float> vol = Tensor<float>::from_data({1, 1, 2, 2}, {0.0f, 1.0f, 2.0f, 3.0f});
  const auto path = tmp_dir() / "s.pgm";
  emit_slice_pgm(vol, 0, 0, path);
  auto bytes = slurp(path);
  const std::string header(bytes.begin(), bytes.begin() + 11);
  CHECK(header == "P5\n2 2\n255\n");
  REQUIRE(bytes.size() == 15);
  CHECK(static_cast<unsigned char>(bytes[11]) == 0);
  CHECK(static_cast<unsigned char>(bytes[12]) == 85);
  CHECK(static_cast<unsigned char>(bytes[13]) == 170);
  CHECK(static_cast<unsigned char>(bytes[14]) == 255);
}

TEST_CASE("csv writer and reader round trip with quoting") {
  const auto path = tmp_dir() / "t.csv";
  {
    CsvWriter w(path, {"id", "note"});
    w.row({"a,1", "say \"hi\""});
    w.row({"plain", "line"});
  }
  auto rows = read_csv(path);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"id", "note"});
  CHECK(rows[1][0] == "a,1");
  CHECK(rows[1][1] == "say \"hi\"");
  CHECK(rows[2][1] == "line");
  // numbers survive to 6 significant digits through the %.9g format
  CHECK(std::stod(fmt_double(0.123456789)) == Catch::Approx(0.123456789).epsilon(1e-8));
}

TEST_CASE("gen_pair is a pure function of the seed") {
  SynthSpec spec;
  spec.seed = 77;
  SynthPair a = gen_pair(spec);
  SynthPair b = gen_pair(spec);
  CHECK(std::memcmp(a.fixed.data(), b.fixed.data(), a.fixed.bytes()) == 0);
  CHECK(std::memcmp(a.moving.data(), b.moving.data(), a.moving.bytes()) == 0);
  CHECK(std::memcmp(a.u_true.data(), b.u_true.data(), a.u_true.bytes()) == 0);
  CHECK(std::memcmp(a.labels_fixed.data(), b.labels_fixed.data(), a.labels_fixed.bytes()) == 0);
  spec.seed = 78;
  SynthPair c = gen_pair(spec);
  CHECK(std::memcmp(a.fixed.data(), c.fixed.data(), a.fixed.bytes()) != 0);
}

TEST_CASE("generated pairs are fold-free and normalized") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    SynthSpec spec;
    spec.seed = seed;
    SynthPair p = gen_pair(spec);
    CHECK(njd_percent(p.u_true) == 0.0);
    float lo = 1e9f, hi = -1e9f;
    for (std::int64_t i = 0; i < p.fixed.numel(); ++i) {
      lo = std::min(lo, p.fixed[i]);
      hi = std::max(hi, p.fixed[i]);
    }
    CHECK(lo == 0.0f);
    CHECK(hi == 1.0f);
    CHECK(labels_present(p.labels_fixed, p.labels_moving).size() >= 1);
  }
}

TEST_CASE("synth spec rejects fold-prone amplitudes") {
  SynthSpec spec;
  spec.max_amplitude = static_cast<double>(spec.cp_spacing) / 2.0 + 0.1;
  CHECK_THROWS_AS(spec.validate(), TensorError);
}

TEST_CASE("manifest round trips and validates splits") {
  Manifest m;
  m.pairs.push_back({"train_0", "train", "pairs/train_0", 0.51});
  m.pairs.push_back({"test_0", "test", "pairs/test_0", 0.62});
  const auto path = tmp_dir() / "manifest.csv";
  m.write(path);
  Manifest back = Manifest::read(path);
  REQUIRE(back.pairs.size() == 2);
  CHECK(back.pairs[0].id == "train_0");
  CHECK(back.pairs[1].dsc_before == Catch::Approx(0.62));
  CHECK(back.split("train").size() == 1);
  CHECK(back.split("val").empty());

  {
    CsvWriter w(path, {"pair_id", "split", "dir", "dsc_before"});
    w.row({"x", "bogus", "pairs/x", "0.5"});
  }
  CHECK_THROWS_AS(Manifest::read(path), IoError);
}

TEST_CASE("checkpoints round trip metadata and parameters") {
  Rng rng(5);
  NetConfig cfg = NetConfig::tiny();
  cfg.no_global = true;
  XcamorphNet<float> net(cfg, Shape{16, 16, 16}, rng);
  auto params = net.params();
  CheckpointMeta meta;
  meta.no_global = true;
  meta.extent = Shape{16, 16, 16};
  const auto path = tmp_dir() / "ck.bin";
  save_checkpoint(path, meta, params);

  CheckpointMeta back = read_checkpoint_meta(path);
  CHECK(back.preset == "tiny");
  CHECK(back.no_global);
  CHECK(back.extent == Shape{16, 16, 16});

  XcamorphNet<float> net2 = load_network(path);
  auto params2 = net2.params();
  REQUIRE(params.size() == params2.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(params[i]->name == params2[i]->name);
    REQUIRE(std::memcmp(params[i]->value.data(), params2[i]->value.data(),
                        params[i]->value.bytes()) == 0);
  }
}

TEST_CASE("a deliberately corrupted backward rule is reported by grad_check") {
  Param<double> a("a", Tensor<double>::from_data({2}, {0.7, -0.3}));
  auto bad_square = [](Tape<double>& t, Var x) {
    const auto& vx = t.val(x);
    Tensor<double> out(vx.shape());
    for (std::int64_t i = 0; i < vx.numel(); ++i) out[i] = vx[i] * vx[i];
    return t.make(std::move(out), [=](Tape<double>& tp, std::int32_t self) {
      const auto& g = tp.grad(Var{self});
      auto& gx = tp.grad_buf(x);
      // wrong rule: d(x^2)/dx recorded as 3x instead of 2x
      for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * 3.0 * tp.val(x)[i];
    });
  };
  auto report = grad_check({&a}, [&](Tape<double>& t) {
    return sum_all(t, bad_square(t, t.param(a)));
  });
  CHECK_FALSE(report.pass(1e-4));
}
