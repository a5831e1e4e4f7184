#pragma once

#include <chrono>

#include "maxca/io.hpp"
#include "maxca/regnet.hpp"

namespace maxca {

// Forward-pass scaling measurements for the attention blocks. Times are
// medians over `runs` passes after `warmups` discarded passes; memory is the
// high-water mark of live tensor bytes during one pass, and attention-map
// bytes come from the instrumented attend calls.

struct BenchRecord {
  std::string block;
  int resolution = 0;
  std::int64_t voxels = 0;
  double median_ms = 0.0;
  std::size_t peak_bytes = 0;
  std::size_t map_bytes_per_problem = 0;
  std::size_t total_map_bytes = 0;
};

struct BenchConfig {
  std::vector<std::string> blocks{"maxca", "dense_xca", "dense_sa"};
  std::vector<int> resolutions{8, 12, 16, 24, 32};
  int runs = 5;
  int warmups = 2;
  bool allow_large_sa = false;
  std::int64_t channels = 16;
  int heads = 4;
  int region = 4;
  std::uint64_t seed = 0;
  std::int64_t sa_voxel_guard = 16 * 16 * 16;
};

struct BenchResult {
  std::vector<BenchRecord> records;
  std::map<std::string, double> slope;  // log-log time vs voxels, per block

  std::vector<const BenchRecord*> of_block(const std::string& b) const {
    std::vector<const BenchRecord*> out;
    for (const auto& r : records)
      if (r.block == b) out.push_back(&r);
    return out;
  }
};

// Least-squares slope of log(time) against log(voxels).
inline double loglog_slope(const std::vector<std::pair<double, double>>& pts) {
  if (pts.size() < 2) throw TensorError("slope fit needs >= 2 points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [v, t] : pts) {
    const double x = std::log(v), y = std::log(t);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = static_cast<double>(pts.size());
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

inline BenchResult run_bench(const BenchConfig& cfg) {
  BenchResult res;
  for (const auto& block : cfg.blocks) {
    std::vector<std::pair<double, double>> pts;
    for (int r : cfg.resolutions) {
      const std::int64_t voxels = static_cast<std::int64_t>(r) * r * r;
      if (block == "dense_sa" && voxels > cfg.sa_voxel_guard && !cfg.allow_large_sa) continue;
      if (block == "maxca" && r % cfg.region != 0)
        throw TensorError("bench: resolution not divisible by region size");
      Rng rng(cfg.seed + static_cast<std::uint64_t>(r));
      Tensor<float> input(Shape{cfg.channels, r, r, r});
      fill_uniform(input, rng, -1.0f, 1.0f);

      // Construct the block under test.
      std::unique_ptr<MaxcaBlock<float>> mb;
      std::unique_ptr<DenseXcaBlock<float>> xb;
      std::unique_ptr<DenseSaBlock<float>> sb;
      if (block == "maxca") {
        MaxcaConfig mc;
        mc.channels = cfg.channels;
        mc.heads = cfg.heads;
        mc.region = cfg.region;
        mb = std::make_unique<MaxcaBlock<float>>("bench", mc, rng);
      } else if (block == "dense_xca") {
        xb = std::make_unique<DenseXcaBlock<float>>("bench", cfg.channels, cfg.heads, rng);
      } else if (block == "dense_sa") {
        sb = std::make_unique<DenseSaBlock<float>>("bench", cfg.channels, cfg.heads, rng);
        if (cfg.allow_large_sa) sb->max_voxels = voxels;
      } else {
        throw TensorError("bench: unknown block kind " + block);
      }
      auto forward = [&] {
        Tape<float> t;
        t.set_recording(false);
        Var x = t.leaf(input);
        Var y = mb ? (*mb)(t, x) : xb ? (*xb)(t, x) : (*sb)(t, x);
        return t.val(y)[0];  // keep the result observable
      };

      BenchRecord rec;
      rec.block = block;
      rec.resolution = r;
      rec.voxels = voxels;
      volatile float sink = 0;
      for (int i = 0; i < cfg.warmups; ++i) sink += forward();
      std::vector<double> times;
      for (int i = 0; i < cfg.runs; ++i) {
        mem::reset_peak();
        attn_stats().reset();
        const auto t0 = std::chrono::steady_clock::now();
        sink += forward();
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        rec.peak_bytes = std::max(rec.peak_bytes, mem::stats().peak);
        rec.map_bytes_per_problem = attn_stats().map_bytes_per_problem;
        rec.total_map_bytes = attn_stats().total_map_bytes;
      }
      std::sort(times.begin(), times.end());
      rec.median_ms = times[times.size() / 2];
      pts.emplace_back(static_cast<double>(voxels), rec.median_ms);
      res.records.push_back(rec);
    }
    if (pts.size() >= 2) res.slope[block] = loglog_slope(pts);
  }
  return res;
}

inline void write_bench_csv(const std::filesystem::path& path, const BenchResult& res) {
  CsvWriter w(path, {"block", "resolution", "voxels", "median_ms", "peak_bytes",
                     "map_bytes_per_problem", "total_map_bytes", "slope"});
  for (const auto& r : res.records) {
    const auto it = res.slope.find(r.block);
    w.row({r.block, std::to_string(r.resolution), std::to_string(r.voxels),
           fmt_double(r.median_ms), std::to_string(r.peak_bytes),
           std::to_string(r.map_bytes_per_problem), std::to_string(r.total_map_bytes),
           it == res.slope.end() ? "" : fmt_double(it->second)});
  }
}

}  // namespace maxca
