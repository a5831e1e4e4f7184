// Command-line driver: synthetic data generation, training, registration,
// evaluation, scaling benchmarks, and the gradient-check suite.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "maxca/bench.hpp"
#include "maxca/gradsuite.hpp"
#include "maxca/train.hpp"

extern "C" void openblas_set_num_threads(int);

namespace {

using namespace maxca;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

void apply_thread_cap() {
  int threads = 1;  // single-threaded by default: determinism and clean timing
  if (const char* env = std::getenv("MAXCA_THREADS")) {
    threads = std::atoi(env);
    if (threads < 1) threads = 1;
  }
  openblas_set_num_threads(threads);
}

// Loads a pair directory; label volumes are optional for register.
struct LoosePair {
  Tensor<float> fixed, moving;
  bool has_labels = false;
  LabelMap labels_fixed, labels_moving;
};

LoosePair load_loose_pair(const std::filesystem::path& dir) {
  LoosePair p;
  p.fixed = read_rvol<float>(dir / "fixed.rvol");
  p.moving = read_rvol<float>(dir / "moving.rvol");
  if (std::filesystem::exists(dir / "labels_moving.rvol")) {
    p.labels_moving = read_rvol<std::uint16_t>(dir / "labels_moving.rvol");
    if (std::filesystem::exists(dir / "labels_fixed.rvol"))
      p.labels_fixed = read_rvol<std::uint16_t>(dir / "labels_fixed.rvol");
    p.has_labels = true;
  }
  return p;
}

int cmd_register_run(const std::filesystem::path& ckpt, const std::filesystem::path& pair_dir,
                     const std::filesystem::path& out) {
  XcamorphNet<float> net = load_network(ckpt);
  CheckpointMeta meta = read_checkpoint_meta(ckpt);
  LoosePair p = load_loose_pair(pair_dir);
  const Shape got{p.fixed.dim(1), p.fixed.dim(2), p.fixed.dim(3)};
  if (got != meta.extent)
    throw IoError(IoErrorCode::BadHeader, "pair extents " + shape_str(got) +
                                              " do not match checkpoint extents " +
                                              shape_str(meta.extent));
  std::filesystem::create_directories(out);
  Tensor<float> u = net.predict(p.fixed, p.moving);
  Tensor<float> warped = warp_tensor(p.moving, u);
  write_rvol(out / "u.rvol", u);
  write_rvol(out / "warped.rvol", warped);
  if (p.has_labels) write_rvol(out / "warped_labels.rvol", warp_nearest(p.labels_moving, u));
  auto before = error_map(p.moving, p.fixed);
  auto after = error_map(warped, p.fixed);
  emit_slice_pgm(after.map, 0, after.map.dim(1) / 2, out / "error.pgm");
  std::cout << "MAE before " << fmt_double(before.mae) << " after " << fmt_double(after.mae)
            << "\n";
  return kExitOk;
}

// Applies a line-based `key = value` config file to a subcommand's options.
// CLI11 only processes config files for the top-level app, so the expansion
// is done by hand: every file key becomes an extra `--key value` argument
// unless the same option already appears on the command line (the command
// line wins). Unknown keys are hard usage errors.
std::vector<std::string> expand_config_args(CLI::App& app, std::vector<std::string> args) {
  std::string cfg_path;
  for (std::size_t i = 0; i < args.size();) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      cfg_path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
                 args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
    } else if (args[i].rfind("--config=", 0) == 0) {
      cfg_path = args[i].substr(std::string("--config=").size());
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
    } else {
      ++i;
    }
  }
  if (cfg_path.empty()) return args;
  if (args.empty()) throw CLI::ValidationError("--config", "requires a subcommand");
  CLI::App* sub = app.get_subcommand_no_throw(args[0]);
  if (sub == nullptr) throw CLI::ValidationError("--config", "unknown subcommand " + args[0]);

  std::ifstream f(cfg_path);
  if (!f) throw CLI::ValidationError("--config", "cannot open " + cfg_path);
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
  };
  std::string line;
  while (std::getline(f, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError("--config", "expected `key = value`, got: " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string flag = "--" + key;
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (opt == nullptr || key == "config")
      throw CLI::ValidationError("--config", "unknown key `" + key + "` in " + cfg_path);
    bool on_cli = false;
    for (const auto& a : args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) on_cli = true;
    if (on_cli) continue;  // command line overrides the file
    if (opt->get_expected_min() == 0) {  // flag: truthy values set it
      if (value == "true" || value == "1" || value == "on" || value == "yes")
        args.push_back(flag);
      else if (value != "false" && value != "0" && value != "off" && value != "no")
        throw CLI::ValidationError("--config", "flag `" + key + "` needs a boolean value");
    } else {
      args.push_back(flag + "=" + value);
    }
  }
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_cap();
  CLI::App app{"MAXCA / XCAMorph deformable registration toolkit"};
  app.require_subcommand(1);
  std::string cfg_path_sink;  // --config is consumed in expand_config_args

  // --- gen-data -------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate synthetic pair dataset");
  gen->add_option("--config", cfg_path_sink, "Config file with key = value lines (command line overrides)");
  GenConfig gc;
  std::string gen_out;
  int gen_extent = 32;
  double gen_amplitude = 4.0;
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--seed", gc.seed, "Root seed");
  gen->add_option("--train-pairs", gc.train_pairs, "Training pair count");
  gen->add_option("--val-pairs", gc.val_pairs, "Validation pair count");
  gen->add_option("--test-pairs", gc.test_pairs, "Test pair count");
  gen->add_option("--extent", gen_extent, "Cubic volume extent");
  gen->add_option("--labels", gc.spec.label_count, "Foreground label count");
  gen->add_option("--cp-spacing", gc.spec.cp_spacing, "Control-point spacing (voxels)");
  gen->add_option("--amplitude", gen_amplitude, "Max displacement amplitude (voxels)");
  gen->add_option("--noise", gc.spec.noise, "Additive Gaussian noise stddev");

  // --- train ----------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train a registration network");
  tr->add_option("--config", cfg_path_sink, "Config file with key = value lines (command line overrides)");
  TrainConfig tc;
  std::string tr_data, tr_out;
  tr->add_option("--data", tr_data, "Dataset directory (with manifest.csv)")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--seed", tc.seed, "Training seed");
  tr->add_option("--preset", tc.preset, "Network preset (tiny | paper-shape-check)");
  tr->add_option("--iterations", tc.iterations, "Training iterations");
  tr->add_option("--lr", tc.lr, "Adam learning rate");
  tr->add_option("--val-interval", tc.val_interval, "Validation interval (iterations)");
  tr->add_option("--sigma", tc.sigma, "Diffusion regularizer weight");
  tr->add_option("--ncc-window", tc.ncc_window, "NCC window (odd)");
  tr->add_flag("--no-global", tc.no_global, "Disable the global (dilated) branch");
  tr->add_flag("--no-local", tc.no_local, "Disable the local (regional) branch");
  tr->add_flag("--linear-projection", tc.linear_projection, "1x1x1 QKV projections");
  tr->add_option("--block", tc.block,
                 "Encoder block (maxca | dense_xca | dense_sa_plus_conv | cnn_baseline)");

  // --- register -------------------------------------------------------------
  auto* reg = app.add_subcommand("register", "Register one pair with a checkpoint");
  reg->add_option("--config", cfg_path_sink, "Config file with key = value lines (command line overrides)");
  std::string reg_ckpt, reg_pair, reg_out;
  reg->add_option("--checkpoint", reg_ckpt, "Checkpoint file")->required();
  reg->add_option("--pair", reg_pair, "Pair directory (fixed.rvol / moving.rvol)")->required();
  reg->add_option("--out", reg_out, "Output directory")->required();

  // --- eval -----------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
  ev->add_option("--config", cfg_path_sink, "Config file with key = value lines (command line overrides)");
  std::string ev_ckpt, ev_data, ev_out, ev_split = "test";
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory (with manifest.csv)")->required();
  ev->add_option("--out", ev_out, "Output directory (receives eval.csv)")->required();
  ev->add_option("--split", ev_split, "Manifest split to evaluate (default test)");

  // --- bench ----------------------------------------------------------------
  auto* be = app.add_subcommand("bench", "Forward-pass scaling benchmark");
  be->add_option("--config", cfg_path_sink, "Config file with key = value lines (command line overrides)");
  BenchConfig bc;
  std::string be_out;
  be->add_option("--out", be_out, "Output CSV path")->required();
  be->add_option("--blocks", bc.blocks, "Blocks to measure");
  be->add_option("--resolutions", bc.resolutions, "Cubic resolutions");
  be->add_option("--runs", bc.runs, "Timed runs per point (median)");
  be->add_option("--seed", bc.seed, "Seed for weights and inputs");
  be->add_flag("--allow-large-sa", bc.allow_large_sa, "Lift the dense-SA 16^3 guard");

  // --- grad-check -----------------------------------------------------------
  auto* gch = app.add_subcommand("grad-check", "Finite-difference gradient suite");
  gch->add_option("--config", cfg_path_sink, "Config file with key = value lines (command line overrides)");
  std::uint64_t gch_seed = 1;
  int gch_seeds = 3;
  gch->add_option("--seed", gch_seed, "First seed");
  gch->add_option("--seeds", gch_seeds, "Number of seeds");

  try {
    std::vector<std::string> args =
        expand_config_args(app, std::vector<std::string>(argv + 1, argv + argc));
    std::reverse(args.begin(), args.end());  // App::parse consumes a reversed vector
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) {
      gc.out = gen_out;
      gc.spec.extents = Shape{gen_extent, gen_extent, gen_extent};
      gc.spec.max_amplitude = gen_amplitude;
      Manifest m = generate_dataset(gc);
      std::cout << "wrote " << m.pairs.size() << " pairs to " << gc.out.string() << "\n";
    } else if (*tr) {
      tc.data_dir = tr_data;
      tc.out_dir = tr_out;
      TrainResult r = train_model(tc);
      std::cout << "best val DSC " << fmt_double(r.best_val_dsc) << " at iteration "
                << r.best_iter << "; checkpoint " << r.checkpoint.string() << "\n";
    } else if (*reg) {
      return cmd_register_run(reg_ckpt, reg_pair, reg_out);
    } else if (*ev) {
      XcamorphNet<float> net = load_network(ev_ckpt);
      Manifest m = Manifest::read(std::filesystem::path(ev_data) / "manifest.csv");
      auto reports = evaluate_split(net, m, ev_split);
      if (reports.empty())
        throw IoError(IoErrorCode::BadHeader, "no pairs in split '" + ev_split + "'");
      std::filesystem::create_directories(ev_out);
      write_eval_csv(std::filesystem::path(ev_out) / "eval.csv", reports);
      EvalReport s = eval_summary(reports);
      std::cout << "pairs " << reports.size() << " mean DSC before "
                << fmt_double(s.dsc_before) << " after " << fmt_double(s.dsc_after) << " NJD% "
                << fmt_double(s.njd_pct) << "\n";
    } else if (*be) {
      BenchResult r = run_bench(bc);
      write_bench_csv(be_out, r);
      for (const auto& [b, s] : r.slope) std::cout << b << " slope " << fmt_double(s) << "\n";
    } else if (*gch) {
      bool ok = true;
      for (int s = 0; s < gch_seeds; ++s) {
        auto rows = run_grad_suite(gch_seed + static_cast<std::uint64_t>(s));
        std::cout << "seed " << gch_seed + static_cast<std::uint64_t>(s) << "\n";
        for (const auto& r : rows) {
          std::cout << "  " << r.op << " max_rel_err " << fmt_double(r.max_rel_err)
                    << (r.pass ? " ok" : " FAIL") << "\n";
          ok = ok && r.pass;
        }
      }
      if (!ok) return kExitNumeric;
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const TensorError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}
