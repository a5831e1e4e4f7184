#pragma once

#include "maxca/gradcheck.hpp"
#include "maxca/io.hpp"
#include "maxca/synthdata.hpp"

namespace maxca {

// Raised when training or checking hits non-finite numbers; the CLI maps
// this to its numeric-failure exit code.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Dataset layout: <root>/pairs/<id>/{fixed,moving,labels_fixed,labels_moving,
// u_true}.rvol plus <root>/manifest.csv listing every pair with its split and
// pre-registration DSC.

struct PairRecord {
  std::string id;
  std::string split;  // train | val | test
  std::string dir;    // relative to the manifest's directory
  double dsc_before = 0.0;
};

struct PairData {
  Tensor<float> fixed, moving;
  LabelMap labels_fixed, labels_moving;
  Tensor<float> u_true;
};

struct Manifest {
  std::filesystem::path root;  // directory holding manifest.csv
  std::vector<PairRecord> pairs;

  std::vector<const PairRecord*> split(const std::string& name) const {
    std::vector<const PairRecord*> out;
    for (const auto& p : pairs)
      if (p.split == name) out.push_back(&p);
    return out;
  }

  static Manifest read(const std::filesystem::path& csv_path) {
    auto rows = read_csv(csv_path);
    const std::vector<std::string> header{"pair_id", "split", "dir", "dsc_before"};
    if (rows.empty() || rows.front() != header)
      throw IoError(IoErrorCode::BadHeader, "manifest header mismatch in " + csv_path.string());
    Manifest m;
    m.root = csv_path.parent_path();
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].size() != 4)
        throw IoError(IoErrorCode::BadHeader, "manifest row with wrong column count");
      PairRecord r;
      r.id = rows[i][0];
      r.split = rows[i][1];
      r.dir = rows[i][2];
      r.dsc_before = std::stod(rows[i][3]);
      if (r.split != "train" && r.split != "val" && r.split != "test")
        throw IoError(IoErrorCode::BadHeader, "manifest split must be train/val/test, got " + r.split);
      m.pairs.push_back(std::move(r));
    }
    return m;
  }

  void write(const std::filesystem::path& csv_path) const {
    CsvWriter w(csv_path, {"pair_id", "split", "dir", "dsc_before"});
    for (const auto& p : pairs) w.row({p.id, p.split, p.dir, fmt_double(p.dsc_before)});
  }
};

inline void save_pair(const std::filesystem::path& dir, const SynthPair& p) {
  std::filesystem::create_directories(dir);
  write_rvol(dir / "fixed.rvol", p.fixed);
  write_rvol(dir / "moving.rvol", p.moving);
  write_rvol(dir / "labels_fixed.rvol", p.labels_fixed);
  write_rvol(dir / "labels_moving.rvol", p.labels_moving);
  write_rvol(dir / "u_true.rvol", p.u_true);
}

inline PairData load_pair(const std::filesystem::path& dir) {
  PairData d;
  d.fixed = read_rvol<float>(dir / "fixed.rvol");
  d.moving = read_rvol<float>(dir / "moving.rvol");
  d.labels_fixed = read_rvol<std::uint16_t>(dir / "labels_fixed.rvol");
  d.labels_moving = read_rvol<std::uint16_t>(dir / "labels_moving.rvol");
  d.u_true = read_rvol<float>(dir / "u_true.rvol");
  return d;
}

inline double pair_dsc_before(const PairData& d) {
  return dsc(d.labels_fixed, d.labels_moving, labels_present(d.labels_fixed, d.labels_moving)).mean;
}

// ---------------------------------------------------------------------------
// Dataset generation: pair seeds are derived from the root seed and a
// split-specific offset, so splits are stable under count changes.

struct GenConfig {
  int train_pairs = 40;
  int val_pairs = 5;
  int test_pairs = 20;
  SynthSpec spec;  // spec.seed is ignored; per-pair seeds derive from `seed`
  std::uint64_t seed = 0;
  std::filesystem::path out;

  void validate() const {
    if (train_pairs < 0 || val_pairs < 0 || test_pairs < 0)
      throw TensorError("gen config: pair counts must be >= 0");
    spec.validate();
  }
};

inline Manifest generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  Manifest m;
  m.root = cfg.out;
  std::filesystem::create_directories(cfg.out);
  struct SplitDef {
    const char* name;
    int count;
    std::uint64_t offset;
  };
  const SplitDef splits[] = {{"train", cfg.train_pairs, 0},
                             {"val", cfg.val_pairs, 1u << 20},
                             {"test", cfg.test_pairs, 2u << 20}};
  for (const auto& sp : splits)
    for (int i = 0; i < sp.count; ++i) {
      SynthSpec s = cfg.spec;
      s.seed = cfg.seed * 0x9e3779b97f4a7c15ull + sp.offset + static_cast<std::uint64_t>(i);
      SynthPair p = gen_pair(s);
      PairRecord r;
      r.id = std::string(sp.name) + "_" + std::to_string(i);
      r.split = sp.name;
      r.dir = "pairs/" + r.id;
      save_pair(cfg.out / r.dir, p);
      r.dsc_before = dsc(p.labels_fixed, p.labels_moving,
                         labels_present(p.labels_fixed, p.labels_moving))
                         .mean;
      m.pairs.push_back(std::move(r));
    }
  m.write(cfg.out / "manifest.csv");
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: a small text metadata block (enough to rebuild the network)
// followed by named raw-f32 parameter payloads.

struct CheckpointMeta {
  std::string preset = "tiny";
  std::string block = "maxca";
  bool no_global = false;
  bool no_local = false;
  bool linear_projection = false;
  Shape extent{32, 32, 32};

  NetConfig net_config() const {
    NetConfig nc = NetConfig::from_preset(preset);
    nc.block = block_kind_from_string(block);
    nc.no_global = no_global;
    nc.no_local = no_local;
    nc.linear_projection = linear_projection;
    return nc;
  }
};

namespace detail {

constexpr char kCkptMagic[8] = {'M', 'C', 'K', 'P', 'T', '1', 0, 0};

inline void write_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4) throw IoError(IoErrorCode::TruncatedPayload, "truncated checkpoint");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                            const std::vector<Param<float>*>& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(IoErrorCode::OpenFailed, "cannot open " + path.string() + " for writing");
  f.write(detail::kCkptMagic, 8);
  std::ostringstream os;
  os << "preset=" << meta.preset << "\nblock=" << meta.block
     << "\nno_global=" << (meta.no_global ? 1 : 0) << "\nno_local=" << (meta.no_local ? 1 : 0)
     << "\nlinear_projection=" << (meta.linear_projection ? 1 : 0) << "\nextent=" << meta.extent[0]
     << " " << meta.extent[1] << " " << meta.extent[2] << "\n";
  const std::string header = os.str();
  detail::write_u32(f, static_cast<std::uint32_t>(header.size()));
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::write_u32(f, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    detail::write_u32(f, static_cast<std::uint32_t>(p->name.size()));
    f.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::write_u32(f, static_cast<std::uint32_t>(p->value.rank()));
    for (std::int64_t i = 0; i < p->value.rank(); ++i)
      detail::write_u32(f, static_cast<std::uint32_t>(p->value.dim(i)));
    f.write(reinterpret_cast<const char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.bytes()));
  }
  if (!f) throw IoError(IoErrorCode::OpenFailed, "checkpoint write failed: " + path.string());
}

inline CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(IoErrorCode::OpenFailed, "cannot open " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (f.gcount() != 8 || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw IoError(IoErrorCode::BadMagic, "not a checkpoint file: " + path.string());
  const std::uint32_t hlen = detail::read_u32(f);
  std::string header(hlen, '\0');
  f.read(header.data(), hlen);
  if (f.gcount() != static_cast<std::streamsize>(hlen))
    throw IoError(IoErrorCode::TruncatedPayload, "truncated checkpoint header");
  CheckpointMeta meta;
  std::istringstream is(header);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError(IoErrorCode::BadHeader, "malformed checkpoint header");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "preset") meta.preset = val;
    else if (key == "block") meta.block = val;
    else if (key == "no_global") meta.no_global = val == "1";
    else if (key == "no_local") meta.no_local = val == "1";
    else if (key == "linear_projection") meta.linear_projection = val == "1";
    else if (key == "extent") {
      std::istringstream es(val);
      meta.extent.assign(3, 0);
      es >> meta.extent[0] >> meta.extent[1] >> meta.extent[2];
      if (!es) throw IoError(IoErrorCode::BadHeader, "malformed checkpoint extent");
    } else {
      throw IoError(IoErrorCode::BadHeader, "unknown checkpoint header key: " + key);
    }
  }
  return meta;
}

inline void load_checkpoint_params(const std::filesystem::path& path,
                                   const std::vector<Param<float>*>& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(IoErrorCode::OpenFailed, "cannot open " + path.string());
  f.seekg(8);
  const std::uint32_t hlen = detail::read_u32(f);
  f.seekg(hlen, std::ios::cur);
  const std::uint32_t count = detail::read_u32(f);
  if (count != params.size())
    throw IoError(IoErrorCode::BadHeader, "checkpoint parameter count mismatch");
  for (auto* p : params) {
    const std::uint32_t nlen = detail::read_u32(f);
    std::string name(nlen, '\0');
    f.read(name.data(), nlen);
    if (name != p->name)
      throw IoError(IoErrorCode::BadHeader,
                    "checkpoint parameter order mismatch: " + name + " vs " + p->name);
    const std::uint32_t rank = detail::read_u32(f);
    Shape shape(rank);
    for (auto& e : shape) e = detail::read_u32(f);
    if (shape != p->value.shape())
      throw IoError(IoErrorCode::BadHeader, "checkpoint shape mismatch for " + name);
    f.read(reinterpret_cast<char*>(p->value.data()), static_cast<std::streamsize>(p->value.bytes()));
    if (f.gcount() != static_cast<std::streamsize>(p->value.bytes()))
      throw IoError(IoErrorCode::TruncatedPayload, "truncated checkpoint payload at " + name);
  }
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  std::string preset = "tiny";
  double lr = 1e-4;          // paper value
  int batch = 1;             // fixed by contract
  int iterations = 2000;     // desk scale; the paper trains for 100000
  int val_interval = 100;    // desk scale; the paper validates every 1000
  double sigma = 1.0;
  int ncc_window = 9;
  std::uint64_t seed = 0;
  bool no_global = false;
  bool no_local = false;
  bool linear_projection = false;
  std::string block = "maxca";
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;

  void validate() const {
    if (batch != 1) throw TensorError("train config: batch size is fixed at 1");
    if (iterations < 0 || val_interval < 1) throw TensorError("train config: bad schedule");
    if (lr <= 0) throw TensorError("train config: lr must be > 0");
  }

  CheckpointMeta meta(const Shape& extent) const {
    CheckpointMeta m;
    m.preset = preset;
    m.block = block;
    m.no_global = no_global;
    m.no_local = no_local;
    m.linear_projection = linear_projection;
    m.extent = extent;
    return m;
  }

  NetConfig net_config() const { return meta(Shape{}).net_config(); }
};

struct TrainResult {
  double best_val_dsc = 0.0;
  int best_iter = 0;
  std::filesystem::path checkpoint;
  std::filesystem::path log;
};

namespace detail {

inline double val_mean_dsc(XcamorphNet<float>& net, const std::vector<PairData>& val) {
  double acc = 0.0;
  for (const auto& d : val) {
    Tensor<float> u = net.predict(d.fixed, d.moving);
    LabelMap warped = warp_nearest(d.labels_moving, u);
    acc += dsc(d.labels_fixed, warped, labels_present(d.labels_fixed, d.labels_moving)).mean;
  }
  return val.empty() ? 0.0 : acc / static_cast<double>(val.size());
}

}  // namespace detail

// Runs the training loop: sample a random training pair, forward, loss,
// backward, Adam step; every val_interval iterations score the val split and
// keep the best snapshot (highest validation mean DSC). Writes
// <out>/train_log.csv and <out>/checkpoint.bin (the best snapshot).
inline TrainResult train_model(const TrainConfig& cfg) {
  cfg.validate();
  Manifest manifest = Manifest::read(cfg.data_dir / "manifest.csv");
  // Only the train and val splits are ever touched here; test pairs are
  // reserved for cmd_eval.
  std::vector<PairData> train, val;
  for (const auto* r : manifest.split("train")) train.push_back(load_pair(manifest.root / r->dir));
  for (const auto* r : manifest.split("val")) val.push_back(load_pair(manifest.root / r->dir));
  if (train.empty()) throw IoError(IoErrorCode::BadHeader, "manifest has no training pairs");

  const Shape extent{train[0].fixed.dim(1), train[0].fixed.dim(2), train[0].fixed.dim(3)};
  Rng init_rng(cfg.seed * 0x9e3779b97f4a7c15ull + 1);
  Rng sample_rng(cfg.seed * 0x9e3779b97f4a7c15ull + 2);
  XcamorphNet<float> net(cfg.net_config(), extent, init_rng);
  auto params = net.params();
  Adam<float> opt;
  opt.lr = static_cast<float>(cfg.lr);
  LossConfig loss_cfg;
  loss_cfg.ncc_window = cfg.ncc_window;
  loss_cfg.sigma = cfg.sigma;

  std::filesystem::create_directories(cfg.out_dir);
  TrainResult res;
  res.checkpoint = cfg.out_dir / "checkpoint.bin";
  res.log = cfg.out_dir / "train_log.csv";
  CsvWriter log(res.log, {"iter", "loss", "ncc", "reg", "val_dsc"});

  auto snapshot = [&] {
    std::vector<Tensor<float>> vals;
    vals.reserve(params.size());
    for (auto* p : params) vals.push_back(p->value);
    return vals;
  };
  res.best_val_dsc = detail::val_mean_dsc(net, val);
  res.best_iter = 0;
  std::vector<Tensor<float>> best = snapshot();
  log.row({"0", "", "", "", fmt_double(res.best_val_dsc)});

  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  for (int it = 1; it <= cfg.iterations; ++it) {
    const PairData& d = train[pick(sample_rng)];
    Tape<float> t;
    Var u = net(t, t.leaf(d.fixed), t.leaf(d.moving));
    Var warped = warp(t, t.leaf(d.moving), u);
    Var sim = ncc_loss(t, t.leaf(d.fixed), warped, loss_cfg.ncc_window,
                       static_cast<float>(loss_cfg.eps));
    Var reg = diffusion_reg(t, u);
    Var loss = cfg.sigma == 0
                   ? sim
                   : add(t, sim, scale(t, reg, static_cast<float>(cfg.sigma)));
    const double loss_v = t.val(loss)[0];
    const double sim_v = t.val(sim)[0];
    const double reg_v = t.val(reg)[0];
    if (!std::isfinite(loss_v)) {
      std::ostringstream os;
      os << "non-finite loss at iteration " << it << " (lr " << opt.lr << ", ncc " << sim_v
         << ", reg " << reg_v << ")";
      throw NumericError(os.str());
    }
    net.zero_grads();
    t.backward(loss);
    opt.step(params);

    std::string val_cell;
    if (it % cfg.val_interval == 0 || it == cfg.iterations) {
      const double vd = detail::val_mean_dsc(net, val);
      val_cell = fmt_double(vd);
      if (vd > res.best_val_dsc) {
        res.best_val_dsc = vd;
        res.best_iter = it;
        best = snapshot();
      }
    }
    log.row({std::to_string(it), fmt_double(loss_v), fmt_double(sim_v), fmt_double(reg_v),
             val_cell});
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  save_checkpoint(res.checkpoint, cfg.meta(extent), params);
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation.

inline EvalReport eval_pair(XcamorphNet<float>& net, const PairData& d, const std::string& id) {
  EvalReport r;
  r.pair_id = id;
  Tensor<float> u = net.predict(d.fixed, d.moving);
  LabelMap warped_labels = warp_nearest(d.labels_moving, u);
  const auto set = labels_present(d.labels_fixed, d.labels_moving);
  r.dsc_before = dsc(d.labels_fixed, d.labels_moving, set).mean;
  r.dsc_after = dsc(d.labels_fixed, warped_labels, set).mean;
  r.njd_pct = njd_percent(u);
  r.mae_before = error_map(d.moving, d.fixed).mae;
  r.mae_after = error_map(warp_tensor(d.moving, u), d.fixed).mae;
  return r;
}

inline std::vector<EvalReport> evaluate_split(XcamorphNet<float>& net, const Manifest& manifest,
                                              const std::string& split) {
  std::vector<EvalReport> out;
  for (const auto* r : manifest.split(split))
    out.push_back(eval_pair(net, load_pair(manifest.root / r->dir), r->id));
  return out;
}

inline EvalReport eval_summary(const std::vector<EvalReport>& reports) {
  EvalReport s;
  s.pair_id = "mean";
  for (const auto& r : reports) {
    s.dsc_before += r.dsc_before;
    s.dsc_after += r.dsc_after;
    s.njd_pct += r.njd_pct;
    s.mae_before += r.mae_before;
    s.mae_after += r.mae_after;
  }
  const double n = reports.empty() ? 1.0 : static_cast<double>(reports.size());
  s.dsc_before /= n;
  s.dsc_after /= n;
  s.njd_pct /= n;
  s.mae_before /= n;
  s.mae_after /= n;
  return s;
}

inline void write_eval_csv(const std::filesystem::path& path,
                           const std::vector<EvalReport>& reports) {
  CsvWriter w(path, {"pair_id", "dsc_before", "dsc_after", "njd_pct", "mae_before", "mae_after"});
  auto emit = [&](const EvalReport& r) {
    w.row({r.pair_id, fmt_double(r.dsc_before), fmt_double(r.dsc_after), fmt_double(r.njd_pct),
           fmt_double(r.mae_before), fmt_double(r.mae_after)});
  };
  for (const auto& r : reports) emit(r);
  emit(eval_summary(reports));
}

// Rebuilds a network from a checkpoint on disk.
inline XcamorphNet<float> load_network(const std::filesystem::path& ckpt) {
  CheckpointMeta meta = read_checkpoint_meta(ckpt);
  Rng rng(0);
  XcamorphNet<float> net(meta.net_config(), meta.extent, rng);
  load_checkpoint_params(ckpt, net.params());
  return net;
}

}  // namespace maxca
