#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "maxca/metrics.hpp"
#include "maxca/tensor.hpp"

namespace maxca {

// ---------------------------------------------------------------------------
// RVOL: little-endian binary volume container.
// 32-byte header: "RVOL1" | version u8 | x,y,z u32 | channels u32 |
// dtype u8 (0 = f32, 1 = u16 labels) | 9 reserved zero bytes.
// Payload layout [channel][z][y][x], x fastest. The in-memory layout is
// [C][H][W][D] with H = x, W = y, D = z, so IO transposes.

enum class IoErrorCode { BadMagic, BadVersion, UnknownDtype, TruncatedPayload, BadHeader, OpenFailed };

struct IoError : std::runtime_error {
  IoErrorCode code;
  IoError(IoErrorCode c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

namespace detail {

constexpr char kRvolMagic[5] = {'R', 'V', 'O', 'L', '1'};

inline void put_u32(std::vector<unsigned char>& h, std::size_t off, std::uint32_t v) {
  h[off] = static_cast<unsigned char>(v & 0xff);
  h[off + 1] = static_cast<unsigned char>((v >> 8) & 0xff);
  h[off + 2] = static_cast<unsigned char>((v >> 16) & 0xff);
  h[off + 3] = static_cast<unsigned char>((v >> 24) & 0xff);
}

inline std::uint32_t get_u32(const unsigned char* h) {
  return static_cast<std::uint32_t>(h[0]) | (static_cast<std::uint32_t>(h[1]) << 8) |
         (static_cast<std::uint32_t>(h[2]) << 16) | (static_cast<std::uint32_t>(h[3]) << 24);
}

struct RvolHeader {
  std::uint32_t x = 0, y = 0, z = 0, channels = 0;
  std::uint8_t dtype = 0;
};

inline std::vector<unsigned char> encode_header(const RvolHeader& h) {
  std::vector<unsigned char> buf(32, 0);
  std::memcpy(buf.data(), kRvolMagic, 5);
  buf[5] = 1;  // version
  put_u32(buf, 6, h.x);
  put_u32(buf, 10, h.y);
  put_u32(buf, 14, h.z);
  put_u32(buf, 18, h.channels);
  buf[22] = h.dtype;
  return buf;
}

inline RvolHeader decode_header(const unsigned char* buf) {
  if (std::memcmp(buf, kRvolMagic, 5) != 0) throw IoError(IoErrorCode::BadMagic, "bad magic");
  if (buf[5] != 1) throw IoError(IoErrorCode::BadVersion, "unsupported RVOL version");
  RvolHeader h;
  h.x = get_u32(buf + 6);
  h.y = get_u32(buf + 10);
  h.z = get_u32(buf + 14);
  h.channels = get_u32(buf + 18);
  h.dtype = buf[22];
  if (h.dtype > 1) throw IoError(IoErrorCode::UnknownDtype, "unknown dtype code");
  if (h.x == 0 || h.y == 0 || h.z == 0 || h.channels == 0)
    throw IoError(IoErrorCode::BadHeader, "zero extent in header");
  return h;
}

template <typename T>
constexpr std::uint8_t dtype_code() {
  if constexpr (std::is_same_v<T, float>) return 0;
  else return 1;
}

}  // namespace detail

template <typename T>
void write_rvol(const std::filesystem::path& path, const Tensor<T>& vol) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, std::uint16_t>);
  if (vol.rank() != 4) throw IoError(IoErrorCode::BadHeader, "write_rvol: expects [C][H][W][D]");
  const std::int64_t C = vol.dim(0), H = vol.dim(1), W = vol.dim(2), D = vol.dim(3);
  detail::RvolHeader h;
  h.x = static_cast<std::uint32_t>(H);
  h.y = static_cast<std::uint32_t>(W);
  h.z = static_cast<std::uint32_t>(D);
  h.channels = static_cast<std::uint32_t>(C);
  h.dtype = detail::dtype_code<T>();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(IoErrorCode::OpenFailed, "cannot open " + path.string() + " for writing");
  auto header = detail::encode_header(h);
  f.write(reinterpret_cast<const char*>(header.data()), 32);
  std::vector<T> line(static_cast<std::size_t>(H));
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t z = 0; z < D; ++z)
      for (std::int64_t y = 0; y < W; ++y) {
        for (std::int64_t x = 0; x < H; ++x) line[static_cast<std::size_t>(x)] = vol.at(c, x, y, z);
        f.write(reinterpret_cast<const char*>(line.data()), static_cast<std::streamsize>(H * sizeof(T)));
      }
  if (!f) throw IoError(IoErrorCode::OpenFailed, "write failed: " + path.string());
}

// Reads an RVOL file whose dtype matches T; malformed files raise typed
// errors and never return a partial volume.
template <typename T>
Tensor<T> read_rvol(const std::filesystem::path& path) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, std::uint16_t>);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(IoErrorCode::OpenFailed, "cannot open " + path.string());
  unsigned char buf[32];
  f.read(reinterpret_cast<char*>(buf), 32);
  if (f.gcount() != 32) throw IoError(IoErrorCode::TruncatedPayload, "truncated header");
  auto h = detail::decode_header(buf);
  if (h.dtype != detail::dtype_code<T>())
    throw IoError(IoErrorCode::UnknownDtype, "dtype does not match requested element type");
  const std::int64_t H = h.x, W = h.y, D = h.z, C = h.channels;
  const std::int64_t n = C * H * W * D;
  std::vector<T> payload(static_cast<std::size_t>(n));
  f.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (f.gcount() != static_cast<std::streamsize>(n * sizeof(T)))
    throw IoError(IoErrorCode::TruncatedPayload, "truncated payload");
  char extra;
  if (f.read(&extra, 1); f.gcount() != 0)
    throw IoError(IoErrorCode::TruncatedPayload, "payload longer than header declares");
  Tensor<T> vol(Shape{C, H, W, D});
  std::size_t idx = 0;
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t z = 0; z < D; ++z)
      for (std::int64_t y = 0; y < W; ++y)
        for (std::int64_t x = 0; x < H; ++x) vol.at(c, x, y, z) = payload[idx++];
  return vol;
}

// ---------------------------------------------------------------------------
// PGM (P5) slice emitter: min-max normalized, round-half-up quantization.

template <typename T>
void emit_slice_pgm(const Tensor<T>& vol, int axis, std::int64_t index,
                    const std::filesystem::path& path) {
  if (vol.rank() != 4) throw IoError(IoErrorCode::BadHeader, "emit_slice_pgm: expects [C][H][W][D]");
  if (axis < 0 || axis > 2) throw TensorError("emit_slice_pgm: axis must be 0..2");
  const std::int64_t ext[3] = {vol.dim(1), vol.dim(2), vol.dim(3)};
  if (index < 0 || index >= ext[axis]) throw TensorError("emit_slice_pgm: index out of range");
  int rows_axis = axis == 0 ? 1 : 0;
  int cols_axis = axis == 2 ? 1 : 2;
  const std::int64_t rows = ext[rows_axis], cols = ext[cols_axis];
  std::vector<double> slice(static_cast<std::size_t>(rows * cols));
  double lo = 1e300, hi = -1e300;
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) {
      std::int64_t ix[3];
      ix[axis] = index;
      ix[rows_axis] = r;
      ix[cols_axis] = c;
      const double v = static_cast<double>(vol.at(std::int64_t(0), ix[0], ix[1], ix[2]));
      slice[static_cast<std::size_t>(r * cols + c)] = v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const double range = hi - lo;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(IoErrorCode::OpenFailed, "cannot open " + path.string());
  f << "P5\n" << cols << " " << rows << "\n255\n";
  for (double v : slice) {
    const double norm = range > 0 ? (v - lo) / range : 0.0;
    const auto pix = static_cast<unsigned char>(std::floor(norm * 255.0 + 0.5));
    f.write(reinterpret_cast<const char*>(&pix), 1);
  }
}

// ---------------------------------------------------------------------------
// CSV with a mandatory header row and RFC-4180-style quoting.

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
      : f_(path) {
    if (!f_) throw IoError(IoErrorCode::OpenFailed, "cannot open " + path.string());
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) f_ << ',';
      f_ << csv_escape(cells[i]);
    }
    f_ << '\n';
  }

  void flush() { f_.flush(); }

 private:
  std::ofstream f_;
};

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(IoErrorCode::OpenFailed, "cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cur += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        cells.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    cells.push_back(cur);
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace maxca
