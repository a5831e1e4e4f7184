#pragma once

#include <map>
#include <set>

#include "maxca/tensor.hpp"

namespace maxca {

using LabelMap = Tensor<std::uint16_t>;

struct DscResult {
  std::map<std::uint16_t, double> per_label;
  double mean = 0.0;  // over the evaluated labels, background (0) excluded
};

// Dice overlap per label: 2|A n B| / (|A| + |B|). Labels absent from both
// maps are excluded from the mean rather than scored 1.
inline DscResult dsc(const LabelMap& a, const LabelMap& b,
                     const std::set<std::uint16_t>& label_set) {
  if (!a.same_shape(b)) throw TensorError("dsc: shape mismatch");
  DscResult r;
  double acc = 0.0;
  int counted = 0;
  for (std::uint16_t lab : label_set) {
    if (lab == 0) continue;
    std::int64_t na = 0, nb = 0, ninter = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      const bool ia = a[i] == lab;
      const bool ib = b[i] == lab;
      na += ia;
      nb += ib;
      ninter += ia && ib;
    }
    if (na + nb == 0) continue;
    const double d = 2.0 * static_cast<double>(ninter) / static_cast<double>(na + nb);
    r.per_label[lab] = d;
    acc += d;
    ++counted;
  }
  r.mean = counted ? acc / counted : 0.0;
  return r;
}

inline std::set<std::uint16_t> labels_present(const LabelMap& a, const LabelMap& b) {
  std::set<std::uint16_t> s;
  for (std::int64_t i = 0; i < a.numel(); ++i) s.insert(a[i]);
  for (std::int64_t i = 0; i < b.numel(); ++i) s.insert(b[i]);
  s.erase(0);
  return s;
}

// Percentage of interior voxels where det(I + grad u) <= 0, with the
// Jacobian taken by central differences. det <= 0 is counted so that both
// folding and collapse are flagged.
template <typename T>
double njd_percent(const Tensor<T>& u) {
  if (u.rank() != 4 || u.dim(0) != 3) throw TensorError("njd: expects [3][H][W][D]");
  const std::int64_t H = u.dim(1), W = u.dim(2), D = u.dim(3);
  if (H < 3 || W < 3 || D < 3) throw TensorError("njd: spatial extents must be >= 3");
  const std::int64_t V = H * W * D;
  std::int64_t neg = 0, total = 0;
  auto at = [&](int comp, std::int64_t h, std::int64_t w, std::int64_t d) {
    return static_cast<double>(u.data()[comp * V + (h * W + w) * D + d]);
  };
  for (std::int64_t h = 1; h + 1 < H; ++h)
    for (std::int64_t w = 1; w + 1 < W; ++w)
      for (std::int64_t d = 1; d + 1 < D; ++d) {
        double j[3][3];
        for (int i = 0; i < 3; ++i) {
          j[i][0] = 0.5 * (at(i, h + 1, w, d) - at(i, h - 1, w, d));
          j[i][1] = 0.5 * (at(i, h, w + 1, d) - at(i, h, w - 1, d));
          j[i][2] = 0.5 * (at(i, h, w, d + 1) - at(i, h, w, d - 1));
          j[i][i] += 1.0;
        }
        const double det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                           j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                           j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
        neg += det <= 0.0;
        ++total;
      }
  return 100.0 * static_cast<double>(neg) / static_cast<double>(total);
}

template <typename T>
struct ErrorMap {
  Tensor<T> map;
  double mae = 0.0;
};

template <typename T>
ErrorMap<T> error_map(const Tensor<T>& warped, const Tensor<T>& fixed) {
  if (!warped.same_shape(fixed)) throw TensorError("error_map: shape mismatch");
  ErrorMap<T> r;
  r.map = Tensor<T>(warped.shape());
  double acc = 0.0;
  for (std::int64_t i = 0; i < warped.numel(); ++i) {
    const double d = std::abs(static_cast<double>(warped[i]) - static_cast<double>(fixed[i]));
    r.map[i] = static_cast<T>(d);
    acc += d;
  }
  r.mae = acc / static_cast<double>(warped.numel());
  return r;
}

struct EvalReport {
  std::string pair_id;
  double dsc_before = 0.0;
  double dsc_after = 0.0;
  double njd_pct = 0.0;
  double mae_before = 0.0;
  double mae_after = 0.0;
};

}  // namespace maxca
