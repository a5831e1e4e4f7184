#pragma once

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "maxca/blas.hpp"
#include "maxca/tensor.hpp"

namespace maxca {

// Trainable leaf. Lives outside the tape; the tape writes the gradient
// back after each backward pass.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor<T>(value.shape());
  }
  void zero_grad() { grad.fill(T(0)); }
};

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Dynamic reverse-mode tape. One tape per forward pass; freed afterwards.
// Single-threaded by contract: a pass owns its tape exclusively.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, std::int32_t)>;

  void set_recording(bool r) { recording_ = r; }
  bool recording() const { return recording_; }

  Var leaf(Tensor<T> v) { return push(std::move(v), nullptr, nullptr, "leaf"); }

  Var param(Param<T>& p) { return push(p.value, nullptr, &p, "param"); }

  Var make(Tensor<T> value, BackFn back, const char* opname = "op") {
    value.check_finite(opname);
    return push(std::move(value), recording_ ? std::move(back) : nullptr, nullptr, opname);
  }

  const Tensor<T>& val(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

  const Tensor<T>& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  Tensor<T>& grad_buf(Var v) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void accum(Var v, const Tensor<T>& g) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) n.grad[i] += g[i];
  }

  void accum(Var v, Tensor<T>&& g) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.empty()) {
      n.grad = std::move(g);
      return;
    }
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) n.grad[i] += g[i];
  }

  std::size_t size() const { return nodes_.size(); }

  const char* opname(std::int32_t i) const { return nodes_[static_cast<std::size_t>(i)].op; }

  void debug_run_back(std::int32_t i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.back && !n.grad.empty()) n.back(*this, i);
  }

  // Accumulates dloss/dparam into every trainable leaf registered on this
  // tape; leaves unreachable from the loss receive a zero gradient.
  void backward(Var loss) {
    if (val(loss).rank() != 0) throw TensorError("backward: loss must be a rank-0 tensor");
    grad_buf(loss)[0] = T(1);
    for (std::int32_t i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && !n.grad.empty()) n.back(*this, i);
    }
    for (auto& n : nodes_) {
      if (!n.param) continue;
      if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) n.param->grad[i] += n.grad[i];
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackFn back;
    Param<T>* param = nullptr;
    const char* op = "op";
  };

  Var push(Tensor<T> value, BackFn back, Param<T>* p, const char* op) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), std::move(back), p, op});
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  std::deque<Node> nodes_;
  bool recording_ = true;
};

// ---------------------------------------------------------------------------
// Elementwise arithmetic (equal shapes, or one rank-0 operand broadcast).

namespace detail {

enum class BinKind { Add, Sub, Mul, Div };

template <typename T, typename G>
void accum_maybe_scalar(Tape<T>& t, Var v, G&& g) {
  if (t.val(v).rank() == 0 && g.rank() != 0) {
    T s = 0;
    for (std::int64_t i = 0; i < g.numel(); ++i) s += g[i];
    t.accum(v, Tensor<T>::scalar(s));
  } else {
    t.accum(v, std::forward<G>(g));
  }
}

}  // namespace detail

template <typename T>
Var binary_op(Tape<T>& t, Var a, Var b, detail::BinKind kind) {
  const auto& va = t.val(a);
  const auto& vb = t.val(b);
  const bool a_scalar = va.rank() == 0 && vb.rank() != 0;
  const bool b_scalar = vb.rank() == 0 && va.rank() != 0;
  if (!a_scalar && !b_scalar && !va.same_shape(vb))
    throw TensorError("elementwise op: shape mismatch " + shape_str(va.shape()) + " vs " +
                      shape_str(vb.shape()));
  const Shape& out_shape = a_scalar ? vb.shape() : va.shape();
  Tensor<T> out(out_shape, uninit);
  const std::int64_t n = out.numel();
  auto ai = [&](std::int64_t i) { return va[a_scalar ? 0 : i]; };
  auto bi = [&](std::int64_t i) { return vb[b_scalar ? 0 : i]; };
  switch (kind) {
    case detail::BinKind::Add:
      for (std::int64_t i = 0; i < n; ++i) out[i] = ai(i) + bi(i);
      break;
    case detail::BinKind::Sub:
      for (std::int64_t i = 0; i < n; ++i) out[i] = ai(i) - bi(i);
      break;
    case detail::BinKind::Mul:
      for (std::int64_t i = 0; i < n; ++i) out[i] = ai(i) * bi(i);
      break;
    case detail::BinKind::Div:
      for (std::int64_t i = 0; i < vb.numel(); ++i)
        if (vb[i] == T(0)) throw TensorError("division by zero");
      for (std::int64_t i = 0; i < n; ++i) out[i] = ai(i) / bi(i);
      break;
  }
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const auto& xa = tp.val(a);
    const auto& xb = tp.val(b);
    auto xav = [&](std::int64_t i) { return xa[a_scalar ? 0 : i]; };
    auto xbv = [&](std::int64_t i) { return xb[b_scalar ? 0 : i]; };
    if (kind == detail::BinKind::Add || kind == detail::BinKind::Sub) {
      detail::accum_maybe_scalar(tp, a, g);
      if (kind == detail::BinKind::Add) {
        detail::accum_maybe_scalar(tp, b, g);
      } else {
        Tensor<T> gb(g.shape(), uninit);
        for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] = -g[i];
        detail::accum_maybe_scalar(tp, b, std::move(gb));
      }
      return;
    }
    Tensor<T> ga(g.shape(), uninit), gb(g.shape(), uninit);
    switch (kind) {
      case detail::BinKind::Add:
      case detail::BinKind::Sub:
        break;
      case detail::BinKind::Mul:
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          ga[i] = g[i] * xbv(i);
          gb[i] = g[i] * xav(i);
        }
        break;
      case detail::BinKind::Div:
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          ga[i] = g[i] / xbv(i);
          gb[i] = -g[i] * xav(i) / (xbv(i) * xbv(i));
        }
        break;
    }
    detail::accum_maybe_scalar(tp, a, std::move(ga));
    detail::accum_maybe_scalar(tp, b, std::move(gb));
  });
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  return binary_op(t, a, b, detail::BinKind::Add);
}
template <typename T>
Var sub(Tape<T>& t, Var a, Var b) {
  return binary_op(t, a, b, detail::BinKind::Sub);
}
template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  return binary_op(t, a, b, detail::BinKind::Mul);
}
template <typename T>
Var div(Tape<T>& t, Var a, Var b) {
  return binary_op(t, a, b, detail::BinKind::Div);
}

template <typename T>
Var scale(Tape<T>& t, Var x, T c) {
  const auto& vx = t.val(x);
  Tensor<T> out(vx.shape(), uninit);
  for (std::int64_t i = 0; i < vx.numel(); ++i) out[i] = vx[i] * c;
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T> gx(g.shape(), uninit);
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] = g[i] * c;
    tp.accum(x, std::move(gx));
  });
}

template <typename T>
Var add_const(Tape<T>& t, Var x, T c) {
  const auto& vx = t.val(x);
  Tensor<T> out(vx.shape(), uninit);
  for (std::int64_t i = 0; i < vx.numel(); ++i) out[i] = vx[i] + c;
  return t.make(std::move(out),
                [=](Tape<T>& tp, std::int32_t self) { tp.accum(x, tp.grad(Var{self})); });
}

template <typename T>
Var leaky_relu(Tape<T>& t, Var x, T slope) {
  if (!(slope > T(0) && slope < T(1))) throw TensorError("leaky_relu: slope must be in (0,1)");
  const auto& vx = t.val(x);
  Tensor<T> out(vx.shape(), uninit);
  for (std::int64_t i = 0; i < vx.numel(); ++i) out[i] = vx[i] >= T(0) ? vx[i] : slope * vx[i];
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const auto& xin = tp.val(x);
    Tensor<T> gx(g.shape(), uninit);
    // subgradient at exactly 0 is defined as slope
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] = xin[i] > T(0) ? g[i] : slope * g[i];
    tp.accum(x, std::move(gx));
  });
}

template <typename T>
Var relu(Tape<T>& t, Var x) {
  const auto& vx = t.val(x);
  Tensor<T> out(vx.shape(), uninit);
  for (std::int64_t i = 0; i < vx.numel(); ++i) out[i] = vx[i] > T(0) ? vx[i] : T(0);
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const auto& xin = tp.val(x);
    Tensor<T> gx(g.shape(), uninit);
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] = xin[i] > T(0) ? g[i] : T(0);
    tp.accum(x, std::move(gx));
  });
}

template <typename T>
Var sigmoid(Tape<T>& t, Var x) {
  const auto& vx = t.val(x);
  Tensor<T> out(vx.shape(), uninit);
  for (std::int64_t i = 0; i < vx.numel(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-static_cast<double>(vx[i])));
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const auto& y = tp.val(Var{self});
    Tensor<T> gx(g.shape(), uninit);
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] = g[i] * y[i] * (T(1) - y[i]);
    tp.accum(x, std::move(gx));
  });
}

template <typename T>
Var sum_all(Tape<T>& t, Var x) {
  const auto& vx = t.val(x);
  T s = 0;
  for (std::int64_t i = 0; i < vx.numel(); ++i) s += vx[i];
  return t.make(Tensor<T>::scalar(s), [=](Tape<T>& tp, std::int32_t self) {
    const T g = tp.grad(Var{self})[0];
    Tensor<T> gx(tp.val(x).shape(), g);
    tp.accum(x, std::move(gx));
  });
}

template <typename T>
Var mean_all(Tape<T>& t, Var x) {
  return scale(t, sum_all(t, x), T(1) / static_cast<T>(t.val(x).numel()));
}

// ---------------------------------------------------------------------------
// Layout transforms: pure index permutations, backward is the inverse map.

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<int>& perm) {
  const std::int64_t r = x.rank();
  if (static_cast<std::int64_t>(perm.size()) != r) throw TensorError("permute: rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  Shape out_shape(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) {
    int p = perm[static_cast<std::size_t>(i)];
    if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)])
      throw TensorError("permute: invalid axis permutation");
    seen[static_cast<std::size_t>(p)] = true;
    out_shape[static_cast<std::size_t>(i)] = x.dim(p);
  }
  Tensor<T> out(out_shape, uninit);
  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
  for (std::int64_t i = r - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(i + 1)] * x.dim(i + 1);
  // stride of output axis i in the input
  std::vector<std::int64_t> strides(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i)
    strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  const T* src = x.data();
  T* dst = out.data();
  const std::int64_t n = x.numel();
  std::int64_t src_off = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    dst[i] = src[src_off];
    for (std::int64_t a = r - 1; a >= 0; --a) {
      auto ua = static_cast<std::size_t>(a);
      if (++idx[ua] < out_shape[ua]) {
        src_off += strides[ua];
        break;
      }
      src_off -= strides[ua] * (out_shape[ua] - 1);
      idx[ua] = 0;
    }
  }
  return out;
}

inline std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  return inv;
}

template <typename T>
Var reshape(Tape<T>& t, Var x, Shape new_shape) {
  const auto& vx = t.val(x);
  if (numel_of(new_shape) != vx.numel())
    throw TensorError("reshape: element count mismatch " + shape_str(vx.shape()) + " -> " +
                      shape_str(new_shape));
  Tensor<T> reshaped(new_shape, uninit);
  std::memcpy(reshaped.data(), vx.data(), static_cast<std::size_t>(vx.numel()) * sizeof(T));
  Shape old_shape = vx.shape();
  return t.make(std::move(reshaped), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T> gx(old_shape, uninit);
    std::memcpy(gx.data(), g.data(), static_cast<std::size_t>(g.numel()) * sizeof(T));
    tp.accum(x, std::move(gx));
  });
}

template <typename T>
Var permute(Tape<T>& t, Var x, std::vector<int> perm) {
  Tensor<T> out = permute_tensor(t.val(x), perm);
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    tp.accum(x, permute_tensor(tp.grad(Var{self}), inverse_perm(perm)));
  });
}

namespace detail {

// Decompose a shape around `axis` into [outer][axis extent][inner].
inline void axis_split(const Shape& s, int axis, std::int64_t& outer, std::int64_t& extent,
                       std::int64_t& inner) {
  if (axis < 0 || axis >= static_cast<int>(s.size())) throw TensorError("invalid axis");
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  extent = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

template <typename T>
Var concat(Tape<T>& t, const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  Shape base = t.val(parts[0]).shape();
  std::int64_t total = 0;
  for (Var p : parts) {
    const auto& s = t.val(p).shape();
    if (s.size() != base.size()) throw TensorError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != axis && s[i] != base[i])
        throw TensorError("concat: extent mismatch off the concat axis");
    total += s[static_cast<std::size_t>(axis)];
  }
  Shape out_shape = base;
  out_shape[static_cast<std::size_t>(axis)] = total;
  Tensor<T> out(out_shape, uninit);
  std::int64_t outer, ext, inner;
  detail::axis_split(out_shape, axis, outer, ext, inner);
  std::int64_t off = 0;
  for (Var p : parts) {
    const auto& v = t.val(p);
    const std::int64_t pe = v.dim(axis);
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * ext + off) * inner, v.data() + o * pe * inner,
                  static_cast<std::size_t>(pe * inner) * sizeof(T));
    off += pe;
  }
  std::vector<std::int64_t> extents;
  for (Var p : parts) extents.push_back(t.val(p).dim(axis));
  auto parts_copy = parts;
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    std::int64_t off2 = 0;
    for (std::size_t k = 0; k < parts_copy.size(); ++k) {
      const std::int64_t pe = extents[k];
      Shape ps = g.shape();
      ps[static_cast<std::size_t>(axis)] = pe;
      Tensor<T> gp(ps, uninit);
      for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(gp.data() + o * pe * inner, g.data() + (o * ext + off2) * inner,
                    static_cast<std::size_t>(pe * inner) * sizeof(T));
      tp.accum(parts_copy[k], std::move(gp));
      off2 += pe;
    }
  });
}

template <typename T>
std::vector<Var> split(Tape<T>& t, Var x, int k, int axis) {
  const auto& vx = t.val(x);
  std::int64_t outer, ext, inner;
  detail::axis_split(vx.shape(), axis, outer, ext, inner);
  if (k < 1 || ext % k != 0) throw TensorError("split: axis extent not divisible by part count");
  const std::int64_t pe = ext / k;
  std::vector<Var> out;
  for (int p = 0; p < k; ++p) {
    Shape ps = vx.shape();
    ps[static_cast<std::size_t>(axis)] = pe;
    Tensor<T> part(ps, uninit);
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(part.data() + o * pe * inner, vx.data() + (o * ext + p * pe) * inner,
                  static_cast<std::size_t>(pe * inner) * sizeof(T));
    out.push_back(t.make(std::move(part), [=](Tape<T>& tp, std::int32_t self) {
      const Tensor<T>& g = tp.grad(Var{self});
      Tensor<T>& gx = tp.grad_buf(x);
      for (std::int64_t o = 0; o < outer; ++o) {
        T* dst = gx.data() + (o * ext + p * pe) * inner;
        const T* src = g.data() + o * pe * inner;
        for (std::int64_t i = 0; i < pe * inner; ++i) dst[i] += src[i];
      }
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batched matrix product [..,M,K] x [..,K,N] -> [..,M,N].

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const auto& va = t.val(a);
  const auto& vb = t.val(b);
  if (va.rank() < 2 || vb.rank() < 2 || va.rank() != vb.rank())
    throw TensorError("matmul: operands must have equal rank >= 2");
  const std::int64_t r = va.rank();
  std::int64_t batch = 1;
  for (std::int64_t i = 0; i < r - 2; ++i) {
    if (va.dim(i) != vb.dim(i)) throw TensorError("matmul: batch extent mismatch");
    batch *= va.dim(i);
  }
  const std::int64_t m = va.dim(r - 2), k = va.dim(r - 1);
  const std::int64_t kb = vb.dim(r - 2), n = vb.dim(r - 1);
  if (k != kb) throw TensorError("matmul: inner extent mismatch");
  Shape out_shape(va.shape().begin(), va.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape, uninit);
  for (std::int64_t bi = 0; bi < batch; ++bi)
    gemm(false, false, m, n, k, T(1), va.data() + bi * m * k, k, vb.data() + bi * k * n, n, T(0),
         out.data() + bi * m * n, n);
  return t.make(
      std::move(out),
      [=](Tape<T>& tp, std::int32_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const auto& xa = tp.val(a);
        const auto& xb = tp.val(b);
        Tensor<T>& ga = tp.grad_buf(a);
        Tensor<T>& gb = tp.grad_buf(b);
        for (std::int64_t bi = 0; bi < batch; ++bi) {
          // dA = dY * B^T ; dB = A^T * dY
          gemm(false, true, m, k, n, T(1), g.data() + bi * m * n, n, xb.data() + bi * k * n, n,
               T(1), ga.data() + bi * m * k, k);
          gemm(true, false, k, n, m, T(1), xa.data() + bi * m * k, k, g.data() + bi * m * n, n,
               T(1), gb.data() + bi * k * n, n);
        }
      },
      "matmul");
}

// ---------------------------------------------------------------------------
// Normalizations along one axis.

template <typename T>
Var softmax(Tape<T>& t, Var x, int axis) {
  const auto& vx = t.val(x);
  std::int64_t outer, ext, inner;
  detail::axis_split(vx.shape(), axis, outer, ext, inner);
  Tensor<T> out(vx.shape(), uninit);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const T* src = vx.data() + o * ext * inner + i;
      T* dst = out.data() + o * ext * inner + i;
      T mx = src[0];
      for (std::int64_t j = 1; j < ext; ++j) mx = std::max(mx, src[j * inner]);
      T sum = 0;
      for (std::int64_t j = 0; j < ext; ++j) {
        T e = static_cast<T>(std::exp(static_cast<double>(src[j * inner] - mx)));
        dst[j * inner] = e;
        sum += e;
      }
      for (std::int64_t j = 0; j < ext; ++j) dst[j * inner] /= sum;
    }
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const Tensor<T>& y = tp.val(Var{self});
    Tensor<T> gx(g.shape(), uninit);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * ext * inner + i;
        T dot = 0;
        for (std::int64_t j = 0; j < ext; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::int64_t j = 0; j < ext; ++j)
          gx[base + j * inner] = y[base + j * inner] * (g[base + j * inner] - dot);
      }
    tp.accum(x, std::move(gx));
  });
}

template <typename T>
Var l2_normalize(Tape<T>& t, Var x, int axis, T eps) {
  if (!(eps > T(0))) throw TensorError("l2_normalize: eps must be positive");
  const auto& vx = t.val(x);
  std::int64_t outer, ext, inner;
  detail::axis_split(vx.shape(), axis, outer, ext, inner);
  Tensor<T> out(vx.shape(), uninit);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * ext * inner + i;
      T nsq = 0;
      for (std::int64_t j = 0; j < ext; ++j) nsq += vx[base + j * inner] * vx[base + j * inner];
      T denom = std::max(static_cast<T>(std::sqrt(static_cast<double>(nsq))), eps);
      for (std::int64_t j = 0; j < ext; ++j) out[base + j * inner] = vx[base + j * inner] / denom;
    }
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const auto& xin = tp.val(x);
    Tensor<T> gx(g.shape(), uninit);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * ext * inner + i;
        T nsq = 0, dot = 0;
        for (std::int64_t j = 0; j < ext; ++j) {
          nsq += xin[base + j * inner] * xin[base + j * inner];
          dot += xin[base + j * inner] * g[base + j * inner];
        }
        T norm = static_cast<T>(std::sqrt(static_cast<double>(nsq)));
        if (norm >= eps) {
          const T inv = T(1) / norm;
          const T inv3 = inv * inv * inv;
          for (std::int64_t j = 0; j < ext; ++j)
            gx[base + j * inner] = g[base + j * inner] * inv - xin[base + j * inner] * dot * inv3;
        } else {
          for (std::int64_t j = 0; j < ext; ++j) gx[base + j * inner] = g[base + j * inner] / eps;
        }
      }
    tp.accum(x, std::move(gx));
  });
}

// y = x + b broadcast along `axis` (b is rank-1 with length dim(axis)).
template <typename T>
Var add_bias(Tape<T>& t, Var x, Var b, int axis) {
  const auto& vx = t.val(x);
  const auto& vb = t.val(b);
  std::int64_t outer, ext, inner;
  detail::axis_split(vx.shape(), axis, outer, ext, inner);
  if (vb.rank() != 1 || vb.dim(0) != ext)
    throw TensorError("add_bias: bias must be rank-1 matching the axis extent");
  Tensor<T> out(vx.shape(), uninit);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = 0; j < ext; ++j) {
      const std::int64_t base = (o * ext + j) * inner;
      const T bj = vb[j];
      for (std::int64_t i = 0; i < inner; ++i) out[base + i] = vx[base + i] + bj;
    }
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    tp.accum(x, g);
    Tensor<T> gb(Shape{ext});
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t j = 0; j < ext; ++j) {
        const std::int64_t base = (o * ext + j) * inner;
        T s = 0;
        for (std::int64_t i = 0; i < inner; ++i) s += g[base + i];
        gb[j] += s;
      }
    tp.accum(b, std::move(gb));
  });
}

// Mean over all axes after the first `keep` axes (e.g. global average pool).
template <typename T>
Var mean_trailing(Tape<T>& t, Var x, int keep) {
  const auto& vx = t.val(x);
  if (keep < 0 || keep > vx.rank()) throw TensorError("mean_trailing: invalid keep count");
  Shape out_shape(vx.shape().begin(), vx.shape().begin() + keep);
  std::int64_t outer = numel_of(out_shape);
  std::int64_t inner = vx.numel() / outer;
  Tensor<T> out(out_shape, uninit);
  for (std::int64_t o = 0; o < outer; ++o) {
    T s = 0;
    for (std::int64_t i = 0; i < inner; ++i) s += vx[o * inner + i];
    out[o] = s / static_cast<T>(inner);
  }
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T> gx(tp.val(x).shape());
    const T inv = T(1) / static_cast<T>(inner);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) gx[o * inner + i] = g[o] * inv;
    tp.accum(x, std::move(gx));
  });
}

}  // namespace maxca
