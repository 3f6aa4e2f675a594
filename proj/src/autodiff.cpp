#include "capslu/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace capslu::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// For each flat index of `out`, the flat index into a tensor of shape `in`
/// broadcast against it. Empty when the shapes are identical.
std::vector<std::size_t> broadcast_offsets(const Shape& out, const Shape& in) {
  if (out == in) return {};
  const std::size_t r = out.size();
  Shape in_full(r, 1);
  std::copy(in.begin(), in.end(), in_full.begin() + static_cast<long>(r - in.size()));
  std::vector<std::size_t> in_stride(r, 0);
  std::size_t st = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = in_full[i] == 1 ? 0 : st;
    st *= in_full[i];
  }
  const std::size_t total = shape_size(out);
  std::vector<std::size_t> offsets(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t k = 0; k < total; ++k) {
    offsets[k] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += in_stride[d];
      if (idx[d] < out[d]) break;
      off -= in_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return offsets;
}

template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& in_shape, const std::vector<std::size_t>& offsets) {
  if (offsets.empty()) return g;
  Tensor<T> r(in_shape);
  for (std::size_t k = 0; k < g.size(); ++k) r[offsets[k]] += g[k];
  return r;
}

template <typename T>
void check_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("vars belong to different tapes");
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T, typename Fwd, typename Dx>
Var<T> unary(Var<T> a, Fwd fwd, Dx dx) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, dx](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& x = tp.value(ia);
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i] * dx(x[i]);
    tp.accumulate(ia, gx);
  });
}

}  // namespace

// ---------------------------------------------------------------- Tape

template <typename T>
Tape<T>::Tape() {
#ifdef NDEBUG
  check_finite_ = false;
#else
  check_finite_ = true;
#endif
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  return record(std::move(value), {}, nullptr);
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn backward) {
  if (check_finite_) {
    for (T v : value.data()) {
      if (!std::isfinite(v)) {
        throw std::domain_error("non-finite value produced by op " + std::to_string(nodes_.size()));
      }
    }
  }
  Node n;
  n.value = std::move(value);
  for (std::size_t p : parents) {
    if (p >= nodes_.size()) throw std::invalid_argument("parent id not on this tape");
    n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Tape<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, const Tensor<T>& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor<T>& dst = grad(id);
  if (dst.size() != g.size()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value " + shape_str(dst.shape()));
  }
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (&loss.tape() != this) throw std::invalid_argument("loss is not on this tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  grad(loss.id()).fill(T(1));
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.param != nullptr) {
      Tensor<T>& pg = n.param->grad;
      if (pg.size() != n.grad.size()) pg = Tensor<T>(n.value.shape());
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
    } else if (n.backward) {
      n.backward(*this, n.grad);
    }
  }
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  auto oa = broadcast_offsets(out_shape, a.shape());
  auto ob = broadcast_offsets(out_shape, b.shape());
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(out_shape);
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = av[oa.empty() ? k : oa[k]] + bv[ob.empty() ? k : ob[k]];
  }
  const std::size_t ia = a.id(), ib = b.id();
  Shape sa = a.shape(), sb = b.shape();
  return a.tape().record(std::move(out), {ia, ib},
                         [=](Tape<T>& tp, const Tensor<T>& g) {
                           if (tp.requires_grad(ia)) tp.accumulate(ia, reduce_to(g, sa, oa));
                           if (tp.requires_grad(ib)) tp.accumulate(ib, reduce_to(g, sb, ob));
                         });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  auto oa = broadcast_offsets(out_shape, a.shape());
  auto ob = broadcast_offsets(out_shape, b.shape());
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(out_shape);
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = av[oa.empty() ? k : oa[k]] * bv[ob.empty() ? k : ob[k]];
  }
  const std::size_t ia = a.id(), ib = b.id();
  Shape sa = a.shape(), sb = b.shape();
  return a.tape().record(std::move(out), {ia, ib}, [=](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& x = tp.value(ia);
    const Tensor<T>& y = tp.value(ib);
    if (tp.requires_grad(ia)) {
      Tensor<T> ga(g.shape());
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] = g[k] * y[ob.empty() ? k : ob[k]];
      tp.accumulate(ia, reduce_to(ga, sa, oa));
    }
    if (tp.requires_grad(ib)) {
      Tensor<T> gb(g.shape());
      for (std::size_t k = 0; k < g.size(); ++k) gb[k] = g[k] * x[oa.empty() ? k : oa[k]];
      tp.accumulate(ib, reduce_to(gb, sb, ob));
    }
  });
}

template <typename T>
Var<T> mul_const(Var<T> a, const Tensor<T>& c) {
  return mul(a, a.tape().constant(c));
}

template <typename T>
Var<T> add_const(Var<T> a, const Tensor<T>& c) {
  return add(a, a.tape().constant(c));
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  return unary(a, [c](T x) { return x + c; }, [](T) { return T(1); });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  return unary(a, [c](T x) { return x * c; }, [c](T) { return c; });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary(a, [](T x) { return stable_sigmoid(x); },
               [](T x) {
                 const T s = stable_sigmoid(x);
                 return s * (T(1) - s);
               });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  return unary(a, [](T x) { return std::tanh(x); },
               [](T x) {
                 const T t = std::tanh(x);
                 return T(1) - t * t;
               });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> log(Var<T> a) {
  return unary(a, [](T x) { return std::log(x); }, [](T x) { return T(1) / x; });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return unary(a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
               [lo, hi](T x) { return (x < lo || x > hi) ? T(0) : T(1); });
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  MapM<T>(out.data().data(), m, n).noalias() =
      MapC<T>(a.value().data().data(), m, k) * MapC<T>(b.value().data().data(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [=](Tape<T>& tp, const Tensor<T>& g) {
    MapC<T> G(g.data().data(), m, n);
    if (tp.requires_grad(ia)) {
      Tensor<T> ga({m, k});
      MapM<T>(ga.data().data(), m, k).noalias() = G * MapC<T>(tp.value(ib).data().data(), k, n).transpose();
      tp.accumulate(ia, ga);
    }
    if (tp.requires_grad(ib)) {
      Tensor<T> gb({k, n});
      MapM<T>(gb.data().data(), k, n).noalias() = MapC<T>(tp.value(ia).data().data(), m, k).transpose() * G;
      tp.accumulate(ib, gb);
    }
  });
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool trans_a, bool trans_b) {
  check_same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0]) {
    throw ShapeError("bmm expects rank-3 tensors with equal batch, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t batch = sa[0];
  const std::size_t ar = sa[1], ac = sa[2], br = sb[1], bc = sb[2];
  const std::size_t m = trans_a ? ac : ar;
  const std::size_t k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br;
  const std::size_t n = trans_b ? br : bc;
  if (k != kb) throw ShapeError("bmm inner dimension mismatch " + shape_str(sa) + " x " + shape_str(sb));
  Tensor<T> out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    MapC<T> A(a.value().data().data() + i * ar * ac, ar, ac);
    MapC<T> B(b.value().data().data() + i * br * bc, br, bc);
    MapM<T> C(out.data().data() + i * m * n, m, n);
    if (trans_a && trans_b) C.noalias() = A.transpose() * B.transpose();
    else if (trans_a) C.noalias() = A.transpose() * B;
    else if (trans_b) C.noalias() = A * B.transpose();
    else C.noalias() = A * B;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [=](Tape<T>& tp, const Tensor<T>& g) {
    const bool need_a = tp.requires_grad(ia), need_b = tp.requires_grad(ib);
    Tensor<T> ga(need_a ? Shape{batch, ar, ac} : Shape{});
    Tensor<T> gb(need_b ? Shape{batch, br, bc} : Shape{});
    for (std::size_t i = 0; i < batch; ++i) {
      MapC<T> A(tp.value(ia).data().data() + i * ar * ac, ar, ac);
      MapC<T> B(tp.value(ib).data().data() + i * br * bc, br, bc);
      MapC<T> G(g.data().data() + i * m * n, m, n);
      if (need_a) {
        MapM<T> GA(ga.data().data() + i * ar * ac, ar, ac);
        // op(A) = A or A^T; d op(A) = G op(B)^T.
        if (!trans_a && !trans_b) GA.noalias() = G * B.transpose();
        else if (!trans_a && trans_b) GA.noalias() = G * B;
        else if (trans_a && !trans_b) GA.noalias() = B * G.transpose();
        else GA.noalias() = B.transpose() * G.transpose();
      }
      if (need_b) {
        MapM<T> GB(gb.data().data() + i * br * bc, br, bc);
        if (!trans_a && !trans_b) GB.noalias() = A.transpose() * G;
        else if (trans_a && !trans_b) GB.noalias() = A * G;
        else if (!trans_a && trans_b) GB.noalias() = G.transpose() * A;
        else GB.noalias() = G.transpose() * A.transpose();
      }
    }
    if (need_a) tp.accumulate(ia, ga);
    if (need_b) tp.accumulate(ib, gb);
  });
}

// ---------------------------------------------------------------- structure

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, long axis) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, s0.size());
  Shape out_shape = s0;
  out_shape[ax] = 0;
  std::vector<std::size_t> widths;
  std::vector<std::size_t> ids;
  for (const Var<T>& p : parts) {
    check_same_tape(parts[0], p);
    const Shape& s = p.shape();
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.size() != s0.size() || (i != ax && s[i] != s0[i])) {
        throw ShapeError("concat shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
      }
    }
    out_shape[ax] += s[ax];
    widths.push_back(s[ax]);
    ids.push_back(p.id());
  }
  const AxisSplit so = split_axis(out_shape, ax);
  Tensor<T> out(out_shape);
  std::size_t pos = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor<T>& v = parts[p].value();
    const std::size_t w = widths[p] * so.inner;
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(v.data().begin() + static_cast<long>(o * w), w,
                  out.data().begin() + static_cast<long>(o * so.n * so.inner + pos * so.inner));
    }
    pos += widths[p];
  }
  return parts[0].tape().record(std::move(out), ids, [=](Tape<T>& tp, const Tensor<T>& g) {
    std::size_t pos2 = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (tp.requires_grad(ids[p])) {
        const std::size_t w = widths[p] * so.inner;
        Tensor<T> gp(tp.value(ids[p]).shape());
        for (std::size_t o = 0; o < so.outer; ++o) {
          std::copy_n(g.data().begin() + static_cast<long>(o * so.n * so.inner + pos2 * so.inner), w,
                      gp.data().begin() + static_cast<long>(o * w));
        }
        tp.accumulate(ids[p], gp);
      }
      pos2 += widths[p];
    }
  });
}

template <typename T>
Var<T> slice(Var<T> a, long axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, a.value().rank());
  const Shape& sa = a.shape();
  if (start + length > sa[ax]) throw ShapeError("slice out of range on axis of size " + std::to_string(sa[ax]));
  const AxisSplit si = split_axis(sa, ax);
  Shape out_shape = sa;
  out_shape[ax] = length;
  Tensor<T> out(out_shape);
  const std::size_t w = length * si.inner;
  for (std::size_t o = 0; o < si.outer; ++o) {
    std::copy_n(a.value().data().begin() + static_cast<long>(o * si.n * si.inner + start * si.inner), w,
                out.data().begin() + static_cast<long>(o * w));
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [=](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> ga(sa);
    for (std::size_t o = 0; o < si.outer; ++o) {
      std::copy_n(g.data().begin() + static_cast<long>(o * w), w,
                  ga.data().begin() + static_cast<long>(o * si.n * si.inner + start * si.inner));
    }
    tp.accumulate(ia, ga);
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  Shape sa = a.shape();
  return a.tape().record(std::move(out), {ia}, [ia, sa](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(ia, g.reshaped(sa));
  });
}

template <typename T>
Var<T> permute(Var<T> a, std::span<const std::size_t> perm) {
  const Shape& sa = a.shape();
  const std::size_t r = sa.size();
  if (perm.size() != r) throw ShapeError("permute rank mismatch");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || seen[perm[i]]) throw ShapeError("permute: invalid axis permutation");
    seen[perm[i]] = true;
    out_shape[i] = sa[perm[i]];
  }
  std::vector<std::size_t> in_stride(r);
  std::size_t st = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = st;
    st *= sa[i];
  }
  // Source offset for every destination element.
  const std::size_t total = shape_size(sa);
  std::vector<std::size_t> src(total);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t k = 0; k < total; ++k) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < r; ++d) off += idx[d] * in_stride[perm[d]];
    src[k] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  Tensor<T> out(out_shape);
  for (std::size_t k = 0; k < total; ++k) out[k] = a.value()[src[k]];
  const std::size_t ia = a.id();
  Shape sa_copy = sa;
  return a.tape().record(std::move(out), {ia}, [ia, sa_copy, src](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> ga(sa_copy);
    for (std::size_t k = 0; k < src.size(); ++k) ga[src[k]] += g[k];
    tp.accumulate(ia, ga);
  });
}

template <typename T>
Var<T> subsample(Var<T> a, long axis, std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("subsample stride must be positive");
  const Shape& sa = a.shape();
  const std::size_t ax = normalize_axis(axis, sa.size());
  const AxisSplit si = split_axis(sa, ax);
  const std::size_t kept = (si.n + stride - 1) / stride;
  Shape out_shape = sa;
  out_shape[ax] = kept;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < si.outer; ++o) {
    for (std::size_t k = 0; k < kept; ++k) {
      std::copy_n(a.value().data().begin() + static_cast<long>((o * si.n + k * stride) * si.inner), si.inner,
                  out.data().begin() + static_cast<long>((o * kept + k) * si.inner));
    }
  }
  const std::size_t ia = a.id();
  Shape sa_copy = sa;
  return a.tape().record(std::move(out), {ia}, [=](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> ga(sa_copy);
    for (std::size_t o = 0; o < si.outer; ++o) {
      for (std::size_t k = 0; k < kept; ++k) {
        std::copy_n(g.data().begin() + static_cast<long>((o * kept + k) * si.inner), si.inner,
                    ga.data().begin() + static_cast<long>((o * si.n + k * stride) * si.inner));
      }
    }
    tp.accumulate(ia, ga);
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(Var<T> a, long axis, bool keepdim) {
  const Shape& sa = a.shape();
  const std::size_t ax = normalize_axis(axis, sa.size());
  const AxisSplit s = split_axis(sa, ax);
  Shape out_shape = sa;
  if (keepdim) out_shape[ax] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  Tensor<T> out(out_shape);
  const Tensor<T>& av = a.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += av[(o * s.n + k) * s.inner + i];
  const std::size_t ia = a.id();
  Shape sa_copy = sa;
  return a.tape().record(std::move(out), {ia}, [=](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> ga(sa_copy);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.n + k) * s.inner + i] = g[o * s.inner + i];
    tp.accumulate(ia, ga);
  });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  T total = T(0);
  for (T v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  Shape sa = a.shape();
  return a.tape().record(Tensor<T>::scalar(total), {ia}, [ia, sa](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(ia, Tensor<T>(sa, g[0]));
  });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.value().size()));
}

namespace {

template <typename T>
Var<T> max_impl(Var<T> a, const Tensor<T>* mask, long axis) {
  const Shape& sa = a.shape();
  const std::size_t ax = normalize_axis(axis, sa.size());
  if (mask != nullptr && mask->shape() != sa) {
    throw ShapeError("mask shape " + shape_str(mask->shape()) + " does not match " + shape_str(sa));
  }
  const AxisSplit s = split_axis(sa, ax);
  Shape out_shape = sa;
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  Tensor<T> out(out_shape);
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> arg(s.outer * s.inner, kNone);
  const Tensor<T>& av = a.value();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = kNone;
      for (std::size_t k = 0; k < s.n; ++k) {
        const std::size_t off = (o * s.n + k) * s.inner + i;
        if (mask != nullptr && (*mask)[off] == T(0)) continue;
        if (best == kNone || av[off] > av[best]) best = off;
      }
      arg[o * s.inner + i] = best;
      out[o * s.inner + i] = best == kNone ? T(0) : av[best];
    }
  }
  const std::size_t ia = a.id();
  Shape sa_copy = sa;
  return a.tape().record(std::move(out), {ia}, [=](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> ga(sa_copy);
    for (std::size_t j = 0; j < arg.size(); ++j)
      if (arg[j] != kNone) ga[arg[j]] += g[j];
    tp.accumulate(ia, ga);
  });
}

}  // namespace

template <typename T>
Var<T> max(Var<T> a, long axis) {
  return max_impl<T>(a, nullptr, axis);
}

template <typename T>
Var<T> masked_max(Var<T> a, const Tensor<T>& mask, long axis) {
  return max_impl<T>(a, &mask, axis);
}

// ---------------------------------------------------------------- vector ops

template <typename T>
Var<T> softmax(Var<T> a, long axis) {
  const Shape& sa = a.shape();
  const AxisSplit s = split_axis(sa, normalize_axis(axis, sa.size()));
  const Tensor<T>& av = a.value();
  Tensor<T> out(sa);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T mx = av[base];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, av[base + k * s.inner]);
      T z = T(0);
      for (std::size_t k = 0; k < s.n; ++k) {
        const T e = std::exp(av[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.n; ++k) out[base + k * s.inner] /= z;
    }
  }
  const std::size_t ia = a.id();
  auto fn = [ia, s](Tape<T>& tp, const Tensor<T>& g, const Tensor<T>& y) {
    Tensor<T> ga(y.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        T dot = T(0);
        for (std::size_t k = 0; k < s.n; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t off = base + k * s.inner;
          ga[off] = y[off] * (g[off] - dot);
        }
      }
    }
    tp.accumulate(ia, ga);
  };
  Tape<T>& tape = a.tape();
  const std::size_t out_id = tape.size();
  return tape.record(std::move(out), {ia},
                     [fn, out_id](Tape<T>& tp, const Tensor<T>& g) { fn(tp, g, tp.value(out_id)); });
}

template <typename T>
Var<T> l2_norm(Var<T> a, long axis) {
  const Shape& sa = a.shape();
  const std::size_t ax = normalize_axis(axis, sa.size());
  const AxisSplit s = split_axis(sa, ax);
  Shape out_shape = sa;
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  const Tensor<T>& av = a.value();
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      T ss = T(0);
      for (std::size_t k = 0; k < s.n; ++k) {
        const T v = av[(o * s.n + k) * s.inner + i];
        ss += v * v;
      }
      out[o * s.inner + i] = std::sqrt(ss);
    }
  }
  const std::size_t ia = a.id();
  Tape<T>& tape = a.tape();
  const std::size_t out_id = tape.size();
  return tape.record(std::move(out), {ia}, [ia, out_id, s](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& x = tp.value(ia);
    const Tensor<T>& nrm = tp.value(out_id);
    Tensor<T> ga(x.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const T n = nrm[o * s.inner + i];
        if (n == T(0)) continue;
        const T c = g[o * s.inner + i] / n;
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t off = (o * s.n + k) * s.inner + i;
          ga[off] = c * x[off];
        }
      }
    }
    tp.accumulate(ia, ga);
  });
}

template <typename T>
Var<T> scalar_product(Var<T> a, Var<T> b, long axis) {
  return sum(mul(a, b), axis);
}

template <typename T>
Var<T> squash(Var<T> a, long axis) {
  constexpr T kEps = T(1e-9);
  const Shape& sa = a.shape();
  const AxisSplit s = split_axis(sa, normalize_axis(axis, sa.size()));
  const Tensor<T>& av = a.value();
  Tensor<T> out(sa);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      T sq = T(0);
      for (std::size_t k = 0; k < s.n; ++k) {
        const T v = av[(o * s.n + k) * s.inner + i];
        sq += v * v;
      }
      const T factor = sq / ((T(1) + sq) * std::sqrt(sq + kEps * kEps));
      for (std::size_t k = 0; k < s.n; ++k) {
        const std::size_t off = (o * s.n + k) * s.inner + i;
        out[off] = factor * av[off];
      }
    }
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, s](Tape<T>& tp, const Tensor<T>& g) {
    // y = f(|x|^2) x  =>  dx = f g + 2 f'(|x|^2) (x . g) x
    const Tensor<T>& x = tp.value(ia);
    Tensor<T> ga(x.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        T sq = T(0), xg = T(0);
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t off = (o * s.n + k) * s.inner + i;
          sq += x[off] * x[off];
          xg += x[off] * g[off];
        }
        const T root = std::sqrt(sq + kEps * kEps);
        const T f = sq / ((T(1) + sq) * root);
        const T df = (T(1) / (T(1) + sq) - sq / (T(2) * (sq + kEps * kEps))) / ((T(1) + sq) * root);
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t off = (o * s.n + k) * s.inner + i;
          ga[off] = f * g[off] + T(2) * df * xg * x[off];
        }
      }
    }
    tp.accumulate(ia, ga);
  });
}

// ---------------------------------------------------------------- instantiation

#define CAPSLU_INSTANTIATE_AD(T)                                                         \
  template class Tape<T>;                                                                \
  template Var<T> add(Var<T>, Var<T>);                                                   \
  template Var<T> sub(Var<T>, Var<T>);                                                   \
  template Var<T> mul(Var<T>, Var<T>);                                                   \
  template Var<T> mul_const(Var<T>, const Tensor<T>&);                                   \
  template Var<T> add_const(Var<T>, const Tensor<T>&);                                   \
  template Var<T> add_scalar(Var<T>, T);                                                 \
  template Var<T> scale(Var<T>, T);                                                      \
  template Var<T> matmul(Var<T>, Var<T>);                                                \
  template Var<T> bmm(Var<T>, Var<T>, bool, bool);                                       \
  template Var<T> concat(std::span<const Var<T>>, long);                                 \
  template Var<T> slice(Var<T>, long, std::size_t, std::size_t);                         \
  template Var<T> reshape(Var<T>, Shape);                                                \
  template Var<T> permute(Var<T>, std::span<const std::size_t>);                         \
  template Var<T> subsample(Var<T>, long, std::size_t);                                  \
  template Var<T> sum(Var<T>, long, bool);                                               \
  template Var<T> sum_all(Var<T>);                                                       \
  template Var<T> mean_all(Var<T>);                                                      \
  template Var<T> max(Var<T>, long);                                                     \
  template Var<T> masked_max(Var<T>, const Tensor<T>&, long);                            \
  template Var<T> sigmoid(Var<T>);                                                       \
  template Var<T> tanh(Var<T>);                                                          \
  template Var<T> relu(Var<T>);                                                          \
  template Var<T> log(Var<T>);                                                           \
  template Var<T> clamp(Var<T>, T, T);                                                   \
  template Var<T> softmax(Var<T>, long);                                                 \
  template Var<T> l2_norm(Var<T>, long);                                                 \
  template Var<T> scalar_product(Var<T>, Var<T>, long);                                  \
  template Var<T> squash(Var<T>, long);

CAPSLU_INSTANTIATE_AD(float)
CAPSLU_INSTANTIATE_AD(double)

}  // namespace capslu::ad
