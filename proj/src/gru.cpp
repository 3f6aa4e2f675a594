#include "capslu/gru.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <string>
#include <vector>

namespace capslu::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

template <typename T>
T sigm(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
struct GruCache {
  std::size_t batch = 0, steps = 0, in_dim = 0, units = 0;
  std::vector<std::size_t> lengths;
  bool reverse = false;
  // Per processing step s: [B, U] blocks.
  std::vector<RowMat<T>> h_prev, z, r, n;
};

}  // namespace

template <typename T>
Var<T> gru_layer(Var<T> x, std::span<const std::size_t> lengths, Var<T> w_x, Var<T> w_h, Var<T> b,
                 Direction dir) {
  const Shape& sx = x.shape();
  if (sx.size() != 3) throw ShapeError("gru_layer input must be [B,T,D], got " + shape_str(sx));
  const std::size_t B = sx[0], Tn = sx[1], D = sx[2];
  if (w_x.shape().size() != 2 || w_x.dim(0) != D || w_x.dim(1) % 3 != 0) {
    throw ShapeError("gru_layer W_x must be [" + std::to_string(D) + ",3U], got " + shape_str(w_x.shape()));
  }
  const std::size_t U = w_x.dim(1) / 3;
  if (w_h.shape() != Shape{U, 3 * U}) throw ShapeError("gru_layer W_h must be [U,3U], got " + shape_str(w_h.shape()));
  if (b.shape() != Shape{3 * U}) throw ShapeError("gru_layer bias must be [3U], got " + shape_str(b.shape()));
  if (lengths.size() != B) throw ShapeError("gru_layer: one length per batch row required");
  for (std::size_t len : lengths) {
    if (len > Tn) throw ShapeError("gru_layer: length exceeds padded time axis");
  }

  auto cache = std::make_shared<GruCache<T>>();
  cache->batch = B;
  cache->steps = Tn;
  cache->in_dim = D;
  cache->units = U;
  cache->lengths.assign(lengths.begin(), lengths.end());
  cache->reverse = dir == Direction::reverse;

  MapC<T> X(x.value().data().data(), B * Tn, D);
  MapC<T> Wx(w_x.value().data().data(), D, 3 * U);
  MapC<T> Wh(w_h.value().data().data(), U, 3 * U);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(b.value().data().data(), 3 * U);

  RowMat<T> xw = X * Wx;
  xw.rowwise() += bias;

  Tensor<T> out({B, Tn, U});
  RowMat<T> h = RowMat<T>::Zero(B, U);
  RowMat<T> g(B, 3 * U);
  RowMat<T> hzr(B, 2 * U);
  RowMat<T> rh(B, U);
  RowMat<T> cand(B, U);
  cache->h_prev.reserve(Tn);
  cache->z.reserve(Tn);
  cache->r.reserve(Tn);
  cache->n.reserve(Tn);

  for (std::size_t s = 0; s < Tn; ++s) {
    const std::size_t t = cache->reverse ? Tn - 1 - s : s;
    for (std::size_t bi = 0; bi < B; ++bi) g.row(bi) = xw.row(bi * Tn + t);
    hzr.noalias() = h * Wh.leftCols(2 * U);
    RowMat<T> z(B, U), r(B, U);
    for (std::size_t bi = 0; bi < B; ++bi) {
      for (std::size_t u = 0; u < U; ++u) {
        z(bi, u) = sigm(g(bi, u) + hzr(bi, u));
        r(bi, u) = sigm(g(bi, U + u) + hzr(bi, U + u));
      }
    }
    rh = r.cwiseProduct(h);
    cand.noalias() = rh * Wh.rightCols(U);
    RowMat<T> nn(B, U);
    for (std::size_t bi = 0; bi < B; ++bi)
      for (std::size_t u = 0; u < U; ++u) nn(bi, u) = std::tanh(g(bi, 2 * U + u) + cand(bi, u));
    cache->h_prev.push_back(h);
    for (std::size_t bi = 0; bi < B; ++bi) {
      if (t >= cache->lengths[bi]) continue;
      T* o = out.data().data() + (bi * Tn + t) * U;
      for (std::size_t u = 0; u < U; ++u) {
        const T hn = (T(1) - z(bi, u)) * h(bi, u) + z(bi, u) * nn(bi, u);
        h(bi, u) = hn;
        o[u] = hn;
      }
    }
    cache->z.push_back(std::move(z));
    cache->r.push_back(std::move(r));
    cache->n.push_back(std::move(nn));
  }

  const std::size_t ix = x.id(), iwx = w_x.id(), iwh = w_h.id(), ib = b.id();
  return x.tape().record(std::move(out), {ix, iwx, iwh, ib}, [=](Tape<T>& tp, const Tensor<T>& gout) {
    const GruCache<T>& c = *cache;
    const std::size_t B = c.batch, Tn = c.steps, D = c.in_dim, U = c.units;
    MapC<T> X(tp.value(ix).data().data(), B * Tn, D);
    MapC<T> Wx(tp.value(iwx).data().data(), D, 3 * U);
    MapC<T> Wh(tp.value(iwh).data().data(), U, 3 * U);

    RowMat<T> dxw = RowMat<T>::Zero(B * Tn, 3 * U);
    RowMat<T> dwh = RowMat<T>::Zero(U, 3 * U);
    RowMat<T> dh = RowMat<T>::Zero(B, U);
    RowMat<T> dhp(B, U), dan(B, U), dzr(B, 2 * U), drh(B, U), rh(B, U);

    for (std::size_t s = Tn; s-- > 0;) {
      const std::size_t t = c.reverse ? Tn - 1 - s : s;
      const RowMat<T>& hp = c.h_prev[s];
      const RowMat<T>& z = c.z[s];
      const RowMat<T>& r = c.r[s];
      const RowMat<T>& nn = c.n[s];
      for (std::size_t bi = 0; bi < B; ++bi) {
        const bool valid = t < c.lengths[bi];
        const T* go = gout.data().data() + (bi * Tn + t) * U;
        for (std::size_t u = 0; u < U; ++u) {
          if (!valid) {
            dhp(bi, u) = dh(bi, u);
            dan(bi, u) = T(0);
            dzr(bi, u) = T(0);
            continue;
          }
          const T d = dh(bi, u) + go[u];
          const T zz = z(bi, u);
          dhp(bi, u) = d * (T(1) - zz);
          dan(bi, u) = d * zz * (T(1) - nn(bi, u) * nn(bi, u));
          dzr(bi, u) = d * (nn(bi, u) - hp(bi, u)) * zz * (T(1) - zz);
        }
      }
      rh = r.cwiseProduct(hp);
      dwh.rightCols(U).noalias() += rh.transpose() * dan;
      drh.noalias() = dan * Wh.rightCols(U).transpose();
      for (std::size_t bi = 0; bi < B; ++bi) {
        const bool valid = t < c.lengths[bi];
        for (std::size_t u = 0; u < U; ++u) {
          if (!valid) {
            dzr(bi, U + u) = T(0);
            continue;
          }
          const T rr = r(bi, u);
          dzr(bi, U + u) = drh(bi, u) * hp(bi, u) * rr * (T(1) - rr);
          dhp(bi, u) += drh(bi, u) * rr;
        }
      }
      dwh.leftCols(2 * U).noalias() += hp.transpose() * dzr;
      dhp.noalias() += dzr * Wh.leftCols(2 * U).transpose();
      for (std::size_t bi = 0; bi < B; ++bi) {
        auto row = dxw.row(bi * Tn + t);
        row.head(2 * U) = dzr.row(bi);
        row.tail(U) = dan.row(bi);
      }
      dh.swap(dhp);
    }

    if (tp.requires_grad(ix)) {
      Tensor<T> gx({B, Tn, D});
      MapM<T>(gx.data().data(), B * Tn, D).noalias() = dxw * Wx.transpose();
      tp.accumulate(ix, gx);
    }
    if (tp.requires_grad(iwx)) {
      Tensor<T> gwx({D, 3 * U});
      MapM<T>(gwx.data().data(), D, 3 * U).noalias() = X.transpose() * dxw;
      tp.accumulate(iwx, gwx);
    }
    if (tp.requires_grad(iwh)) {
      Tensor<T> gwh({U, 3 * U});
      MapM<T>(gwh.data().data(), U, 3 * U) = dwh;
      tp.accumulate(iwh, gwh);
    }
    if (tp.requires_grad(ib)) {
      Tensor<T> gb({3 * U});
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data().data(), 3 * U) = dxw.colwise().sum();
      tp.accumulate(ib, gb);
    }
  });
}

template Var<float> gru_layer(Var<float>, std::span<const std::size_t>, Var<float>, Var<float>, Var<float>,
                              Direction);
template Var<double> gru_layer(Var<double>, std::span<const std::size_t>, Var<double>, Var<double>, Var<double>,
                               Direction);

}  // namespace capslu::ad
