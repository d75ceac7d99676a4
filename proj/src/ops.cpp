#include "leproto/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>

namespace leproto::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

const Tensor& pv(Node& n, std::size_t i) { return n.parents[i]->value; }
bool pneeds(Node& n, std::size_t i) { return n.parents[i]->requires_grad; }

// y = softmax(scale * x) for one row; x and y may alias.
void softmax_row(const double* x, double* y, std::size_t n, double scale) {
  Eigen::Map<const Eigen::ArrayXd> xa(x, static_cast<Eigen::Index>(n));
  Eigen::Map<Eigen::ArrayXd> ya(y, static_cast<Eigen::Index>(n));
  const double mx = (xa * scale).maxCoeff();
  ya = (xa * scale - mx).exp();
  ya /= ya.sum();
}

std::size_t last_dim(const Shape& s) {
  if (s.empty()) throw ShapeError("operation requires rank >= 1");
  return s.back();
}

// ---- broadcasting -------------------------------------------------------

struct BroadcastPlan {
  Shape out;
  bool same = false;
  std::vector<std::size_t> a_stride;  // 0 along broadcast axes
  std::vector<std::size_t> b_stride;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  std::size_t rank = std::max(a.size(), b.size());
  Shape ap(rank, 1), bp(rank, 1);
  std::copy(a.begin(), a.end(), ap.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), bp.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  plan.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1) {
      throw ShapeError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    plan.out[i] = std::max(ap[i], bp[i]);
  }
  plan.a_stride.resize(rank);
  plan.b_stride.resize(rank);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    plan.a_stride[i] = ap[i] == 1 ? 0 : sa;
    plan.b_stride[i] = bp[i] == 1 ? 0 : sb;
    sa *= ap[i];
    sb *= bp[i];
  }
  return plan;
}

// Calls f(k, i, j) for every output offset k with operand offsets i and j.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
  const std::size_t total = shape_size(plan.out);
  if (plan.same) {
    for (std::size_t k = 0; k < total; ++k) f(k, k, k);
    return;
  }
  const std::size_t rank = plan.out.size();
  const std::size_t inner = plan.out[rank - 1];
  const std::size_t ia_step = plan.a_stride[rank - 1], ib_step = plan.b_stride[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t k = 0; k < total; k += inner) {
    for (std::size_t t = 0; t < inner; ++t) f(k + t, ia + t * ia_step, ib + t * ib_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++counter[d];
      ia += plan.a_stride[d];
      ib += plan.b_stride[d];
      if (counter[d] < plan.out[d]) break;
      ia -= plan.a_stride[d] * counter[d];
      ib -= plan.b_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <BinOp op>
Var binary_impl(const Var& a, const Var& b) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  Tensor out(plan->out);
  const double* av = a.value().data().data();
  const double* bv = b.value().data().data();
  double* o = out.data().data();
  for_each_broadcast(*plan, [&](std::size_t k, std::size_t i, std::size_t j) {
    if constexpr (op == BinOp::kAdd) o[k] = av[i] + bv[j];
    if constexpr (op == BinOp::kSub) o[k] = av[i] - bv[j];
    if constexpr (op == BinOp::kMul) o[k] = av[i] * bv[j];
    if constexpr (op == BinOp::kDiv) o[k] = av[i] / bv[j];
  });
  return make_node(std::move(out), {a, b}, [plan](Node& n) {
    const double* g = n.grad.data().data();
    const double* av = pv(n, 0).data().data();
    const double* bv = pv(n, 1).data().data();
    const bool na = pneeds(n, 0), nb = pneeds(n, 1);
    Tensor ga, gb;
    if (na) ga = Tensor(pv(n, 0).shape(), 0.0);
    if (nb) gb = Tensor(pv(n, 1).shape(), 0.0);
    double* gap = na ? ga.data().data() : nullptr;
    double* gbp = nb ? gb.data().data() : nullptr;
    for_each_broadcast(*plan, [&](std::size_t k, std::size_t i, std::size_t j) {
      const double gk = g[k];
      if constexpr (op == BinOp::kAdd) {
        if (na) gap[i] += gk;
        if (nb) gbp[j] += gk;
      }
      if constexpr (op == BinOp::kSub) {
        if (na) gap[i] += gk;
        if (nb) gbp[j] -= gk;
      }
      if constexpr (op == BinOp::kMul) {
        if (na) gap[i] += gk * bv[j];
        if (nb) gbp[j] += gk * av[i];
      }
      if constexpr (op == BinOp::kDiv) {
        if (na) gap[i] += gk / bv[j];
        if (nb) gbp[j] -= gk * av[i] / (bv[j] * bv[j]);
      }
    });
    if (na) n.parents[0]->accumulate(ga);
    if (nb) n.parents[1]->accumulate(gb);
  });
}

Var binary(const Var& a, const Var& b, BinOp op) {
  switch (op) {
    case BinOp::kAdd: return binary_impl<BinOp::kAdd>(a, b);
    case BinOp::kSub: return binary_impl<BinOp::kSub>(a, b);
    case BinOp::kMul: return binary_impl<BinOp::kMul>(a, b);
    case BinOp::kDiv: return binary_impl<BinOp::kDiv>(a, b);
  }
  throw std::logic_error("unknown binary op");
}

template <typename F, typename D>
Var unary(const Var& a, F f, D dfdx_from_xy) {
  Tensor out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_node(std::move(out), {a}, [dfdx_from_xy](Node& n) {
    const auto& x = pv(n, 0);
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = n.grad[i] * dfdx_from_xy(x[i], n.value[i]);
    n.parents[0]->accumulate(gx);
  });
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis out of range for shape " + shape_string(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out.empty()) out.push_back(1);
  }
  return out;
}

std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  return (h ^ v) * 0x100000001b3ULL;
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary(a, b, BinOp::kAdd); }
Var sub(const Var& a, const Var& b) { return binary(a, b, BinOp::kSub); }
Var mul(const Var& a, const Var& b) { return binary(a, b, BinOp::kMul); }
Var div(const Var& a, const Var& b) { return binary(a, b, BinOp::kDiv); }

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const auto& ws = weight.shape();
  if (ws.size() != 2) throw ShapeError("linear weight must be rank 2");
  std::size_t out_dim = ws[0], in_dim = ws[1];
  if (last_dim(x.shape()) != in_dim) {
    throw ShapeError("linear input " + shape_string(x.shape()) + " vs weight " + shape_string(ws));
  }
  if (bias.defined() && bias.value().size() != out_dim) throw ShapeError("linear bias size mismatch");
  std::size_t rows = x.value().size() / in_dim;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor out(out_shape);
  MapC X(x.value().data().data(), rows, in_dim);
  MapC W(weight.value().data().data(), out_dim, in_dim);
  MapM Y(out.data().data(), rows, out_dim);
  Y.noalias() = X * W.transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> b(bias.value().data().data(), out_dim);
    Y.rowwise() += b;
  }
  std::vector<Var> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_node(std::move(out), parents, [rows, in_dim, out_dim](Node& n) {
    MapC G(n.grad.data().data(), rows, out_dim);
    if (pneeds(n, 0)) {
      Tensor gx(pv(n, 0).shape());
      MapC W(pv(n, 1).data().data(), out_dim, in_dim);
      MapM(gx.data().data(), rows, in_dim).noalias() = G * W;
      n.parents[0]->accumulate(gx);
    }
    if (pneeds(n, 1)) {
      Tensor gw(pv(n, 1).shape());
      MapC X(pv(n, 0).data().data(), rows, in_dim);
      MapM(gw.data().data(), out_dim, in_dim).noalias() = G.transpose() * X;
      n.parents[1]->accumulate(gw);
    }
    if (n.parents.size() > 2 && pneeds(n, 2)) {
      Tensor gb(pv(n, 2).shape());
      Eigen::Map<Eigen::RowVectorXd>(gb.data().data(), out_dim) = G.colwise().sum();
      n.parents[2]->accumulate(gb);
    }
  });
}

Var matmul(const Var& x, const Var& m) {
  const auto& ms = m.shape();
  if (ms.size() != 2) throw ShapeError("matmul right operand must be rank 2");
  std::size_t k = ms[0], cols = ms[1];
  if (last_dim(x.shape()) != k) {
    throw ShapeError("matmul " + shape_string(x.shape()) + " x " + shape_string(ms));
  }
  std::size_t rows = x.value().size() / k;
  Shape out_shape = x.shape();
  out_shape.back() = cols;
  Tensor out(out_shape);
  MapM(out.data().data(), rows, cols).noalias() =
      MapC(x.value().data().data(), rows, k) * MapC(m.value().data().data(), k, cols);
  return make_node(std::move(out), {x, m}, [rows, k, cols](Node& n) {
    MapC G(n.grad.data().data(), rows, cols);
    if (pneeds(n, 0)) {
      Tensor gx(pv(n, 0).shape());
      MapM(gx.data().data(), rows, k).noalias() = G * MapC(pv(n, 1).data().data(), k, cols).transpose();
      n.parents[0]->accumulate(gx);
    }
    if (pneeds(n, 1)) {
      Tensor gm(pv(n, 1).shape());
      MapM(gm.data().data(), k, cols).noalias() = MapC(pv(n, 0).data().data(), rows, k).transpose() * G;
      n.parents[1]->accumulate(gm);
    }
  });
}

Var bmm(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1]) {
    throw ShapeError("bmm " + shape_string(as) + " x " + shape_string(bs));
  }
  std::size_t batch = as[0], m = as[1], k = as[2], cols = bs[2];
  Tensor out({batch, m, cols});
  for (std::size_t i = 0; i < batch; ++i) {
    MapM(out.data().data() + i * m * cols, m, cols).noalias() =
        MapC(a.value().data().data() + i * m * k, m, k) * MapC(b.value().data().data() + i * k * cols, k, cols);
  }
  return make_node(std::move(out), {a, b}, [batch, m, k, cols](Node& n) {
    bool na = pneeds(n, 0), nb = pneeds(n, 1);
    Tensor ga, gb;
    if (na) ga = Tensor(pv(n, 0).shape());
    if (nb) gb = Tensor(pv(n, 1).shape());
    for (std::size_t i = 0; i < batch; ++i) {
      MapC G(n.grad.data().data() + i * m * cols, m, cols);
      if (na) {
        MapM(ga.data().data() + i * m * k, m, k).noalias() =
            G * MapC(pv(n, 1).data().data() + i * k * cols, k, cols).transpose();
      }
      if (nb) {
        MapM(gb.data().data() + i * k * cols, k, cols).noalias() =
            MapC(pv(n, 0).data().data() + i * m * k, m, k).transpose() * G;
      }
    }
    if (na) n.parents[0]->accumulate(ga);
    if (nb) n.parents[1]->accumulate(gb);
  });
}

Var transpose_last2(const Var& a) {
  const auto& s = a.shape();
  if (s.size() != 3) throw ShapeError("transpose_last2 expects rank 3");
  std::size_t batch = s[0], m = s[1], cols = s[2];
  Tensor out({batch, cols, m});
  for (std::size_t i = 0; i < batch; ++i) {
    MapM(out.data().data() + i * m * cols, cols, m) = MapC(a.value().data().data() + i * m * cols, m, cols).transpose();
  }
  return make_node(std::move(out), {a}, [batch, m, cols](Node& n) {
    Tensor g(pv(n, 0).shape());
    for (std::size_t i = 0; i < batch; ++i) {
      MapM(g.data().data() + i * m * cols, m, cols) = MapC(n.grad.data().data() + i * m * cols, cols, m).transpose();
    }
    n.parents[0]->accumulate(g);
  });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var gelu(const Var& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x); });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var softmax_last(const Var& a) {
  std::size_t n = last_dim(a.shape());
  std::size_t rows = a.value().size() / n;
  Tensor out(a.shape());
  const auto& x = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * n;
    double* yr = out.data().data() + r * n;
    softmax_row(xr, yr, n, 1.0);
  }
  return make_node(std::move(out), {a}, [rows, n](Node& nd) {
    Tensor g(nd.value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = nd.value.data().data() + r * n;
      const double* gy = nd.grad.data().data() + r * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += gy[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] = y[i] * (gy[i] - dot);
    }
    nd.parents[0]->accumulate(g);
  });
}

Var attend(const Var& q, const Var& k, const Var& v, double scale) {
  const auto& ks = k.shape();
  const auto& vs = v.shape();
  if (ks.size() != 2 || vs.size() != 2 || ks[0] != vs[0] || last_dim(q.shape()) != ks[1]) {
    throw ShapeError("attend " + shape_string(q.shape()) + " against keys " + shape_string(ks) + " and values " +
                     shape_string(vs));
  }
  const std::size_t dq = ks[1], keys = ks[0], dv = vs[1];
  const std::size_t rows = q.value().size() / dq;
  auto weights = std::make_shared<Tensor>(Shape{rows, keys});
  MapM W(weights->data().data(), rows, keys);
  W.noalias() = MapC(q.value().data().data(), rows, dq) * MapC(k.value().data().data(), keys, dq).transpose();
  for (std::size_t r = 0; r < rows; ++r) {
    double* w = weights->data().data() + r * keys;
    softmax_row(w, w, keys, scale);
  }
  Shape out_shape = q.shape();
  out_shape.back() = dv;
  Tensor out(out_shape);
  MapM(out.data().data(), rows, dv).noalias() = W * MapC(v.value().data().data(), keys, dv);
  return make_node(std::move(out), {q, k, v}, [weights, rows, dq, keys, dv, scale](Node& n) {
    MapC G(n.grad.data().data(), rows, dv);
    MapC W(weights->data().data(), rows, keys);
    if (pneeds(n, 2)) {
      Tensor gv(pv(n, 2).shape());
      MapM(gv.data().data(), keys, dv).noalias() = W.transpose() * G;
      n.parents[2]->accumulate(gv);
    }
    if (!pneeds(n, 0) && !pneeds(n, 1)) return;
    RowMat ds = G * MapC(pv(n, 2).data().data(), keys, dv).transpose();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < keys; ++i) dot += ds(r, i) * W(r, i);
      for (std::size_t i = 0; i < keys; ++i) ds(r, i) = scale * W(r, i) * (ds(r, i) - dot);
    }
    if (pneeds(n, 0)) {
      Tensor gq(pv(n, 0).shape());
      MapM(gq.data().data(), rows, dq).noalias() = ds * MapC(pv(n, 1).data().data(), keys, dq);
      n.parents[0]->accumulate(gq);
    }
    if (pneeds(n, 1)) {
      Tensor gk(pv(n, 1).shape());
      MapM(gk.data().data(), keys, dq).noalias() = ds.transpose() * MapC(pv(n, 0).data().data(), rows, dq);
      n.parents[1]->accumulate(gk);
    }
  });
}

Var log_softmax_last(const Var& a) {
  std::size_t n = last_dim(a.shape());
  std::size_t rows = a.value().size() / n;
  Tensor out(a.shape());
  const auto& x = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * n;
    double* yr = out.data().data() + r * n;
    Eigen::Map<const Eigen::ArrayXd> x_row(xr, static_cast<Eigen::Index>(n));
    double mx = x_row.maxCoeff();
    double lse = mx + std::log((x_row - mx).exp().sum());
    for (std::size_t i = 0; i < n; ++i) yr[i] = xr[i] - lse;
  }
  return make_node(std::move(out), {a}, [rows, n](Node& nd) {
    Tensor g(nd.value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = nd.value.data().data() + r * n;
      const double* gy = nd.grad.data().data() + r * n;
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += gy[i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] = gy[i] - std::exp(y[i]) * s;
    }
    nd.parents[0]->accumulate(g);
  });
}

Var clip_below_zero(const Var& a) {
  Tensor out(a.shape());
  const auto& x = a.value();
  auto& km = KinkMonitor::current();
  std::uint64_t sig = 0xcbf29ce484222325ULL;
  double gap = 1e300;
  for (std::size_t i = 0; i < out.size(); ++i) {
    bool active = x[i] >= 0.0;
    out[i] = active ? x[i] : 0.0;
    if (km.enabled) {
      sig = hash_combine(sig, active ? 1 : 2);
      gap = std::min(gap, std::abs(x[i]));
    }
  }
  km.record(sig, gap);
  return make_node(std::move(out), {a}, [](Node& n) {
    const auto& x = pv(n, 0);
    Tensor g(x.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = x[i] >= 0.0 ? n.grad[i] : 0.0;
    n.parents[0]->accumulate(g);
  });
}

Var normalize_by_sum_last(const Var& e, const Var& weights) {
  std::size_t n = last_dim(e.shape());
  std::size_t rows = e.value().size() / n;
  bool weighted = weights.defined();
  if (weighted && weights.shape() != e.shape()) throw ShapeError("normalize_by_sum_last weight shape mismatch");
  Tensor out(e.shape());
  const auto& ev = e.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += ev[r * n + i] * (weighted ? weights.value()[r * n + i] : 1.0);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = s == 0.0 ? 0.0 : ev[r * n + i] / s;
  }
  std::vector<Var> parents{e};
  if (weighted) parents.push_back(weights);
  return make_node(std::move(out), parents, [rows, n, weighted](Node& nd) {
    const auto& ev = pv(nd, 0);
    const Tensor* wv = weighted ? &pv(nd, 1) : nullptr;
    bool ne = pneeds(nd, 0);
    bool nw = weighted && pneeds(nd, 1);
    Tensor ge, gw;
    if (ne) ge = Tensor(ev.shape(), 0.0);
    if (nw) gw = Tensor(ev.shape(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0, ge_dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        s += ev[r * n + i] * (wv ? (*wv)[r * n + i] : 1.0);
        ge_dot += nd.grad[r * n + i] * ev[r * n + i];
      }
      if (s == 0.0) continue;
      for (std::size_t k = 0; k < n; ++k) {
        double w = wv ? (*wv)[r * n + k] : 1.0;
        if (ne) ge[r * n + k] = nd.grad[r * n + k] / s - w * ge_dot / (s * s);
        if (nw) gw[r * n + k] = -ev[r * n + k] * ge_dot / (s * s);
      }
    }
    if (ne) nd.parents[0]->accumulate(ge);
    if (nw) nd.parents[1]->accumulate(gw);
  });
}

Var normalize_rows(const Var& x, double power, double floor) {
  std::size_t n = last_dim(x.shape());
  std::size_t rows = x.value().size() / n;
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += xv[r * n + i] * xv[r * n + i];
    double d = std::max(std::sqrt(ss), floor);
    double inv = 1.0 / std::pow(d, power);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = xv[r * n + i] * inv;
  }
  return make_node(std::move(out), {x}, [rows, n, power, floor](Node& nd) {
    const auto& xv = pv(nd, 0);
    Tensor g(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      double ss = 0.0, gx = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        ss += xv[r * n + i] * xv[r * n + i];
        gx += nd.grad[r * n + i] * xv[r * n + i];
      }
      double norm = std::sqrt(ss);
      double d = std::max(norm, floor);
      double inv = 1.0 / std::pow(d, power);
      double corr = norm > floor ? power * gx / std::pow(d, power + 2.0) : 0.0;
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] = nd.grad[r * n + i] * inv - xv[r * n + i] * corr;
    }
    nd.parents[0]->accumulate(g);
  });
}

Var sum_axis(const Var& a, std::size_t axis, bool keepdim) {
  auto sp = split_axis(a.shape(), axis);
  Tensor out(reduced_shape(a.shape(), axis, keepdim), 0.0);
  const auto& x = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.n + k) * sp.inner + i];
  return make_node(std::move(out), {a}, [sp](Node& nd) {
    Tensor g(pv(nd, 0).shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.n + k) * sp.inner + i] = nd.grad[o * sp.inner + i];
    nd.parents[0]->accumulate(g);
  });
}

Var mean_axis(const Var& a, std::size_t axis, bool keepdim) {
  auto sp = split_axis(a.shape(), axis);
  Tensor out(reduced_shape(a.shape(), axis, keepdim), 0.0);
  const auto& x = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.n + k) * sp.inner + i];
  double inv = 1.0 / static_cast<double>(sp.n);
  for (auto& v : out.data()) v *= inv;
  return make_node(std::move(out), {a}, [sp, inv](Node& nd) {
    Tensor g(pv(nd, 0).shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i)
          g[(o * sp.n + k) * sp.inner + i] = nd.grad[o * sp.inner + i] * inv;
    nd.parents[0]->accumulate(g);
  });
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_node(Tensor::scalar(s), {a}, [](Node& nd) {
    nd.parents[0]->accumulate(Tensor(pv(nd, 0).shape(), nd.grad[0]));
  });
}

Var mean_all(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  double inv = 1.0 / static_cast<double>(a.value().size());
  return make_node(Tensor::scalar(s * inv), {a}, [inv](Node& nd) {
    nd.parents[0]->accumulate(Tensor(pv(nd, 0).shape(), nd.grad[0] * inv));
  });
}

Var max_axis(const Var& a, std::size_t axis) {
  auto sp = split_axis(a.shape(), axis);
  Tensor out(reduced_shape(a.shape(), axis, false));
  auto arg = std::make_shared<std::vector<std::size_t>>(sp.outer * sp.inner);
  const auto& x = a.value();
  auto& km = KinkMonitor::current();
  std::uint64_t sig = 0xcbf29ce484222325ULL;
  double gap = 1e300;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      double bv = x[o * sp.n * sp.inner + i];
      double second = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 1; k < sp.n; ++k) {
        double v = x[(o * sp.n + k) * sp.inner + i];
        if (v > bv) {
          second = bv;
          bv = v;
          best = k;
        } else if (v > second) {
          second = v;
        }
      }
      out[o * sp.inner + i] = bv;
      (*arg)[o * sp.inner + i] = best;
      if (km.enabled) {
        sig = hash_combine(sig, best + 1);
        if (sp.n > 1) gap = std::min(gap, bv - second);
      }
    }
  }
  km.record(sig, gap);
  return make_node(std::move(out), {a}, [sp, arg](Node& nd) {
    Tensor g(pv(nd, 0).shape(), 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i)
        g[(o * sp.n + (*arg)[o * sp.inner + i]) * sp.inner + i] = nd.grad[o * sp.inner + i];
    nd.parents[0]->accumulate(g);
  });
}

Var layer_norm_last(const Var& x, const Var& gamma, const Var& beta, double eps) {
  std::size_t n = last_dim(x.shape());
  if (gamma.value().size() != n || beta.value().size() != n) throw ShapeError("layer_norm affine size mismatch");
  std::size_t rows = x.value().size() / n;
  Tensor out(x.shape());
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += xv[r * n + i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = xv[r * n + i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t i = 0; i < n; ++i) {
      double h = (xv[r * n + i] - mu) * inv;
      (*xhat)[r * n + i] = h;
      out[r * n + i] = h * gv[i] + bv[i];
    }
  }
  return make_node(std::move(out), {x, gamma, beta}, [rows, n, xhat, inv_std](Node& nd) {
    const auto& gv = pv(nd, 1);
    bool nx = pneeds(nd, 0), ng = pneeds(nd, 1), nb = pneeds(nd, 2);
    Tensor gx, gg, gb;
    if (nx) gx = Tensor(pv(nd, 0).shape());
    if (ng) gg = Tensor(gv.shape(), 0.0);
    if (nb) gb = Tensor(gv.shape(), 0.0);
    std::vector<double> dh(n);
    for (std::size_t r = 0; r < rows; ++r) {
      double sum_dh = 0.0, sum_dh_h = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double gy = nd.grad[r * n + i];
        double h = (*xhat)[r * n + i];
        if (ng) gg[i] += gy * h;
        if (nb) gb[i] += gy;
        dh[i] = gy * gv[i];
        sum_dh += dh[i];
        sum_dh_h += dh[i] * h;
      }
      if (nx) {
        double inv = (*inv_std)[r];
        double dn = static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          gx[r * n + i] = inv / dn * (dn * dh[i] - sum_dh - (*xhat)[r * n + i] * sum_dh_h);
        }
      }
    }
    if (nx) nd.parents[0]->accumulate(gx);
    if (ng) nd.parents[1]->accumulate(gg);
    if (nb) nd.parents[2]->accumulate(gb);
  });
}

Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    widths.push_back(l.back());
    total += l.back();
    l.pop_back();
    if (l != lead) throw ShapeError("concat_last leading shape mismatch");
  }
  std::size_t rows = shape_size(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data().data() + r * widths[p], widths[p], out.data().data() + r * total + off);
    off += widths[p];
  }
  return make_node(std::move(out), parts, [rows, total, widths](Node& nd) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      if (pneeds(nd, p)) {
        Tensor g(pv(nd, p).shape());
        for (std::size_t r = 0; r < rows; ++r)
          std::copy_n(nd.grad.data().data() + r * total + off, widths[p], g.data().data() + r * widths[p]);
        nd.parents[p]->accumulate(g);
      }
      off += widths[p];
    }
  });
}

Var slice_last(const Var& a, std::size_t begin, std::size_t end) {
  std::size_t n = last_dim(a.shape());
  if (begin >= end || end > n) throw ShapeError("slice_last range out of bounds");
  std::size_t rows = a.value().size() / n;
  std::size_t w = end - begin;
  Shape out_shape = a.shape();
  out_shape.back() = w;
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(a.value().data().data() + r * n + begin, w, out.data().data() + r * w);
  return make_node(std::move(out), {a}, [rows, n, begin, w](Node& nd) {
    Tensor g(pv(nd, 0).shape(), 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(nd.grad.data().data() + r * w, w, g.data().data() + r * n + begin);
    nd.parents[0]->accumulate(g);
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_node(std::move(out), {a}, [](Node& nd) {
    nd.parents[0]->accumulate(nd.grad.reshaped(pv(nd, 0).shape()));
  });
}

Var index_select0(const Var& a, std::span<const std::size_t> indices) {
  const auto& s = a.shape();
  if (s.empty()) throw ShapeError("index_select0 on scalar");
  std::size_t row = a.value().size() / s[0];
  Shape out_shape = s;
  out_shape[0] = indices.size();
  Tensor out(out_shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= s[0]) throw ShapeError("index_select0 index out of range");
    std::copy_n(a.value().data().data() + indices[i] * row, row, out.data().data() + i * row);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_node(std::move(out), {a}, [row, idx](Node& nd) {
    Tensor g(pv(nd, 0).shape(), 0.0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < row; ++j) g[idx[i] * row + j] += nd.grad[i * row + j];
    nd.parents[0]->accumulate(g);
  });
}

Var depthwise_conv2d(const Var& x, const Var& kernel, const Var& bias) {
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  if (xs.size() != 4) throw ShapeError("depthwise_conv2d expects [B, H, W, C] input");
  if (ks.size() != 3 || ks[0] != xs[3] || ks[1] != ks[2] || ks[1] % 2 == 0) {
    throw ShapeError("depthwise_conv2d kernel " + shape_string(ks) + " vs input " + shape_string(xs));
  }
  if (bias.defined() && bias.value().size() != xs[3]) throw ShapeError("depthwise_conv2d bias size mismatch");
  std::size_t B = xs[0], H = xs[1], W = xs[2], C = xs[3], K = ks[1];
  auto pad = static_cast<std::ptrdiff_t>(K / 2);
  Tensor out(xs, 0.0);
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double* o = out.data().data() + ((b * H + i) * W + j) * C;
        if (bias.defined())
          for (std::size_t c = 0; c < C; ++c) o[c] = bias.value()[c];
        for (std::size_t di = 0; di < K; ++di) {
          auto ii = static_cast<std::ptrdiff_t>(i + di) - pad;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t dj = 0; dj < K; ++dj) {
            auto jj = static_cast<std::ptrdiff_t>(j + dj) - pad;
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
            const double* xi = xv.data().data() + ((b * H + static_cast<std::size_t>(ii)) * W + static_cast<std::size_t>(jj)) * C;
            for (std::size_t c = 0; c < C; ++c) o[c] += xi[c] * kv[(c * K + di) * K + dj];
          }
        }
      }
  std::vector<Var> parents{x, kernel};
  if (bias.defined()) parents.push_back(bias);
  return make_node(std::move(out), parents, [B, H, W, C, K, pad](Node& nd) {
    const auto& xv = pv(nd, 0);
    const auto& kv = pv(nd, 1);
    bool nx = pneeds(nd, 0), nk = pneeds(nd, 1);
    bool nb = nd.parents.size() > 2 && pneeds(nd, 2);
    Tensor gx, gk, gb;
    if (nx) gx = Tensor(xv.shape(), 0.0);
    if (nk) gk = Tensor(kv.shape(), 0.0);
    if (nb) gb = Tensor(pv(nd, 2).shape(), 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const double* g = nd.grad.data().data() + ((b * H + i) * W + j) * C;
          if (nb)
            for (std::size_t c = 0; c < C; ++c) gb[c] += g[c];
          for (std::size_t di = 0; di < K; ++di) {
            auto ii = static_cast<std::ptrdiff_t>(i + di) - pad;
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t dj = 0; dj < K; ++dj) {
              auto jj = static_cast<std::ptrdiff_t>(j + dj) - pad;
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
              std::size_t base = ((b * H + static_cast<std::size_t>(ii)) * W + static_cast<std::size_t>(jj)) * C;
              for (std::size_t c = 0; c < C; ++c) {
                std::size_t ki = (c * K + di) * K + dj;
                if (nx) gx[base + c] += g[c] * kv[ki];
                if (nk) gk[ki] += g[c] * xv[base + c];
              }
            }
          }
        }
    if (nx) nd.parents[0]->accumulate(gx);
    if (nk) nd.parents[1]->accumulate(gk);
    if (nb) nd.parents[2]->accumulate(gb);
  });
}

Var nll_mean(const Var& logp, std::span<const int> labels) {
  const auto& s = logp.shape();
  if (s.size() != 2 || s[0] != labels.size()) throw ShapeError("nll_mean expects [N, K] with N labels");
  std::size_t N = s[0], K = s[1];
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab) {
    if (l < 0 || static_cast<std::size_t>(l) >= K) {
      throw std::out_of_range("label " + std::to_string(l) + " out of range [0, " + std::to_string(K) + ")");
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) total -= logp.value()[i * K + static_cast<std::size_t>(lab[i])];
  return make_node(Tensor::scalar(total / static_cast<double>(N)), {logp}, [N, K, lab](Node& nd) {
    Tensor g(pv(nd, 0).shape(), 0.0);
    for (std::size_t i = 0; i < N; ++i) g[i * K + static_cast<std::size_t>(lab[i])] = -nd.grad[0] / static_cast<double>(N);
    nd.parents[0]->accumulate(g);
  });
}

Var dropout(const Var& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  auto mask = std::make_shared<Tensor>(a.shape());
  double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask->data()) m = rng.uniform() >= rate ? keep : 0.0;
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * (*mask)[i];
  return make_node(std::move(out), {a}, [mask](Node& nd) {
    Tensor g(nd.grad.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = nd.grad[i] * (*mask)[i];
    nd.parents[0]->accumulate(g);
  });
}

}  // namespace leproto::ops
