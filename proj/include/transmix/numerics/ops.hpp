#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "transmix/numerics/tape.hpp"
#include "transmix/numerics/tensor.hpp"

namespace transmix {

namespace detail {

/// Iteration plan for an element-wise op where length-1 axes of either
/// operand stretch to the other's extent. Adjacent axes with identical
/// broadcast pattern are merged so the inner loop runs as long as possible.
struct BroadcastPlan {
  Shape out;
  std::vector<Index> ext;
  std::vector<Index> stride_a;
  std::vector<Index> stride_b;
  bool same = false;
};

inline BroadcastPlan plan_broadcast(const char* kind, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    p.ext = {shape_numel(a)};
    p.stride_a = {1};
    p.stride_b = {1};
    return p;
  }
  auto fail = [&] {
    throw ShapeError(std::string(kind) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
  };
  if (a.size() != b.size()) fail();
  p.out.resize(a.size());
  std::vector<Index> ext;
  std::vector<bool> ba, bb;
  for (std::size_t d = 0; d < a.size(); ++d) {
    if (a[d] != b[d] && a[d] != 1 && b[d] != 1) fail();
    const Index e = std::max(a[d], b[d]);
    p.out[d] = e;
    if (e == 1) continue;
    const bool xa = a[d] == 1, xb = b[d] == 1;
    if (!ext.empty() && ba.back() == xa && bb.back() == xb) {
      ext.back() *= e;
    } else {
      ext.push_back(e);
      ba.push_back(xa);
      bb.push_back(xb);
    }
  }
  if (ext.empty()) {
    ext = {1};
    ba = {false};
    bb = {false};
  }
  const std::size_t r = ext.size();
  p.ext = ext;
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  Index run_a = 1, run_b = 1;
  for (std::size_t d = r; d-- > 0;) {
    if (!ba[d]) {
      p.stride_a[d] = run_a;
      run_a *= ext[d];
    }
    if (!bb[d]) {
      p.stride_b[d] = run_b;
      run_b *= ext[d];
    }
  }
  return p;
}

/// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const Index r = static_cast<Index>(p.ext.size());
  const Index inner = p.ext[static_cast<std::size_t>(r - 1)];
  const Index sa = p.stride_a[static_cast<std::size_t>(r - 1)];
  const Index sb = p.stride_b[static_cast<std::size_t>(r - 1)];
  const Index total = shape_numel(p.out);
  std::vector<Index> idx(static_cast<std::size_t>(r), 0);
  Index o = 0, ia = 0, ib = 0;
  while (o < total) {
    for (Index k = 0; k < inner; ++k) f(o + k, ia + k * sa, ib + k * sb);
    o += inner;
    for (Index d = r - 2; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      ia += p.stride_a[du];
      ib += p.stride_b[du];
      if (idx[du] < p.ext[du]) break;
      ia -= p.stride_a[du] * p.ext[du];
      ib -= p.stride_b[du] * p.ext[du];
      idx[du] = 0;
    }
  }
}

/// Splits a shape around `axis` into (outer, extent, inner) for reductions.
struct AxisSplit {
  Index outer = 1;
  Index extent = 1;
  Index inner = 1;
};

inline AxisSplit split_axis(const char* kind, const Shape& s, Index axis) {
  if (axis < 0 || axis >= static_cast<Index>(s.size())) {
    throw ShapeError(std::string(kind) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(s));
  }
  AxisSplit sp;
  for (Index d = 0; d < axis; ++d) sp.outer *= s[static_cast<std::size_t>(d)];
  sp.extent = s[static_cast<std::size_t>(axis)];
  for (Index d = axis + 1; d < static_cast<Index>(s.size()); ++d) sp.inner *= s[static_cast<std::size_t>(d)];
  return sp;
}

inline Shape drop_axis(const Shape& s, Index axis) {
  Shape out;
  for (Index d = 0; d < static_cast<Index>(s.size()); ++d) {
    if (d != axis) out.push_back(s[static_cast<std::size_t>(d)]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

template <typename Scalar>
Tape<Scalar>& common_tape(const char* kind, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw std::invalid_argument(std::string(kind) + ": operands live on different tapes");
  }
  return *a.tape();
}

template <typename Scalar, typename Fwd, typename Dx>
Var<Scalar> unary(const char* kind, const Var<Scalar>& x, Fwd fwd, Dx dx) {
  Tape<Scalar>& t = *x.tape();
  const auto& xv = x.value();
  Tensor<Scalar> y(xv.shape(), fwd(xv.data()));
  return t.record(kind, std::move(y), {x}, [x, dx](Tape<Scalar>& tp, const auto& g, const auto& y) {
    if (!tp.requires_grad(x)) return;
    tp.grad_buffer(x) += g * dx(tp.value(x).data(), y.data());
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise binary ops (equal shapes or length-1 broadcast, equal rank).

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::common_tape("add", a, b);
  auto plan = detail::plan_broadcast("add", a.shape(), b.shape());
  auto y = Tensor<Scalar>::uninitialized(plan.out);
  if (plan.same) {
    y.data() = a.value().data() + b.value().data();
  } else {
    const Scalar* pa = a.value().data().data();
    const Scalar* pb = b.value().data().data();
    Scalar* py = y.data().data();
    detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) { py[o] = pa[i] + pb[j]; });
  }
  return t.record("add", std::move(y), {a, b}, [a, b, plan](Tape<Scalar>& tp, const auto& g, const auto&) {
    for (const Var<Scalar>* v : {&a, &b}) {
      if (!tp.requires_grad(*v)) continue;
      auto& gv = tp.grad_buffer(*v);
      if (plan.same) {
        gv += g;
      } else {
        const bool is_a = v == &a;
        detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) { gv[is_a ? i : j] += g[o]; });
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::common_tape("sub", a, b);
  auto plan = detail::plan_broadcast("sub", a.shape(), b.shape());
  auto y = Tensor<Scalar>::uninitialized(plan.out);
  if (plan.same) {
    y.data() = a.value().data() - b.value().data();
  } else {
    const Scalar* pa = a.value().data().data();
    const Scalar* pb = b.value().data().data();
    Scalar* py = y.data().data();
    detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) { py[o] = pa[i] - pb[j]; });
  }
  return t.record("sub", std::move(y), {a, b}, [a, b, plan](Tape<Scalar>& tp, const auto& g, const auto&) {
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad_buffer(a);
      if (plan.same) {
        ga += g;
      } else {
        detail::for_each_broadcast(plan, [&](Index o, Index i, Index) { ga[i] += g[o]; });
      }
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad_buffer(b);
      if (plan.same) {
        gb -= g;
      } else {
        detail::for_each_broadcast(plan, [&](Index o, Index, Index j) { gb[j] -= g[o]; });
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::common_tape("mul", a, b);
  auto plan = detail::plan_broadcast("mul", a.shape(), b.shape());
  auto y = Tensor<Scalar>::uninitialized(plan.out);
  if (plan.same) {
    y.data() = a.value().data() * b.value().data();
  } else {
    const Scalar* pa = a.value().data().data();
    const Scalar* pb = b.value().data().data();
    Scalar* py = y.data().data();
    detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) { py[o] = pa[i] * pb[j]; });
  }
  return t.record("mul", std::move(y), {a, b}, [a, b, plan](Tape<Scalar>& tp, const auto& g, const auto&) {
    const auto& av = tp.value(a).data();
    const auto& bv = tp.value(b).data();
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad_buffer(a);
      if (plan.same) {
        ga += g * bv;
      } else {
        detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) { ga[i] += g[o] * bv[j]; });
      }
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad_buffer(b);
      if (plan.same) {
        gb += g * av;
      } else {
        detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) { gb[j] += g[o] * av[i]; });
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) {
  return mul(a, b);
}

// ---------------------------------------------------------------------------
// Element-wise unary ops.

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar c) {
  return detail::unary<Scalar>(
      "scale", x, [c](const auto& v) { return (v * c).eval(); },
      [c](const auto& v, const auto&) { return Tensor<Scalar>::Array::Constant(v.size(), c); });
}

template <typename Scalar>
Var<Scalar> operator*(Scalar c, const Var<Scalar>& x) {
  return scale(x, c);
}

/// x + c for a scalar constant c.
template <typename Scalar>
Var<Scalar> shift(const Var<Scalar>& x, Scalar c) {
  return detail::unary<Scalar>(
      "shift", x, [c](const auto& v) { return (v + c).eval(); },
      [](const auto& v, const auto&) { return Tensor<Scalar>::Array::Ones(v.size()); });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return detail::unary<Scalar>(
      "relu", x, [](const auto& v) { return v.max(Scalar(0)).eval(); },
      [](const auto& v, const auto&) { return (v > Scalar(0)).template cast<Scalar>().eval(); });
}

/// Exponential linear unit with alpha = 1.
template <typename Scalar>
Var<Scalar> elu(const Var<Scalar>& x) {
  return detail::unary<Scalar>(
      "elu", x,
      [](const auto& v) { return (v > Scalar(0)).select(v, v.min(Scalar(0)).exp() - Scalar(1)).eval(); },
      [](const auto& v, const auto& y) {
        using A = typename Tensor<Scalar>::Array;
        return (v > Scalar(0)).select(A::Ones(v.size()), y + Scalar(1)).eval();
      });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  return detail::unary<Scalar>(
      "sigmoid", x,
      [](const auto& v) {
        // exp of a non-positive argument only, so large |x| stays finite
        auto e = (-v.abs()).exp().eval();
        return (v >= Scalar(0)).select(Scalar(1) / (Scalar(1) + e), e / (Scalar(1) + e)).eval();
      },
      [](const auto&, const auto& y) { return (y * (Scalar(1) - y)).eval(); });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x) {
  return detail::unary<Scalar>(
      "tanh", x, [](const auto& v) { return v.tanh().eval(); },
      [](const auto&, const auto& y) { return (Scalar(1) - y.square()).eval(); });
}

template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& x) {
  return detail::unary<Scalar>(
      "abs", x, [](const auto& v) { return v.abs().eval(); },
      [](const auto& v, const auto&) {
        return ((v > Scalar(0)).template cast<Scalar>() - (v < Scalar(0)).template cast<Scalar>()).eval();
      });
}

// ---------------------------------------------------------------------------
// Linear algebra and shape ops.

/// [m,k] x [k,n] -> [m,n]
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::common_tape("matmul", a, b);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  auto y = Tensor<Scalar>::uninitialized({as[0], bs[1]});
  y.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return t.record("matmul", std::move(y), {a, b}, [a, b](Tape<Scalar>& tp, const auto& g, const auto&) {
    using M = typename Tensor<Scalar>::ConstMatrixMap;
    using MM = typename Tensor<Scalar>::MatrixMap;
    const auto& av = tp.value(a);
    const auto& bv = tp.value(b);
    M gm(g.data(), av.dim(0), bv.dim(1));
    if (tp.requires_grad(a)) {
      MM ga(tp.grad_buffer(a).data(), av.dim(0), av.dim(1));
      ga.noalias() += gm * bv.matrix().transpose();
    }
    if (tp.requires_grad(b)) {
      MM gb(tp.grad_buffer(b).data(), bv.dim(0), bv.dim(1));
      gb.noalias() += av.matrix().transpose() * gm;
    }
  });
}

/// x W + b with x [m,k], W [k,n], b [1,n].
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  return add(matmul(x, w), b);
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  check_shape(shape, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return x.tape()->record("reshape", x.value().reshaped(std::move(shape)), {x},
                          [x](Tape<Scalar>& tp, const auto& g, const auto&) {
                            if (tp.requires_grad(x)) tp.grad_buffer(x) += g;
                          });
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Shape out = parts.front().shape();
  if (axis < 0 || axis >= static_cast<Index>(out.size())) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(out));
  }
  const auto ax = static_cast<std::size_t>(axis);
  out[ax] = 0;
  for (const auto& p : parts) {
    detail::common_tape("concat", parts.front(), p);
    const auto& s = p.shape();
    bool ok = s.size() == out.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == ax || s[d] == parts.front().shape()[d];
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + shape_str(parts.front().shape()) + " and " + shape_str(s));
    }
    out[ax] += s[ax];
  }
  const auto sp = detail::split_axis("concat", out, axis);
  auto y = Tensor<Scalar>::uninitialized(out);
  Index offset = 0;
  for (const auto& p : parts) {
    const Index e = p.shape()[ax];
    const auto& src = p.value().data();
    for (Index o = 0; o < sp.outer; ++o) {
      y.data().segment((o * sp.extent + offset) * sp.inner, e * sp.inner) = src.segment(o * e * sp.inner, e * sp.inner);
    }
    offset += e;
  }
  return parts.front().tape()->record("concat", std::move(y), parts, [parts, sp, ax](Tape<Scalar>& tp, const auto& g, const auto&) {
    Index off = 0;
    for (const auto& p : parts) {
      const Index e = tp.value(p).shape()[ax];
      if (tp.requires_grad(p)) {
        auto& gp = tp.grad_buffer(p);
        for (Index o = 0; o < sp.outer; ++o) {
          gp.segment(o * e * sp.inner, e * sp.inner) += g.segment((o * sp.extent + off) * sp.inner, e * sp.inner);
        }
      }
      off += e;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions.

/// Sum over one axis; the axis is removed from the shape.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x, Index axis) {
  const auto sp = detail::split_axis("sum", x.shape(), axis);
  Tensor<Scalar> y(detail::drop_axis(x.shape(), axis));
  const auto& xv = x.value().data();
  for (Index o = 0; o < sp.outer; ++o) {
    auto dst = y.data().segment(o * sp.inner, sp.inner);
    for (Index e = 0; e < sp.extent; ++e) dst += xv.segment((o * sp.extent + e) * sp.inner, sp.inner);
  }
  return x.tape()->record("sum", std::move(y), {x}, [x, sp](Tape<Scalar>& tp, const auto& g, const auto&) {
    if (!tp.requires_grad(x)) return;
    auto& gx = tp.grad_buffer(x);
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index e = 0; e < sp.extent; ++e) {
        gx.segment((o * sp.extent + e) * sp.inner, sp.inner) += g.segment(o * sp.inner, sp.inner);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x, Index axis) {
  const auto sp = detail::split_axis("mean", x.shape(), axis);
  return scale(sum(x, axis), Scalar(1) / static_cast<Scalar>(sp.extent));
}

/// Sum of every element, shape [1].
template <typename Scalar>
Var<Scalar> sum_all(const Var<Scalar>& x) {
  Tensor<Scalar> y = Tensor<Scalar>::scalar(x.value().data().sum());
  return x.tape()->record("sum_all", std::move(y), {x}, [x](Tape<Scalar>& tp, const auto& g, const auto&) {
    if (tp.requires_grad(x)) tp.grad_buffer(x) += g[0];
  });
}

/// Numerically stable softmax along one axis.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, Index axis) {
  const auto sp = detail::split_axis("softmax", x.shape(), axis);
  auto y = Tensor<Scalar>::uninitialized(x.shape());
  const auto& xv = x.value().data();
  auto& yv = y.data();
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.extent * sp.inner + i;
      Scalar m = xv[base];
      for (Index e = 1; e < sp.extent; ++e) m = std::max(m, xv[base + e * sp.inner]);
      Scalar z = 0;
      for (Index e = 0; e < sp.extent; ++e) {
        const Scalar v = std::exp(xv[base + e * sp.inner] - m);
        yv[base + e * sp.inner] = v;
        z += v;
      }
      for (Index e = 0; e < sp.extent; ++e) yv[base + e * sp.inner] /= z;
    }
  }
  return x.tape()->record("softmax", std::move(y), {x}, [x, sp](Tape<Scalar>& tp, const auto& g, const auto& out) {
    if (!tp.requires_grad(x)) return;
    const auto& yv2 = out.data();
    auto& gx = tp.grad_buffer(x);
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index i = 0; i < sp.inner; ++i) {
        const Index base = o * sp.extent * sp.inner + i;
        Scalar dot = 0;
        for (Index e = 0; e < sp.extent; ++e) dot += yv2[base + e * sp.inner] * g[base + e * sp.inner];
        for (Index e = 0; e < sp.extent; ++e) {
          gx[base + e * sp.inner] += yv2[base + e * sp.inner] * (g[base + e * sp.inner] - dot);
        }
      }
    }
  });
}

}  // namespace transmix
