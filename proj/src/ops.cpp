#include "embedkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "embedkit/detail/op_support.hpp"

namespace embedkit {

using detail::grad_sink;
using detail::make_output;
using detail::record;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(Errc::ShapeMismatch, what);
}

Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "axis out of range");
  return axis;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul needs rank-2 operands, got " +
                                              shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  Tensor out = make_output({m, n}, std::vector<double>(static_cast<std::size_t>(m * n)), {&a, &b});
  out.mutable_matrix().noalias() = a.matrix() * b.matrix();

  record({a, b}, out, [a, b, m, k, n](std::span<const double> g) {
    ConstMatrixMap dc(g.data(), m, n);
    if (auto da = grad_sink(a); !da.empty()) MatrixMap(da.data(), m, k).noalias() += dc * b.matrix().transpose();
    if (auto db = grad_sink(b); !db.empty()) MatrixMap(db.data(), k, n).noalias() += a.matrix().transpose() * dc;
  });
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require(a.rank() == 3 && b.rank() == 3, "bmm needs rank-3 operands");
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  require(b.dim(0) == batch, "bmm batch extents differ");
  const Index bk = transpose_b ? b.dim(2) : b.dim(1);
  const Index n = transpose_b ? b.dim(1) : b.dim(2);
  require(bk == k, "bmm inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  Tensor out = make_output({batch, m, n}, std::vector<double>(static_cast<std::size_t>(batch * m * n)), {&a, &b});
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = out.mutable_values().data();
  for (Index i = 0; i < batch; ++i) {
    ConstMatrixMap am(pa + i * m * k, m, k);
    MatrixMap cm(pc + i * m * n, m, n);
    if (transpose_b) {
      cm.noalias() = am * ConstMatrixMap(pb + i * n * k, n, k).transpose();
    } else {
      cm.noalias() = am * ConstMatrixMap(pb + i * k * n, k, n);
    }
  }

  record({a, b}, out, [a, b, batch, m, k, n, transpose_b](std::span<const double> g) {
    auto da = grad_sink(a);
    auto db = grad_sink(b);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (Index i = 0; i < batch; ++i) {
      ConstMatrixMap dc(g.data() + i * m * n, m, n);
      ConstMatrixMap am(pa + i * m * k, m, k);
      if (transpose_b) {
        ConstMatrixMap bm(pb + i * n * k, n, k);
        if (!da.empty()) MatrixMap(da.data() + i * m * k, m, k).noalias() += dc * bm;
        if (!db.empty()) MatrixMap(db.data() + i * n * k, n, k).noalias() += dc.transpose() * am;
      } else {
        ConstMatrixMap bm(pb + i * k * n, k, n);
        if (!da.empty()) MatrixMap(da.data() + i * m * k, m, k).noalias() += dc * bm.transpose();
        if (!db.empty()) MatrixMap(db.data() + i * k * n, k, n).noalias() += am.transpose() * dc;
      }
    }
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> v(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
  Tensor out = make_output(a.shape(), std::move(v), {&a, &b});
  record({a, b}, out, [a, b](std::span<const double> g) {
    for (const Tensor* t : {&a, &b}) {
      if (auto d = grad_sink(*t); !d.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub shapes differ");
  std::vector<double> v(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
  Tensor out = make_output(a.shape(), std::move(v), {&a, &b});
  record({a, b}, out, [a, b](std::span<const double> g) {
    if (auto d = grad_sink(a); !d.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (auto d = grad_sink(b); !d.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul shapes differ");
  std::vector<double> v(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
  Tensor out = make_output(a.shape(), std::move(v), {&a, &b});
  record({a, b}, out, [a, b](std::span<const double> g) {
    auto av = a.values();
    auto bv = b.values();
    if (auto d = grad_sink(a); !d.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (auto d = grad_sink(b); !d.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> v(a.values().begin(), a.values().end());
  for (double& x : v) x *= factor;
  Tensor out = make_output(a.shape(), std::move(v), {&a});
  record({a}, out, [a, factor](std::span<const double> g) {
    if (auto d = grad_sink(a); !d.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
    }
  });
  return out;
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
  require(b.rank() <= a.rank(), "add_broadcast: operand rank too large");
  const auto offset = static_cast<std::size_t>(a.rank() - b.rank());
  require(std::equal(b.shape().begin(), b.shape().end(), a.shape().begin() + static_cast<std::ptrdiff_t>(offset)),
          "add_broadcast: " + shape_str(b.shape()) + " is not a suffix of " + shape_str(a.shape()));
  const auto inner = static_cast<std::size_t>(b.numel());
  const auto outer = static_cast<std::size_t>(a.numel()) / inner;
  std::vector<double> v(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) v[o * inner + i] += bv[i];
  }
  Tensor out = make_output(a.shape(), std::move(v), {&a, &b});
  record({a, b}, out, [a, b, inner, outer](std::span<const double> g) {
    if (auto d = grad_sink(a); !d.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (auto d = grad_sink(b); !d.empty()) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) d[i] += g[o * inner + i];
      }
    }
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  Tensor out = make_output(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()), {&a});
  record({a}, out, [a](std::span<const double> g) {
    if (auto d = grad_sink(a); !d.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
  return out;
}

namespace {

std::vector<Index> strides_of(const Shape& shape) {
  std::vector<Index> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// gather[i] = source offset of output element i.
std::vector<Index> permutation_gather(const Shape& in_shape, const std::vector<Index>& axes) {
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(axes.size());
  std::vector<Index> src_strides(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
    src_strides[i] = in_strides[static_cast<std::size_t>(axes[i])];
  }
  const Index n = shape_numel(in_shape);
  std::vector<Index> gather(static_cast<std::size_t>(n));
  std::vector<Index> counter(axes.size(), 0);
  Index offset = 0;
  for (Index i = 0; i < n; ++i) {
    gather[static_cast<std::size_t>(i)] = offset;
    for (std::size_t ax = axes.size(); ax-- > 0;) {
      ++counter[ax];
      offset += src_strides[ax];
      if (counter[ax] < out_shape[ax]) break;
      offset -= src_strides[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return gather;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<Index>& axes) {
  require(static_cast<Index>(axes.size()) == a.rank(), "permute: axis count must equal rank");
  std::vector<bool> seen(axes.size(), false);
  Shape out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    require(axes[i] >= 0 && axes[i] < a.rank() && !seen[static_cast<std::size_t>(axes[i])],
            "permute: axes must be a permutation");
    seen[static_cast<std::size_t>(axes[i])] = true;
    out_shape[i] = a.dim(axes[i]);
  }
  auto gather = permutation_gather(a.shape(), axes);
  std::vector<double> v(gather.size());
  auto av = a.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[static_cast<std::size_t>(gather[i])];
  Tensor out = make_output(std::move(out_shape), std::move(v), {&a});
  record({a}, out, [a, gather = std::move(gather)](std::span<const double> g) {
    if (auto d = grad_sink(a); !d.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) d[static_cast<std::size_t>(gather[i])] += g[i];
    }
  });
  return out;
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double x : a.values()) total += x;
  Tensor out = make_output({1}, {total}, {&a});
  record({a}, out, [a](std::span<const double> g) {
    if (auto d = grad_sink(a); !d.empty()) {
      for (double& x : d) x += g[0];
    }
  });
  return out;
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor softmax(const Tensor& x, Index axis) {
  axis = normalize_axis(axis, x.rank());
  const Index n = x.dim(axis);
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= x.dim(i);
  for (Index i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

  auto xv = x.values();
  std::vector<double> y(xv.size());
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * n * inner + in;
      double mx = xv[static_cast<std::size_t>(base)];
      for (Index j = 1; j < n; ++j) mx = std::max(mx, xv[static_cast<std::size_t>(base + j * inner)]);
      double z = 0.0;
      for (Index j = 0; j < n; ++j) {
        const auto idx = static_cast<std::size_t>(base + j * inner);
        y[idx] = std::exp(xv[idx] - mx);
        z += y[idx];
      }
      for (Index j = 0; j < n; ++j) y[static_cast<std::size_t>(base + j * inner)] /= z;
    }
  }
  Tensor out = make_output(x.shape(), std::move(y), {&x});
  record({x}, out, [x, out_node = out.node(), outer, inner, n](std::span<const double> g) {
    auto d = grad_sink(x);
    if (d.empty()) return;
    const auto& yv = out_node->values;
    for (Index o = 0; o < outer; ++o) {
      for (Index in = 0; in < inner; ++in) {
        const Index base = o * n * inner + in;
        double dot = 0.0;
        for (Index j = 0; j < n; ++j) {
          const auto idx = static_cast<std::size_t>(base + j * inner);
          dot += g[idx] * yv[idx];
        }
        for (Index j = 0; j < n; ++j) {
          const auto idx = static_cast<std::size_t>(base + j * inner);
          d[idx] += yv[idx] * (g[idx] - dot);
        }
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw Error(Errc::ShapeMismatch, "layer_norm eps must be positive");
  const Index d = x.dim(-1);
  require(gamma.numel() == d && beta.numel() == d,
          "layer_norm affine params must have " + std::to_string(d) + " entries");
  const Index rows = x.numel() / d;

  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> y(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (Index j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (Index j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (Index j = 0; j < d; ++j) {
      const auto idx = static_cast<std::size_t>(r * d + j);
      xhat[idx] = (row[j] - mu) * is;
      y[idx] = xhat[idx] * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
    }
  }

  Tensor out = make_output(x.shape(), std::move(y), {&x, &gamma, &beta});
  record({x, gamma, beta}, out,
         [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](std::span<const double> g) {
           auto dx = grad_sink(x);
           auto dg = grad_sink(gamma);
           auto db = grad_sink(beta);
           auto gv = gamma.values();
           std::vector<double> dxhat(static_cast<std::size_t>(d));
           for (Index r = 0; r < rows; ++r) {
             const double* gr = g.data() + r * d;
             const double* xh = xhat.data() + r * d;
             if (!dg.empty()) {
               for (Index j = 0; j < d; ++j) dg[static_cast<std::size_t>(j)] += gr[j] * xh[j];
             }
             if (!db.empty()) {
               for (Index j = 0; j < d; ++j) db[static_cast<std::size_t>(j)] += gr[j];
             }
             if (dx.empty()) continue;
             double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
             for (Index j = 0; j < d; ++j) {
               dxhat[static_cast<std::size_t>(j)] = gr[j] * gv[static_cast<std::size_t>(j)];
               mean_dxhat += dxhat[static_cast<std::size_t>(j)];
               mean_dxhat_xhat += dxhat[static_cast<std::size_t>(j)] * xh[j];
             }
             mean_dxhat /= static_cast<double>(d);
             mean_dxhat_xhat /= static_cast<double>(d);
             const double is = inv_std[static_cast<std::size_t>(r)];
             for (Index j = 0; j < d; ++j) {
               dx[static_cast<std::size_t>(r * d + j)] +=
                   is * (dxhat[static_cast<std::size_t>(j)] - mean_dxhat - xh[j] * mean_dxhat_xhat);
             }
           }
         });
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  std::vector<double> y(x.values().begin(), x.values().end());
  for (double& v : y) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  Tensor out = make_output(x.shape(), std::move(y), {&x});
  record({x}, out, [x](std::span<const double> g) {
    auto d = grad_sink(x);
    if (d.empty()) return;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    auto xv = x.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      d[i] += g[i] * (cdf + v * pdf);
    }
  });
  return out;
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool train) {
  if (rate < 0.0 || rate >= 1.0) throw Error(Errc::InvalidConfig, "dropout rate must be in [0, 1)");
  if (!train || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> mask(static_cast<std::size_t>(x.numel()));
  for (double& m : mask) m = keep(rng) ? keep_scale : 0.0;
  std::vector<double> y(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  Tensor out = make_output(x.shape(), std::move(y), {&x});
  record({x}, out, [x, mask = std::move(mask)](std::span<const double> g) {
    if (auto d = grad_sink(x); !d.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * mask[i];
    }
  });
  return out;
}

Tensor l2_normalize(const Tensor& x, Index axis) {
  require(x.rank() == 2, "l2_normalize needs a rank-2 tensor");
  axis = normalize_axis(axis, 2);
  const Index rows = x.dim(0), cols = x.dim(1);
  // Vectors run along `axis`: count = number of vectors, len = vector length.
  const Index count = axis == 1 ? rows : cols;
  const Index len = axis == 1 ? cols : rows;
  const Index elem_stride = axis == 1 ? 1 : cols;
  const Index vec_stride = axis == 1 ? cols : 1;

  auto xv = x.values();
  std::vector<double> y(xv.size());
  std::vector<double> norms(static_cast<std::size_t>(count));
  for (Index v = 0; v < count; ++v) {
    double sq = 0.0;
    for (Index j = 0; j < len; ++j) {
      const double e = xv[static_cast<std::size_t>(v * vec_stride + j * elem_stride)];
      sq += e * e;
    }
    const double norm = std::sqrt(sq);
    if (norm == 0.0) throw Error(Errc::DegenerateRow, "cannot normalize a zero-norm vector");
    norms[static_cast<std::size_t>(v)] = norm;
    for (Index j = 0; j < len; ++j) {
      const auto idx = static_cast<std::size_t>(v * vec_stride + j * elem_stride);
      y[idx] = xv[idx] / norm;
    }
  }
  Tensor out = make_output(x.shape(), std::move(y), {&x});
  record({x}, out,
         [x, out_node = out.node(), norms = std::move(norms), count, len, elem_stride, vec_stride](
             std::span<const double> g) {
           auto d = grad_sink(x);
           if (d.empty()) return;
           const auto& yv = out_node->values;
           for (Index v = 0; v < count; ++v) {
             double dot = 0.0;
             for (Index j = 0; j < len; ++j) {
               const auto idx = static_cast<std::size_t>(v * vec_stride + j * elem_stride);
               dot += yv[idx] * g[idx];
             }
             const double inv = 1.0 / norms[static_cast<std::size_t>(v)];
             for (Index j = 0; j < len; ++j) {
               const auto idx = static_cast<std::size_t>(v * vec_stride + j * elem_stride);
               d[idx] += (g[idx] - yv[idx] * dot) * inv;
             }
           }
         });
  return out;
}

Tensor angular_margin(const Tensor& cosines, std::span<const int> targets,
                      std::span<const double> class_margins, double scale_factor) {
  constexpr double kEps = 1e-7;
  require(cosines.rank() == 2, "angular_margin needs [B,C] cosines");
  const Index batch = cosines.dim(0), classes = cosines.dim(1);
  require(static_cast<Index>(targets.size()) == batch, "angular_margin: one target per row required");
  require(static_cast<Index>(class_margins.size()) == classes, "angular_margin: one margin per class required");
  for (int t : targets) {
    if (t < 0 || t >= classes) {
      throw Error(Errc::InvalidLabel, "target " + std::to_string(t) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  for (double m : class_margins) {
    if (!(m >= 0.0 && m < std::numbers::pi)) {
      throw Error(Errc::InvalidMargin, "margin " + std::to_string(m) + " outside [0, pi)");
    }
  }

  auto cv = cosines.values();
  std::vector<double> logits(cv.size());
  std::vector<double> dlogit_dcos(cv.size(), scale_factor);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = scale_factor * cv[i];

  for (Index b = 0; b < batch; ++b) {
    const auto t = static_cast<std::size_t>(targets[static_cast<std::size_t>(b)]);
    const auto idx = static_cast<std::size_t>(b * classes) + t;
    const double m = class_margins[t];
    if (m == 0.0) continue;
    const double c = cv[idx];
    const double clamped = std::clamp(c, -1.0 + kEps, 1.0 - kEps);
    const double theta = std::acos(clamped);
    if (theta + m >= std::numbers::pi) {
      logits[idx] = scale_factor * std::cos(std::numbers::pi);
      dlogit_dcos[idx] = 0.0;
      continue;
    }
    // cos(theta + m) = c cos m - sin(theta) sin m
    const double sin_theta = std::sqrt(std::max(0.0, 1.0 - c * c));
    logits[idx] = scale_factor * (c * std::cos(m) - sin_theta * std::sin(m));
    const double guarded_sin = std::sqrt(1.0 - clamped * clamped);
    dlogit_dcos[idx] = (c == clamped)
                           ? scale_factor * (std::cos(m) + clamped * std::sin(m) / guarded_sin)
                           : 0.0;
  }

  Tensor out = make_output(cosines.shape(), std::move(logits), {&cosines});
  record({cosines}, out, [cosines, dlogit_dcos = std::move(dlogit_dcos)](std::span<const double> g) {
    if (auto d = grad_sink(cosines); !d.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * dlogit_dcos[i];
    }
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require(logits.rank() == 2, "cross_entropy needs [B,C] logits");
  const Index batch = logits.dim(0), classes = logits.dim(1);
  require(static_cast<Index>(targets.size()) == batch, "cross_entropy: one target per row required");
  auto lv = logits.values();
  std::vector<double> probs(lv.size());
  double total = 0.0;
  for (Index b = 0; b < batch; ++b) {
    const int t = targets[static_cast<std::size_t>(b)];
    if (t < 0 || t >= classes) throw Error(Errc::InvalidLabel, "target outside class range");
    const double* row = lv.data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (Index j = 0; j < classes; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    for (Index j = 0; j < classes; ++j) probs[static_cast<std::size_t>(b * classes + j)] = std::exp(row[j] - log_z);
    total += log_z - row[t];
  }
  const double inv_batch = 1.0 / static_cast<double>(batch);
  Tensor out = make_output({1}, {total * inv_batch}, {&logits});
  std::vector<int> owned_targets(targets.begin(), targets.end());
  record({logits}, out,
         [logits, probs = std::move(probs), targets = std::move(owned_targets), classes, inv_batch](
             std::span<const double> g) {
           auto d = grad_sink(logits);
           if (d.empty()) return;
           const double scale_g = g[0] * inv_batch;
           for (std::size_t i = 0; i < probs.size(); ++i) d[i] += scale_g * probs[i];
           for (std::size_t b = 0; b < targets.size(); ++b) {
             d[b * static_cast<std::size_t>(classes) + static_cast<std::size_t>(targets[b])] -= scale_g;
           }
         });
  return out;
}

Tensor prepend_token(const Tensor& x, const Tensor& token) {
  require(x.rank() == 3, "prepend_token needs [B,N,D]");
  const Index batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  require(token.numel() == d, "prepend_token: token width must equal D");
  std::vector<double> y(static_cast<std::size_t>(batch * (n + 1) * d));
  auto xv = x.values();
  auto tv = token.values();
  for (Index b = 0; b < batch; ++b) {
    double* dst = y.data() + b * (n + 1) * d;
    std::copy(tv.begin(), tv.end(), dst);
    std::copy(xv.begin() + b * n * d, xv.begin() + (b + 1) * n * d, dst + d);
  }
  Tensor out = make_output({batch, n + 1, d}, std::move(y), {&x, &token});
  record({x, token}, out, [x, token, batch, n, d](std::span<const double> g) {
    auto dx = grad_sink(x);
    auto dt = grad_sink(token);
    for (Index b = 0; b < batch; ++b) {
      const double* src = g.data() + b * (n + 1) * d;
      if (!dt.empty()) {
        for (Index j = 0; j < d; ++j) dt[static_cast<std::size_t>(j)] += src[j];
      }
      if (!dx.empty()) {
        for (Index j = 0; j < n * d; ++j) dx[static_cast<std::size_t>(b * n * d + j)] += src[d + j];
      }
    }
  });
  return out;
}

Tensor select_token(const Tensor& x, Index position) {
  require(x.rank() == 3, "select_token needs [B,T,D]");
  const Index batch = x.dim(0), tokens = x.dim(1), d = x.dim(2);
  require(position >= 0 && position < tokens, "select_token: position out of range");
  std::vector<double> y(static_cast<std::size_t>(batch * d));
  auto xv = x.values();
  for (Index b = 0; b < batch; ++b) {
    const auto src = xv.begin() + (b * tokens + position) * d;
    std::copy(src, src + d, y.begin() + b * d);
  }
  Tensor out = make_output({batch, d}, std::move(y), {&x});
  record({x}, out, [x, batch, tokens, d, position](std::span<const double> g) {
    if (auto dx = grad_sink(x); !dx.empty()) {
      for (Index b = 0; b < batch; ++b) {
        for (Index j = 0; j < d; ++j) {
          dx[static_cast<std::size_t>((b * tokens + position) * d + j)] += g[static_cast<std::size_t>(b * d + j)];
        }
      }
    }
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Index in = weight.dim(0), out_dim = weight.dim(1);
  require(x.dim(-1) == in, "linear: input width " + std::to_string(x.dim(-1)) + " != weight rows " +
                               std::to_string(in));
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor flat = x.rank() == 2 ? x : reshape(x, {x.numel() / in, in});
  Tensor y = add_broadcast(matmul(flat, weight), bias);
  return x.rank() == 2 ? y : reshape(y, std::move(out_shape));
}

}  // namespace embedkit
