#include "dfq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace dfq {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void check_labels(std::span<const int> labels, Index batch, Index classes) {
  if (static_cast<Index>(labels.size()) != batch) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch " +
                     std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw ContractError("label " + std::to_string(y) + " out of range [0, " + std::to_string(classes) + ")");
    }
  }
}

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRow = Eigen::Map<RowMat<S>>;
template <typename S>
using CMapRow = Eigen::Map<const RowMat<S>>;

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename S>
void require_rank(const char* op, const Tensor<S>& a, Index rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_string(a.shape()));
  }
}

template <typename S>
double sum_double(const Array<S>& a) {
  double acc = 0.0;
  for (Index i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]);
  return acc;
}

struct ChannelLayout {
  Index batch;
  Index channels;
  Index inner;  // product of trailing extents
};

template <typename S>
ChannelLayout channel_layout(const char* op, const Tensor<S>& x) {
  if (x.rank() < 2) {
    throw ShapeError(std::string(op) + ": expected [N,C,...], got " + shape_string(x.shape()));
  }
  Index inner = 1;
  for (Index i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  return {x.dim(0), x.dim(1), inner};
}

struct ConvGeometry {
  Index n, c, h, w;
  Index o, kh, kw;
  Index stride, pad;
  Index oh, ow;
  Index rows() const { return c * kh * kw; }
  Index pixels() const { return oh * ow; }
};

template <typename S>
void im2col(const S* x, const ConvGeometry& g, RowMat<S>& cols) {
  const Index P = g.pixels();
  cols.resize(g.rows(), g.n * P);
  for (Index c = 0; c < g.c; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Index r = (c * g.kh + ki) * g.kw + kj;
        S* row = cols.row(r).data();
        for (Index n = 0; n < g.n; ++n) {
          const S* plane = x + (n * g.c + c) * g.h * g.w;
          S* dst = row + n * P;
          for (Index oy = 0; oy < g.oh; ++oy) {
            const Index iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) {
              std::fill(dst + oy * g.ow, dst + (oy + 1) * g.ow, S(0));
              continue;
            }
            for (Index ox = 0; ox < g.ow; ++ox) {
              const Index ix = ox * g.stride - g.pad + kj;
              dst[oy * g.ow + ox] = (ix >= 0 && ix < g.w) ? plane[iy * g.w + ix] : S(0);
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im(const RowMat<S>& cols, const ConvGeometry& g, S* dx) {
  const Index P = g.pixels();
  for (Index c = 0; c < g.c; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Index r = (c * g.kh + ki) * g.kw + kj;
        const S* row = cols.row(r).data();
        for (Index n = 0; n < g.n; ++n) {
          S* plane = dx + (n * g.c + c) * g.h * g.w;
          const S* src = row + n * P;
          for (Index oy = 0; oy < g.oh; ++oy) {
            const Index iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) continue;
            for (Index ox = 0; ox < g.ow; ++ox) {
              const Index ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += src[oy * g.ow + ox];
            }
          }
        }
      }
    }
  }
}

struct PoolGeometry {
  Index n, c, h, w, k, stride, oh, ow;
};

template <typename S>
PoolGeometry pool_geometry(const char* op, const Tensor<S>& x, Pool2dOptions opts) {
  require_rank(op, x, 4);
  if (opts.kernel <= 0 || opts.stride <= 0 || opts.kernel > x.dim(2) || opts.kernel > x.dim(3)) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(opts.kernel) + " does not fit input " +
                     shape_string(x.shape()));
  }
  const Index oh = (x.dim(2) - opts.kernel) / opts.stride + 1;
  const Index ow = (x.dim(3) - opts.kernel) / opts.stride + 1;
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), opts.kernel, opts.stride, oh, ow};
}

}  // namespace

template <typename S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("add", a, b);
  Tensor<S> out(a.shape(), Array<S>(a.data() + b.data()));
  if (Tape<S>::any_requires_grad({&a, &b})) {
    tape.record(out, [a, b](const Array<S>& g) {
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) b.accumulate_grad(g);
    });
  }
  return out;
}

template <typename S>
Tensor<S> sub(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("sub", a, b);
  Tensor<S> out(a.shape(), Array<S>(a.data() - b.data()));
  if (Tape<S>::any_requires_grad({&a, &b})) {
    tape.record(out, [a, b](const Array<S>& g) {
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) b.accumulate_grad(-g);
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("mul", a, b);
  Tensor<S> out(a.shape(), Array<S>(a.data() * b.data()));
  if (Tape<S>::any_requires_grad({&a, &b})) {
    tape.record(out, [a, b](const Array<S>& g) {
      if (a.requires_grad()) a.accumulate_grad(g * b.data());
      if (b.requires_grad()) b.accumulate_grad(g * a.data());
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& a, S factor) {
  Tensor<S> out(a.shape(), Array<S>(a.data() * factor));
  if (a.requires_grad()) {
    tape.record(out, [a, factor](const Array<S>& g) { a.accumulate_grad(g * factor); });
  }
  return out;
}

template <typename S>
Tensor<S> add_scalar(Tape<S>& tape, const Tensor<S>& a, S value) {
  Tensor<S> out(a.shape(), Array<S>(a.data() + value));
  if (a.requires_grad()) {
    tape.record(out, [a](const Array<S>& g) { a.accumulate_grad(g); });
  }
  return out;
}

template <typename S>
Tensor<S> pow(Tape<S>& tape, const Tensor<S>& a, S exponent) {
  Tensor<S> out(a.shape(), Array<S>(a.data().pow(exponent)));
  if (a.requires_grad()) {
    tape.record(out, [a, exponent](const Array<S>& g) {
      a.accumulate_grad(g * exponent * a.data().pow(exponent - S(1)));
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(Tape<S>& tape, const Tensor<S>& a) {
  Tensor<S> out(a.shape(), Array<S>(a.data().max(S(0))));
  if (a.requires_grad()) {
    tape.record(out, [a](const Array<S>& g) {
      a.accumulate_grad((a.data() > S(0)).select(g, S(0)));
    });
  }
  return out;
}

template <typename S>
Tensor<S> abs(Tape<S>& tape, const Tensor<S>& a) {
  Tensor<S> out(a.shape(), Array<S>(a.data().abs()));
  if (a.requires_grad()) {
    tape.record(out, [a](const Array<S>& g) {
      const auto& x = a.data();
      a.accumulate_grad((x > S(0)).select(g, (x < S(0)).select(-g, S(0))));
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(Tape<S>& tape, const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(sum_double(a.data())));
  if (a.requires_grad()) {
    tape.record(out, [a](const Array<S>& g) { a.accumulate_grad(Array<S>::Constant(a.numel(), g[0])); });
  }
  return out;
}

template <typename S>
Tensor<S> mean(Tape<S>& tape, const Tensor<S>& a) {
  const double n = static_cast<double>(a.numel());
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(sum_double(a.data()) / n));
  if (a.requires_grad()) {
    tape.record(out, [a, n](const Array<S>& g) {
      a.accumulate_grad(Array<S>::Constant(a.numel(), static_cast<S>(g[0] / n)));
    });
  }
  return out;
}

template <typename S>
Tensor<S> reshape(Tape<S>& tape, const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  Tensor<S> out(std::move(shape), a.data());
  if (a.requires_grad()) {
    tape.record(out, [a](const Array<S>& g) { a.accumulate_grad(g); });
  }
  return out;
}

template <typename S>
Tensor<S> matmul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Array<S> data(m * n);
  MapRow<S>(data.data(), m, n).noalias() = CMapRow<S>(a.data().data(), m, k) * CMapRow<S>(b.data().data(), k, n);
  Tensor<S> out({m, n}, std::move(data));
  if (Tape<S>::any_requires_grad({&a, &b})) {
    tape.record(out, [a, b, m, k, n](const Array<S>& g) {
      CMapRow<S> G(g.data(), m, n);
      if (a.requires_grad()) {
        Array<S> da(m * k);
        MapRow<S>(da.data(), m, k).noalias() = G * CMapRow<S>(b.data().data(), k, n).transpose();
        a.accumulate_grad(da);
      }
      if (b.requires_grad()) {
        Array<S> db(k * n);
        MapRow<S>(db.data(), k, n).noalias() = CMapRow<S>(a.data().data(), m, k).transpose() * G;
        b.accumulate_grad(db);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> linear(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  if (x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: shape mismatch " + shape_string(x.shape()) + " vs " + shape_string(weight.shape()));
  }
  const Index n = x.dim(0), in = x.dim(1), outf = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf)) {
    throw ShapeError("linear: bias shape " + shape_string(bias.shape()) + " vs weight " +
                     shape_string(weight.shape()));
  }
  Array<S> data(n * outf);
  MapRow<S> Y(data.data(), n, outf);
  Y.noalias() = CMapRow<S>(x.data().data(), n, in) * CMapRow<S>(weight.data().data(), outf, in).transpose();
  if (bias.defined()) Y.rowwise() += bias.data().matrix().transpose();
  Tensor<S> out({n, outf}, std::move(data));
  if (Tape<S>::any_requires_grad({&x, &weight, &bias})) {
    tape.record(out, [x, weight, bias, n, in, outf](const Array<S>& g) {
      CMapRow<S> G(g.data(), n, outf);
      if (x.requires_grad()) {
        Array<S> dx(n * in);
        MapRow<S>(dx.data(), n, in).noalias() = G * CMapRow<S>(weight.data().data(), outf, in);
        x.accumulate_grad(dx);
      }
      if (weight.requires_grad()) {
        Array<S> dw(outf * in);
        MapRow<S>(dw.data(), outf, in).noalias() = G.transpose() * CMapRow<S>(x.data().data(), n, in);
        weight.accumulate_grad(dw);
      }
      if (bias.defined() && bias.requires_grad()) {
        Array<S> db = G.colwise().sum().transpose().array();
        bias.accumulate_grad(db);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> conv2d(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 Conv2dOptions opts) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  if (x.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: shape mismatch " + shape_string(x.shape()) + " vs " + shape_string(weight.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3),
                 opts.stride, opts.padding, 0, 0};
  if (g.stride <= 0 || g.pad < 0 || g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_string(weight.shape()) + " does not fit input " +
                     shape_string(x.shape()));
  }
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.o)) {
    throw ShapeError("conv2d: bias shape " + shape_string(bias.shape()) + " vs weight " +
                     shape_string(weight.shape()));
  }

  const Index P = g.pixels();
  RowMat<S> cols;
  im2col(x.data().data(), g, cols);
  RowMat<S> prod(g.o, g.n * P);
  prod.noalias() = CMapRow<S>(weight.data().data(), g.o, g.rows()) * cols;

  Array<S> data(g.n * g.o * P);
  for (Index n = 0; n < g.n; ++n) {
    for (Index o = 0; o < g.o; ++o) {
      const S b = bias.defined() ? bias.data()[o] : S(0);
      Eigen::Map<Array<S>>(data.data() + (n * g.o + o) * P, P) = prod.row(o).segment(n * P, P).array().transpose() + b;
    }
  }
  Tensor<S> out({g.n, g.o, g.oh, g.ow}, std::move(data));

  if (Tape<S>::any_requires_grad({&x, &weight, &bias})) {
    tape.record(out, [x, weight, bias, g](const Array<S>& grad) {
      const Index P = g.pixels();
      RowMat<S> G(g.o, g.n * P);
      for (Index n = 0; n < g.n; ++n) {
        for (Index o = 0; o < g.o; ++o) {
          G.row(o).segment(n * P, P) = Eigen::Map<const Array<S>>(grad.data() + (n * g.o + o) * P, P).matrix().transpose();
        }
      }
      if (weight.requires_grad()) {
        RowMat<S> cols;
        im2col(x.data().data(), g, cols);
        Array<S> dw(g.o * g.rows());
        MapRow<S>(dw.data(), g.o, g.rows()).noalias() = G * cols.transpose();
        weight.accumulate_grad(dw);
      }
      if (bias.defined() && bias.requires_grad()) {
        Array<S> db = G.rowwise().sum().array();
        bias.accumulate_grad(db);
      }
      if (x.requires_grad()) {
        RowMat<S> dcols(g.rows(), g.n * P);
        dcols.noalias() = CMapRow<S>(weight.data().data(), g.o, g.rows()).transpose() * G;
        Array<S> dx = Array<S>::Zero(x.numel());
        col2im(dcols, g, dx.data());
        x.accumulate_grad(dx);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> avg_pool2d(Tape<S>& tape, const Tensor<S>& x, Pool2dOptions opts) {
  const PoolGeometry g = pool_geometry("avg_pool2d", x, opts);
  const S inv = S(1) / static_cast<S>(g.k * g.k);
  Array<S> data(g.n * g.c * g.oh * g.ow);
  const S* src = x.data().data();
  for (Index p = 0; p < g.n * g.c; ++p) {
    const S* plane = src + p * g.h * g.w;
    for (Index oy = 0; oy < g.oh; ++oy) {
      for (Index ox = 0; ox < g.ow; ++ox) {
        double acc = 0.0;
        for (Index i = 0; i < g.k; ++i) {
          for (Index j = 0; j < g.k; ++j) acc += plane[(oy * g.stride + i) * g.w + ox * g.stride + j];
        }
        data[(p * g.oh + oy) * g.ow + ox] = static_cast<S>(acc) * inv;
      }
    }
  }
  Tensor<S> out({g.n, g.c, g.oh, g.ow}, std::move(data));
  if (x.requires_grad()) {
    tape.record(out, [x, g, inv](const Array<S>& grad) {
      Array<S> dx = Array<S>::Zero(x.numel());
      for (Index p = 0; p < g.n * g.c; ++p) {
        S* plane = dx.data() + p * g.h * g.w;
        for (Index oy = 0; oy < g.oh; ++oy) {
          for (Index ox = 0; ox < g.ow; ++ox) {
            const S v = grad[(p * g.oh + oy) * g.ow + ox] * inv;
            for (Index i = 0; i < g.k; ++i) {
              for (Index j = 0; j < g.k; ++j) plane[(oy * g.stride + i) * g.w + ox * g.stride + j] += v;
            }
          }
        }
      }
      x.accumulate_grad(dx);
    });
  }
  return out;
}

template <typename S>
Tensor<S> max_pool2d(Tape<S>& tape, const Tensor<S>& x, Pool2dOptions opts) {
  const PoolGeometry g = pool_geometry("max_pool2d", x, opts);
  const Index total = g.n * g.c * g.oh * g.ow;
  Array<S> data(total);
  std::vector<Index> argmax(static_cast<std::size_t>(total));
  const S* src = x.data().data();
  for (Index p = 0; p < g.n * g.c; ++p) {
    const Index base = p * g.h * g.w;
    for (Index oy = 0; oy < g.oh; ++oy) {
      for (Index ox = 0; ox < g.ow; ++ox) {
        Index best = base + (oy * g.stride) * g.w + ox * g.stride;
        for (Index i = 0; i < g.k; ++i) {
          for (Index j = 0; j < g.k; ++j) {
            const Index idx = base + (oy * g.stride + i) * g.w + ox * g.stride + j;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const Index o = (p * g.oh + oy) * g.ow + ox;
        data[o] = src[best];
        argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  Tensor<S> out({g.n, g.c, g.oh, g.ow}, std::move(data));
  if (x.requires_grad()) {
    tape.record(out, [x, argmax = std::move(argmax)](const Array<S>& grad) {
      Array<S> dx = Array<S>::Zero(x.numel());
      for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += grad[static_cast<Index>(o)];
      x.accumulate_grad(dx);
    });
  }
  return out;
}

template <typename S>
Tensor<S> channel_mean(Tape<S>& tape, const Tensor<S>& x) {
  const ChannelLayout l = channel_layout("channel_mean", x);
  const double m = static_cast<double>(l.batch * l.inner);
  Array<S> data(l.channels);
  const S* src = x.data().data();
  for (Index c = 0; c < l.channels; ++c) {
    double acc = 0.0;
    for (Index n = 0; n < l.batch; ++n) {
      const S* p = src + (n * l.channels + c) * l.inner;
      for (Index i = 0; i < l.inner; ++i) acc += p[i];
    }
    data[c] = static_cast<S>(acc / m);
  }
  Tensor<S> out({l.channels}, std::move(data));
  if (x.requires_grad()) {
    tape.record(out, [x, l, m](const Array<S>& g) {
      Array<S> dx(x.numel());
      for (Index n = 0; n < l.batch; ++n) {
        for (Index c = 0; c < l.channels; ++c) {
          dx.segment((n * l.channels + c) * l.inner, l.inner).setConstant(static_cast<S>(g[c] / m));
        }
      }
      x.accumulate_grad(dx);
    });
  }
  return out;
}

template <typename S>
Tensor<S> channel_std(Tape<S>& tape, const Tensor<S>& x) {
  const ChannelLayout l = channel_layout("channel_std", x);
  const double m = static_cast<double>(l.batch * l.inner);
  const S* src = x.data().data();
  std::vector<double> mu(static_cast<std::size_t>(l.channels));
  Array<S> data(l.channels);
  for (Index c = 0; c < l.channels; ++c) {
    double acc = 0.0;
    for (Index n = 0; n < l.batch; ++n) {
      const S* p = src + (n * l.channels + c) * l.inner;
      for (Index i = 0; i < l.inner; ++i) acc += p[i];
    }
    const double mc = acc / m;
    double sq = 0.0;
    for (Index n = 0; n < l.batch; ++n) {
      const S* p = src + (n * l.channels + c) * l.inner;
      for (Index i = 0; i < l.inner; ++i) {
        const double d = p[i] - mc;
        sq += d * d;
      }
    }
    mu[static_cast<std::size_t>(c)] = mc;
    data[c] = static_cast<S>(std::sqrt(sq / m));
  }
  Tensor<S> out({l.channels}, std::move(data));
  if (x.requires_grad()) {
    tape.record(out, [x, l, m, mu = std::move(mu), out_data = out.data()](const Array<S>& g) {
      Array<S> dx(x.numel());
      const S* src = x.data().data();
      for (Index c = 0; c < l.channels; ++c) {
        const double sd = static_cast<double>(out_data[c]);
        const double k = sd > 0.0 ? static_cast<double>(g[c]) / (m * sd) : 0.0;
        const double mc = mu[static_cast<std::size_t>(c)];
        for (Index n = 0; n < l.batch; ++n) {
          const Index off = (n * l.channels + c) * l.inner;
          for (Index i = 0; i < l.inner; ++i) dx[off + i] = static_cast<S>(k * (src[off + i] - mc));
        }
      }
      x.accumulate_grad(dx);
    });
  }
  return out;
}

template <typename S>
Tensor<S> channel_affine(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& shift, const Tensor<S>& scale,
                         const Tensor<S>& bias) {
  const ChannelLayout l = channel_layout("channel_affine", x);
  for (const Tensor<S>* t : {&shift, &scale, &bias}) {
    if (t->rank() != 1 || t->dim(0) != l.channels) {
      throw ShapeError("channel_affine: parameter shape " + shape_string(t->shape()) + " vs input " +
                       shape_string(x.shape()));
    }
  }
  Array<S> data(x.numel());
  const S* src = x.data().data();
  for (Index n = 0; n < l.batch; ++n) {
    for (Index c = 0; c < l.channels; ++c) {
      const Index off = (n * l.channels + c) * l.inner;
      const S sh = shift.data()[c], sc = scale.data()[c], b = bias.data()[c];
      for (Index i = 0; i < l.inner; ++i) data[off + i] = (src[off + i] - sh) * sc + b;
    }
  }
  Tensor<S> out(x.shape(), std::move(data));
  if (Tape<S>::any_requires_grad({&x, &shift, &scale, &bias})) {
    tape.record(out, [x, shift, scale, bias, l](const Array<S>& g) {
      const S* src = x.data().data();
      Array<S> dx;
      if (x.requires_grad()) dx.resize(x.numel());
      Array<S> dshift(l.channels), dscale(l.channels), dbias(l.channels);
      for (Index c = 0; c < l.channels; ++c) {
        const S sh = shift.data()[c], sc = scale.data()[c];
        double gsum = 0.0, gx = 0.0;
        for (Index n = 0; n < l.batch; ++n) {
          const Index off = (n * l.channels + c) * l.inner;
          for (Index i = 0; i < l.inner; ++i) {
            const double gi = g[off + i];
            gsum += gi;
            gx += gi * (static_cast<double>(src[off + i]) - sh);
            if (x.requires_grad()) dx[off + i] = g[off + i] * sc;
          }
        }
        dshift[c] = static_cast<S>(-gsum * sc);
        dscale[c] = static_cast<S>(gx);
        dbias[c] = static_cast<S>(gsum);
      }
      if (x.requires_grad()) x.accumulate_grad(dx);
      if (shift.requires_grad()) shift.accumulate_grad(dshift);
      if (scale.requires_grad()) scale.accumulate_grad(dscale);
      if (bias.requires_grad()) bias.accumulate_grad(dbias);
    });
  }
  return out;
}

template <typename S>
Array<S> softmax_rows(const Array<S>& logits, Index rows, Index cols) {
  Array<S> p(rows * cols);
  for (Index r = 0; r < rows; ++r) {
    const S* z = logits.data() + r * cols;
    S mx = z[0];
    for (Index k = 1; k < cols; ++k) mx = std::max(mx, z[k]);
    double denom = 0.0;
    for (Index k = 0; k < cols; ++k) denom += std::exp(static_cast<double>(z[k] - mx));
    for (Index k = 0; k < cols; ++k) p[r * cols + k] = static_cast<S>(std::exp(static_cast<double>(z[k] - mx)) / denom);
  }
  return p;
}

namespace {

// log-sum-exp per row, in double.
template <typename S>
std::vector<double> row_lse(const Array<S>& logits, Index rows, Index cols) {
  std::vector<double> out(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const S* z = logits.data() + r * cols;
    double mx = z[0];
    for (Index k = 1; k < cols; ++k) mx = std::max(mx, static_cast<double>(z[k]));
    double acc = 0.0;
    for (Index k = 0; k < cols; ++k) acc += std::exp(z[k] - mx);
    out[static_cast<std::size_t>(r)] = mx + std::log(acc);
  }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> softmax(Tape<S>& tape, const Tensor<S>& logits) {
  require_rank("softmax", logits, 2);
  const Index n = logits.dim(0), k = logits.dim(1);
  Tensor<S> out(logits.shape(), softmax_rows(logits.data(), n, k));
  if (logits.requires_grad()) {
    tape.record(out, [logits, p = out.data(), n, k](const Array<S>& g) {
      Array<S> dz(n * k);
      for (Index r = 0; r < n; ++r) {
        double dot = 0.0;
        for (Index c = 0; c < k; ++c) dot += static_cast<double>(g[r * k + c]) * p[r * k + c];
        for (Index c = 0; c < k; ++c) dz[r * k + c] = static_cast<S>(p[r * k + c] * (g[r * k + c] - dot));
      }
      logits.accumulate_grad(dz);
    });
  }
  return out;
}

template <typename S>
Tensor<S> gather(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels) {
  require_rank("gather", logits, 2);
  const Index n = logits.dim(0), k = logits.dim(1);
  check_labels(labels, n, k);
  Array<S> data(n);
  for (Index r = 0; r < n; ++r) data[r] = logits.data()[r * k + labels[static_cast<std::size_t>(r)]];
  Tensor<S> out({n}, std::move(data));
  if (logits.requires_grad()) {
    tape.record(out, [logits, ys = std::vector<int>(labels.begin(), labels.end()), n, k](const Array<S>& g) {
      Array<S> dz = Array<S>::Zero(n * k);
      for (Index r = 0; r < n; ++r) dz[r * k + ys[static_cast<std::size_t>(r)]] = g[r];
      logits.accumulate_grad(dz);
    });
  }
  return out;
}

template <typename S>
Tensor<S> cross_entropy(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels) {
  require_rank("cross_entropy", logits, 2);
  const Index n = logits.dim(0), k = logits.dim(1);
  check_labels(labels, n, k);
  const std::vector<double> lse = row_lse(logits.data(), n, k);
  double acc = 0.0;
  for (Index r = 0; r < n; ++r) {
    acc += lse[static_cast<std::size_t>(r)] - logits.data()[r * k + labels[static_cast<std::size_t>(r)]];
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
  if (logits.requires_grad()) {
    tape.record(out, [logits, ys = std::vector<int>(labels.begin(), labels.end()), lse, n, k](const Array<S>& g) {
      Array<S> dz(n * k);
      const double s = static_cast<double>(g[0]) / static_cast<double>(n);
      for (Index r = 0; r < n; ++r) {
        for (Index c = 0; c < k; ++c) {
          double p = std::exp(static_cast<double>(logits.data()[r * k + c]) - lse[static_cast<std::size_t>(r)]);
          if (c == ys[static_cast<std::size_t>(r)]) p -= 1.0;
          dz[r * k + c] = static_cast<S>(s * p);
        }
      }
      logits.accumulate_grad(dz);
    });
  }
  return out;
}

template <typename S>
Tensor<S> soft_cross_entropy(Tape<S>& tape, const Tensor<S>& logits, const Tensor<S>& target) {
  require_rank("soft_cross_entropy", logits, 2);
  require_same_shape("soft_cross_entropy", logits, target);
  const Index n = logits.dim(0), k = logits.dim(1);
  const std::vector<double> lse = row_lse(logits.data(), n, k);
  double acc = 0.0;
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < k; ++c) {
      acc -= static_cast<double>(target.data()[r * k + c]) *
             (static_cast<double>(logits.data()[r * k + c]) - lse[static_cast<std::size_t>(r)]);
    }
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
  if (logits.requires_grad()) {
    tape.record(out, [logits, q = target.data(), lse, n, k](const Array<S>& g) {
      Array<S> dz(n * k);
      const double s = static_cast<double>(g[0]) / static_cast<double>(n);
      for (Index r = 0; r < n; ++r) {
        double qsum = 0.0;
        for (Index c = 0; c < k; ++c) qsum += q[r * k + c];
        for (Index c = 0; c < k; ++c) {
          const double p = std::exp(static_cast<double>(logits.data()[r * k + c]) - lse[static_cast<std::size_t>(r)]);
          dz[r * k + c] = static_cast<S>(s * (p * qsum - q[r * k + c]));
        }
      }
      logits.accumulate_grad(dz);
    });
  }
  return out;
}

#define DFQ_INSTANTIATE_OPS(S)                                                                              \
  template Tensor<S> add(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> sub(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> mul(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> scale(Tape<S>&, const Tensor<S>&, S);                                                  \
  template Tensor<S> add_scalar(Tape<S>&, const Tensor<S>&, S);                                             \
  template Tensor<S> pow(Tape<S>&, const Tensor<S>&, S);                                                    \
  template Tensor<S> relu(Tape<S>&, const Tensor<S>&);                                                      \
  template Tensor<S> abs(Tape<S>&, const Tensor<S>&);                                                       \
  template Tensor<S> sum(Tape<S>&, const Tensor<S>&);                                                       \
  template Tensor<S> mean(Tape<S>&, const Tensor<S>&);                                                      \
  template Tensor<S> reshape(Tape<S>&, const Tensor<S>&, Shape);                                            \
  template Tensor<S> matmul(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> linear(Tape<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                \
  template Tensor<S> conv2d(Tape<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Conv2dOptions); \
  template Tensor<S> avg_pool2d(Tape<S>&, const Tensor<S>&, Pool2dOptions);                                 \
  template Tensor<S> max_pool2d(Tape<S>&, const Tensor<S>&, Pool2dOptions);                                 \
  template Tensor<S> channel_mean(Tape<S>&, const Tensor<S>&);                                              \
  template Tensor<S> channel_std(Tape<S>&, const Tensor<S>&);                                               \
  template Tensor<S> channel_affine(Tape<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,         \
                                    const Tensor<S>&);                                                      \
  template Tensor<S> softmax(Tape<S>&, const Tensor<S>&);                                                   \
  template Tensor<S> gather(Tape<S>&, const Tensor<S>&, std::span<const int>);                              \
  template Tensor<S> cross_entropy(Tape<S>&, const Tensor<S>&, std::span<const int>);                       \
  template Tensor<S> soft_cross_entropy(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                      \
  template Array<S> softmax_rows(const Array<S>&, Index, Index);

DFQ_INSTANTIATE_OPS(float)
DFQ_INSTANTIATE_OPS(double)

#undef DFQ_INSTANTIATE_OPS

}  // namespace dfq
