#include "hybridscan/ops.hpp"

#include <algorithm>
#include <cmath>

namespace hybridscan {
namespace {

template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::RowMatrix;

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw UsageError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename Scalar>
Tensor<Scalar> like(const Tensor<Scalar>& t, typename Tensor<Scalar>::Array data) {
  return Tensor<Scalar>(t.shape(), std::move(data));
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar stable_softplus(Scalar x) {
  return std::max(x, Scalar(0)) + std::log1p(std::exp(-std::abs(x)));
}

struct ConvGeometry {
  Index cin, d, h, w;
  Index k, stride, padding;
  Index od, oh, ow;
  Index positions() const { return od * oh * ow; }
  Index rows() const { return cin * k * k * k; }
};

ConvGeometry conv_geometry(const Shape& xs, const Shape& ws, Index stride, Index padding) {
  if (xs.size() != 4 || ws.size() != 5) {
    throw UsageError("conv3d expects x [C,D,H,W] and w [Co,Ci,k,k,k], got " + shape_str(xs) + " and " + shape_str(ws));
  }
  if (ws[1] != xs[0]) {
    throw ConfigError("conv3d: input has " + std::to_string(xs[0]) + " channels, kernel expects " +
                      std::to_string(ws[1]));
  }
  if (ws[2] != ws[3] || ws[2] != ws[4]) throw ConfigError("conv3d: kernel must be cubic");
  if (stride < 1 || padding < 0) throw ConfigError("conv3d: invalid stride/padding");
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[2], stride, padding, 0, 0, 0};
  auto out = [&](Index n) { return (n + 2 * padding - g.k) / stride + 1; };
  g.od = out(g.d);
  g.oh = out(g.h);
  g.ow = out(g.w);
  if (g.d + 2 * padding < g.k || g.h + 2 * padding < g.k || g.w + 2 * padding < g.k) {
    throw ConfigError("conv3d: kernel larger than padded input " + shape_str(xs));
  }
  return g;
}

// cols[(ci,kd,kh,kw), (od,oh,ow)] = x[ci, od*s-p+kd, oh*s-p+kh, ow*s-p+kw] (zero outside).
// Output columns ow whose input column ow*stride - padding + kw lies inside [0, w).
inline std::pair<Index, Index> valid_columns(const ConvGeometry& g, Index kw) {
  const Index off = kw - g.padding;
  Index lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  Index hi = off >= g.w ? 0 : (g.w - 1 - off) / g.stride + 1;
  lo = std::min(lo, g.ow);
  hi = std::clamp(hi, lo, g.ow);
  return {lo, hi};
}

template <typename Scalar>
void im2col(const ConvGeometry& g, const Scalar* x, Scalar* cols) {
  const Index P = g.positions();
  Index row = 0;
  for (Index ci = 0; ci < g.cin; ++ci) {
    const Scalar* xc = x + ci * g.d * g.h * g.w;
    for (Index kd = 0; kd < g.k; ++kd) {
      for (Index kh = 0; kh < g.k; ++kh) {
        for (Index kw = 0; kw < g.k; ++kw, ++row) {
          Scalar* out = cols + row * P;
          for (Index od = 0; od < g.od; ++od) {
            const Index id = od * g.stride - g.padding + kd;
            for (Index oh = 0; oh < g.oh; ++oh) {
              Scalar* o = out + (od * g.oh + oh) * g.ow;
              const Index ih = oh * g.stride - g.padding + kh;
              if (id < 0 || id >= g.d || ih < 0 || ih >= g.h) {
                std::fill(o, o + g.ow, Scalar(0));
                continue;
              }
              const Scalar* xrow = xc + (id * g.h + ih) * g.w;
              const auto [lo, hi] = valid_columns(g, kw);
              std::fill(o, o + lo, Scalar(0));
              std::fill(o + hi, o + g.ow, Scalar(0));
              const Scalar* src = xrow + lo * g.stride - g.padding + kw;
              if (g.stride == 1) {
                std::copy(src, src + (hi - lo), o + lo);
              } else {
                for (Index ow = lo; ow < hi; ++ow, src += g.stride) o[ow] = *src;
              }
            }
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const ConvGeometry& g, const Scalar* cols, Scalar* x) {
  const Index P = g.positions();
  Index row = 0;
  for (Index ci = 0; ci < g.cin; ++ci) {
    Scalar* xc = x + ci * g.d * g.h * g.w;
    for (Index kd = 0; kd < g.k; ++kd) {
      for (Index kh = 0; kh < g.k; ++kh) {
        for (Index kw = 0; kw < g.k; ++kw, ++row) {
          const Scalar* in = cols + row * P;
          for (Index od = 0; od < g.od; ++od) {
            const Index id = od * g.stride - g.padding + kd;
            if (id < 0 || id >= g.d) continue;
            for (Index oh = 0; oh < g.oh; ++oh) {
              const Index ih = oh * g.stride - g.padding + kh;
              if (ih < 0 || ih >= g.h) continue;
              const Scalar* c = in + (od * g.oh + oh) * g.ow;
              Scalar* xrow = xc + (id * g.h + ih) * g.w;
              const auto [lo, hi] = valid_columns(g, kw);
              Scalar* dst = xrow + lo * g.stride - g.padding + kw;
              for (Index ow = lo; ow < hi; ++ow, dst += g.stride) *dst += c[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "add");
  Tensor<Scalar> out = like(a.value(), a.value().array() + b.value().array());
  return record<Scalar>("add", std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (auto* p = self.input(0)) p->accumulate(self.grad);
    if (auto* p = self.input(1)) p->accumulate(self.grad);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "sub");
  Tensor<Scalar> out = like(a.value(), a.value().array() - b.value().array());
  return record<Scalar>("sub", std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (auto* p = self.input(0)) p->accumulate(self.grad);
    if (auto* p = self.input(1)) p->accumulate(like(self.grad, -self.grad.array()));
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "mul");
  Tensor<Scalar> out = like(a.value(), a.value().array() * b.value().array());
  return record<Scalar>("mul", std::move(out), {a, b}, [](Node<Scalar>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* p = self.input(0)) p->accumulate(like(av, self.grad.array() * bv.array()));
    if (auto* p = self.input(1)) p->accumulate(like(bv, self.grad.array() * av.array()));
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Tensor<Scalar> out = like(a.value(), a.value().array() * s);
  return record<Scalar>("scale", std::move(out), {a}, [s](Node<Scalar>& self) {
    if (auto* p = self.input(0)) p->accumulate(like(self.grad, self.grad.array() * s));
  });
}

template <typename Scalar>
Var<Scalar> one_minus(const Var<Scalar>& a) {
  Tensor<Scalar> out = like(a.value(), Scalar(1) - a.value().array());
  return record<Scalar>("one_minus", std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* p = self.input(0)) p->accumulate(like(self.grad, -self.grad.array()));
  });
}

template <typename Scalar>
Var<Scalar> neg(const Var<Scalar>& a) {
  return scale(a, Scalar(-1));
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  Tensor<Scalar> out = like(a.value(), a.value().array().exp());
  return record<Scalar>("exp", std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* p = self.input(0)) p->accumulate(like(self.value, self.grad.array() * self.value.array()));
  });
}

template <typename Scalar>
Var<Scalar> mul_broadcast_channels(const Var<Scalar>& x, const Var<Scalar>& g) {
  if (g.value().rank() == 0 || g.dim(0) != 1 || g.value().inner_size() != x.value().inner_size()) {
    throw UsageError("mul_broadcast_channels: gate " + shape_str(g.shape()) + " incompatible with " +
                     shape_str(x.shape()));
  }
  const Index C = x.dim(0);
  const Index L = x.value().inner_size();
  Tensor<Scalar> out(x.shape());
  out.matrix(C, L) = (x.value().matrix(C, L).array().rowwise() * g.value().matrix(1, L).array().row(0)).matrix();
  return record<Scalar>("mul_broadcast_channels", std::move(out), {x, g}, [C, L](Node<Scalar>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& gv = self.parents[1]->value;
    auto G = self.grad.matrix(C, L).array();
    if (auto* p = self.input(0)) {
      Tensor<Scalar> gx(xv.shape());
      gx.matrix(C, L) = (G.rowwise() * gv.matrix(1, L).array().row(0)).matrix();
      p->accumulate(std::move(gx));
    }
    if (auto* p = self.input(1)) {
      Tensor<Scalar> gg(gv.shape());
      gg.matrix(1, L) = (G * xv.matrix(C, L).array()).colwise().sum().matrix();
      p->accumulate(std::move(gg));
    }
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Tensor<Scalar> out = like(a.value(), a.value().array().unaryExpr([](Scalar v) { return stable_sigmoid(v); }));
  return record<Scalar>("sigmoid", std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* p = self.input(0)) {
      const auto& y = self.value.array();
      p->accumulate(like(self.value, self.grad.array() * y * (Scalar(1) - y)));
    }
  });
}

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& a) {
  typename Tensor<Scalar>::Array s = a.value().array().unaryExpr([](Scalar v) { return stable_sigmoid(v); });
  Tensor<Scalar> out = like(a.value(), a.value().array() * s);
  return record<Scalar>("silu", std::move(out), {a}, [s = std::move(s)](Node<Scalar>& self) {
    if (auto* p = self.input(0)) {
      const auto& x = p->value.array();
      p->accumulate(like(p->value, self.grad.array() * s * (Scalar(1) + x * (Scalar(1) - s))));
    }
  });
}

template <typename Scalar>
Var<Scalar> softplus(const Var<Scalar>& a) {
  Tensor<Scalar> out = like(a.value(), a.value().array().unaryExpr([](Scalar v) { return stable_softplus(v); }));
  return record<Scalar>("softplus", std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* p = self.input(0)) {
      p->accumulate(like(p->value, self.grad.array() *
                                       p->value.array().unaryExpr([](Scalar v) { return stable_sigmoid(v); })));
    }
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Tensor<Scalar> out = Tensor<Scalar>::scalar(a.value().array().sum());
  return record<Scalar>("sum", std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* p = self.input(0)) p->accumulate(Tensor<Scalar>::constant(p->value.shape(), self.grad[0]));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.size()));
}

template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& a, const Tensor<Scalar>& w) {
  if (w.size() != a.size()) throw UsageError("weighted_sum: size mismatch");
  Tensor<Scalar> out = Tensor<Scalar>::scalar((a.value().array() * w.array()).sum());
  return record<Scalar>("weighted_sum", std::move(out), {a}, [w](Node<Scalar>& self) {
    if (auto* p = self.input(0)) p->accumulate(like(p->value, w.array() * self.grad[0]));
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  Tensor<Scalar> out = a.value().reshaped(std::move(shape));
  return record<Scalar>("reshape", std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* p = self.input(0)) p->accumulate(self.grad.reshaped(p->value.shape()));
  });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  const Index cin = x.dim(0);
  const Index L = x.value().inner_size();
  if (w.value().rank() != 2 || w.dim(1) != cin) {
    throw ConfigError("linear: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  const Index cout = w.dim(0);
  if (b.defined() && b.size() != cout) throw ConfigError("linear: bias size mismatch");
  Shape out_shape = x.shape();
  out_shape[0] = cout;
  Tensor<Scalar> out(out_shape);
  auto Y = out.matrix(cout, L);
  Y.noalias() = w.value().matrix(cout, cin) * x.value().matrix(cin, L);
  if (b.defined()) Y.colwise() += b.value().array().matrix();
  std::vector<Var<Scalar>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return record<Scalar>("linear", std::move(out), std::move(inputs), [cin, cout, L](Node<Scalar>& self) {
    auto G = self.grad.matrix(cout, L);
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    if (auto* p = self.input(0)) {
      Tensor<Scalar> gx(xv.shape());
      gx.matrix(cin, L).noalias() = wv.matrix(cout, cin).transpose() * G;
      p->accumulate(std::move(gx));
    }
    if (auto* p = self.input(1)) {
      Tensor<Scalar> gw(wv.shape());
      gw.matrix(cout, cin).noalias() = G * xv.matrix(cin, L).transpose();
      p->accumulate(std::move(gw));
    }
    if (self.parents.size() > 2) {
      if (auto* p = self.input(2)) {
        Tensor<Scalar> gb(p->value.shape());
        gb.matrix(cout, 1) = G.rowwise().sum();
        p->accumulate(std::move(gb));
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> conv3d(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b, Index stride, Index padding) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, padding);
  const Index cout = w.dim(0);
  if (b.defined() && b.size() != cout) throw ConfigError("conv3d: bias size mismatch");
  const Index P = g.positions();
  const Index R = g.rows();

  RowMatrix<Scalar> cols(R, P);
  im2col(g, x.value().data(), cols.data());
  Tensor<Scalar> out({cout, g.od, g.oh, g.ow});
  auto Y = out.matrix(cout, P);
  Y.noalias() = w.value().matrix(cout, R) * cols;
  if (b.defined()) Y.colwise() += b.value().array().matrix();

  std::vector<Var<Scalar>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  // Columns are rebuilt in the backward pass rather than kept alive on the tape.
  return record<Scalar>("conv3d", std::move(out), std::move(inputs), [g, cout, P, R](Node<Scalar>& self) {
    auto G = self.grad.matrix(cout, P);
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    if (auto* p = self.input(1)) {
      RowMatrix<Scalar> cols(R, P);
      im2col(g, xv.data(), cols.data());
      Tensor<Scalar> gw(wv.shape());
      gw.matrix(cout, R).noalias() = G * cols.transpose();
      p->accumulate(std::move(gw));
    }
    if (auto* p = self.input(0)) {
      RowMatrix<Scalar> dcols(R, P);
      dcols.noalias() = wv.matrix(cout, R).transpose() * G;
      Tensor<Scalar> gx(xv.shape());
      col2im(g, dcols.data(), gx.data());
      p->accumulate(std::move(gx));
    }
    if (self.parents.size() > 2) {
      if (auto* p = self.input(2)) {
        Tensor<Scalar> gb(p->value.shape());
        gb.matrix(cout, 1) = G.rowwise().sum();
        p->accumulate(std::move(gb));
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps) {
  const Index C = x.dim(0);
  const Index L = x.value().inner_size();
  if (gamma.size() != C || beta.size() != C) throw ConfigError("layer_norm: affine size mismatch");
  auto X = x.value().matrix(C, L).array();
  Eigen::Array<Scalar, 1, Eigen::Dynamic> mu = X.colwise().mean();
  RowMatrix<Scalar> xhat = (X.rowwise() - mu).matrix();
  Eigen::Array<Scalar, 1, Eigen::Dynamic> inv_std =
      (xhat.array().square().colwise().mean() + eps).sqrt().inverse();
  xhat.array().rowwise() *= inv_std;
  Tensor<Scalar> out(x.shape());
  auto gam = gamma.value().array();
  auto bet = beta.value().array();
  out.matrix(C, L) = ((xhat.array().colwise() * gam).colwise() + bet).matrix();
  return record<Scalar>(
      "layer_norm", std::move(out), {x, gamma, beta},
      [C, L, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Scalar>& self) {
        auto G = self.grad.matrix(C, L).array();
        const auto& gam = self.parents[1]->value.array();
        if (auto* p = self.input(0)) {
          RowMatrix<Scalar> gh = (G.colwise() * gam).matrix();
          Eigen::Array<Scalar, 1, Eigen::Dynamic> m1 = gh.array().colwise().mean();
          Eigen::Array<Scalar, 1, Eigen::Dynamic> m2 = (gh.array() * xhat.array()).colwise().mean();
          Tensor<Scalar> gx(p->value.shape());
          gx.matrix(C, L) =
              (((gh.array().rowwise() - m1) - xhat.array().rowwise() * m2).rowwise() * inv_std).matrix();
          p->accumulate(std::move(gx));
        }
        if (auto* p = self.input(1)) {
          Tensor<Scalar> gg(p->value.shape());
          gg.matrix(C, 1) = (G * xhat.array()).rowwise().sum().matrix();
          p->accumulate(std::move(gg));
        }
        if (auto* p = self.input(2)) {
          Tensor<Scalar> gb(p->value.shape());
          gb.matrix(C, 1) = G.rowwise().sum().matrix();
          p->accumulate(std::move(gb));
        }
      });
}

template <typename Scalar>
Var<Scalar> instance_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps) {
  const Index C = x.dim(0);
  const Index L = x.value().inner_size();
  if (gamma.size() != C || beta.size() != C) throw ConfigError("instance_norm: affine size mismatch");
  auto X = x.value().matrix(C, L).array();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mu = X.rowwise().mean();
  RowMatrix<Scalar> xhat = (X.colwise() - mu).matrix();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std = (xhat.array().square().rowwise().mean() + eps).sqrt().inverse();
  xhat.array().colwise() *= inv_std;
  Tensor<Scalar> out(x.shape());
  auto gam = gamma.value().array();
  auto bet = beta.value().array();
  out.matrix(C, L) = ((xhat.array().colwise() * gam).colwise() + bet).matrix();
  return record<Scalar>(
      "instance_norm", std::move(out), {x, gamma, beta},
      [C, L, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Scalar>& self) {
        auto G = self.grad.matrix(C, L).array();
        const auto& gam = self.parents[1]->value.array();
        if (auto* p = self.input(0)) {
          RowMatrix<Scalar> gh = (G.colwise() * gam).matrix();
          Eigen::Array<Scalar, Eigen::Dynamic, 1> m1 = gh.array().rowwise().mean();
          Eigen::Array<Scalar, Eigen::Dynamic, 1> m2 = (gh.array() * xhat.array()).rowwise().mean();
          Tensor<Scalar> gx(p->value.shape());
          gx.matrix(C, L) =
              (((gh.array().colwise() - m1) - xhat.array().colwise() * m2).colwise() * inv_std).matrix();
          p->accumulate(std::move(gx));
        }
        if (auto* p = self.input(1)) {
          Tensor<Scalar> gg(p->value.shape());
          gg.matrix(C, 1) = (G * xhat.array()).rowwise().sum().matrix();
          p->accumulate(std::move(gg));
        }
        if (auto* p = self.input(2)) {
          Tensor<Scalar> gb(p->value.shape());
          gb.matrix(C, 1) = G.rowwise().sum().matrix();
          p->accumulate(std::move(gb));
        }
      });
}

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& xs) {
  if (xs.empty()) throw UsageError("concat_channels: no inputs");
  const Index L = xs[0].value().inner_size();
  Index C = 0;
  for (const auto& x : xs) {
    if (x.value().inner_size() != L) throw UsageError("concat_channels: spatial extents differ");
    C += x.dim(0);
  }
  Shape shape = xs[0].shape();
  shape[0] = C;
  Tensor<Scalar> out(shape);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    std::copy(x.value().data(), x.value().data() + x.size(), out.data() + off * L);
    off += x.dim(0);
  }
  return record<Scalar>("concat_channels", std::move(out), xs, [L, offsets](Node<Scalar>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (auto* p = self.input(i)) {
        const Scalar* src = self.grad.data() + offsets[i] * L;
        Tensor<Scalar> g(p->value.shape());
        std::copy(src, src + g.size(), g.data());
        p->accumulate(std::move(g));
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& x, Index begin, Index count) {
  const Index L = x.value().inner_size();
  if (begin < 0 || count < 1 || begin + count > x.dim(0)) {
    throw UsageError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[0] = count;
  Tensor<Scalar> out(shape);
  const Scalar* src = x.value().data() + begin * L;
  std::copy(src, src + count * L, out.data());
  return record<Scalar>("slice_channels", std::move(out), {x}, [begin, count, L](Node<Scalar>& self) {
    if (auto* p = self.input(0)) {
      Tensor<Scalar> g(p->value.shape());
      std::copy(self.grad.data(), self.grad.data() + count * L, g.data() + begin * L);
      p->accumulate(std::move(g));
    }
  });
}

template <typename Scalar>
Var<Scalar> causal_conv1d(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  const Index C = x.dim(0);
  const Index L = x.value().inner_size();
  if (w.value().rank() != 2 || w.dim(0) != C || b.size() != C) {
    throw ConfigError("causal_conv1d: weight " + shape_str(w.shape()) + " incompatible with " + shape_str(x.shape()));
  }
  const Index K = w.dim(1);
  Tensor<Scalar> out(x.shape());
  auto X = x.value().matrix(C, L);
  auto W = w.value().matrix(C, K);
  auto Y = out.matrix(C, L);
  Y.colwise() = b.value().array().matrix();
  for (Index j = 0; j < K; ++j) {
    const Index shift = K - 1 - j;
    if (shift >= L) continue;
    Y.rightCols(L - shift).array() += X.leftCols(L - shift).array().colwise() * W.col(j).array();
  }
  return record<Scalar>("causal_conv1d", std::move(out), {x, w, b}, [C, L, K](Node<Scalar>& self) {
    auto G = self.grad.matrix(C, L);
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    auto X = xv.matrix(C, L);
    auto W = wv.matrix(C, K);
    if (auto* p = self.input(0)) {
      Tensor<Scalar> gx(xv.shape());
      auto GX = gx.matrix(C, L);
      for (Index j = 0; j < K; ++j) {
        const Index shift = K - 1 - j;
        if (shift >= L) continue;
        GX.leftCols(L - shift).array() += G.rightCols(L - shift).array().colwise() * W.col(j).array();
      }
      p->accumulate(std::move(gx));
    }
    if (auto* p = self.input(1)) {
      Tensor<Scalar> gw(wv.shape());
      auto GW = gw.matrix(C, K);
      for (Index j = 0; j < K; ++j) {
        const Index shift = K - 1 - j;
        if (shift >= L) continue;
        GW.col(j) = (G.rightCols(L - shift).array() * X.leftCols(L - shift).array()).rowwise().sum().matrix();
      }
      p->accumulate(std::move(gw));
    }
    if (auto* p = self.input(2)) {
      Tensor<Scalar> gb(p->value.shape());
      gb.matrix(C, 1) = G.rowwise().sum();
      p->accumulate(std::move(gb));
    }
  });
}

template <typename Scalar>
Var<Scalar> upsample_nearest2(const Var<Scalar>& x) {
  if (x.value().rank() != 4) throw UsageError("upsample_nearest2 expects [C,D,H,W]");
  const Index C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<Scalar> out({C, 2 * D, 2 * H, 2 * W});
  const Scalar* src = x.value().data();
  Scalar* dst = out.data();
  for (Index c = 0; c < C; ++c)
    for (Index d = 0; d < 2 * D; ++d)
      for (Index h = 0; h < 2 * H; ++h) {
        const Scalar* s = src + ((c * D + d / 2) * H + h / 2) * W;
        Scalar* o = dst + ((c * 2 * D + d) * 2 * H + h) * 2 * W;
        for (Index w = 0; w < 2 * W; ++w) o[w] = s[w / 2];
      }
  return record<Scalar>("upsample_nearest2", std::move(out), {x}, [C, D, H, W](Node<Scalar>& self) {
    if (auto* p = self.input(0)) {
      Tensor<Scalar> g(p->value.shape());
      const Scalar* gs = self.grad.data();
      for (Index c = 0; c < C; ++c)
        for (Index d = 0; d < 2 * D; ++d)
          for (Index h = 0; h < 2 * H; ++h) {
            const Scalar* s = gs + ((c * 2 * D + d) * 2 * H + h) * 2 * W;
            Scalar* o = g.data() + ((c * D + d / 2) * H + h / 2) * W;
            for (Index w = 0; w < 2 * W; ++w) o[w / 2] += s[w];
          }
      p->accumulate(std::move(g));
    }
  });
}

template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& logits) {
  const Index K = logits.dim(0);
  const Index P = logits.inner_size();
  auto Z = logits.matrix(K, P).array();
  Eigen::Array<Scalar, 1, Eigen::Dynamic> mx = Z.colwise().maxCoeff();
  Tensor<Scalar> out(logits.shape());
  auto S = out.matrix(K, P).array();
  S = (Z.rowwise() - mx).exp();
  Eigen::Array<Scalar, 1, Eigen::Dynamic> denom = S.colwise().sum();
  S.rowwise() /= denom;
  return out;
}

template <typename Scalar>
LabelVolume argmax_channels(const Tensor<Scalar>& logits) {
  const Index K = logits.dim(0);
  const Index P = logits.inner_size();
  Shape shape(logits.shape().begin() + 1, logits.shape().end());
  LabelVolume out(shape);
  auto Z = logits.matrix(K, P);
  for (Index p = 0; p < P; ++p) {
    Index best = 0;
    for (Index k = 1; k < K; ++k)
      if (Z(k, p) > Z(best, p)) best = k;
    out[p] = static_cast<std::int32_t>(best);
  }
  return out;
}

template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, const LabelVolume& labels) {
  const Index K = logits.dim(0);
  const Index P = logits.value().inner_size();
  if (labels.size() != P) {
    throw UsageError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(P) +
                     " positions");
  }
  for (Index p = 0; p < P; ++p) {
    if (labels[p] < 0 || labels[p] >= K) {
      throw DataError("label " + std::to_string(labels[p]) + " outside [0, " + std::to_string(K) + ")");
    }
  }
  auto Z = logits.value().matrix(K, P);
  Eigen::Array<Scalar, 1, Eigen::Dynamic> mx = Z.array().colwise().maxCoeff();
  Eigen::Array<Scalar, 1, Eigen::Dynamic> lse =
      (Z.array().rowwise() - mx).exp().colwise().sum().log() + mx;
  double total = 0;
  for (Index p = 0; p < P; ++p) total += static_cast<double>(lse[p] - Z(labels[p], p));
  Tensor<Scalar> out = Tensor<Scalar>::scalar(static_cast<Scalar>(total / static_cast<double>(P)));
  return record<Scalar>("softmax_cross_entropy", std::move(out), {logits},
                        [K, P, labels](Node<Scalar>& self) {
                          if (auto* p = self.input(0)) {
                            Tensor<Scalar> g = softmax_channels(p->value);
                            auto G = g.matrix(K, P);
                            for (Index q = 0; q < P; ++q) G(labels[q], q) -= Scalar(1);
                            g.array() *= self.grad[0] / static_cast<Scalar>(P);
                            p->accumulate(std::move(g));
                          }
                        });
}

#define HYBRIDSCAN_INSTANTIATE_OPS(S)                                                                     \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                      \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                      \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                      \
  template Var<S> scale(const Var<S>&, S);                                                                \
  template Var<S> one_minus(const Var<S>&);                                                               \
  template Var<S> neg(const Var<S>&);                                                                     \
  template Var<S> exp(const Var<S>&);                                                                     \
  template Var<S> mul_broadcast_channels(const Var<S>&, const Var<S>&);                                   \
  template Var<S> sigmoid(const Var<S>&);                                                                 \
  template Var<S> silu(const Var<S>&);                                                                    \
  template Var<S> softplus(const Var<S>&);                                                                \
  template Var<S> sum(const Var<S>&);                                                                     \
  template Var<S> mean(const Var<S>&);                                                                    \
  template Var<S> weighted_sum(const Var<S>&, const Tensor<S>&);                                          \
  template Var<S> reshape(const Var<S>&, Shape);                                                          \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                                    \
  template Var<S> conv3d(const Var<S>&, const Var<S>&, const Var<S>&, Index, Index);                      \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                             \
  template Var<S> instance_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                          \
  template Var<S> concat_channels(const std::vector<Var<S>>&);                                            \
  template Var<S> slice_channels(const Var<S>&, Index, Index);                                            \
  template Var<S> causal_conv1d(const Var<S>&, const Var<S>&, const Var<S>&);                             \
  template Var<S> upsample_nearest2(const Var<S>&);                                                       \
  template Var<S> softmax_cross_entropy(const Var<S>&, const LabelVolume&);                               \
  template Tensor<S> softmax_channels(const Tensor<S>&);                                                  \
  template LabelVolume argmax_channels(const Tensor<S>&);

HYBRIDSCAN_INSTANTIATE_OPS(float)
HYBRIDSCAN_INSTANTIATE_OPS(double)

}  // namespace hybridscan
