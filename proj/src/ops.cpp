#include "dualnet/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "dualnet/autodiff.hpp"

namespace dualnet::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

Tensor finish(const char* name, Shape shape, std::vector<double>&& data,
              std::initializer_list<const Tensor*> inputs, BackwardRule rule) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string(name) + " produced a non-finite value");
  }
  Tape* tape = Tape::active();
  bool track = false;
  if (tape) {
    for (const Tensor* t : inputs) track = track || t->requires_grad();
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = track;
  node->id = next_tensor_id();
  if (track) {
    Tape::Entry e;
    for (const Tensor* t : inputs) e.inputs.push_back(t->node());
    e.output = node;
    e.rule = std::move(rule);
    tape->push(std::move(e));
  }
  return Tensor::from_node(std::move(node));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

// x: (C, H, W) -> cols (C*kh*kw, Ho*Wo)
void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, Conv2dGeometry g, std::size_t Ho, std::size_t Wo, double* cols) {
  const long pad = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        double* row = cols + ((c * kh + i) * kw + j) * Ho * Wo;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          long ih = static_cast<long>(oh * g.stride + i) - pad;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            long iw = static_cast<long>(ow * g.stride + j) - pad;
            bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(H) && iw < static_cast<long>(W);
            row[oh * Wo + ow] = inside ? x[(c * H + ih) * W + iw] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, Conv2dGeometry g, std::size_t Ho, std::size_t Wo, double* x) {
  const long pad = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        const double* row = cols + ((c * kh + i) * kw + j) * Ho * Wo;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          long ih = static_cast<long>(oh * g.stride + i) - pad;
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            long iw = static_cast<long>(ow * g.stride + j) - pad;
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            x[(c * H + ih) * W + iw] += row[oh * Wo + ow];
          }
        }
      }
}

struct ConvDims {
  std::size_t N, C, H, W, O, kh, kw, Ho, Wo;
};

// out (N, O, Ho*Wo) = W (O, CKK) * im2col(x_n)
void conv_forward(const double* x, const double* w, const ConvDims& d, Conv2dGeometry g,
                  double* out) {
  const std::size_t ckk = d.C * d.kh * d.kw, hw = d.Ho * d.Wo;
  std::vector<double> cols(ckk * hw);
  MapC wm(w, d.O, ckk);
  for (std::size_t n = 0; n < d.N; ++n) {
    im2col(x + n * d.C * d.H * d.W, d.C, d.H, d.W, d.kh, d.kw, g, d.Ho, d.Wo, cols.data());
    Map(out + n * d.O * hw, d.O, hw).noalias() = wm * MapC(cols.data(), ckk, hw);
  }
}

// x (N, C, H, W) += col2im(W^T * y_n)
void conv_adjoint(const double* y, const double* w, const ConvDims& d, Conv2dGeometry g,
                  double* x) {
  const std::size_t ckk = d.C * d.kh * d.kw, hw = d.Ho * d.Wo;
  std::vector<double> cols(ckk * hw);
  MapC wm(w, d.O, ckk);
  for (std::size_t n = 0; n < d.N; ++n) {
    Map(cols.data(), ckk, hw).noalias() = wm.transpose() * MapC(y + n * d.O * hw, d.O, hw);
    col2im(cols.data(), d.C, d.H, d.W, d.kh, d.kw, g, d.Ho, d.Wo, x + n * d.C * d.H * d.W);
  }
}

// gw (O, CKK) += sum_n y_n * im2col(x_n)^T
void conv_weight_grad(const double* x, const double* y, const ConvDims& d, Conv2dGeometry g,
                      double* gw) {
  const std::size_t ckk = d.C * d.kh * d.kw, hw = d.Ho * d.Wo;
  std::vector<double> cols(ckk * hw);
  Map gm(gw, d.O, ckk);
  for (std::size_t n = 0; n < d.N; ++n) {
    im2col(x + n * d.C * d.H * d.W, d.C, d.H, d.W, d.kh, d.kw, g, d.Ho, d.Wo, cols.data());
    gm.noalias() += MapC(y + n * d.O * hw, d.O, hw) * MapC(cols.data(), ckk, hw).transpose();
  }
}

std::pair<std::size_t, std::size_t> rows_features(const Tensor& x) {
  if (x.rank() <= 1) return {1, x.size()};
  std::size_t n = x.dim(0);
  return {n, n ? x.size() / n : 0};
}

}  // namespace

std::size_t conv_out_size(std::size_t in, std::size_t kernel, Conv2dGeometry geom) {
  if (geom.stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (in + 2 * geom.pad < kernel) throw ShapeError("conv2d: kernel larger than padded input");
  return (in + 2 * geom.pad - kernel) / geom.stride + 1;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != bk) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + (transpose_b ? "^T" : ""));
  }
  std::vector<double> out(m * n);
  MapC am(a.data().data(), m, k), bm(b.data().data(), b.dim(0), b.dim(1));
  if (transpose_b)
    Map(out.data(), m, n).noalias() = am * bm.transpose();
  else
    Map(out.data(), m, n).noalias() = am * bm;
  return finish("matmul", {m, n}, std::move(out), {&a, &b},
                [a, b, m, k, n, transpose_b](std::span<const double> g,
                                             std::span<std::vector<double>*> gi) {
                  MapC gm(g.data(), m, n);
                  MapC am(a.data().data(), m, k), bm(b.data().data(), b.dim(0), b.dim(1));
                  if (gi[0]) {
                    if (transpose_b)
                      Map(gi[0]->data(), m, k).noalias() += gm * bm;
                    else
                      Map(gi[0]->data(), m, k).noalias() += gm * bm.transpose();
                  }
                  if (gi[1]) {
                    if (transpose_b)
                      Map(gi[1]->data(), n, k).noalias() += gm.transpose() * am;
                    else
                      Map(gi[1]->data(), k, n).noalias() += am.transpose() * gm;
                  }
                });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  Map(out.data(), n, m) = MapC(a.data().data(), m, n).transpose();
  return finish("transpose", {n, m}, std::move(out), {&a},
                [m, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  Map(gi[0]->data(), m, n) += MapC(g.data(), n, m).transpose();
                });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dGeometry geom) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  if (x.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                     " do not match weight " + to_string(weight.shape()));
  }
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3),
             0, 0};
  d.Ho = conv_out_size(d.H, d.kh, geom);
  d.Wo = conv_out_size(d.W, d.kw, geom);
  std::vector<double> out(d.N * d.O * d.Ho * d.Wo);
  conv_forward(x.data().data(), weight.data().data(), d, geom, out.data());
  return finish("conv2d", {d.N, d.O, d.Ho, d.Wo}, std::move(out), {&x, &weight},
                [x, weight, d, geom](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  if (gi[0]) conv_adjoint(g.data(), weight.data().data(), d, geom, gi[0]->data());
                  if (gi[1]) conv_weight_grad(x.data().data(), g.data(), d, geom, gi[1]->data());
                });
}

Tensor conv_transpose2d(const Tensor& y, const Tensor& weight, Conv2dGeometry geom,
                        std::size_t out_h, std::size_t out_w) {
  require_rank(y, 4, "conv_transpose2d");
  require_rank(weight, 4, "conv_transpose2d");
  if (y.dim(1) != weight.dim(0)) {
    throw ShapeError("conv_transpose2d: channels " + std::to_string(y.dim(1)) +
                     " do not match weight " + to_string(weight.shape()));
  }
  ConvDims d{y.dim(0), weight.dim(1), out_h, out_w, weight.dim(0), weight.dim(2), weight.dim(3),
             0, 0};
  d.Ho = conv_out_size(out_h, d.kh, geom);
  d.Wo = conv_out_size(out_w, d.kw, geom);
  if (d.Ho != y.dim(2) || d.Wo != y.dim(3)) {
    throw ShapeError("conv_transpose2d: output size inconsistent with input " + to_string(y.shape()));
  }
  std::vector<double> out(d.N * d.C * d.H * d.W, 0.0);
  conv_adjoint(y.data().data(), weight.data().data(), d, geom, out.data());
  return finish("conv_transpose2d", {d.N, d.C, d.H, d.W}, std::move(out), {&y, &weight},
                [y, weight, d, geom](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  if (gi[0]) {
                    std::vector<double> tmp(d.N * d.O * d.Ho * d.Wo);
                    conv_forward(g.data(), weight.data().data(), d, geom, tmp.data());
                    for (std::size_t i = 0; i < tmp.size(); ++i) (*gi[0])[i] += tmp[i];
                  }
                  if (gi[1]) conv_weight_grad(g.data(), y.data().data(), d, geom, gi[1]->data());
                });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return finish("add", a.shape(), std::move(out), {&a, &b},
                [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (auto* s : gi)
                    if (s)
                      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return finish("sub", a.shape(), std::move(out), {&a, &b},
                [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  if (gi[0])
                    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                  if (gi[1])
                    for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return finish("mul", a.shape(), std::move(out), {&a, &b},
                [a, b](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  if (gi[0])
                    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * b[i];
                  if (gi[1])
                    for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * a[i];
                });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return finish("scale", a.shape(), std::move(out), {&a},
                [factor](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * factor;
                });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw ShapeError("add_n: no terms");
  Tensor acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

Tensor affine_diag(const Tensor& x, const Tensor& scale_v, const Tensor& shift_v) {
  auto [rows, feats] = rows_features(x);
  const bool has_scale = scale_v.size() > 0, has_shift = shift_v.size() > 0;
  if ((has_scale && scale_v.size() != feats) || (has_shift && shift_v.size() != feats)) {
    throw ShapeError("affine_diag: expected " + std::to_string(feats) + " coefficients for " +
                     to_string(x.shape()));
  }
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t f = 0; f < feats; ++f) {
      double v = x[r * feats + f];
      if (has_scale) v *= scale_v[f];
      if (has_shift) v += shift_v[f];
      out[r * feats + f] = v;
    }
  return finish("affine_diag", x.shape(), std::move(out), {&x, &scale_v, &shift_v},
                [x, scale_v, rows, feats, has_scale](std::span<const double> g,
                                                     std::span<std::vector<double>*> gi) {
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t f = 0; f < feats; ++f) {
                      double gv = g[r * feats + f];
                      if (gi[0]) (*gi[0])[r * feats + f] += has_scale ? gv * scale_v[f] : gv;
                      if (gi[1]) (*gi[1])[f] += gv * x[r * feats + f];
                      if (gi[2]) (*gi[2])[f] += gv;
                    }
                });
}

Tensor expand_channels(const Tensor& v, std::size_t spatial) {
  require_rank(v, 1, "expand_channels");
  const std::size_t C = v.size();
  std::vector<double> out(C * spatial);
  for (std::size_t c = 0; c < C; ++c)
    std::fill_n(out.begin() + static_cast<long>(c * spatial), spatial, v[c]);
  return finish("expand_channels", {C * spatial}, std::move(out), {&v},
                [C, spatial](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t s = 0; s < spatial; ++s) (*gi[0])[c] += g[c * spatial + s];
                });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[i] > 0.0 ? x[i] : 0.0;
    KinkSignature::note(x[i] > 0.0);
  }
  return finish("relu", x.shape(), std::move(out), {&x},
                [x](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i)
                    if (x[i] > 0.0) (*gi[0])[i] += g[i];
                });
}

Tensor max_with_zero(const Tensor& x) { return relu(x); }

Tensor hardtanh(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(x[i], -1.0, 1.0);
    KinkSignature::note(x[i] < -1.0 ? 0 : (x[i] > 1.0 ? 2 : 1));
  }
  return finish("hardtanh", x.shape(), std::move(out), {&x},
                [x](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  // Interior-side subgradient at +-1.
                  for (std::size_t i = 0; i < g.size(); ++i)
                    if (x[i] >= -1.0 && x[i] <= 1.0) (*gi[0])[i] += g[i];
                });
}

Tensor abs(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::abs(x[i]);
    KinkSignature::note(x[i] > 0.0 ? 2 : (x[i] < 0.0 ? 0 : 1));
  }
  return finish("abs", x.shape(), std::move(out), {&x},
                [x](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (x[i] > 0.0)
                      (*gi[0])[i] += g[i];
                    else if (x[i] < 0.0)
                      (*gi[0])[i] -= g[i];
                  }
                });
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  require_rank(x, 2, "sum_axis");
  if (axis > 1) throw ShapeError("sum_axis: axis must be 0 or 1");
  const std::size_t R = x.dim(0), C = x.dim(1);
  std::vector<double> out(axis == 0 ? C : R, 0.0);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[axis == 0 ? c : r] += x[r * C + c];
  Shape s{out.size()};
  return finish("sum_axis", std::move(s), std::move(out), {&x},
                [R, C, axis](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) (*gi[0])[r * C + c] += g[axis == 0 ? c : r];
                });
}

Tensor sum_all(const Tensor& x) {
  double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  return finish("sum_all", {}, {s}, {&x},
                [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (auto& v : *gi[0]) v += g[0];
                });
}

Tensor median_axis(const Tensor& x, std::size_t axis) {
  require_rank(x, 2, "median_axis");
  if (axis > 1) throw ShapeError("median_axis: axis must be 0 or 1");
  const std::size_t R = x.dim(0), C = x.dim(1);
  const std::size_t lines = axis == 0 ? C : R, len = axis == 0 ? R : C;
  if (len == 0) throw ShapeError("median_axis: empty reduction");
  const std::size_t rank = (len - 1) / 2;
  std::vector<double> out(lines);
  std::vector<std::size_t> chosen(lines);
  std::vector<std::size_t> idx(len);
  for (std::size_t l = 0; l < lines; ++l) {
    auto at = [&](std::size_t i) { return axis == 0 ? x[i * C + l] : x[l * C + i]; };
    std::iota(idx.begin(), idx.end(), 0);
    std::nth_element(idx.begin(), idx.begin() + static_cast<long>(rank), idx.end(),
                     [&](std::size_t p, std::size_t q) {
                       double a = at(p), b = at(q);
                       return a < b || (a == b && p < q);
                     });
    chosen[l] = idx[rank];
    out[l] = at(chosen[l]);
    KinkSignature::note(chosen[l]);
  }
  Shape s{lines};
  return finish("median_axis", std::move(s), std::move(out), {&x},
                [chosen, C, axis](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t l = 0; l < chosen.size(); ++l) {
                    std::size_t flat = axis == 0 ? chosen[l] * C + l : l * C + chosen[l];
                    (*gi[0])[flat] += g[l];
                  }
                });
}

namespace {
Tensor root_sum_squares(const Tensor& x, std::size_t axis, bool mean, const char* name) {
  require_rank(x, 2, name);
  if (axis > 1) throw ShapeError(std::string(name) + ": axis must be 0 or 1");
  const std::size_t R = x.dim(0), C = x.dim(1);
  const std::size_t lines = axis == 0 ? C : R;
  const double denom = mean ? static_cast<double>(axis == 0 ? R : C) : 1.0;
  std::vector<double> out(lines, 0.0);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[axis == 0 ? c : r] += x[r * C + c] * x[r * C + c];
  for (auto& v : out) v = std::sqrt(v / denom);
  Tensor result_values = Tensor::vector(out);
  Shape s{lines};
  return finish(name, std::move(s), std::move(out), {&x},
                [x, result_values, R, C, axis, denom](std::span<const double> g,
                                                      std::span<std::vector<double>*> gi) {
                  for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) {
                      std::size_t l = axis == 0 ? c : r;
                      double n = result_values[l];
                      if (n > 0.0) (*gi[0])[r * C + c] += g[l] * x[r * C + c] / (denom * n);
                    }
                });
}
}  // namespace

Tensor norm2_axis(const Tensor& x, std::size_t axis) {
  return root_sum_squares(x, axis, false, "norm2_axis");
}

Tensor rms_axis(const Tensor& x, std::size_t axis) {
  return root_sum_squares(x, axis, true, "rms_axis");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<double> out = x.values();
  return finish("reshape", std::move(shape), std::move(out), {&x},
                [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                });
}

Tensor scatter_diag(const Tensor& w, const std::vector<std::size_t>& rows) {
  require_rank(w, 1, "scatter_diag");
  const std::size_t n = w.size();
  std::vector<double> out(rows.size() * n, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw ShapeError("scatter_diag: row index out of range");
    out[r * n + rows[r]] = w[rows[r]];
  }
  return finish("scatter_diag", {rows.size(), n}, std::move(out), {&w},
                [rows, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t r = 0; r < rows.size(); ++r) (*gi[0])[rows[r]] += g[r * n + rows[r]];
                });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const std::size_t n = rows.front().size();
  std::vector<double> out;
  out.reserve(rows.size() * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw ShapeError("stack_rows: rows differ in length");
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  // finish() takes an initializer list, so record the entry by hand.
  for (double v : out)
    if (!std::isfinite(v)) throw NumericError("stack_rows produced a non-finite value");
  Tape* tape = Tape::active();
  bool track = false;
  if (tape)
    for (const auto& r : rows) track = track || r.requires_grad();
  auto node = std::make_shared<TensorNode>();
  node->shape = {rows.size(), n};
  node->data = std::move(out);
  node->requires_grad = track;
  node->id = next_tensor_id();
  if (track) {
    Tape::Entry e;
    for (const auto& r : rows) e.inputs.push_back(r.node());
    e.output = node;
    e.rule = [n](std::span<const double> g, std::span<std::vector<double>*> gi) {
      for (std::size_t r = 0; r < gi.size(); ++r)
        if (gi[r])
          for (std::size_t i = 0; i < n; ++i) (*gi[r])[i] += g[r * n + i];
    };
    tape->push(std::move(e));
  }
  return Tensor::from_node(std::move(node));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) throw ShapeError("cross_entropy: label count differs from batch");
  std::vector<double> probs(B * K);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= K) {
      throw std::invalid_argument("cross_entropy: label out of range at example " +
                                  std::to_string(b));
    }
    const double* z = logits.data().data() + b * K;
    double mx = *std::max_element(z, z + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - mx);
    double lse = mx + std::log(s);
    loss += lse - z[labels[b]];
    for (std::size_t k = 0; k < K; ++k) probs[b * K + k] = std::exp(z[k] - lse);
  }
  loss /= static_cast<double>(B);
  return finish("cross_entropy", {}, {loss}, {&logits},
                [probs, labels, B, K](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  const double w = g[0] / static_cast<double>(B);
                  for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t k = 0; k < K; ++k) {
                      double onehot = static_cast<int>(k) == labels[b] ? 1.0 : 0.0;
                      (*gi[0])[b * K + k] += w * (probs[b * K + k] - onehot);
                    }
                });
}

Tensor map2(const Tensor& a, const Tensor& b, const std::function<Partials(double, double)>& f,
            const std::function<int(double, double)>& kink) {
  require_same(a, b, "map2");
  std::vector<double> out(a.size()), da(a.size()), db(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    Partials p = f(a[i], b[i]);
    out[i] = p.value;
    da[i] = p.d_a;
    db[i] = p.d_b;
    if (kink) KinkSignature::note(static_cast<std::uint64_t>(kink(a[i], b[i])));
  }
  return finish("map2", a.shape(), std::move(out), {&a, &b},
                [da = std::move(da), db = std::move(db)](std::span<const double> g,
                                                         std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (gi[0]) (*gi[0])[i] += g[i] * da[i];
                    if (gi[1]) (*gi[1])[i] += g[i] * db[i];
                  }
                });
}

}  // namespace dualnet::ops
