#include "dualnet/duallayers.hpp"

#include <algorithm>
#include <array>

#include "dualnet/autodiff.hpp"

namespace dualnet {

DualLayer::DualLayer(int id, std::vector<int> inputs, std::vector<std::size_t> in_sizes,
                     std::size_t out_size)
    : id_(id), inputs_(std::move(inputs)), in_sizes_(std::move(in_sizes)), out_size_(out_size) {}

void DualLayer::check_rows(const Tensor& rows, std::size_t expected, const char* what) const {
  if (rows.rank() != 2 || rows.dim(1) != expected) {
    throw ShapeError("dual layer " + std::to_string(id_) + " (" + kind() + ") " + what + ": expected (R, " +
                     std::to_string(expected) + "), got " + to_string(rows.shape()));
  }
}

namespace {

Tensor row_dot(const Tensor& nu, const Tensor& v) {
  const std::size_t rows = nu.dim(0);
  return ops::reshape(ops::matmul(nu, ops::reshape(v, {v.size(), 1})), {rows});
}

// Forward-mode value with partials in (lower, upper).
struct Fwd {
  double v, dl, du;
};
Fwd operator+(Fwd a, Fwd b) { return {a.v + b.v, a.dl + b.dl, a.du + b.du}; }
Fwd operator-(Fwd a, Fwd b) { return {a.v - b.v, a.dl - b.dl, a.du - b.du}; }
Fwd operator*(Fwd a, Fwd b) { return {a.v * b.v, a.dl * b.v + a.v * b.dl, a.du * b.v + a.v * b.du}; }
Fwd operator/(Fwd a, Fwd b) {
  double q = a.v / b.v;
  return {q, (a.dl - q * b.dl) / b.v, (a.du - q * b.du) / b.v};
}
Fwd operator*(double c, Fwd a) { return {c * a.v, c * a.dl, c * a.du}; }
Fwd cst(double c) { return {c, 0.0, 0.0}; }

struct Coeffs {
  Fwd s, w, m;
  int branch;
};

Coeffs from_range(Fwd s, std::initializer_list<Fwd> values, int case_id) {
  // [lo, hi] is the range of f(z) - s z over the relaxation vertices.
  int hi = 0, lo = 0, k = 0;
  std::array<Fwd, 3> v{};
  for (Fwd x : values) v[static_cast<std::size_t>(k++)] = x;
  for (int i = 1; i < k; ++i) {
    if (v[static_cast<std::size_t>(i)].v > v[static_cast<std::size_t>(hi)].v) hi = i;
    if (v[static_cast<std::size_t>(i)].v < v[static_cast<std::size_t>(lo)].v) lo = i;
  }
  Fwd h = v[static_cast<std::size_t>(hi)], l = v[static_cast<std::size_t>(lo)];
  return {s, 0.5 * (h - l), 0.5 * (h + l), case_id * 16 + hi * 4 + lo};
}

Coeffs relu_coeffs(Fwd l, Fwd u) {
  if (u.v <= 0.0) return {cst(0), cst(0), cst(0), 0};
  if (l.v >= 0.0) return {cst(1), cst(0), cst(0), 1};
  Fwd s = u / (u - l);
  Fwd half = -0.5 * (s * l);
  return {s, half, half, 2};
}

Coeffs hardtanh_coeffs(Fwd l, Fwd u) {
  const Fwd one = cst(1);
  if (u.v <= -1.0) return {cst(0), cst(0), cst(-1), 1};
  if (l.v >= 1.0) return {cst(0), cst(0), cst(1), 2};
  if (l.v >= -1.0 && u.v <= 1.0) return {one, cst(0), cst(0), 3};
  if (l.v < -1.0 && u.v <= 1.0) {
    // Vertices (l, -1), (-1, -1), (u, u).
    Fwd s = (one + u) / (u - l);
    return from_range(s, {cst(0) - (s * l + one), s - one}, 4);
  }
  if (l.v >= -1.0) {
    // Vertices (l, l), (1, 1), (u, 1).
    Fwd s = (one - l) / (u - l);
    return from_range(s, {l - s * l, one - s}, 5);
  }
  // Vertices (l, -1), (-1, -1), (1, 1), (u, 1) with the upper-line slope.
  Fwd s = cst(2) / (one - l);
  return from_range(s, {one - s, s - one, one - u * s}, 6);
}

using CoeffFn = Coeffs (*)(Fwd, Fwd);

Tensor coefficient(const Tensor& lower, const Tensor& upper, CoeffFn fn, int which) {
  auto pick = [which](const Coeffs& c) -> const Fwd& { return which == 0 ? c.s : which == 1 ? c.w : c.m; };
  return ops::map2(
      lower, upper,
      [fn, pick](double l, double u) {
        Coeffs c = fn({l, 1.0, 0.0}, {u, 0.0, 1.0});
        const Fwd& f = pick(c);
        return ops::Partials{f.v, f.dl, f.du};
      },
      [fn](double l, double u) { return fn(cst(l), cst(u)).branch; });
}

void check_bounds(const PreactBounds& b, const char* kind) {
  if (b.lower.shape() != b.upper.shape()) throw ShapeError(std::string(kind) + ": bound shapes differ");
  for (std::size_t i = 0; i < b.lower.size(); ++i) {
    if (b.lower[i] > b.upper[i]) {
      throw std::invalid_argument(std::string(kind) + ": lower bound exceeds upper bound at unit " +
                                  std::to_string(i));
    }
  }
}

std::unique_ptr<ActivationDual> make_activation(int id, int input, const PreactBounds& bounds, CoeffFn fn,
                                                const char* kind) {
  check_bounds(bounds, kind);
  Tensor lower = ops::reshape(bounds.lower, {bounds.lower.size()});
  Tensor upper = ops::reshape(bounds.upper, {bounds.upper.size()});
  Tensor s = coefficient(lower, upper, fn, 0);
  Tensor w = coefficient(lower, upper, fn, 1);
  Tensor m = coefficient(lower, upper, fn, 2);
  return std::make_unique<ActivationDual>(id, input, PreactBounds{lower, upper}, s, w, m, kind);
}

class LinearDual : public DualLayer {
 public:
  LinearDual(int id, int input, Linear layer)
      : DualLayer(id, {input}, {layer.weight.dim(1)}, layer.weight.dim(0)), layer_(std::move(layer)) {}
  std::string kind() const override { return "Linear"; }
  std::vector<Tensor> backward(const Tensor& nu) const override {
    check_rows(nu, out_size(), "backward");
    return {ops::matmul(nu, layer_.weight)};
  }
  Tensor objective(const Tensor& nu) const override {
    check_rows(nu, out_size(), "objective");
    return row_dot(nu, layer_.bias);
  }
  Tensor propagate(const std::vector<Tensor>& rows) const override {
    check_rows(rows.at(0), in_size(0), "propagate");
    return ops::matmul(rows[0], layer_.weight, true);
  }
  Tensor propagate_affine(const std::vector<Tensor>& rows) const override {
    return ops::affine_diag(propagate(rows), Tensor(), layer_.bias);
  }

 private:
  Linear layer_;
};

class ConvDual : public DualLayer {
 public:
  ConvDual(int id, int input, Conv2d layer, Shape in_shape, Shape out_shape)
      : DualLayer(id, {input}, {numel(in_shape)}, numel(out_shape)),
        layer_(std::move(layer)),
        in_(std::move(in_shape)),
        out_(std::move(out_shape)),
        bias_(ops::expand_channels(layer_.bias, out_[1] * out_[2])) {}
  std::string kind() const override { return "Conv2d"; }
  std::vector<Tensor> backward(const Tensor& nu) const override {
    check_rows(nu, out_size(), "backward");
    const std::size_t r = nu.dim(0);
    Tensor y = ops::conv_transpose2d(ops::reshape(nu, {r, out_[0], out_[1], out_[2]}), layer_.weight,
                                     {layer_.stride, layer_.pad}, in_[1], in_[2]);
    return {ops::reshape(y, {r, in_size(0)})};
  }
  Tensor objective(const Tensor& nu) const override {
    check_rows(nu, out_size(), "objective");
    return row_dot(nu, bias_);
  }
  Tensor propagate(const std::vector<Tensor>& rows) const override {
    check_rows(rows.at(0), in_size(0), "propagate");
    const std::size_t r = rows[0].dim(0);
    Tensor y = ops::conv2d(ops::reshape(rows[0], {r, in_[0], in_[1], in_[2]}), layer_.weight,
                           {layer_.stride, layer_.pad});
    return ops::reshape(y, {r, out_size()});
  }
  Tensor propagate_affine(const std::vector<Tensor>& rows) const override {
    return ops::affine_diag(propagate(rows), Tensor(), bias_);
  }

 private:
  Conv2d layer_;
  Shape in_, out_;
  Tensor bias_;
};

class DiagDual : public DualLayer {
 public:
  DiagDual(int id, int input, Tensor scale, Tensor shift)
      : DualLayer(id, {input}, {scale.size()}, scale.size()), scale_(std::move(scale)), shift_(std::move(shift)) {}
  std::string kind() const override { return "BatchNormFixed"; }
  std::vector<Tensor> backward(const Tensor& nu) const override {
    check_rows(nu, out_size(), "backward");
    return {ops::affine_diag(nu, scale_, Tensor())};
  }
  Tensor objective(const Tensor& nu) const override {
    check_rows(nu, out_size(), "objective");
    return row_dot(nu, shift_);
  }
  Tensor propagate(const std::vector<Tensor>& rows) const override {
    check_rows(rows.at(0), in_size(0), "propagate");
    return ops::affine_diag(rows[0], scale_, Tensor());
  }
  Tensor propagate_affine(const std::vector<Tensor>& rows) const override {
    check_rows(rows.at(0), in_size(0), "propagate");
    return ops::affine_diag(rows[0], scale_, shift_);
  }

 private:
  Tensor scale_, shift_;
};

class AddDual : public DualLayer {
 public:
  AddDual(int id, const std::vector<int>& inputs, std::size_t size)
      : DualLayer(id, inputs, std::vector<std::size_t>(inputs.size(), size), size) {}
  std::string kind() const override { return "Add"; }
  std::vector<Tensor> backward(const Tensor& nu) const override {
    check_rows(nu, out_size(), "backward");
    return std::vector<Tensor>(inputs().size(), nu);
  }
  Tensor objective(const Tensor& nu) const override {
    check_rows(nu, out_size(), "objective");
    return Tensor::zeros({nu.dim(0)});
  }
  Tensor propagate(const std::vector<Tensor>& rows) const override {
    if (rows.size() != inputs().size()) throw ShapeError("Add dual: wrong number of operands");
    for (const auto& r : rows) check_rows(r, out_size(), "propagate");
    return ops::add_n(rows);
  }
  Tensor propagate_affine(const std::vector<Tensor>& rows) const override { return propagate(rows); }
};

}  // namespace

ActivationDual::ActivationDual(int id, int input, PreactBounds bounds, Tensor slope, Tensor weight,
                               Tensor offset, std::string kind)
    : DualLayer(id, {input}, {slope.size()}, slope.size()),
      bounds_(std::move(bounds)),
      slope_(std::move(slope)),
      weight_(std::move(weight)),
      offset_(std::move(offset)),
      kind_(std::move(kind)) {
  for (std::size_t i = 0; i < weight_.size(); ++i)
    if (weight_[i] != 0.0) active_.push_back(i);
}

std::vector<Tensor> ActivationDual::backward(const Tensor& nu) const {
  check_rows(nu, out_size(), "backward");
  return {ops::affine_diag(nu, slope_, Tensor())};
}

Tensor ActivationDual::objective(const Tensor& nu) const {
  check_rows(nu, out_size(), "objective");
  Tensor terms = ops::add(ops::affine_diag(ops::abs(nu), weight_, Tensor()), ops::affine_diag(nu, offset_, Tensor()));
  return ops::sum_axis(terms, 1);
}

Tensor ActivationDual::propagate(const std::vector<Tensor>& rows) const {
  check_rows(rows.at(0), in_size(0), "propagate");
  return ops::affine_diag(rows[0], slope_, Tensor());
}

Tensor ActivationDual::propagate_affine(const std::vector<Tensor>& rows) const {
  check_rows(rows.at(0), in_size(0), "propagate");
  return ops::affine_diag(rows[0], slope_, offset_);
}

UnitCoeffs relu_unit(double lower, double upper) {
  if (lower > upper) throw std::invalid_argument("ReLU: lower bound exceeds upper bound");
  Coeffs c = relu_coeffs(cst(lower), cst(upper));
  return {c.s.v, c.w.v, c.m.v};
}

UnitCoeffs hardtanh_unit(double lower, double upper) {
  if (lower > upper) throw std::invalid_argument("HardTanh: lower bound exceeds upper bound");
  Coeffs c = hardtanh_coeffs(cst(lower), cst(upper));
  return {c.s.v, c.w.v, c.m.v};
}

std::unique_ptr<DualLayer> dual_linear(int id, int input, const Linear& layer) {
  return std::make_unique<LinearDual>(id, input, layer);
}

std::unique_ptr<DualLayer> dual_conv(int id, int input, const Conv2d& layer, const Shape& in_shape,
                                     const Shape& out_shape) {
  return std::make_unique<ConvDual>(id, input, layer, in_shape, out_shape);
}

std::unique_ptr<ActivationDual> dual_relu(int id, int input, const PreactBounds& bounds) {
  return make_activation(id, input, bounds, relu_coeffs, "ReLU");
}

std::unique_ptr<ActivationDual> dual_hardtanh(int id, int input, const PreactBounds& bounds) {
  return make_activation(id, input, bounds, hardtanh_coeffs, "HardTanh");
}

std::unique_ptr<DualLayer> dual_batchnorm(int id, int input, const BatchNormFixed& layer, const Shape& in_shape) {
  for (std::size_t i = 0; i < layer.var.size(); ++i) {
    if (!(layer.var[i] + layer.eps > 0.0)) throw std::invalid_argument("BatchNormFixed: nonpositive variance");
  }
  auto [scale, shift] = batchnorm_affine(layer, in_shape);
  return std::make_unique<DiagDual>(id, input, scale, shift);
}

std::unique_ptr<DualLayer> dual_add(int id, const std::vector<int>& inputs, std::size_t size) {
  if (inputs.size() < 2) throw std::invalid_argument("Add dual needs at least two inputs");
  return std::make_unique<AddDual>(id, inputs, size);
}

std::unique_ptr<DualLayer> make_dual_layer(const NetworkGraph& net, int id, const PreactBounds* bounds) {
  const LayerSpec& spec = net.layer(id);
  const int in = spec.inputs.front();
  if (const auto* lin = std::get_if<Linear>(&spec.kind)) return dual_linear(id, in, *lin);
  if (const auto* conv = std::get_if<Conv2d>(&spec.kind)) return dual_conv(id, in, *conv, net.shape_of(in), net.shape_of(id));
  if (const auto* bn = std::get_if<BatchNormFixed>(&spec.kind)) return dual_batchnorm(id, in, *bn, net.shape_of(in));
  if (std::holds_alternative<Add>(spec.kind)) return dual_add(id, spec.inputs, net.size_of(id));
  if (!bounds) throw std::invalid_argument("layer " + std::to_string(id) + ": activation dual needs bounds");
  if (std::holds_alternative<ReLU>(spec.kind)) return dual_relu(id, in, *bounds);
  return dual_hardtanh(id, in, *bounds);
}

}  // namespace dualnet
