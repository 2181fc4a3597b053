#include "dualnet/network.hpp"

#include <cmath>

#include "dualnet/ops.hpp"

namespace dualnet {

GraphError::GraphError(int layer_id, const std::string& what)
    : std::invalid_argument("layer " + std::to_string(layer_id) + ": " + what), layer_id_(layer_id) {}

std::string kind_name(const LayerKind& kind) {
  struct {
    std::string operator()(const Linear&) const { return "Linear"; }
    std::string operator()(const Conv2d&) const { return "Conv2d"; }
    std::string operator()(const ReLU&) const { return "ReLU"; }
    std::string operator()(const HardTanh&) const { return "HardTanh"; }
    std::string operator()(const BatchNormFixed&) const { return "BatchNormFixed"; }
    std::string operator()(const Add&) const { return "Add"; }
  } v;
  return std::visit(v, kind);
}

bool is_activation(const LayerKind& kind) {
  return std::holds_alternative<ReLU>(kind) || std::holds_alternative<HardTanh>(kind);
}

std::pair<Tensor, Tensor> batchnorm_affine(const BatchNormFixed& bn, const Shape& in_shape) {
  const std::size_t c = bn.gamma.size();
  std::vector<double> inv(c);
  for (std::size_t i = 0; i < c; ++i) inv[i] = 1.0 / std::sqrt(bn.var[i] + bn.eps);
  Tensor scale = ops::mul(bn.gamma, Tensor::vector(inv));
  Tensor shift = ops::sub(bn.beta, ops::mul(bn.mean.detach(), scale));
  const std::size_t spatial = numel(in_shape) / c;
  if (spatial != 1) {
    scale = ops::expand_channels(scale, spatial);
    shift = ops::expand_channels(shift, spatial);
  }
  return {scale, shift};
}

namespace {

Shape infer(const LayerSpec& spec, const std::vector<Shape>& shapes) {
  const int id = spec.id;
  auto in_shape = [&](std::size_t k) -> const Shape& {
    return shapes[static_cast<std::size_t>(spec.inputs[k] - 1)];
  };
  const bool activation = is_activation(spec.kind);
  if (std::holds_alternative<Add>(spec.kind)) {
    if (spec.inputs.size() < 2) throw GraphError(id, "Add with one input; needs at least two");
  } else if (spec.inputs.size() != 1) {
    throw GraphError(id, kind_name(spec.kind) + " takes exactly one input, got " +
                             std::to_string(spec.inputs.size()));
  }
  if (activation) return in_shape(0);

  if (const auto* lin = std::get_if<Linear>(&spec.kind)) {
    if (lin->weight.rank() != 2 || lin->bias.rank() != 1 || lin->bias.size() != lin->weight.dim(0)) {
      throw GraphError(id, "Linear weight/bias shapes " + to_string(lin->weight.shape()) + ", " +
                               to_string(lin->bias.shape()) + " are inconsistent");
    }
    if (numel(in_shape(0)) != lin->weight.dim(1)) {
      throw GraphError(id, "shape conflict: Linear expects " + std::to_string(lin->weight.dim(1)) +
                               " inputs, producer gives " + to_string(in_shape(0)));
    }
    return {lin->weight.dim(0)};
  }
  if (const auto* conv = std::get_if<Conv2d>(&spec.kind)) {
    const Shape& s = in_shape(0);
    if (s.size() != 3) throw GraphError(id, "shape conflict: Conv2d needs a (C, H, W) input, got " + to_string(s));
    if (conv->weight.rank() != 4 || conv->weight.dim(1) != s[0]) {
      throw GraphError(id, "shape conflict: Conv2d weight " + to_string(conv->weight.shape()) +
                               " does not match input " + to_string(s));
    }
    if (conv->bias.rank() != 1 || conv->bias.size() != conv->weight.dim(0)) {
      throw GraphError(id, "Conv2d bias must have one entry per output channel");
    }
    ops::Conv2dGeometry g{conv->stride, conv->pad};
    try {
      return {conv->weight.dim(0), ops::conv_out_size(s[1], conv->weight.dim(2), g),
              ops::conv_out_size(s[2], conv->weight.dim(3), g)};
    } catch (const ShapeError& e) {
      throw GraphError(id, std::string("shape conflict: ") + e.what());
    }
  }
  if (const auto* bn = std::get_if<BatchNormFixed>(&spec.kind)) {
    const Shape& s = in_shape(0);
    const std::size_t c = s.size() == 3 ? s[0] : numel(s);
    for (const Tensor* t : {&bn->gamma, &bn->beta, &bn->mean, &bn->var}) {
      if (t->size() != c) {
        throw GraphError(id, "shape conflict: BatchNormFixed expects " + std::to_string(c) +
                                 " statistics, got " + std::to_string(t->size()));
      }
    }
    for (std::size_t i = 0; i < c; ++i) {
      if (!(bn->var[i] + bn->eps > 0.0)) throw GraphError(id, "BatchNormFixed variance plus eps must be positive");
    }
    return s;
  }
  // Add
  const Shape& first = in_shape(0);
  for (std::size_t k = 1; k < spec.inputs.size(); ++k) {
    if (in_shape(k) != first) {
      throw GraphError(id, "shape conflict: Add inputs " + to_string(first) + " and " +
                               to_string(in_shape(k)));
    }
  }
  return first;
}

}  // namespace

std::vector<Shape> validate(const Shape& input_shape, const std::vector<LayerSpec>& layers) {
  if (numel(input_shape) == 0) throw GraphError(1, "empty input shape");
  if (layers.empty()) throw GraphError(1, "network has no layers");
  std::vector<Shape> shapes{input_shape};
  for (std::size_t p = 0; p < layers.size(); ++p) {
    const LayerSpec& spec = layers[p];
    const int expected = static_cast<int>(p) + 2;
    if (spec.id != expected) {
      throw GraphError(spec.id, "layer ids must be consecutive from 2; expected " + std::to_string(expected));
    }
    for (int j : spec.inputs) {
      if (j >= spec.id) throw GraphError(spec.id, "forward reference to layer " + std::to_string(j));
      if (j < 1) throw GraphError(spec.id, "dangling input id " + std::to_string(j));
    }
    shapes.push_back(infer(spec, shapes));
  }
  return shapes;
}

NetworkGraph::NetworkGraph(Shape input_shape, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  shapes_ = validate(input_shape_, layers_);
}

Tensor NetworkGraph::forward_batch(const Tensor& xs, const ForwardObserver& observer) const {
  if (xs.rank() != 2 || xs.dim(1) != input_size()) {
    throw ShapeError("forward: expected (batch, " + std::to_string(input_size()) + ") input, got " +
                     to_string(xs.shape()));
  }
  const std::size_t batch = xs.dim(0);
  std::vector<Tensor> z(layers_.size() + 1);
  z[0] = xs;
  if (observer) observer(1, xs);
  for (const auto& spec : layers_) {
    const Tensor& in = z[static_cast<std::size_t>(spec.inputs[0] - 1)];
    const Shape& in_shape = shape_of(spec.inputs[0]);
    Tensor out;
    if (const auto* lin = std::get_if<Linear>(&spec.kind)) {
      out = ops::affine_diag(ops::matmul(in, lin->weight, true), Tensor(), lin->bias);
    } else if (const auto* conv = std::get_if<Conv2d>(&spec.kind)) {
      const Shape& os = shape_of(spec.id);
      Tensor x4 = ops::reshape(in, {batch, in_shape[0], in_shape[1], in_shape[2]});
      Tensor y = ops::conv2d(x4, conv->weight, {conv->stride, conv->pad});
      out = ops::affine_diag(ops::reshape(y, {batch, numel(os)}), Tensor(),
                             ops::expand_channels(conv->bias, os[1] * os[2]));
    } else if (std::holds_alternative<ReLU>(spec.kind)) {
      out = ops::relu(in);
    } else if (std::holds_alternative<HardTanh>(spec.kind)) {
      out = ops::hardtanh(in);
    } else if (const auto* bn = std::get_if<BatchNormFixed>(&spec.kind)) {
      auto [scale, shift] = batchnorm_affine(*bn, in_shape);
      out = ops::affine_diag(in, scale, shift);
    } else {
      std::vector<Tensor> terms;
      for (int j : spec.inputs) terms.push_back(z[static_cast<std::size_t>(j - 1)]);
      out = ops::add_n(terms);
    }
    if (observer) observer(spec.id, out);
    z[static_cast<std::size_t>(spec.id - 1)] = out;
  }
  return z.back();
}

Tensor NetworkGraph::forward(const Tensor& x, const ForwardObserver& observer) const {
  if (x.size() != input_size()) {
    throw ShapeError("forward: input has " + std::to_string(x.size()) + " entries, network expects " +
                     to_string(input_shape_));
  }
  Tensor out = forward_batch(ops::reshape(x, {1, input_size()}), observer);
  return ops::reshape(out, {output_dim()});
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

int NetworkGraph::predict(const Tensor& x) const { return argmax(forward(x.detach()).data()); }

std::vector<Tensor> NetworkGraph::parameters() const {
  std::vector<Tensor> out;
  for (const auto& spec : layers_) {
    if (const auto* lin = std::get_if<Linear>(&spec.kind)) {
      out.push_back(lin->weight);
      out.push_back(lin->bias);
    } else if (const auto* conv = std::get_if<Conv2d>(&spec.kind)) {
      out.push_back(conv->weight);
      out.push_back(conv->bias);
    } else if (const auto* bn = std::get_if<BatchNormFixed>(&spec.kind)) {
      out.push_back(bn->gamma);
      out.push_back(bn->beta);
    }
  }
  return out;
}

NetworkGraph NetworkGraph::with_parameters(const std::vector<Tensor>& params) const {
  std::vector<LayerSpec> layers = layers_;
  std::size_t next = 0;
  auto take = [&](const Tensor& current) {
    if (next >= params.size()) throw std::invalid_argument("with_parameters: too few tensors");
    const Tensor& p = params[next++];
    if (p.shape() != current.shape()) {
      throw ShapeError("with_parameters: expected " + to_string(current.shape()) + ", got " +
                       to_string(p.shape()));
    }
    return p;
  };
  for (auto& spec : layers) {
    if (auto* lin = std::get_if<Linear>(&spec.kind)) {
      lin->weight = take(lin->weight);
      lin->bias = take(lin->bias);
    } else if (auto* conv = std::get_if<Conv2d>(&spec.kind)) {
      conv->weight = take(conv->weight);
      conv->bias = take(conv->bias);
    } else if (auto* bn = std::get_if<BatchNormFixed>(&spec.kind)) {
      bn->gamma = take(bn->gamma);
      bn->beta = take(bn->beta);
    }
  }
  if (next != params.size()) throw std::invalid_argument("with_parameters: too many tensors");
  return NetworkGraph(input_shape_, std::move(layers));
}

}  // namespace dualnet
