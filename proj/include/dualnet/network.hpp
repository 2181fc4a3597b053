#pragma once

#include <functional>
#include <stdexcept>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dualnet/tensor.hpp"

namespace dualnet {

struct Linear {
  Tensor weight;  // (out, in)
  Tensor bias;    // (out)
};

struct Conv2d {
  Tensor weight;  // (O, C, kh, kw)
  Tensor bias;    // (O)
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct ReLU {};
struct HardTanh {};

/// Batch normalization with frozen statistics.  Parameters are per channel
/// for (C, H, W) inputs and per feature for flat inputs.
struct BatchNormFixed {
  Tensor gamma;
  Tensor beta;
  Tensor mean;
  Tensor var;
  double eps = 1e-5;
};

struct Add {};

/// Per-feature (scale, shift) of a BatchNormFixed layer acting on inputs of
/// the given shape; differentiable in gamma and beta.
std::pair<Tensor, Tensor> batchnorm_affine(const BatchNormFixed& bn, const Shape& in_shape);

using LayerKind = std::variant<Linear, Conv2d, ReLU, HardTanh, BatchNormFixed, Add>;

std::string kind_name(const LayerKind& kind);
bool is_activation(const LayerKind& kind);

/// Layer z_id computed from producers z_j, j < id.  Id 1 is the input.
struct LayerSpec {
  int id = 0;
  LayerKind kind;
  std::vector<int> inputs;
};

/// Structural problem in a network description, tagged with the first
/// offending layer id.
class GraphError : public std::invalid_argument {
 public:
  GraphError(int layer_id, const std::string& what);
  int layer_id() const { return layer_id_; }

 private:
  int layer_id_;
};

/// Shape inference.  Returns the shape of every z_i indexed by i - 1, or
/// throws GraphError naming the first bad layer.
std::vector<Shape> validate(const Shape& input_shape, const std::vector<LayerSpec>& layers);

/// Called with (id, value) as each layer output is produced.
using ForwardObserver = std::function<void(int, const Tensor&)>;

/// Feed-forward DAG of layers in topological order.  The last layer is the
/// output.  Immutable once constructed.
class NetworkGraph {
 public:
  NetworkGraph(Shape input_shape, std::vector<LayerSpec> layers);

  const Shape& input_shape() const { return input_shape_; }
  std::size_t input_size() const { return numel(input_shape_); }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(int id) const { return layers_.at(static_cast<std::size_t>(id - 2)); }
  const Shape& shape_of(int id) const { return shapes_.at(static_cast<std::size_t>(id - 1)); }
  std::size_t size_of(int id) const { return numel(shape_of(id)); }
  const std::vector<Shape>& shapes() const { return shapes_; }
  int output_id() const { return static_cast<int>(layers_.size()) + 1; }
  std::size_t output_dim() const { return size_of(output_id()); }

  /// z_k for a single example (any shape with input_size entries); returns a
  /// flat vector.
  Tensor forward(const Tensor& x, const ForwardObserver& observer = {}) const;
  /// Row-wise forward of a (B, input_size) batch -> (B, output_dim).
  Tensor forward_batch(const Tensor& xs, const ForwardObserver& observer = {}) const;

  /// Argmax of z_k; ties go to the smaller index.
  int predict(const Tensor& x) const;

  /// Trainable tensors in layer order: W, b for Linear/Conv2d and gamma,
  /// beta for BatchNormFixed.
  std::vector<Tensor> parameters() const;
  /// Copy of the network with parameters replaced in parameters() order.
  NetworkGraph with_parameters(const std::vector<Tensor>& params) const;

 private:
  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;
};

/// Index of the largest entry, lowest index on ties.
int argmax(std::span<const double> values);

}  // namespace dualnet
