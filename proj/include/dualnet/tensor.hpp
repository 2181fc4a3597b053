#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualnet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operand shapes do not conform.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation would produce NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::uint64_t id = 0;
};

/// Immutable dense row-major array of doubles.
///
/// Copies share storage.  A tensor created with `requires_grad` is a leaf
/// whose gradient is reported by `backward`; results of primitives applied
/// while a tape is recording inherit the flag.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->data.size(); }
  std::span<const double> data() const { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t id() const { return node_->id; }

  /// Same values, new identity, not tracked.
  Tensor detach() const;
  /// Same values, new identity, marked as a gradient leaf.
  Tensor as_parameter() const;

  const std::shared_ptr<const TensorNode>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<const TensorNode> node);

 private:
  explicit Tensor(std::shared_ptr<const TensorNode> node);
  std::shared_ptr<const TensorNode> node_;
};

std::uint64_t next_tensor_id();

}  // namespace dualnet
