#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dualnet/network.hpp"
#include "dualnet/ops.hpp"
#include "dualnet/tensor.hpp"

namespace dualnet {

/// Elementwise pre-activation bounds for one activation layer.
struct PreactBounds {
  Tensor lower;
  Tensor upper;
};

/// Dual of one primal layer z_i = f_i(z_j, ...).
///
/// Dual variables are stored as rows: a (R, n) tensor holds R independent
/// dual vectors.  `backward` returns, for each producer, the contribution
/// A_jᵀν to that producer's dual variable.  `objective` returns h(ν) for
/// every row.  `propagate` applies the linear part A of the layer to rows
/// (the forward pass of the dual network used for bound computation) and
/// `propagate_affine` additionally adds the layer's offset.
class DualLayer {
 public:
  DualLayer(int id, std::vector<int> inputs, std::vector<std::size_t> in_sizes, std::size_t out_size);
  virtual ~DualLayer() = default;

  virtual std::string kind() const = 0;
  /// Affine backward operators and piecewise-linear h.
  virtual bool linear() const { return true; }

  virtual std::vector<Tensor> backward(const Tensor& nu) const = 0;
  virtual Tensor objective(const Tensor& nu) const = 0;
  virtual Tensor propagate(const std::vector<Tensor>& rows) const = 0;
  virtual Tensor propagate_affine(const std::vector<Tensor>& rows) const = 0;

  int id() const { return id_; }
  const std::vector<int>& inputs() const { return inputs_; }
  std::size_t in_size(std::size_t k) const { return in_sizes_.at(k); }
  std::size_t out_size() const { return out_size_; }

 protected:
  void check_rows(const Tensor& rows, std::size_t expected, const char* what) const;

 private:
  int id_;
  std::vector<int> inputs_;
  std::vector<std::size_t> in_sizes_;
  std::size_t out_size_;
};

/// Activation dual layer in slope/offset form.  With ν the dual variable at
/// the activation output, the backward map is ν ↦ s ⊙ ν and
///   h(ν) = Σ_t w_t |ν_t| + m_t ν_t,
/// where [m - w, m + w] is the range of f(z) - s z over the relaxation.
class ActivationDual : public DualLayer {
 public:
  ActivationDual(int id, int input, PreactBounds bounds, Tensor slope, Tensor weight, Tensor offset,
                 std::string kind);

  std::string kind() const override { return kind_; }
  std::vector<Tensor> backward(const Tensor& nu) const override;
  Tensor objective(const Tensor& nu) const override;
  Tensor propagate(const std::vector<Tensor>& rows) const override;
  Tensor propagate_affine(const std::vector<Tensor>& rows) const override;

  const PreactBounds& bounds() const { return bounds_; }
  const Tensor& slope() const { return slope_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& offset() const { return offset_; }
  /// Units with nonzero relaxation width, in increasing order.
  const std::vector<std::size_t>& active_units() const { return active_; }

 private:
  PreactBounds bounds_;
  Tensor slope_, weight_, offset_;
  std::string kind_;
  std::vector<std::size_t> active_;
};

/// Scalar relaxation coefficients of a single unit.
struct UnitCoeffs {
  double slope;
  double weight;
  double offset;
};
UnitCoeffs relu_unit(double lower, double upper);
UnitCoeffs hardtanh_unit(double lower, double upper);

std::unique_ptr<DualLayer> dual_linear(int id, int input, const Linear& layer);
std::unique_ptr<DualLayer> dual_conv(int id, int input, const Conv2d& layer, const Shape& in_shape,
                                     const Shape& out_shape);
std::unique_ptr<ActivationDual> dual_relu(int id, int input, const PreactBounds& bounds);
std::unique_ptr<ActivationDual> dual_hardtanh(int id, int input, const PreactBounds& bounds);
std::unique_ptr<DualLayer> dual_batchnorm(int id, int input, const BatchNormFixed& layer,
                                          const Shape& in_shape);
std::unique_ptr<DualLayer> dual_add(int id, const std::vector<int>& inputs, std::size_t size);

/// Dual layer for primal layer `id` of `net`; activations need bounds.
std::unique_ptr<DualLayer> make_dual_layer(const NetworkGraph& net, int id, const PreactBounds* bounds);

}  // namespace dualnet
