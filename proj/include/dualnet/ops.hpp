#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "dualnet/tensor.hpp"

// Differentiable primitives.  Every primitive validates shapes, rejects
// non-finite results, and records itself on the active tape when any input
// requires a gradient.
namespace dualnet::ops {

// (m x k) @ (k x n).  With transpose_b, b is (n x k).
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
Tensor transpose(const Tensor& a);

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// x: (N, C, H, W), weight: (O, C, kh, kw) -> (N, O, H', W').  No bias.
Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dGeometry geom);
// Adjoint of conv2d with respect to its input: y (N, O, H', W') -> (N, C, H, W).
Tensor conv_transpose2d(const Tensor& y, const Tensor& weight, Conv2dGeometry geom,
                        std::size_t out_h, std::size_t out_w);
std::size_t conv_out_size(std::size_t in, std::size_t kernel, Conv2dGeometry geom);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor neg(const Tensor& a);
Tensor add_n(const std::vector<Tensor>& terms);

// x viewed as (N, F) with F = trailing features; y = x * scale + shift
// broadcast over rows.  Either of scale/shift may be an empty Tensor().
Tensor affine_diag(const Tensor& x, const Tensor& scale, const Tensor& shift);
// Repeats each of the C entries `spatial` times -> (C * spatial).
Tensor expand_channels(const Tensor& v, std::size_t spatial);

Tensor relu(const Tensor& x);
Tensor max_with_zero(const Tensor& x);
Tensor hardtanh(const Tensor& x);
Tensor abs(const Tensor& x);

// 2-D reductions.  axis 0 reduces rows (result has `cols` entries).
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor sum_all(const Tensor& x);
// Sample median; even counts take the lower middle order statistic and the
// gradient flows to that single entry.
Tensor median_axis(const Tensor& x, std::size_t axis);
// sqrt(sum of squares) and sqrt(mean of squares) along an axis.
Tensor norm2_axis(const Tensor& x, std::size_t axis);
Tensor rms_axis(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
// Rows `rows` of diag(w): result (rows.size() x w.size()).
Tensor scatter_diag(const Tensor& w, const std::vector<std::size_t>& rows);
// Stacks equal-length 1-D tensors into a matrix.
Tensor stack_rows(const std::vector<Tensor>& rows);
// Mean softmax cross-entropy of logits (B x K) against labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Scalar rule used by map2: value plus partial derivatives.
struct Partials {
  double value;
  double d_a;
  double d_b;
};
// Elementwise binary map with caller-supplied derivatives.  `kink` returns
// a branch identifier recorded in the active KinkSignature.
Tensor map2(const Tensor& a, const Tensor& b, const std::function<Partials(double, double)>& f,
            const std::function<int(double, double)>& kink = {});

}  // namespace dualnet::ops
