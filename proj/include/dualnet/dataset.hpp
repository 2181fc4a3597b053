#pragma once

#include <cstdint>
#include <vector>

#include "dualnet/tensor.hpp"

namespace dualnet {

/// Labeled examples: features (n, d) and integer labels in [0, classes).
struct Dataset {
  Tensor features;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.rank() == 2 ? features.dim(1) : 0; }
  Tensor example(std::size_t i) const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
  Dataset head(std::size_t n) const;
};

/// Two Gaussian clusters (classes 0 and 1) centered at ±center_x along the
/// first axis in `dim` dimensions.
Dataset gaussian_blobs(std::size_t n, std::size_t dim, double center_x, double stddev, std::uint64_t seed);

}  // namespace dualnet
