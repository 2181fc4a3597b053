#include "dualnet/dataset.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace dualnet {

Tensor Dataset::example(std::size_t i) const {
  const std::size_t d = dim();
  auto begin = features.data().begin() + static_cast<long>(i * d);
  return Tensor::vector(std::vector<double>(begin, begin + static_cast<long>(d)));
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  const std::size_t d = dim();
  std::vector<double> v;
  v.reserve(indices.size() * d);
  Dataset out;
  out.classes = classes;
  for (std::size_t i : indices) {
    if (i >= size()) throw std::out_of_range("dataset index out of range");
    auto begin = features.data().begin() + static_cast<long>(i * d);
    v.insert(v.end(), begin, begin + static_cast<long>(d));
    out.labels.push_back(labels[i]);
  }
  out.features = Tensor({indices.size(), d}, std::move(v));
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return subset(idx);
}

Dataset gaussian_blobs(std::size_t n, std::size_t dim, double center_x, double stddev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, stddev);
  Dataset out;
  out.classes = 2;
  std::vector<double> v(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    out.labels.push_back(y);
    for (std::size_t j = 0; j < dim; ++j) v[i * dim + j] = noise(rng) + (j == 0 ? (y ? center_x : -center_x) : 0.0);
  }
  out.features = Tensor({n, dim}, std::move(v));
  return out;
}

}  // namespace dualnet
