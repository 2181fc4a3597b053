#include "dualnet/architectures.hpp"

#include <cmath>
#include <stdexcept>

#include "dualnet/projest.hpp"

namespace dualnet {

namespace {

std::size_t parse_count(const std::string& s, const std::string& text) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw std::invalid_argument("bad architecture '" + text + "': '" + s + "' is not a positive integer");
  }
  const unsigned long long v = std::stoull(s);
  if (v == 0 || v > 100000) throw std::invalid_argument("bad architecture '" + text + "': size out of range");
  return static_cast<std::size_t>(v);
}

class Builder {
 public:
  Builder(Shape input, std::uint64_t seed) : shape_(std::move(input)), seed_(seed) {}

  void linear(std::size_t out) {
    const std::size_t in = numel(shape_);
    add(Linear{weights({out, in}, in), Tensor::zeros({out})}, {out});
  }

  void conv(std::size_t filters, std::size_t kernel, std::size_t stride, std::size_t pad) {
    if (shape_.size() != 3) throw std::invalid_argument("convolution after a flat layer");
    const std::size_t c = shape_[0];
    if (shape_[1] + 2 * pad < kernel || shape_[2] + 2 * pad < kernel) {
      throw std::invalid_argument("input too small for a " + std::to_string(kernel) + "x" + std::to_string(kernel) +
                                  " convolution");
    }
    const std::size_t oh = (shape_[1] + 2 * pad - kernel) / stride + 1;
    const std::size_t ow = (shape_[2] + 2 * pad - kernel) / stride + 1;
    add(Conv2d{weights({filters, c, kernel, kernel}, c * kernel * kernel), Tensor::zeros({filters}), stride, pad},
        {filters, oh, ow});
  }

  void relu() { add(ReLU{}, shape_); }

  NetworkGraph finish(const Shape& input) { return NetworkGraph(input, std::move(layers_)); }

 private:
  Tensor weights(Shape shape, std::size_t fan_in) {
    const std::size_t n = numel(shape);
    Tensor w = sample_normal(1, n, derive_seed(seed_, layers_.size()));
    std::vector<double> v = w.values();
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : v) x *= scale;
    return Tensor(std::move(shape), std::move(v));
  }

  void add(LayerKind kind, Shape out) {
    const int id = static_cast<int>(layers_.size()) + 2;
    layers_.push_back({id, std::move(kind), {id - 1}});
    shape_ = std::move(out);
  }

  Shape shape_;
  std::uint64_t seed_;
  std::vector<LayerSpec> layers_;
};

}  // namespace

ArchSpec parse_arch(const std::string& text) {
  ArchSpec spec;
  spec.text = text;
  if (text == "conv-small") {
    spec.kind = ArchSpec::Kind::conv_small;
    return spec;
  }
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw std::invalid_argument("unknown architecture '" + text + "'");
  const std::string head = text.substr(0, colon), body = text.substr(colon + 1);
  if (head == "mlp") {
    spec.kind = ArchSpec::Kind::mlp;
    std::size_t start = 0;
    while (true) {
      const auto dash = body.find('-', start);
      spec.widths.push_back(parse_count(body.substr(start, dash - start), text));
      if (dash == std::string::npos) break;
      start = dash + 1;
    }
    if (spec.widths.size() < 2) throw std::invalid_argument("bad architecture '" + text + "': mlp needs >= 2 widths");
  } else if (head == "wide" || head == "deep") {
    spec.kind = head == "wide" ? ArchSpec::Kind::wide : ArchSpec::Kind::deep;
    spec.k = parse_count(body, text);
  } else {
    throw std::invalid_argument("unknown architecture '" + text + "'");
  }
  return spec;
}

Shape image_shape(std::size_t d) {
  for (std::size_t c : {1u, 3u}) {
    if (d % c != 0) continue;
    const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d / c))));
    if (s * s * c == d) return {c, s, s};
  }
  throw std::invalid_argument("input of " + std::to_string(d) + " features is not a square image");
}

NetworkGraph build_network(const ArchSpec& spec, std::size_t input_dim, std::size_t classes, std::uint64_t seed) {
  if (spec.kind == ArchSpec::Kind::mlp) {
    if (spec.widths.front() != input_dim) {
      throw std::invalid_argument("architecture '" + spec.text + "' expects " + std::to_string(spec.widths.front()) +
                                  " inputs but the data has " + std::to_string(input_dim));
    }
    if (spec.widths.back() != classes) {
      throw std::invalid_argument("architecture '" + spec.text + "' has " + std::to_string(spec.widths.back()) +
                                  " outputs but the data has " + std::to_string(classes) + " classes");
    }
    Builder b({input_dim}, seed);
    for (std::size_t i = 1; i < spec.widths.size(); ++i) {
      b.linear(spec.widths[i]);
      if (i + 1 < spec.widths.size()) b.relu();
    }
    return b.finish({input_dim});
  }
  const Shape image = image_shape(input_dim);
  Builder b(image, seed);
  std::size_t fc = 100;
  switch (spec.kind) {
    case ArchSpec::Kind::conv_small:
      b.conv(16, 4, 2, 1), b.relu();
      b.conv(32, 4, 2, 1), b.relu();
      break;
    case ArchSpec::Kind::wide:
      b.conv(4 * spec.k, 4, 2, 1), b.relu();
      b.conv(8 * spec.k, 4, 2, 1), b.relu();
      fc = 128 * spec.k;
      break;
    case ArchSpec::Kind::deep:
      for (std::size_t filters : {8u, 16u}) {
        b.conv(filters, 4, 2, 1), b.relu();
        for (std::size_t i = 1; i < spec.k; ++i) b.conv(filters, 3, 1, 1), b.relu();
      }
      break;
    case ArchSpec::Kind::mlp:
      break;
  }
  b.linear(fc);
  b.relu();
  b.linear(classes);
  return b.finish(image);
}

}  // namespace dualnet
