#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dualnet/network.hpp"

namespace dualnet {

/// Architecture presets: "mlp:784-100-10", "conv-small", "wide:K", "deep:K".
struct ArchSpec {
  enum class Kind { mlp, conv_small, wide, deep };
  Kind kind = Kind::mlp;
  std::vector<std::size_t> widths;  // mlp only
  std::size_t k = 1;                // wide / deep
  std::string text;
};

/// Throws std::invalid_argument on malformed text.
ArchSpec parse_arch(const std::string& text);

/// Image shape for a flat input of d features: (1, s, s) when d = s², else
/// (3, s, s) when d = 3 s².  Throws when neither fits.
Shape image_shape(std::size_t d);

/// Fresh network with N(0, 1/fan_in) weights and zero biases drawn from
/// counter-based streams keyed by `seed`.  ReLU between layers.
///
/// conv-small: conv 16 and 32 (4x4, stride 2) then FC 100.
/// wide:K:     conv 4K and 8K (4x4, stride 2) then FC 128K.
/// deep:K:     K convs of 8 filters then K of 16; the first of each group
///             downsamples (4x4, stride 2), the rest are 3x3; then FC 100.
NetworkGraph build_network(const ArchSpec& spec, std::size_t input_dim, std::size_t classes, std::uint64_t seed);

}  // namespace dualnet
