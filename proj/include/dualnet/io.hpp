#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualnet/certifier.hpp"
#include "dualnet/dataset.hpp"
#include "dualnet/network.hpp"
#include "dualnet/trainer.hpp"

namespace dualnet::io {

/// Malformed or unreadable file.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct IdxImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;
};

IdxImages read_idx_images(const std::filesystem::path& path);
std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path);

/// Image/label IDX pair as a dataset with pixels scaled to [0, 1] and
/// classes = max label + 1.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Rows "label,f1,f2,...".  Errors carry the 1-based line number.
Dataset load_csv(const std::filesystem::path& path, bool header = false);

struct ModelMeta {
  std::string norm = "linf";
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  std::string arch;
};

enum class Encoding { decimal, base64 };

struct LoadedModel {
  NetworkGraph net;
  ModelMeta meta;
};

constexpr int MODEL_FORMAT_VERSION = 1;

std::string model_to_string(const NetworkGraph& net, const ModelMeta& meta, Encoding encoding = Encoding::decimal);
LoadedModel model_from_string(const std::string& text);
void save_model(const std::filesystem::path& path, const NetworkGraph& net, const ModelMeta& meta,
                Encoding encoding = Encoding::decimal);
LoadedModel load_model(const std::filesystem::path& path);

std::string base64_encode(const std::vector<double>& values);
std::vector<double> base64_decode(const std::string& text);

/// Header plus one line per record: example_id,predicted,certified,min_objective,mode.
void write_certificates(const std::vector<Certificate>& records, const std::filesystem::path& path);
void write_metrics(const std::vector<EpochMetrics>& metrics, const std::filesystem::path& path);

/// Stage models stage_<i>.json plus manifest.json inside `dir`.
void save_cascade(const std::filesystem::path& dir, const Cascade& cascade, const ModelMeta& meta);
Cascade load_cascade(const std::filesystem::path& dir);

}  // namespace dualnet::io
