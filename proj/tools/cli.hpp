#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dualnet/certifier.hpp"
#include "dualnet/dataset.hpp"

namespace dualnet::cli {

/// Runs one command line (args excludes the program name).  Returns the
/// process exit code: 0 success, 1 runtime failure, 2 bad flags.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// "exact", "median:R" or "highprob:DELTA,M".  Returns nullopt and sets
/// `why` when the text is malformed.
std::optional<CertifyOptions> parse_mode(const std::string& text, std::string* why = nullptr);

struct DataSplits {
  Dataset train;
  std::optional<Dataset> test;
};

/// A directory holding IDX pairs (train-*/test-* or t10k-*), or a CSV file
/// of "label,features..." rows with an optional header.
DataSplits load_data(const std::filesystem::path& path);

/// Signed relative errors (estimate - truth) / truth of the median ℓ1
/// estimate for each row of `rows`; rows with zero norm are skipped.
std::vector<double> relative_errors(const Tensor& rows, std::size_t r, std::uint64_t seed);

/// Quantile with linear interpolation between order statistics.
double quantile(std::vector<double> values, double q);

}  // namespace dualnet::cli
