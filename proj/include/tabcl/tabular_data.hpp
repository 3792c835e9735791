#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tabcl/matrix.hpp"

namespace tabcl {

struct FeatureStats {
  double mean = 0.0;
  double stddev = 1.0;
  friend bool operator==(const FeatureStats&, const FeatureStats&) = default;
};

/// View of one row of a Dataset.
struct Sample {
  std::span<const double> features;
  int label = 0;
};

/// Labeled tabular data: n rows of d features, labels in [0, m).
struct Dataset {
  Matrix features;
  std::vector<int> labels;
  std::vector<std::string> feature_names;
  std::vector<std::string> class_names;
  std::optional<std::vector<FeatureStats>> standardization;

  std::size_t size() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
  std::size_t num_classes() const { return class_names.size(); }
  Sample sample(std::size_t i) const { return {features.row(i), labels[i]}; }

  std::vector<std::size_t> class_counts() const;
  /// Rows at `indices`, in that order; names and standardization are kept.
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Throws std::invalid_argument if any invariant is broken.
  void validate() const;
};

struct SyntheticConfig {
  std::size_t n = 1000;
  std::size_t d = 39;
  std::size_t m = 9;
  double imbalance_exponent = 1.2;
  double class_separation = 3.0;
  double noise_scale = 1.0;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const SyntheticConfig& c);
void from_json(const nlohmann::json& j, SyntheticConfig& c);

/// Shortest decimal that parses back to exactly `value`.
std::string format_real(double value);
/// Strict decimal parse of a whole field; nullopt on any trailing garbage.
std::optional<double> parse_real(std::string_view text);

/// Reads a comma-separated file with a header row. Labels are mapped to
/// class indices in first-appearance order unless `class_order` is given,
/// in which case every label must appear in it.
Dataset load_csv(const std::filesystem::path& path, std::string_view label_column,
                 const std::vector<std::string>& class_order = {});
/// Writes features then a label column holding the class names.
void write_csv(const Dataset& data, const std::filesystem::path& path,
               std::string_view label_column = "label");

/// Z-scores every feature with the population statistics of `data`.
/// Constant features become 0 with a recorded stddev of 1.
Dataset standardize(const Dataset& data);
std::vector<FeatureStats> fit_standardization(const Dataset& data);
Dataset apply_standardization(const Dataset& data, std::span<const FeatureStats> stats);

struct Split {
  Dataset train;
  Dataset test;
};

/// Per class, max(1, floor(count * test_fraction)) rows go to test.
/// Both halves keep the input row order.
Split stratified_split(const Dataset& data, double test_fraction, std::uint64_t seed);

/// Normalized Zipf-like class prior (j+1)^-imbalance_exponent.
std::vector<double> class_priors(const SyntheticConfig& config);
/// Rounded per-class counts summing to n; class 0 absorbs the rounding.
std::vector<std::size_t> synthetic_class_counts(const SyntheticConfig& config);
Dataset generate_synthetic(const SyntheticConfig& config);

}  // namespace tabcl
