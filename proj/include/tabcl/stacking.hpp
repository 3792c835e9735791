#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tabcl/matrix.hpp"

namespace tabcl {

struct Dataset;

enum class StackingMode { OriginOnly, EmbeddingOnly, Concat, Fuse };

std::string stacking_mode_name(StackingMode mode);
StackingMode parse_stacking_mode(std::string_view name);

struct StackingConfig {
  StackingMode mode = StackingMode::Concat;
  double alpha = 0.9;  // weight of the raw features under Fuse
};

void validate(const StackingConfig& config);
void to_json(nlohmann::json& j, const StackingConfig& c);
void from_json(const nlohmann::json& j, StackingConfig& c);

struct StackedDataset {
  Matrix vectors;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return vectors.rows(); }
  std::size_t stacked_dim() const { return vectors.cols(); }
};

/// Raw features followed by the embedding.
std::vector<double> concat(std::span<const double> raw, std::span<const double> embedding);
/// alpha * raw + (1 - alpha) * embedding; alpha 1 and 0 return an operand unchanged.
std::vector<double> fuse(std::span<const double> raw, std::span<const double> embedding, double alpha);

std::size_t stacked_dim(StackingMode mode, std::size_t d, std::size_t d_prime);

StackedDataset stack_dataset(const Dataset& data, const Matrix& embeddings,
                             const StackingConfig& config);
/// The raw features as a StackedDataset (the origin path).
StackedDataset origin_dataset(const Dataset& data);

}  // namespace tabcl
