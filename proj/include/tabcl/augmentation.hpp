#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tabcl/matrix.hpp"
#include "tabcl/rng.hpp"

namespace tabcl {

struct Dataset;

enum class TaskKind { FS, FM, FS_FM };

/// Pretext task used to build positive views. `k` is the swap count for FS
/// and the number of masked features for FM; FS_FM uses it for both.
struct PretextTask {
  TaskKind kind = TaskKind::FS_FM;
  std::size_t k = 4;
};

/// "fs" | "fm" | "fs+fm"
std::string task_name(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);
void validate_task(const PretextTask& task, std::size_t d);

/// Value written into masked positions. Equals the feature mean after z-scoring.
inline constexpr double kMaskFill = 0.0;

std::vector<double> apply_swaps(std::span<const double> x,
                                std::span<const std::pair<std::size_t, std::size_t>> swaps);
std::vector<double> apply_mask(std::span<const double> x, std::span<const std::size_t> positions);

/// k independent transpositions of two distinct uniformly chosen positions.
std::vector<double> feature_swap(std::span<const double> x, std::size_t k, Rng& rng);
/// Sets k distinct uniformly chosen positions to kMaskFill.
std::vector<double> feature_mask(std::span<const double> x, std::size_t k, Rng& rng);
/// FS_FM applies the swaps first, then the mask.
std::vector<double> augment(std::span<const double> x, const PretextTask& task, Rng& rng);

/// L distinct indices drawn uniformly from [0, n) without `anchor_index`.
std::vector<std::size_t> sample_negatives(std::size_t n, std::size_t anchor_index, std::size_t L,
                                          Rng& rng);

/// Views for a set of anchors. Row i of `anchors` is the raw row
/// `anchor_indices[i]`; `negatives[i]` holds L augmented rows of other samples.
struct ContrastiveBatch {
  std::vector<std::size_t> anchor_indices;
  Matrix anchors;
  Matrix positives;
  std::vector<Matrix> negatives;
  std::vector<std::vector<std::size_t>> negative_indices;

  std::size_t size() const { return anchor_indices.size(); }
};

/// Only the feature matrix is consulted; labels never enter a batch.
ContrastiveBatch build_contrastive_batch(const Matrix& features,
                                         std::span<const std::size_t> indices,
                                         const PretextTask& task, std::size_t L, Rng& rng);
ContrastiveBatch build_contrastive_batch(const Dataset& data, std::span<const std::size_t> indices,
                                         const PretextTask& task, std::size_t L, Rng& rng);

}  // namespace tabcl
