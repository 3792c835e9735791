#include "tabcl/augmentation.hpp"

#include <algorithm>
#include <stdexcept>

#include "tabcl/tabular_data.hpp"

namespace tabcl {

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::FS: return "fs";
    case TaskKind::FM: return "fm";
    case TaskKind::FS_FM: return "fs+fm";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "fs") return TaskKind::FS;
  if (name == "fm") return TaskKind::FM;
  if (name == "fs+fm") return TaskKind::FS_FM;
  throw std::invalid_argument("unknown pretext task '" + std::string(name) +
                              "' (expected fs, fm or fs+fm)");
}

void validate_task(const PretextTask& task, std::size_t d) {
  if (task.k < 1) throw std::invalid_argument("pretext task: k must be >= 1");
  if (task.kind != TaskKind::FM && d < 2) {
    throw std::invalid_argument("feature swapping needs at least 2 features");
  }
  if (task.kind != TaskKind::FS && task.k > d) {
    throw std::invalid_argument("feature masking: k=" + std::to_string(task.k) +
                                " exceeds d=" + std::to_string(d));
  }
}

std::vector<double> apply_swaps(std::span<const double> x,
                                std::span<const std::pair<std::size_t, std::size_t>> swaps) {
  std::vector<double> out(x.begin(), x.end());
  for (const auto& [a, b] : swaps) {
    if (a >= out.size() || b >= out.size()) throw std::out_of_range("apply_swaps: position");
    std::swap(out[a], out[b]);
  }
  return out;
}

std::vector<double> apply_mask(std::span<const double> x, std::span<const std::size_t> positions) {
  std::vector<double> out(x.begin(), x.end());
  for (auto p : positions) {
    if (p >= out.size()) throw std::out_of_range("apply_mask: position");
    out[p] = kMaskFill;
  }
  return out;
}

std::vector<double> feature_swap(std::span<const double> x, std::size_t k, Rng& rng) {
  const std::size_t d = x.size();
  if (d < 2) throw std::invalid_argument("feature_swap: need at least 2 features");
  if (k < 1) throw std::invalid_argument("feature_swap: k must be >= 1");
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t t = 0; t < k; ++t) {
    const std::size_t a = rng.index(d);
    std::size_t b = rng.index(d - 1);
    if (b >= a) ++b;
    std::swap(out[a], out[b]);
  }
  return out;
}

std::vector<double> feature_mask(std::span<const double> x, std::size_t k, Rng& rng) {
  const std::size_t d = x.size();
  if (k < 1) throw std::invalid_argument("feature_mask: k must be >= 1");
  if (k > d) {
    throw std::invalid_argument("feature_mask: k=" + std::to_string(k) + " exceeds d=" +
                                std::to_string(d));
  }
  std::vector<std::size_t> order(d);
  for (std::size_t i = 0; i < d; ++i) order[i] = i;
  // partial Fisher-Yates: first k entries are a uniform k-subset
  for (std::size_t i = 0; i < k; ++i) std::swap(order[i], order[i + rng.index(d - i)]);
  return apply_mask(x, std::span<const std::size_t>(order.data(), k));
}

std::vector<double> augment(std::span<const double> x, const PretextTask& task, Rng& rng) {
  switch (task.kind) {
    case TaskKind::FS:
      return feature_swap(x, task.k, rng);
    case TaskKind::FM:
      return feature_mask(x, task.k, rng);
    case TaskKind::FS_FM: {
      if (task.k > x.size()) {
        throw std::invalid_argument("feature masking: k exceeds d");
      }
      const auto swapped = feature_swap(x, task.k, rng);
      return feature_mask(swapped, task.k, rng);
    }
  }
  throw std::logic_error("augment: unknown task kind");
}

std::vector<std::size_t> sample_negatives(std::size_t n, std::size_t anchor_index, std::size_t L,
                                          Rng& rng) {
  if (n <= L) {
    throw std::invalid_argument("sample_negatives: need n > L (n=" + std::to_string(n) +
                                ", L=" + std::to_string(L) + ")");
  }
  if (anchor_index >= n) throw std::out_of_range("sample_negatives: anchor index");
  std::vector<std::size_t> picked;
  picked.reserve(L);
  while (picked.size() < L) {
    std::size_t j = rng.index(n - 1);
    if (j >= anchor_index) ++j;
    if (std::find(picked.begin(), picked.end(), j) == picked.end()) picked.push_back(j);
  }
  return picked;
}

ContrastiveBatch build_contrastive_batch(const Matrix& features,
                                         std::span<const std::size_t> indices,
                                         const PretextTask& task, std::size_t L, Rng& rng) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  validate_task(task, d);
  if (n <= L) {
    throw std::invalid_argument("contrastive batch: need more than L=" + std::to_string(L) +
                                " samples, have " + std::to_string(n));
  }
  ContrastiveBatch batch;
  batch.anchor_indices.assign(indices.begin(), indices.end());
  batch.anchors = Matrix(indices.size(), d);
  batch.positives = Matrix(indices.size(), d);
  batch.negatives.reserve(indices.size());
  batch.negative_indices.reserve(indices.size());
  for (std::size_t a = 0; a < indices.size(); ++a) {
    const std::size_t i = indices[a];
    if (i >= n) throw std::out_of_range("contrastive batch: anchor index " + std::to_string(i));
    const auto x = features.row(i);
    std::copy(x.begin(), x.end(), batch.anchors.row(a).begin());
    const auto pos = augment(x, task, rng);
    std::copy(pos.begin(), pos.end(), batch.positives.row(a).begin());

    auto neg_idx = sample_negatives(n, i, L, rng);
    Matrix negs(L, d);
    for (std::size_t l = 0; l < L; ++l) {
      const auto view = augment(features.row(neg_idx[l]), task, rng);
      std::copy(view.begin(), view.end(), negs.row(l).begin());
    }
    batch.negatives.push_back(std::move(negs));
    batch.negative_indices.push_back(std::move(neg_idx));
  }
  return batch;
}

ContrastiveBatch build_contrastive_batch(const Dataset& data, std::span<const std::size_t> indices,
                                         const PretextTask& task, std::size_t L, Rng& rng) {
  return build_contrastive_batch(data.features, indices, task, L, rng);
}

}  // namespace tabcl
