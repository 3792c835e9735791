#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "tabcl/augmentation.hpp"
#include "tabcl/diff.hpp"
#include "tabcl/encoders.hpp"
#include "tabcl/matrix.hpp"

namespace tabcl {

struct Dataset;

struct PretrainConfig {
  PretextTask task;
  std::size_t L = 8;
  double tau = 0.5;
  std::size_t batch_size = 128;
  std::size_t epochs = 30;
  diff::LrSchedule lr_schedule;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
};

void validate(const PretrainConfig& config);
void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct TrainHistory {
  std::vector<double> epoch_loss;
  std::vector<double> learning_rate;
};

inline constexpr double kCosineEps = 1e-12;

/// u.v / (|u||v| + 1e-12)
double cosine_sim(std::span<const double> u, std::span<const double> v);

/// -log( e^{s_p/tau} / (e^{s_p/tau} + sum_l e^{s_l/tau}) ) with s = cosine
/// similarity to the anchor; evaluated through log-sum-exp. Rows of
/// `negatives` are the L negative embeddings.
double infonce_loss(std::span<const double> anchor, std::span<const double> positive,
                    const Matrix& negatives, double tau);

/// Mean InfoNCE over a batch of B anchors. `negatives[l]` is a (B x d') node
/// holding the l-th negative of every anchor.
diff::NodeId build_infonce_loss(diff::Graph& graph, diff::NodeId anchors, diff::NodeId positives,
                                std::span<const diff::NodeId> negatives, double tau);

/// Encodes every view of `batch` in one pass and returns the mean InfoNCE node.
diff::NodeId build_pretrain_loss(diff::Graph& graph, const EncoderConfig& encoder,
                                 const ContrastiveBatch& batch, double tau);

struct PretrainResult {
  EncoderParams params;
  TrainHistory history;
};

/// Trains a freshly initialized encoder (seeded by encoder.seed) with Adam on
/// InfoNCE. Only the feature matrix is consumed.
PretrainResult pretrain(const Matrix& features, const EncoderConfig& encoder,
                        const PretrainConfig& config);
PretrainResult pretrain(const Dataset& data, const EncoderConfig& encoder,
                        const PretrainConfig& config);

/// Header e0..e{d'-1},label; label is the class index.
void write_embedding_csv(const Matrix& embeddings, std::span<const int> labels,
                         const std::filesystem::path& path, std::string_view prefix = "e");

struct EmbeddingTable {
  Matrix values;
  std::vector<int> labels;
};
EmbeddingTable read_embedding_csv(const std::filesystem::path& path);

void embed_and_export(const EncoderParams& params, const Dataset& data,
                      const std::filesystem::path& path);

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path);

}  // namespace tabcl
