#pragma once

// Two-phase pipeline: contrastive pre-training of an encoder on the train
// split's features, then classifiers trained on raw features (origin path)
// and on stacked raw+encoded features (pre-trained path).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tabcl/downstream.hpp"
#include "tabcl/encoders.hpp"
#include "tabcl/evaluation.hpp"
#include "tabcl/pretrain.hpp"
#include "tabcl/stacking.hpp"
#include "tabcl/tabular_data.hpp"

namespace tabcl {

/// Error raised by a pipeline stage; what() is prefixed with "[stage] ".
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message)
      : std::runtime_error("[" + stage + "] " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct DataSource {
  std::optional<std::string> csv_path;
  std::string label_column = "label";
  std::vector<std::string> class_order;
  std::optional<SyntheticConfig> synthetic;
};

enum class SweepParameter { None, Alpha, DPrime };

struct SweepConfig {
  SweepParameter parameter = SweepParameter::None;
  std::vector<double> values;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  DataSource data;
  double test_fraction = 0.2;
  PretrainConfig pretrain;
  /// d_in is taken from the data; d_out = 0 means "same as d".
  EncoderConfig encoder;
  StackingConfig stacking;
  SweepConfig sweep;
  std::vector<ClassifierSpec> classifiers = default_registry();
  std::string output_dir = "out";
  double rare_prevalence = 0.05;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Reads a config document, or the "config" member of a run manifest.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Every random stream derives from the root seed; nested seed fields are
/// overwritten here.
struct SeedPlan {
  std::uint64_t root = 0;
  std::uint64_t data = 0;
  std::uint64_t split = 0;
  std::uint64_t encoder = 0;
  std::uint64_t pretrain = 0;
};
SeedPlan seed_plan(std::uint64_t root);
ExperimentConfig resolve_seeds(ExperimentConfig config);

struct PreparedData {
  Dataset train;  // standardized with its own statistics
  Dataset test;   // standardized with the train statistics
  std::vector<int> rare_classes;  // from train counts
};

Dataset load_source(const ExperimentConfig& config);
PreparedData prepare_data(const ExperimentConfig& config);
/// Encoder config with d_in / d_out filled in for data of dimension d.
EncoderConfig resolved_encoder(const ExperimentConfig& config, std::size_t d);

struct Embeddings {
  Matrix train;
  Matrix test;
};

struct PathResult {
  std::vector<EvalReport> reports;
  std::vector<TrainedClassifier> models;
};

struct EvaluationResult {
  PathResult origin;
  PathResult ssp;
  double oap = 0.0;
  double rare_recall_origin = 0.0;
  double rare_recall_ssp = 0.0;
};

PathResult train_and_evaluate(const StackedDataset& train, const StackedDataset& test,
                              const std::vector<ClassifierSpec>& registry);

/// Phase 2 for one stacking choice; origin path included.
EvaluationResult evaluate_stacking(const ExperimentConfig& config, const PreparedData& data,
                                   const Embeddings& embeddings, const StackingConfig& stacking);

struct ExperimentOutcome {
  PretrainResult pretrain;
  EvaluationResult evaluation;
  std::string config_hash;
};

// Stage entry points; each writes its artifacts under config.output_dir.
PretrainResult run_pretrain_stage(const ExperimentConfig& config);
Embeddings run_embed_stage(const ExperimentConfig& config, const EncoderParams& encoder);
EvaluationResult run_train_eval_stage(const ExperimentConfig& config, const Embeddings& embeddings);

/// Full pipeline plus manifest.json.
ExperimentOutcome run_experiment(const ExperimentConfig& config);

struct SweepPoint {
  double value = 0.0;
  double oap = 0.0;
  double rare_recall_origin = 0.0;
  double rare_recall_ssp = 0.0;
};

/// One OaP per grid value; writes sweep.csv.
std::vector<SweepPoint> run_sweep(const ExperimentConfig& config);

/// Manifest hash: FNV-1a of the resolved config document, hex encoded.
std::string config_hash(const nlohmann::json& resolved_config);

}  // namespace tabcl
