#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "tabcl/diff.hpp"
#include "tabcl/matrix.hpp"
#include "tabcl/stacking.hpp"

namespace tabcl {

enum class ClassifierKind { SoftmaxLinear, SoftmaxMlp, Knn, GaussianNb };

std::string classifier_kind_name(ClassifierKind kind);
ClassifierKind parse_classifier_kind(std::string_view name);

struct ClassifierSpec {
  std::string name;
  ClassifierKind kind = ClassifierKind::SoftmaxLinear;
  std::vector<std::size_t> hidden = {32};  // softmax_mlp only
  std::size_t neighbors = 5;               // knn only
  double lambda = 1e-4;                    // L2 strength on all softmax parameters
  std::size_t epochs = 100;
  double lr = 0.01;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

void validate(const ClassifierSpec& spec);
void to_json(nlohmann::json& j, const ClassifierSpec& s);
void from_json(const nlohmann::json& j, ClassifierSpec& s);

/// kNN, logistic regression, Gaussian naive Bayes and a one-hidden-layer MLP.
std::vector<ClassifierSpec> default_registry();

struct SoftmaxState {
  std::vector<std::size_t> widths;  // input, hidden..., classes
  diff::ParamSet params;
  std::vector<double> epoch_loss;
};

struct KnnState {
  Matrix rows;
  std::vector<int> labels;
};

struct NaiveBayesState {
  Matrix means;
  Matrix variances;
  std::vector<double> log_priors;  // -inf for classes absent from training
};

struct TrainedClassifier {
  ClassifierSpec spec;
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  std::vector<int> absent_classes;
  std::variant<SoftmaxState, KnnState, NaiveBayesState> state;
};

struct Prediction {
  int label = 0;
  std::optional<std::vector<double>> log_probs;  // absent for knn
};

/// Logits of a softmax classifier with the given layer widths; x is (batch x widths[0]).
diff::NodeId build_softmax_logits(diff::Graph& graph, std::span<const std::size_t> widths,
                                  diff::NodeId x);
/// Mean categorical cross-entropy of log_softmax(logits) against one-hot
/// rows, plus lambda * sum of squared parameters.
diff::NodeId build_classifier_loss(diff::Graph& graph, std::span<const std::size_t> widths,
                                   diff::NodeId x, const Matrix& one_hot, double lambda);

TrainedClassifier train_classifier(const StackedDataset& data, const ClassifierSpec& spec);

/// Ties resolve to the lowest class index; kNN distance ties to the lower row.
Prediction predict(const TrainedClassifier& model, std::span<const double> x);
std::vector<int> predict_dataset(const TrainedClassifier& model, const Matrix& x);

nlohmann::json classifier_to_json(const TrainedClassifier& model);
TrainedClassifier classifier_from_json(const nlohmann::json& j);

}  // namespace tabcl
