#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tabcl/matrix.hpp"

namespace tabcl {

/// Square count table, rows = truth, columns = prediction.
using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

struct ClassMetrics {
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
  friend bool operator==(const ClassMetrics&, const ClassMetrics&) = default;
};

struct EvalReport {
  std::string classifier;
  double accuracy = 0.0;
  double macro_recall = 0.0;
  double macro_precision = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassMetrics> per_class;
  ConfusionMatrix confusion;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> pred,
                                 std::size_t m);

/// Zero denominators give 0. Macro averages run over classes with support > 0.
EvalReport compute_metrics(const ConfusionMatrix& confusion, std::string classifier = {});

EvalReport evaluate(std::string classifier, std::span<const int> truth, std::span<const int> pred,
                    std::size_t m);

/// Overall performance: sum over classifiers of
/// (accuracy + macro recall + macro F1) with pre-training minus without.
struct OaPInput {
  std::vector<EvalReport> ssp_reports;
  std::vector<EvalReport> origin_reports;
};

double oap(const OaPInput& input);

/// Classes whose share of `counts` is at most `max_prevalence`.
std::vector<int> rare_classes(std::span<const std::size_t> counts, double max_prevalence = 0.05);
/// Mean per-class recall over `classes`, averaged again over `reports`.
double mean_recall(std::span<const EvalReport> reports, std::span<const int> classes);

/// Centered projection onto the top `out_dims` covariance eigenvectors; the
/// largest-magnitude entry of each eigenvector is made positive.
Matrix pca_project(const Matrix& vectors, std::size_t out_dims);

void write_reports_json(std::span<const EvalReport> reports, const std::filesystem::path& path);
std::vector<EvalReport> read_reports_json(const std::filesystem::path& path);
/// One row per classifier: classifier,accuracy,macro_recall,macro_precision,macro_f1
void write_reports_csv(std::span<const EvalReport> reports, const std::filesystem::path& path);
/// Header p0..p{k-1},label
void write_projection_csv(const Matrix& coords, std::span<const int> labels,
                          const std::filesystem::path& path);

}  // namespace tabcl
