#include "tabcl/evaluation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "tabcl/tabular_data.hpp"

namespace tabcl {

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& c : r.per_class) {
    per_class.push_back({{"recall", c.recall}, {"precision", c.precision}, {"f1", c.f1}, {"support", c.support}});
  }
  j = nlohmann::json{{"classifier", r.classifier},
                     {"accuracy", r.accuracy},
                     {"macro_recall", r.macro_recall},
                     {"macro_precision", r.macro_precision},
                     {"macro_f1", r.macro_f1},
                     {"micro_f1", r.accuracy},
                     {"per_class", per_class},
                     {"confusion", r.confusion}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r = EvalReport{};
  r.classifier = j.at("classifier").get<std::string>();
  r.accuracy = j.at("accuracy").get<double>();
  r.macro_recall = j.at("macro_recall").get<double>();
  r.macro_precision = j.value("macro_precision", 0.0);
  r.macro_f1 = j.at("macro_f1").get<double>();
  for (const auto& c : j.value("per_class", nlohmann::json::array())) {
    r.per_class.push_back({c.at("recall").get<double>(), c.at("precision").get<double>(),
                           c.at("f1").get<double>(), c.at("support").get<std::size_t>()});
  }
  r.confusion = j.value("confusion", ConfusionMatrix{});
}

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> pred,
                                 std::size_t m) {
  if (truth.size() != pred.size()) {
    throw std::invalid_argument("confusion_matrix: " + std::to_string(truth.size()) +
                                " truths vs " + std::to_string(pred.size()) + " predictions");
  }
  ConfusionMatrix cm(m, std::vector<std::size_t>(m, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || pred[i] < 0 || static_cast<std::size_t>(truth[i]) >= m ||
        static_cast<std::size_t>(pred[i]) >= m) {
      throw std::invalid_argument("confusion_matrix: label outside [0, " + std::to_string(m) +
                                  ") at position " + std::to_string(i));
    }
    ++cm[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])];
  }
  return cm;
}

EvalReport compute_metrics(const ConfusionMatrix& cm, std::string classifier) {
  const std::size_t m = cm.size();
  for (const auto& row : cm) {
    if (row.size() != m) throw std::invalid_argument("compute_metrics: confusion matrix is not square");
  }
  EvalReport r;
  r.classifier = std::move(classifier);
  r.confusion = cm;
  std::size_t total = 0, correct = 0;
  std::vector<std::size_t> col_sum(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      total += cm[i][j];
      col_sum[j] += cm[i][j];
    }
    correct += cm[i][i];
  }
  r.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;

  std::size_t supported = 0;
  for (std::size_t i = 0; i < m; ++i) {
    ClassMetrics c;
    c.support = std::accumulate(cm[i].begin(), cm[i].end(), std::size_t{0});
    const double tp = static_cast<double>(cm[i][i]);
    c.recall = c.support ? tp / static_cast<double>(c.support) : 0.0;
    c.precision = col_sum[i] ? tp / static_cast<double>(col_sum[i]) : 0.0;
    c.f1 = (c.precision + c.recall) > 0.0 ? 2.0 * c.precision * c.recall / (c.precision + c.recall) : 0.0;
    if (c.support > 0) {
      ++supported;
      r.macro_recall += c.recall;
      r.macro_precision += c.precision;
      r.macro_f1 += c.f1;
    }
    r.per_class.push_back(c);
  }
  if (supported > 0) {
    r.macro_recall /= static_cast<double>(supported);
    r.macro_precision /= static_cast<double>(supported);
    r.macro_f1 /= static_cast<double>(supported);
  }
  return r;
}

EvalReport evaluate(std::string classifier, std::span<const int> truth, std::span<const int> pred,
                    std::size_t m) {
  return compute_metrics(confusion_matrix(truth, pred, m), std::move(classifier));
}

double oap(const OaPInput& input) {
  std::map<std::string, const EvalReport*> origin;
  for (const auto& r : input.origin_reports) {
    if (!origin.emplace(r.classifier, &r).second) {
      throw std::invalid_argument("oap: duplicate classifier '" + r.classifier + "' in origin reports");
    }
  }
  if (origin.size() != input.ssp_reports.size()) {
    throw std::invalid_argument("oap: registry mismatch (" + std::to_string(input.ssp_reports.size()) +
                                " pre-trained vs " + std::to_string(origin.size()) + " origin reports)");
  }
  double total = 0.0;
  std::map<std::string, bool> seen;
  for (const auto& s : input.ssp_reports) {
    const auto it = origin.find(s.classifier);
    if (it == origin.end() || !seen.emplace(s.classifier, true).second) {
      throw std::invalid_argument("oap: registry mismatch at classifier '" + s.classifier + "'");
    }
    const EvalReport& o = *it->second;
    total += (s.accuracy - o.accuracy) + (s.macro_recall - o.macro_recall) + (s.macro_f1 - o.macro_f1);
  }
  return total;
}

std::vector<int> rare_classes(std::span<const std::size_t> counts, double max_prevalence) {
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  std::vector<int> out;
  if (total == 0.0) return out;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (static_cast<double>(counts[c]) / total <= max_prevalence) out.push_back(static_cast<int>(c));
  }
  return out;
}

double mean_recall(std::span<const EvalReport> reports, std::span<const int> classes) {
  if (reports.empty() || classes.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : reports) {
    double s = 0.0;
    for (int c : classes) s += r.per_class.at(static_cast<std::size_t>(c)).recall;
    total += s / static_cast<double>(classes.size());
  }
  return total / static_cast<double>(reports.size());
}

Matrix pca_project(const Matrix& vectors, std::size_t out_dims) {
  const std::size_t n = vectors.rows();
  const std::size_t d = vectors.cols();
  if (n < 2) throw std::invalid_argument("pca_project: need at least 2 rows");
  if (out_dims < 1 || out_dims > d) {
    throw std::invalid_argument("pca_project: out_dims must lie in [1, " + std::to_string(d) + "]");
  }
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = vectors(i, j);
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca_project: eigen decomposition failed");

  // eigenvalues come back ascending
  Eigen::MatrixXd basis(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(out_dims));
  for (std::size_t k = 0; k < out_dims; ++k) {
    Eigen::VectorXd v = solver.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - k));
    Eigen::Index pivot = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i) {
      if (std::abs(v(i)) > std::abs(v(pivot))) pivot = i;
    }
    if (v(pivot) < 0.0) v = -v;
    basis.col(static_cast<Eigen::Index>(k)) = v;
  }
  const Eigen::MatrixXd proj = x * basis;
  Matrix out(n, out_dims);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < out_dims; ++k) out(i, k) = proj(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
  }
  return out;
}

void write_reports_json(std::span<const EvalReport> reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(r);
  out << j.dump(2) << '\n';
}

std::vector<EvalReport> read_reports_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(in).get<std::vector<EvalReport>>();
}

void write_reports_csv(std::span<const EvalReport> reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "classifier,accuracy,macro_recall,macro_precision,macro_f1\n";
  for (const auto& r : reports) {
    out << r.classifier << ',' << format_real(r.accuracy) << ',' << format_real(r.macro_recall) << ','
        << format_real(r.macro_precision) << ',' << format_real(r.macro_f1) << '\n';
  }
}

void write_projection_csv(const Matrix& coords, std::span<const int> labels,
                          const std::filesystem::path& path) {
  if (labels.size() != coords.rows()) {
    throw std::invalid_argument("projection csv: label count differs from row count");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t k = 0; k < coords.cols(); ++k) out << 'p' << k << ',';
  out << "label\n";
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    for (double v : coords.row(i)) out << format_real(v) << ',';
    out << labels[i] << '\n';
  }
}

}  // namespace tabcl
