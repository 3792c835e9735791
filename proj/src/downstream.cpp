#include "tabcl/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "tabcl/rng.hpp"

namespace tabcl {
namespace {

constexpr double kVarianceFloor = 1e-9;

std::string layer_name(std::size_t l) { return "clf." + std::to_string(l); }

diff::ParamSet init_softmax(std::span<const std::size_t> widths, Rng& rng) {
  diff::ParamSet params;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    Matrix w(widths[l], widths[l + 1]);
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    for (auto& v : w.values()) v = rng.uniform(-bound, bound);
    params.emplace(layer_name(l) + ".weight", std::move(w));
    params.emplace(layer_name(l) + ".bias", Matrix(1, widths[l + 1]));
  }
  return params;
}

Matrix one_hot_rows(const Matrix& source, std::span<const int> labels,
                    std::span<const std::size_t> rows, std::size_t classes, Matrix& x_out) {
  Matrix y(rows.size(), classes);
  x_out = Matrix(rows.size(), source.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = source.row(rows[r]);
    std::copy(src.begin(), src.end(), x_out.row(r).begin());
    y(r, static_cast<std::size_t>(labels[rows[r]])) = 1.0;
  }
  return y;
}

int argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < v.size(); ++j) {
    if (v[j] > v[best]) best = j;
  }
  return static_cast<int>(best);
}

Matrix softmax_log_probs(const SoftmaxState& s, const Matrix& x) {
  diff::Graph g;
  const auto in = g.input(x);
  const auto lp = g.log_softmax_row(build_softmax_logits(g, s.widths, in));
  return diff::forward(g, s.params)[lp];
}

int knn_vote(const KnnState& s, std::size_t k, std::size_t classes, std::span<const double> x) {
  const std::size_t n = s.rows.rows();
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = s.rows.row(i);
    double d2 = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      const double diff = r[j] - x[j];
      d2 += diff * diff;
    }
    dist[i] = {d2, i};
  }
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  std::vector<std::size_t> votes(classes, 0);
  for (std::size_t t = 0; t < k; ++t) ++votes[static_cast<std::size_t>(s.labels[dist[t].second])];
  std::size_t best = 0;
  for (std::size_t c = 1; c < classes; ++c) {
    if (votes[c] > votes[best]) best = c;
  }
  return static_cast<int>(best);
}

int nb_predict(const NaiveBayesState& s, std::span<const double> x) {
  const std::size_t classes = s.log_priors.size();
  std::vector<double> score(classes, -std::numeric_limits<double>::infinity());
  for (std::size_t c = 0; c < classes; ++c) {
    if (std::isinf(s.log_priors[c])) continue;
    double total = s.log_priors[c];
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double var = s.variances(c, j);
      const double diff = x[j] - s.means(c, j);
      total += -0.5 * std::log(2.0 * std::numbers::pi * var) - diff * diff / (2.0 * var);
    }
    score[c] = total;
  }
  return argmax_lowest(score);
}

}  // namespace

std::string classifier_kind_name(ClassifierKind kind) {
  switch (kind) {
    case ClassifierKind::SoftmaxLinear: return "softmax_linear";
    case ClassifierKind::SoftmaxMlp: return "softmax_mlp";
    case ClassifierKind::Knn: return "knn";
    case ClassifierKind::GaussianNb: return "gaussian_nb";
  }
  return "?";
}

ClassifierKind parse_classifier_kind(std::string_view name) {
  if (name == "softmax_linear") return ClassifierKind::SoftmaxLinear;
  if (name == "softmax_mlp") return ClassifierKind::SoftmaxMlp;
  if (name == "knn") return ClassifierKind::Knn;
  if (name == "gaussian_nb") return ClassifierKind::GaussianNb;
  throw std::invalid_argument("unknown classifier kind '" + std::string(name) + "'");
}

void validate(const ClassifierSpec& s) {
  if (s.neighbors < 1) throw std::invalid_argument("classifier: neighbors must be >= 1");
  if (!(s.lambda >= 0.0)) throw std::invalid_argument("classifier: lambda must be >= 0");
  if (s.batch_size < 1) throw std::invalid_argument("classifier: batch_size must be >= 1");
  if (!(s.lr > 0.0)) throw std::invalid_argument("classifier: lr must be > 0");
  for (auto h : s.hidden) {
    if (h < 1) throw std::invalid_argument("classifier: hidden widths must be >= 1");
  }
}

void to_json(nlohmann::json& j, const ClassifierSpec& s) {
  j = nlohmann::json{{"name", s.name},
                     {"kind", classifier_kind_name(s.kind)},
                     {"hidden", s.hidden},
                     {"neighbors", s.neighbors},
                     {"lambda", s.lambda},
                     {"epochs", s.epochs},
                     {"lr", s.lr},
                     {"batch_size", s.batch_size},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, ClassifierSpec& s) {
  s = ClassifierSpec{};
  s.kind = parse_classifier_kind(j.at("kind").get<std::string>());
  s.name = j.value("name", classifier_kind_name(s.kind));
  s.hidden = j.value("hidden", s.hidden);
  s.neighbors = j.value("neighbors", s.neighbors);
  s.lambda = j.value("lambda", s.lambda);
  s.epochs = j.value("epochs", s.epochs);
  s.lr = j.value("lr", s.lr);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.seed = j.value("seed", s.seed);
  validate(s);
}

std::vector<ClassifierSpec> default_registry() {
  std::vector<ClassifierSpec> r(4);
  r[0].name = "knn";
  r[0].kind = ClassifierKind::Knn;
  r[1].name = "logistic_regression";
  r[1].kind = ClassifierKind::SoftmaxLinear;
  r[2].name = "gaussian_nb";
  r[2].kind = ClassifierKind::GaussianNb;
  r[3].name = "mlp";
  r[3].kind = ClassifierKind::SoftmaxMlp;
  return r;
}

diff::NodeId build_softmax_logits(diff::Graph& g, std::span<const std::size_t> widths,
                                  diff::NodeId x) {
  if (widths.size() < 2) throw std::invalid_argument("softmax classifier: need input and output widths");
  diff::NodeId h = x;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const auto w = g.parameter(layer_name(l) + ".weight", widths[l], widths[l + 1]);
    const auto b = g.parameter(layer_name(l) + ".bias", 1, widths[l + 1]);
    h = g.add(g.matmul(h, w), b);
    if (l + 2 < widths.size()) h = g.relu(h);
  }
  return h;
}

diff::NodeId build_classifier_loss(diff::Graph& g, std::span<const std::size_t> widths,
                                   diff::NodeId x, const Matrix& one_hot, double lambda) {
  const auto log_probs = g.log_softmax_row(build_softmax_logits(g, widths, x));
  const auto target = g.input(one_hot, "one_hot");
  const double batch = static_cast<double>(one_hot.rows());
  auto loss = g.scale(g.sum(g.mul(log_probs, target)), -1.0 / batch);
  if (lambda > 0.0) {
    std::vector<diff::NodeId> params;
    for (diff::NodeId id = 0; id < g.size(); ++id) {
      if (g.node(id).op == diff::Op::Parameter) params.push_back(id);
    }
    for (auto p : params) loss = g.add(loss, g.scale(g.sum(g.mul(p, p)), lambda));
  }
  return loss;
}

TrainedClassifier train_classifier(const StackedDataset& data, const ClassifierSpec& spec) {
  validate(spec);
  const std::size_t n = data.size();
  if (n == 0) throw std::invalid_argument("train_classifier: empty training data");
  if (data.num_classes < 2) throw std::invalid_argument("train_classifier: need at least 2 classes");

  TrainedClassifier model;
  model.spec = spec;
  model.num_classes = data.num_classes;
  model.dim = data.stacked_dim();
  std::vector<std::size_t> counts(data.num_classes, 0);
  for (int y : data.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= data.num_classes) {
      throw std::invalid_argument("train_classifier: label out of range");
    }
    ++counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) model.absent_classes.push_back(static_cast<int>(c));
  }

  switch (spec.kind) {
    case ClassifierKind::Knn: {
      if (spec.neighbors > n) {
        throw std::invalid_argument("train_classifier: knn neighbors " + std::to_string(spec.neighbors) +
                                    " exceeds " + std::to_string(n) + " training rows");
      }
      model.state = KnnState{data.vectors, data.labels};
      break;
    }
    case ClassifierKind::GaussianNb: {
      const std::size_t d = data.stacked_dim();
      NaiveBayesState s{Matrix(data.num_classes, d), Matrix(data.num_classes, d),
                        std::vector<double>(data.num_classes)};
      for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<std::size_t>(data.labels[i]);
        const auto x = data.vectors.row(i);
        for (std::size_t j = 0; j < d; ++j) s.means(c, j) += x[j];
      }
      for (std::size_t c = 0; c < data.num_classes; ++c) {
        if (counts[c] == 0) continue;
        for (std::size_t j = 0; j < d; ++j) s.means(c, j) /= static_cast<double>(counts[c]);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<std::size_t>(data.labels[i]);
        const auto x = data.vectors.row(i);
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = x[j] - s.means(c, j);
          s.variances(c, j) += diff * diff;
        }
      }
      for (std::size_t c = 0; c < data.num_classes; ++c) {
        for (std::size_t j = 0; j < d; ++j) {
          const double var = counts[c] ? s.variances(c, j) / static_cast<double>(counts[c]) : 0.0;
          s.variances(c, j) = var + kVarianceFloor;
        }
        s.log_priors[c] = counts[c] ? std::log(static_cast<double>(counts[c]) / static_cast<double>(n))
                                    : -std::numeric_limits<double>::infinity();
      }
      model.state = std::move(s);
      break;
    }
    case ClassifierKind::SoftmaxLinear:
    case ClassifierKind::SoftmaxMlp: {
      SoftmaxState s;
      s.widths.push_back(data.stacked_dim());
      if (spec.kind == ClassifierKind::SoftmaxMlp) {
        s.widths.insert(s.widths.end(), spec.hidden.begin(), spec.hidden.end());
      }
      s.widths.push_back(data.num_classes);
      Rng rng(spec.seed);
      s.params = init_softmax(s.widths, rng);
      auto adam = diff::AdamState::for_params(s.params);
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += spec.batch_size) {
          const std::size_t stop = std::min(n, start + spec.batch_size);
          Matrix x;
          const Matrix y = one_hot_rows(data.vectors, data.labels,
                                        std::span<const std::size_t>(order.data() + start, stop - start),
                                        data.num_classes, x);
          diff::Graph g;
          const auto loss = build_classifier_loss(g, s.widths, g.input(std::move(x)), y, spec.lambda);
          const auto grads = diff::backward(g, s.params, loss);
          diff::adam_step(s.params, grads.params, adam, spec.lr);
          loss_sum += grads.loss * static_cast<double>(stop - start);
        }
        s.epoch_loss.push_back(loss_sum / static_cast<double>(n));
      }
      model.state = std::move(s);
      break;
    }
  }
  return model;
}

Prediction predict(const TrainedClassifier& model, std::span<const double> x) {
  if (x.size() != model.dim) {
    throw std::invalid_argument("predict: input has " + std::to_string(x.size()) +
                                " features, model expects " + std::to_string(model.dim));
  }
  if (const auto* s = std::get_if<SoftmaxState>(&model.state)) {
    const Matrix lp = softmax_log_probs(*s, Matrix::row_vector(x));
    return {argmax_lowest(lp.row(0)), lp.values()};
  }
  if (const auto* s = std::get_if<KnnState>(&model.state)) {
    return {knn_vote(*s, model.spec.neighbors, model.num_classes, x), std::nullopt};
  }
  const auto& nb = std::get<NaiveBayesState>(model.state);
  return {nb_predict(nb, x), std::nullopt};
}

std::vector<int> predict_dataset(const TrainedClassifier& model, const Matrix& x) {
  std::vector<int> out;
  if (x.rows() == 0) return out;
  if (x.cols() != model.dim) {
    throw std::invalid_argument("predict_dataset: input has " + std::to_string(x.cols()) +
                                " features, model expects " + std::to_string(model.dim));
  }
  out.reserve(x.rows());
  if (const auto* s = std::get_if<SoftmaxState>(&model.state)) {
    const Matrix lp = softmax_log_probs(*s, x);
    for (std::size_t r = 0; r < lp.rows(); ++r) out.push_back(argmax_lowest(lp.row(r)));
    return out;
  }
  for (std::size_t r = 0; r < x.rows(); ++r) out.push_back(predict(model, x.row(r)).label);
  return out;
}

nlohmann::json classifier_to_json(const TrainedClassifier& model) {
  nlohmann::json j{{"spec", model.spec},
                   {"num_classes", model.num_classes},
                   {"dim", model.dim},
                   {"absent_classes", model.absent_classes}};
  auto matrix_json = [](const Matrix& m) {
    return nlohmann::json{{"shape", {m.rows(), m.cols()}}, {"values", m.values()}};
  };
  if (const auto* s = std::get_if<SoftmaxState>(&model.state)) {
    j["widths"] = s->widths;
    j["params"] = diff::params_to_json(s->params);
    j["epoch_loss"] = s->epoch_loss;
  } else if (const auto* s = std::get_if<KnnState>(&model.state)) {
    j["rows"] = matrix_json(s->rows);
    j["labels"] = s->labels;
  } else {
    const auto& nb = std::get<NaiveBayesState>(model.state);
    j["means"] = matrix_json(nb.means);
    j["variances"] = matrix_json(nb.variances);
    nlohmann::json priors = nlohmann::json::array();
    for (double p : nb.log_priors) {
      if (std::isinf(p)) priors.push_back(nullptr);
      else priors.push_back(p);
    }
    j["log_priors"] = priors;
  }
  return j;
}

TrainedClassifier classifier_from_json(const nlohmann::json& j) {
  TrainedClassifier m;
  m.spec = j.at("spec").get<ClassifierSpec>();
  m.num_classes = j.at("num_classes").get<std::size_t>();
  m.dim = j.at("dim").get<std::size_t>();
  m.absent_classes = j.at("absent_classes").get<std::vector<int>>();
  auto read_matrix = [](const nlohmann::json& mj) {
    const auto shape = mj.at("shape").get<std::vector<std::size_t>>();
    return Matrix(shape.at(0), shape.at(1), mj.at("values").get<std::vector<double>>());
  };
  switch (m.spec.kind) {
    case ClassifierKind::SoftmaxLinear:
    case ClassifierKind::SoftmaxMlp:
      m.state = SoftmaxState{j.at("widths").get<std::vector<std::size_t>>(),
                             diff::params_from_json(j.at("params")),
                             j.value("epoch_loss", std::vector<double>{})};
      break;
    case ClassifierKind::Knn:
      m.state = KnnState{read_matrix(j.at("rows")), j.at("labels").get<std::vector<int>>()};
      break;
    case ClassifierKind::GaussianNb: {
      NaiveBayesState nb{read_matrix(j.at("means")), read_matrix(j.at("variances")), {}};
      for (const auto& p : j.at("log_priors")) {
        nb.log_priors.push_back(p.is_null() ? -std::numeric_limits<double>::infinity() : p.get<double>());
      }
      m.state = std::move(nb);
      break;
    }
  }
  return m;
}

}  // namespace tabcl
