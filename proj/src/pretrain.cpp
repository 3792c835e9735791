#include "tabcl/pretrain.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "tabcl/rng.hpp"
#include "tabcl/tabular_data.hpp"

namespace tabcl {

void validate(const PretrainConfig& c) {
  if (c.L < 1) throw std::invalid_argument("pretrain: L must be >= 1");
  if (!(c.tau > 0.0)) throw std::invalid_argument("pretrain: tau must be > 0");
  if (c.batch_size < 1) throw std::invalid_argument("pretrain: batch_size must be >= 1");
  if (c.task.k < 1) throw std::invalid_argument("pretrain: task k must be >= 1");
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"task", {{"kind", task_name(c.task.kind)}, {"k", c.task.k}}},
                     {"L", c.L},
                     {"tau", c.tau},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"lr", c.lr_schedule},
                     {"adam", {{"beta1", c.adam_beta1}, {"beta2", c.adam_beta2}, {"epsilon", c.adam_epsilon}}},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  c = PretrainConfig{};
  if (j.contains("task")) {
    const auto& t = j.at("task");
    if (t.contains("kind")) c.task.kind = parse_task_kind(t.at("kind").get<std::string>());
    c.task.k = t.value("k", c.task.k);
  }
  c.L = j.value("L", c.L);
  c.tau = j.value("tau", c.tau);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("lr")) c.lr_schedule = j.at("lr").get<diff::LrSchedule>();
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    c.adam_beta1 = a.value("beta1", c.adam_beta1);
    c.adam_beta2 = a.value("beta2", c.adam_beta2);
    c.adam_epsilon = a.value("epsilon", c.adam_epsilon);
  }
  c.seed = j.value("seed", c.seed);
  validate(c);
}

double cosine_sim(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine_sim: lengths " + std::to_string(u.size()) + " and " +
                                std::to_string(v.size()) + " differ");
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  return dot / (std::sqrt(nu) * std::sqrt(nv) + kCosineEps);
}

double infonce_loss(std::span<const double> anchor, std::span<const double> positive,
                    const Matrix& negatives, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("infonce_loss: tau must be > 0");
  if (negatives.rows() > 0 && negatives.cols() != anchor.size()) {
    throw std::invalid_argument("infonce_loss: negative embeddings have the wrong dimension");
  }
  std::vector<double> logits;
  logits.reserve(negatives.rows() + 1);
  logits.push_back(cosine_sim(anchor, positive) / tau);
  for (std::size_t l = 0; l < negatives.rows(); ++l) {
    logits.push_back(cosine_sim(anchor, negatives.row(l)) / tau);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double s : logits) z += std::exp(s - mx);
  return mx + std::log(z) - logits[0];
}

diff::NodeId build_infonce_loss(diff::Graph& g, diff::NodeId anchors, diff::NodeId positives,
                                std::span<const diff::NodeId> negatives, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("infonce: tau must be > 0");
  std::vector<diff::NodeId> sims;
  sims.reserve(negatives.size() + 1);
  sims.push_back(g.cosine_sim(anchors, positives, kCosineEps));
  for (auto n : negatives) sims.push_back(g.cosine_sim(anchors, n, kCosineEps));
  const auto log_probs = g.log_softmax_row(g.scale(g.concat_cols(sims), 1.0 / tau));
  const auto positive_term = g.slice_cols(log_probs, 0, 1);
  const double batch = static_cast<double>(g.node(anchors).rows);
  return g.scale(g.sum(positive_term), -1.0 / batch);
}

diff::NodeId build_pretrain_loss(diff::Graph& g, const EncoderConfig& encoder,
                                 const ContrastiveBatch& batch, double tau) {
  const std::size_t B = batch.size();
  if (B == 0) throw std::invalid_argument("pretrain loss: empty batch");
  const std::size_t d = batch.anchors.cols();
  const std::size_t L = batch.negatives.front().rows();

  // rows: [anchors | positives | negative 0 of each anchor | ... | negative L-1]
  Matrix views(B * (L + 2), d);
  auto put = [&](std::size_t row, std::span<const double> src) {
    std::copy(src.begin(), src.end(), views.row(row).begin());
  };
  for (std::size_t b = 0; b < B; ++b) {
    put(b, batch.anchors.row(b));
    put(B + b, batch.positives.row(b));
    for (std::size_t l = 0; l < L; ++l) put((2 + l) * B + b, batch.negatives[b].row(l));
  }
  const auto embedded = build_encoder(g, encoder, g.input(std::move(views), "views"));
  const auto anchors = g.slice_rows(embedded, 0, B);
  const auto positives = g.slice_rows(embedded, B, 2 * B);
  std::vector<diff::NodeId> negatives;
  for (std::size_t l = 0; l < L; ++l) {
    negatives.push_back(g.slice_rows(embedded, (2 + l) * B, (3 + l) * B));
  }
  return build_infonce_loss(g, anchors, positives, negatives, tau);
}

PretrainResult pretrain(const Matrix& features, const EncoderConfig& encoder,
                        const PretrainConfig& config) {
  validate(config);
  validate(encoder);
  if (features.cols() != encoder.d_in) {
    throw std::invalid_argument("pretrain: data has d=" + std::to_string(features.cols()) +
                                ", encoder expects " + std::to_string(encoder.d_in));
  }
  const std::size_t n = features.rows();
  if (n <= config.L) {
    throw std::invalid_argument("pretrain: need n > L (n=" + std::to_string(n) +
                                ", L=" + std::to_string(config.L) + ")");
  }
  validate_task(config.task, features.cols());

  PretrainResult result{init_encoder(encoder), {}};
  auto adam = diff::AdamState::for_params(result.params.weights, config.adam_beta1,
                                          config.adam_beta2, config.adam_epsilon);
  Rng order_rng(derive_seed(config.seed, "order"));
  Rng view_rng(derive_seed(config.seed, "views"));
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.lr_schedule.at(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[order_rng.index(i + 1)]);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const auto batch = build_contrastive_batch(features, idx, config.task, config.L, view_rng);
      diff::Graph g;
      const auto loss = build_pretrain_loss(g, encoder, batch, config.tau);
      const auto grads = diff::backward(g, result.params.weights, loss);
      diff::adam_step(result.params.weights, grads.params, adam, lr);
      loss_sum += grads.loss * static_cast<double>(idx.size());
    }
    result.history.epoch_loss.push_back(loss_sum / static_cast<double>(n));
    result.history.learning_rate.push_back(lr);
  }
  return result;
}

PretrainResult pretrain(const Dataset& data, const EncoderConfig& encoder,
                        const PretrainConfig& config) {
  return pretrain(data.features, encoder, config);
}

void write_embedding_csv(const Matrix& embeddings, std::span<const int> labels,
                         const std::filesystem::path& path, std::string_view prefix) {
  if (labels.size() != embeddings.rows()) {
    throw std::invalid_argument("embedding csv: label count differs from row count");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t j = 0; j < embeddings.cols(); ++j) out << prefix << j << ',';
  out << "label\n";
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    for (double v : embeddings.row(i)) out << format_real(v) << ',';
    out << labels[i] << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

EmbeddingTable read_embedding_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty file");
  const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 2) throw std::runtime_error(path.string() + ": expected value and label columns");

  EmbeddingTable table;
  std::vector<double> row(columns - 1);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(fields, cell, ',')) {
      if (c + 1 < columns) {
        const auto v = parse_real(cell);
        if (!v) {
          throw std::runtime_error(path.string() + ": bad value '" + cell + "' at row " +
                                   std::to_string(line_no));
        }
        row[c] = *v;
      } else if (c + 1 == columns) {
        int label = 0;
        const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), label);
        if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size()) {
          throw std::runtime_error(path.string() + ": bad label '" + cell + "' at row " +
                                   std::to_string(line_no));
        }
        table.labels.push_back(label);
      }
      ++c;
    }
    if (c != columns) {
      throw std::runtime_error(path.string() + ": row " + std::to_string(line_no) +
                               " has the wrong number of fields");
    }
    table.values.append_row(row);
  }
  if (table.values.rows() == 0) table.values = Matrix(0, columns - 1);
  return table;
}

void embed_and_export(const EncoderParams& params, const Dataset& data,
                      const std::filesystem::path& path) {
  write_embedding_csv(encode_dataset(params, data), data.labels, path);
}

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,mean_loss,learning_rate\n";
  for (std::size_t e = 0; e < history.epoch_loss.size(); ++e) {
    out << e << ',' << format_real(history.epoch_loss[e]) << ','
        << format_real(history.learning_rate[e]) << '\n';
  }
}

}  // namespace tabcl
