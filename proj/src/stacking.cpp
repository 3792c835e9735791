#include "tabcl/stacking.hpp"

#include <stdexcept>

#include "tabcl/tabular_data.hpp"

namespace tabcl {

std::string stacking_mode_name(StackingMode mode) {
  switch (mode) {
    case StackingMode::OriginOnly: return "origin_only";
    case StackingMode::EmbeddingOnly: return "embedding_only";
    case StackingMode::Concat: return "concat";
    case StackingMode::Fuse: return "fuse";
  }
  return "?";
}

StackingMode parse_stacking_mode(std::string_view name) {
  if (name == "origin_only") return StackingMode::OriginOnly;
  if (name == "embedding_only") return StackingMode::EmbeddingOnly;
  if (name == "concat") return StackingMode::Concat;
  if (name == "fuse") return StackingMode::Fuse;
  throw std::invalid_argument("unknown stacking mode '" + std::string(name) + "'");
}

void validate(const StackingConfig& c) {
  if (!(c.alpha >= 0.0 && c.alpha <= 1.0)) {
    throw std::invalid_argument("stacking: alpha must lie in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const StackingConfig& c) {
  j = nlohmann::json{{"mode", stacking_mode_name(c.mode)}, {"alpha", c.alpha}};
}

void from_json(const nlohmann::json& j, StackingConfig& c) {
  c = StackingConfig{};
  if (j.contains("mode")) c.mode = parse_stacking_mode(j.at("mode").get<std::string>());
  c.alpha = j.value("alpha", c.alpha);
  validate(c);
}

std::vector<double> concat(std::span<const double> raw, std::span<const double> embedding) {
  std::vector<double> out(raw.begin(), raw.end());
  out.insert(out.end(), embedding.begin(), embedding.end());
  return out;
}

std::vector<double> fuse(std::span<const double> raw, std::span<const double> embedding, double alpha) {
  if (raw.size() != embedding.size()) {
    throw std::invalid_argument("fuse: needs d' = d (got d=" + std::to_string(raw.size()) +
                                ", d'=" + std::to_string(embedding.size()) + ")");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("fuse: alpha must lie in [0, 1]");
  if (alpha == 1.0) return {raw.begin(), raw.end()};
  if (alpha == 0.0) return {embedding.begin(), embedding.end()};
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = alpha * raw[i] + (1.0 - alpha) * embedding[i];
  return out;
}

std::size_t stacked_dim(StackingMode mode, std::size_t d, std::size_t d_prime) {
  switch (mode) {
    case StackingMode::OriginOnly: return d;
    case StackingMode::EmbeddingOnly: return d_prime;
    case StackingMode::Concat: return d + d_prime;
    case StackingMode::Fuse:
      if (d != d_prime) {
        throw std::invalid_argument("stacking: fuse needs d' = d (got d=" + std::to_string(d) +
                                    ", d'=" + std::to_string(d_prime) + ")");
      }
      return d;
  }
  throw std::logic_error("stacking: unknown mode");
}

StackedDataset stack_dataset(const Dataset& data, const Matrix& embeddings,
                             const StackingConfig& config) {
  validate(config);
  if (embeddings.rows() != data.size()) {
    throw std::invalid_argument("stacking: " + std::to_string(embeddings.rows()) +
                                " embeddings for " + std::to_string(data.size()) + " rows");
  }
  const std::size_t dim = stacked_dim(config.mode, data.dim(), embeddings.cols());
  StackedDataset out;
  out.vectors = Matrix(data.size(), dim);
  out.labels = data.labels;
  out.num_classes = data.num_classes();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto raw = data.features.row(i);
    const auto emb = embeddings.row(i);
    std::vector<double> row;
    switch (config.mode) {
      case StackingMode::OriginOnly: row.assign(raw.begin(), raw.end()); break;
      case StackingMode::EmbeddingOnly: row.assign(emb.begin(), emb.end()); break;
      case StackingMode::Concat: row = concat(raw, emb); break;
      case StackingMode::Fuse: row = fuse(raw, emb, config.alpha); break;
    }
    std::copy(row.begin(), row.end(), out.vectors.row(i).begin());
  }
  return out;
}

StackedDataset origin_dataset(const Dataset& data) {
  return {data.features, data.labels, data.num_classes()};
}

}  // namespace tabcl
