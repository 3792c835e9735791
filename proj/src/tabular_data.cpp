#include "tabcl/tabular_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <system_error>

#include "tabcl/rng.hpp"

namespace tabcl {
namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes(), 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.features = Matrix(indices.size(), dim());
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = features.row(indices[r]);
    std::copy(src.begin(), src.end(), out.features.row(r).begin());
    out.labels.push_back(labels[indices[r]]);
  }
  out.feature_names = feature_names;
  out.class_names = class_names;
  out.standardization = standardization;
  return out;
}

void Dataset::validate() const {
  if (size() == 0) throw std::invalid_argument("dataset has no samples");
  if (num_classes() < 2) throw std::invalid_argument("dataset needs at least 2 classes");
  if (labels.size() != size()) throw std::invalid_argument("label count differs from row count");
  if (feature_names.size() != dim()) {
    throw std::invalid_argument("feature name count differs from feature dimension");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes()) {
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, m)");
    }
  }
  if (standardization) {
    if (standardization->size() != dim()) {
      throw std::invalid_argument("standardization must hold one entry per feature");
    }
    for (const auto& s : *standardization) {
      if (!(s.stddev > 0.0)) throw std::invalid_argument("standardization stddev must be > 0");
    }
  }
}

void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = nlohmann::json{{"n", c.n},
                     {"d", c.d},
                     {"m", c.m},
                     {"imbalance_exponent", c.imbalance_exponent},
                     {"class_separation", c.class_separation},
                     {"noise_scale", c.noise_scale},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  c = SyntheticConfig{};
  c.n = j.value("n", c.n);
  c.d = j.value("d", c.d);
  c.m = j.value("m", c.m);
  c.imbalance_exponent = j.value("imbalance_exponent", c.imbalance_exponent);
  c.class_separation = j.value("class_separation", c.class_separation);
  c.noise_scale = j.value("noise_scale", c.noise_scale);
  c.seed = j.value("seed", c.seed);
}

std::string format_real(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  if (res.ec != std::errc{}) throw std::runtime_error("format_real: conversion failed");
  return std::string(buf, res.ptr);
}

std::optional<double> parse_real(std::string_view text) {
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  if (text.empty()) return std::nullopt;
  double value = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) return std::nullopt;
  return value;
}

Dataset load_csv(const std::filesystem::path& path, std::string_view label_column,
                 const std::vector<std::string>& class_order) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line) || trim(line).empty()) {
    throw std::runtime_error(path.string() + ": empty file (no header row)");
  }
  auto header = split_fields(line);
  for (auto& h : header) h = trim(h);
  std::set<std::string> seen;
  for (const auto& h : header) {
    if (h.empty()) throw std::runtime_error(path.string() + ": empty column name in header");
    if (!seen.insert(h).second) {
      throw std::runtime_error(path.string() + ": duplicate header column '" + h + "'");
    }
  }
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) {
    throw std::runtime_error(path.string() + ": missing label column '" +
                             std::string(label_column) + "'");
  }
  const auto label_pos = static_cast<std::size_t>(label_it - header.begin());

  Dataset data;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c != label_pos) data.feature_names.push_back(header[c]);
  }

  std::map<std::string, int> class_index;
  for (const auto& name : class_order) {
    if (!class_index.emplace(name, static_cast<int>(data.class_names.size())).second) {
      throw std::invalid_argument("class order lists '" + name + "' twice");
    }
    data.class_names.push_back(name);
  }

  std::vector<double> row(data.feature_names.size());
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw std::runtime_error(path.string() + ": row " + std::to_string(line_no) + " has " +
                               std::to_string(fields.size()) + " fields, expected " +
                               std::to_string(header.size()));
    }
    std::size_t f = 0;
    for (std::size_t c = 0; c < fields.size(); ++c) {
      if (c == label_pos) continue;
      const auto cell = trim(fields[c]);
      const auto value = parse_real(cell);
      if (!value) {
        throw std::runtime_error(path.string() + ": non-numeric cell '" + cell + "' at row " +
                                 std::to_string(line_no) + ", column '" + header[c] + "'");
      }
      row[f++] = *value;
    }
    const auto label = trim(fields[label_pos]);
    auto it = class_index.find(label);
    if (it == class_index.end()) {
      if (!class_order.empty()) {
        throw std::runtime_error(path.string() + ": label '" + label + "' at row " +
                                 std::to_string(line_no) + " is not in the class order");
      }
      it = class_index.emplace(label, static_cast<int>(data.class_names.size())).first;
      data.class_names.push_back(label);
    }
    data.features.append_row(row);
    data.labels.push_back(it->second);
  }
  if (data.labels.empty()) throw std::runtime_error(path.string() + ": no data rows");
  if (data.features.cols() == 0 && data.feature_names.empty()) {
    throw std::runtime_error(path.string() + ": no feature columns");
  }
  data.validate();
  return data;
}

void write_csv(const Dataset& data, const std::filesystem::path& path,
               std::string_view label_column) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& name : data.feature_names) out << name << ',';
  out << label_column << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data.features.row(i)) out << format_real(v) << ',';
    out << data.class_names[static_cast<std::size_t>(data.labels[i])] << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<FeatureStats> fit_standardization(const Dataset& data) {
  const std::size_t n = data.size();
  const std::size_t d = data.dim();
  if (n == 0) throw std::invalid_argument("fit_standardization: empty dataset");
  std::vector<FeatureStats> stats(d);
  for (std::size_t j = 0; j < d; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += data.features(i, j);
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    bool constant = true;
    for (std::size_t i = 0; i < n; ++i) {
      const double delta = data.features(i, j) - mean;
      ss += delta * delta;
      constant = constant && data.features(i, j) == data.features(0, j);
    }
    const double stddev = std::sqrt(ss / static_cast<double>(n));
    stats[j] = {mean, (constant || stddev == 0.0) ? 1.0 : stddev};
    if (constant) stats[j].mean = data.features(0, j);
  }
  return stats;
}

Dataset apply_standardization(const Dataset& data, std::span<const FeatureStats> stats) {
  if (stats.size() != data.dim()) {
    throw std::invalid_argument("apply_standardization: " + std::to_string(stats.size()) +
                                " stats for " + std::to_string(data.dim()) + " features");
  }
  Dataset out = data;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto row = out.features.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      row[j] = (row[j] - stats[j].mean) / stats[j].stddev;
    }
  }
  out.standardization = std::vector<FeatureStats>(stats.begin(), stats.end());
  return out;
}

Dataset standardize(const Dataset& data) {
  if (data.standardization) throw std::invalid_argument("standardize: already standardized");
  return apply_standardization(data, fit_standardization(data));
}

Split stratified_split(const Dataset& data, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("stratified_split: test_fraction must lie in (0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(data.num_classes());
  for (std::size_t i = 0; i < data.size(); ++i) {
    by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  }
  Rng rng(seed);
  std::vector<bool> is_test(data.size(), false);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    if (members.size() < 2) {
      throw std::invalid_argument("stratified_split: class '" + data.class_names[c] +
                                  "' has fewer than 2 samples");
    }
    for (std::size_t i = members.size() - 1; i > 0; --i) {
      std::swap(members[i], members[rng.index(i + 1)]);
    }
    // 1e-9 keeps products like 10 * 0.3 from flooring one short
    auto take = static_cast<std::size_t>(
        std::floor(static_cast<double>(members.size()) * test_fraction + 1e-9));
    take = std::clamp<std::size_t>(take, 1, members.size() - 1);
    for (std::size_t t = 0; t < take; ++t) is_test[members[t]] = true;
  }
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;
  for (std::size_t i = 0; i < data.size(); ++i) (is_test[i] ? test_idx : train_idx).push_back(i);
  return {data.subset(train_idx), data.subset(test_idx)};
}

std::vector<double> class_priors(const SyntheticConfig& config) {
  if (config.m < 2) throw std::invalid_argument("synthetic: m must be >= 2");
  if (config.imbalance_exponent < 0.0) {
    throw std::invalid_argument("synthetic: imbalance_exponent must be >= 0");
  }
  std::vector<double> priors(config.m);
  for (std::size_t j = 0; j < config.m; ++j) {
    priors[j] = std::pow(static_cast<double>(j + 1), -config.imbalance_exponent);
  }
  const double total = std::accumulate(priors.begin(), priors.end(), 0.0);
  for (auto& p : priors) p /= total;
  return priors;
}

std::vector<std::size_t> synthetic_class_counts(const SyntheticConfig& config) {
  const auto priors = class_priors(config);
  if (config.n < config.m) {
    throw std::invalid_argument("synthetic: n < m, cannot give every class a sample");
  }
  std::vector<std::size_t> counts(config.m);
  std::size_t others = 0;
  for (std::size_t j = 1; j < config.m; ++j) {
    const auto rounded = std::llround(static_cast<double>(config.n) * priors[j]);
    counts[j] = static_cast<std::size_t>(std::max<long long>(rounded, 1));
    others += counts[j];
  }
  if (others >= config.n) {
    throw std::invalid_argument("synthetic: rounding leaves no samples for class 0");
  }
  counts[0] = config.n - others;
  return counts;
}

Dataset generate_synthetic(const SyntheticConfig& config) {
  if (config.d < 1) throw std::invalid_argument("synthetic: d must be >= 1");
  if (!(config.class_separation > 0.0)) {
    throw std::invalid_argument("synthetic: class_separation must be > 0");
  }
  if (!(config.noise_scale > 0.0)) throw std::invalid_argument("synthetic: noise_scale must be > 0");
  const auto counts = synthetic_class_counts(config);

  Rng rng(config.seed);
  Matrix means(config.m, config.d);
  for (std::size_t j = 0; j < config.m; ++j) {
    auto mu = means.row(j);
    double norm = 0.0;
    while (norm == 0.0) {
      norm = 0.0;
      for (auto& v : mu) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
    }
    for (auto& v : mu) v = v / norm * config.class_separation;
  }

  std::vector<int> labels;
  labels.reserve(config.n);
  for (std::size_t j = 0; j < config.m; ++j) labels.insert(labels.end(), counts[j], static_cast<int>(j));
  for (std::size_t i = labels.size() - 1; i > 0; --i) std::swap(labels[i], labels[rng.index(i + 1)]);

  Dataset data;
  data.features = Matrix(config.n, config.d);
  for (std::size_t i = 0; i < config.n; ++i) {
    const auto mu = means.row(static_cast<std::size_t>(labels[i]));
    auto x = data.features.row(i);
    for (std::size_t k = 0; k < config.d; ++k) x[k] = mu[k] + config.noise_scale * rng.normal();
  }
  data.labels = std::move(labels);
  for (std::size_t k = 0; k < config.d; ++k) data.feature_names.push_back("f" + std::to_string(k));
  for (std::size_t j = 0; j < config.m; ++j) data.class_names.push_back("c" + std::to_string(j));
  return data;
}

}  // namespace tabcl
