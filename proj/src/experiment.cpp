#include "tabcl/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <utility>

#include "tabcl/rng.hpp"

namespace tabcl {
namespace {

namespace fs = std::filesystem;

template <class F>
auto staged(const std::string& stage, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

std::string sweep_name(SweepParameter p) {
  switch (p) {
    case SweepParameter::None: return "none";
    case SweepParameter::Alpha: return "alpha";
    case SweepParameter::DPrime: return "d_prime";
  }
  return "?";
}

SweepParameter parse_sweep(std::string_view s) {
  if (s == "none") return SweepParameter::None;
  if (s == "alpha") return SweepParameter::Alpha;
  if (s == "d_prime") return SweepParameter::DPrime;
  throw std::invalid_argument("unknown sweep parameter '" + std::string(s) + "' (alpha or d_prime)");
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

fs::path out_dir(const ExperimentConfig& config) {
  fs::path dir(config.output_dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<int> predict_labels(const TrainedClassifier& model, const StackedDataset& data) {
  return predict_dataset(model, data.vectors);
}

void write_path_outputs(const fs::path& dir, const std::string& tag, const PathResult& path) {
  write_reports_json(path.reports, dir / ("reports_" + tag + ".json"));
  write_reports_csv(path.reports, dir / ("reports_" + tag + ".csv"));
  fs::create_directories(dir / "models");
  for (const auto& m : path.models) {
    write_json(classifier_to_json(m), dir / "models" / (tag + "_" + m.spec.name + ".json"));
  }
}

nlohmann::json summary_json(const EvaluationResult& r, const PreparedData& data) {
  return {{"oap", r.oap},
          {"rare_classes", data.rare_classes},
          {"rare_recall_origin", r.rare_recall_origin},
          {"rare_recall_ssp", r.rare_recall_ssp},
          {"rare_recall_gain", r.rare_recall_ssp - r.rare_recall_origin}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json data;
  if (c.data.csv_path) {
    data["csv"] = *c.data.csv_path;
    data["label_column"] = c.data.label_column;
  }
  if (c.data.synthetic) data["synthetic"] = *c.data.synthetic;
  if (!c.data.class_order.empty()) data["class_order"] = c.data.class_order;
  j = nlohmann::json{{"seed", c.seed},
                     {"data", data},
                     {"test_fraction", c.test_fraction},
                     {"pretrain", c.pretrain},
                     {"encoder", c.encoder},
                     {"stacking", c.stacking},
                     {"sweep", {{"parameter", sweep_name(c.sweep.parameter)}, {"values", c.sweep.values}}},
                     {"classifiers", c.classifiers},
                     {"output_dir", c.output_dir},
                     {"rare_prevalence", c.rare_prevalence}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  c.seed = j.value("seed", c.seed);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    if (d.contains("csv")) c.data.csv_path = d.at("csv").get<std::string>();
    c.data.label_column = d.value("label_column", c.data.label_column);
    c.data.class_order = d.value("class_order", c.data.class_order);
    if (d.contains("synthetic")) c.data.synthetic = d.at("synthetic").get<SyntheticConfig>();
  }
  c.test_fraction = j.value("test_fraction", c.test_fraction);
  if (j.contains("pretrain")) c.pretrain = j.at("pretrain").get<PretrainConfig>();
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderConfig>();
  if (j.contains("stacking")) c.stacking = j.at("stacking").get<StackingConfig>();
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    c.sweep.parameter = parse_sweep(s.value("parameter", std::string("none")));
    c.sweep.values = s.value("values", std::vector<double>{});
  }
  if (j.contains("classifiers")) c.classifiers = j.at("classifiers").get<std::vector<ClassifierSpec>>();
  c.output_dir = j.value("output_dir", c.output_dir);
  c.rare_prevalence = j.value("rare_prevalence", c.rare_prevalence);

  if (c.data.csv_path && c.data.synthetic) {
    throw std::invalid_argument("config: give either data.csv or data.synthetic, not both");
  }
  if (c.sweep.parameter != SweepParameter::None && c.sweep.values.empty()) {
    throw std::invalid_argument("config: sweep values must be nonempty");
  }
  if (c.classifiers.empty()) throw std::invalid_argument("config: classifier registry is empty");
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  const auto j = nlohmann::json::parse(in);
  return (j.contains("config") && j.contains("config_hash") ? j.at("config") : j).get<ExperimentConfig>();
}

SeedPlan seed_plan(std::uint64_t root) {
  return {root, derive_seed(root, "data"), derive_seed(root, "split"), derive_seed(root, "encoder"),
          derive_seed(root, "pretrain")};
}

ExperimentConfig resolve_seeds(ExperimentConfig config) {
  const auto plan = seed_plan(config.seed);
  if (config.data.synthetic) config.data.synthetic->seed = plan.data;
  config.encoder.seed = plan.encoder;
  config.pretrain.seed = plan.pretrain;
  for (auto& spec : config.classifiers) spec.seed = derive_seed(config.seed, "classifier/" + spec.name);
  return config;
}

std::string config_hash(const nlohmann::json& resolved_config) {
  auto copy = resolved_config;
  copy.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(copy.dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Data

Dataset load_source(const ExperimentConfig& config) {
  const auto resolved = resolve_seeds(config);
  if (resolved.data.csv_path) {
    return load_csv(*resolved.data.csv_path, resolved.data.label_column, resolved.data.class_order);
  }
  if (resolved.data.synthetic) return generate_synthetic(*resolved.data.synthetic);
  throw std::invalid_argument("config: no data source (data.csv or data.synthetic)");
}

PreparedData prepare_data(const ExperimentConfig& config) {
  return staged("data", [&] {
    const auto plan = seed_plan(config.seed);
    const Dataset raw = load_source(config);
    auto split = stratified_split(raw, config.test_fraction, plan.split);
    const auto stats = fit_standardization(split.train);
    PreparedData out;
    out.train = apply_standardization(split.train, stats);
    out.test = apply_standardization(split.test, stats);
    const auto counts = out.train.class_counts();
    out.rare_classes = rare_classes(counts, config.rare_prevalence);
    return out;
  });
}

EncoderConfig resolved_encoder(const ExperimentConfig& config, std::size_t d) {
  EncoderConfig enc = resolve_seeds(config).encoder;
  enc.d_in = d;
  if (enc.d_out == 0) enc.d_out = d;
  return enc;
}

// ---------------------------------------------------------------------------
// Stages

PathResult train_and_evaluate(const StackedDataset& train, const StackedDataset& test,
                              const std::vector<ClassifierSpec>& registry) {
  PathResult out;
  for (const auto& spec : registry) {
    auto model = train_classifier(train, spec);
    const auto pred = predict_labels(model, test);
    out.reports.push_back(evaluate(spec.name, test.labels, pred, test.num_classes));
    out.models.push_back(std::move(model));
  }
  return out;
}

EvaluationResult evaluate_stacking(const ExperimentConfig& config, const PreparedData& data,
                                   const Embeddings& embeddings, const StackingConfig& stacking) {
  const auto resolved = resolve_seeds(config);
  EvaluationResult r;
  r.origin = staged("train-eval", [&] {
    return train_and_evaluate(origin_dataset(data.train), origin_dataset(data.test), resolved.classifiers);
  });
  r.ssp = staged("train-eval", [&] {
    const auto train = stack_dataset(data.train, embeddings.train, stacking);
    const auto test = stack_dataset(data.test, embeddings.test, stacking);
    return train_and_evaluate(train, test, resolved.classifiers);
  });
  r.oap = oap({r.ssp.reports, r.origin.reports});
  r.rare_recall_origin = mean_recall(r.origin.reports, data.rare_classes);
  r.rare_recall_ssp = mean_recall(r.ssp.reports, data.rare_classes);
  return r;
}

PretrainResult run_pretrain_stage(const ExperimentConfig& config) {
  const auto data = prepare_data(config);
  return staged("pretrain", [&] {
    const auto resolved = resolve_seeds(config);
    auto result = pretrain(data.train.features, resolved_encoder(config, data.train.dim()), resolved.pretrain);
    const auto dir = out_dir(config);
    save_encoder(result.params, dir / "encoder.json");
    write_history_csv(result.history, dir / "pretrain_history.csv");
    return result;
  });
}

Embeddings run_embed_stage(const ExperimentConfig& config, const EncoderParams& encoder) {
  const auto data = prepare_data(config);
  return staged("embed", [&] {
    Embeddings e{encode_dataset(encoder, data.train), encode_dataset(encoder, data.test)};
    const auto dir = out_dir(config);
    write_embedding_csv(e.train, data.train.labels, dir / "embeddings_train.csv");
    write_embedding_csv(e.test, data.test.labels, dir / "embeddings_test.csv");
    return e;
  });
}

EvaluationResult run_train_eval_stage(const ExperimentConfig& config, const Embeddings& embeddings) {
  const auto data = prepare_data(config);
  auto result = evaluate_stacking(config, data, embeddings, config.stacking);
  staged("report", [&] {
    const auto dir = out_dir(config);
    write_path_outputs(dir, "origin", result.origin);
    write_path_outputs(dir, "ssp", result.ssp);
    write_json(summary_json(result, data), dir / "summary.json");
    const std::size_t dims = std::min<std::size_t>(2, data.train.dim());
    write_projection_csv(pca_project(data.train.features, dims), data.train.labels,
                         dir / "projection_origin.csv");
    const auto stacked = stack_dataset(data.train, embeddings.train, config.stacking);
    write_projection_csv(pca_project(stacked.vectors, std::min<std::size_t>(2, stacked.stacked_dim())),
                         data.train.labels, dir / "projection_ssp.csv");
    return 0;
  });
  return result;
}

ExperimentOutcome run_experiment(const ExperimentConfig& config) {
  const auto resolved = resolve_seeds(config);
  const auto data = prepare_data(resolved);

  nlohmann::json resolved_json = resolved;
  resolved_json["encoder"] = resolved_encoder(resolved, data.train.dim());
  const auto hash = config_hash(resolved_json);
  const auto plan = seed_plan(resolved.seed);
  nlohmann::json manifest{{"config", resolved_json},
                          {"config_hash", hash},
                          {"seeds",
                           {{"root", plan.root},
                            {"data", plan.data},
                            {"split", plan.split},
                            {"encoder", plan.encoder},
                            {"pretrain", plan.pretrain}}}};
  write_json(manifest, out_dir(resolved) / "manifest.json");

  auto pre = run_pretrain_stage(resolved);
  const auto embeddings = run_embed_stage(resolved, pre.params);
  auto eval = run_train_eval_stage(resolved, embeddings);
  return {std::move(pre), std::move(eval), hash};
}

std::vector<SweepPoint> run_sweep(const ExperimentConfig& config) {
  if (config.sweep.parameter == SweepParameter::None || config.sweep.values.empty()) {
    throw StageError("sweep", "no sweep parameter/values configured");
  }
  const auto resolved = resolve_seeds(config);
  const auto data = prepare_data(resolved);
  const auto dir = out_dir(resolved);
  std::vector<SweepPoint> points;

  auto embed_with = [&](const EncoderConfig& enc) {
    return staged("sweep", [&] {
      const auto pre = pretrain(data.train.features, enc, resolved.pretrain);
      return Embeddings{encode_dataset(pre.params, data.train), encode_dataset(pre.params, data.test)};
    });
  };

  if (resolved.sweep.parameter == SweepParameter::Alpha) {
    auto enc = resolved_encoder(resolved, data.train.dim());
    enc.d_out = data.train.dim();
    const auto emb = embed_with(enc);
    for (double alpha : resolved.sweep.values) {
      const StackingConfig stacking{StackingMode::Fuse, alpha};
      const auto r = staged("sweep", [&] { return evaluate_stacking(resolved, data, emb, stacking); });
      points.push_back({alpha, r.oap, r.rare_recall_origin, r.rare_recall_ssp});
    }
  } else {
    for (double v : resolved.sweep.values) {
      if (!(v >= 1.0) || v != static_cast<double>(static_cast<std::size_t>(v))) {
        throw StageError("sweep", "d_prime values must be positive integers");
      }
      auto enc = resolved_encoder(resolved, data.train.dim());
      enc.d_out = static_cast<std::size_t>(v);
      const auto emb = embed_with(enc);
      const StackingConfig stacking{StackingMode::Concat, resolved.stacking.alpha};
      const auto r = staged("sweep", [&] { return evaluate_stacking(resolved, data, emb, stacking); });
      points.push_back({v, r.oap, r.rare_recall_origin, r.rare_recall_ssp});
    }
  }

  std::ofstream out(dir / "sweep.csv");
  if (!out) throw StageError("sweep", "cannot write sweep.csv");
  out << sweep_name(resolved.sweep.parameter) << ",oap,rare_recall_origin,rare_recall_ssp\n";
  for (const auto& p : points) {
    out << format_real(p.value) << ',' << format_real(p.oap) << ',' << format_real(p.rare_recall_origin)
        << ',' << format_real(p.rare_recall_ssp) << '\n';
  }
  return points;
}

}  // namespace tabcl
