// tabcl: command-line runner for contrastive pre-training experiments.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "tabcl/experiment.hpp"

namespace fs = std::filesystem;
using namespace tabcl;

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> task;
  std::optional<std::size_t> k;
  std::optional<std::string> encoder;
  std::optional<std::size_t> d_prime;
  std::optional<std::size_t> epochs;
  std::optional<std::string> mode;
  std::optional<double> alpha;
  std::optional<std::string> csv;
  std::optional<std::string> label_column;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "experiment config (JSON) or a run manifest");
  cmd->add_option("--seed", o.seed, "root seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--task", o.task, "pretext task: fs, fm or fs+fm");
  cmd->add_option("--k", o.k, "swap / mask count");
  cmd->add_option("--encoder", o.encoder, "encoder kind: mlp or transformer");
  cmd->add_option("--d-prime", o.d_prime, "encoder output dimension");
  cmd->add_option("--epochs", o.epochs, "pre-training epochs");
  cmd->add_option("--mode", o.mode, "stacking mode: origin_only, embedding_only, concat, fuse");
  cmd->add_option("--alpha", o.alpha, "fusion weight of the raw features");
  cmd->add_option("--csv", o.csv, "input CSV (replaces the configured data source)");
  cmd->add_option("--label-column", o.label_column, "label column of --csv");
}

ExperimentConfig resolve_config(const CommonOptions& o) {
  ExperimentConfig c;
  if (!o.config_path.empty()) {
    c = load_experiment_config(o.config_path);
  } else {
    c.data.synthetic = SyntheticConfig{};
  }
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  if (o.task) c.pretrain.task.kind = parse_task_kind(*o.task);
  if (o.k) c.pretrain.task.k = *o.k;
  if (o.encoder) c.encoder.kind = parse_encoder_kind(*o.encoder);
  if (o.d_prime) c.encoder.d_out = *o.d_prime;
  if (o.epochs) c.pretrain.epochs = *o.epochs;
  if (o.mode) c.stacking.mode = parse_stacking_mode(*o.mode);
  if (o.alpha) c.stacking.alpha = *o.alpha;
  if (o.csv) {
    c.data.csv_path = *o.csv;
    c.data.synthetic.reset();
  }
  if (o.label_column) c.data.label_column = *o.label_column;
  validate(c.stacking);
  return c;
}

Embeddings read_embeddings(const fs::path& dir) {
  return {read_embedding_csv(dir / "embeddings_train.csv").values,
          read_embedding_csv(dir / "embeddings_test.csv").values};
}

void print_summary(const EvaluationResult& r) {
  std::printf("%-22s %9s %9s %9s | %9s %9s %9s\n", "classifier", "acc", "recall", "f1", "acc*", "recall*",
              "f1*");
  for (std::size_t i = 0; i < r.origin.reports.size(); ++i) {
    const auto& o = r.origin.reports[i];
    const auto& s = r.ssp.reports[i];
    std::printf("%-22s %9.4f %9.4f %9.4f | %9.4f %9.4f %9.4f\n", o.classifier.c_str(), o.accuracy,
                o.macro_recall, o.macro_f1, s.accuracy, s.macro_recall, s.macro_f1);
  }
  std::printf("OaP %.6f   rare-class recall %.4f -> %.4f   (* = with pre-training)\n", r.oap,
              r.rare_recall_origin, r.rare_recall_ssp);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive self-supervised pre-training for imbalanced tabular classification"};
  app.require_subcommand(1);

  CommonOptions opts;
  auto* gen = app.add_subcommand("gen-data", "write the configured synthetic dataset as CSV");
  auto* pre = app.add_subcommand("pretrain", "phase 1: train the encoder, write encoder.json");
  auto* emb = app.add_subcommand("embed", "encode train/test splits with a checkpoint");
  auto* tev = app.add_subcommand("train-eval", "phase 2: stack, train classifiers, evaluate");
  auto* swp = app.add_subcommand("sweep", "OaP over an alpha or d' grid");
  auto* rep = app.add_subcommand("report", "recompute OaP from stored reports");
  auto* run = app.add_subcommand("run", "full pipeline with manifest");
  for (auto* cmd : {gen, pre, emb, tev, swp, run}) add_common(cmd, opts);

  std::string checkpoint;
  emb->add_option("--checkpoint", checkpoint, "encoder checkpoint (default <out>/encoder.json)");
  std::string embeddings_dir;
  tev->add_option("--embeddings", embeddings_dir, "directory holding embeddings_{train,test}.csv (default <out>)");
  std::string sweep_param;
  std::vector<double> sweep_values;
  swp->add_option("--param", sweep_param, "alpha or d_prime");
  swp->add_option("--values", sweep_values, "grid values")->delimiter(',');
  std::string ssp_path, origin_path, report_dir;
  rep->add_option("--dir", report_dir, "directory with reports_ssp.json and reports_origin.json");
  rep->add_option("--ssp", ssp_path, "reports with pre-training");
  rep->add_option("--origin", origin_path, "reports without pre-training");
  std::string gen_output;
  gen->add_option("--output", gen_output, "CSV path (default <out>/data.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*rep) {
      if (!report_dir.empty()) {
        if (ssp_path.empty()) ssp_path = (fs::path(report_dir) / "reports_ssp.json").string();
        if (origin_path.empty()) origin_path = (fs::path(report_dir) / "reports_origin.json").string();
      }
      if (ssp_path.empty() || origin_path.empty()) throw StageError("report", "need --dir or --ssp and --origin");
      const auto ssp = read_reports_json(ssp_path);
      const auto origin = read_reports_json(origin_path);
      double value = 0.0;
      try {
        value = oap({ssp, origin});
      } catch (const std::exception& e) {
        throw StageError("report", e.what());
      }
      std::cout << nlohmann::json{{"oap", value}, {"classifiers", ssp.size()}}.dump() << '\n';
      return 0;
    }

    auto config = resolve_config(opts);
    const fs::path dir(config.output_dir);

    if (*gen) {
      if (!config.data.synthetic) throw StageError("gen-data", "config has no synthetic data source");
      const fs::path path = gen_output.empty() ? dir / "data.csv" : fs::path(gen_output);
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      write_csv(load_source(config), path);
      std::cout << "wrote " << path.string() << '\n';
    } else if (*pre) {
      const auto r = run_pretrain_stage(config);
      std::printf("pre-training loss %.6f -> %.6f over %zu epochs; checkpoint %s\n",
                  r.history.epoch_loss.empty() ? 0.0 : r.history.epoch_loss.front(),
                  r.history.epoch_loss.empty() ? 0.0 : r.history.epoch_loss.back(), r.history.epoch_loss.size(),
                  (dir / "encoder.json").string().c_str());
    } else if (*emb) {
      const fs::path ckpt = checkpoint.empty() ? dir / "encoder.json" : fs::path(checkpoint);
      const auto params = [&] {
        try {
          return load_encoder(ckpt);
        } catch (const std::exception& e) {
          throw StageError("embed", e.what());
        }
      }();
      const auto e = run_embed_stage(config, params);
      std::printf("embedded %zu train and %zu test rows into d'=%zu\n", e.train.rows(), e.test.rows(),
                  e.train.cols());
    } else if (*tev) {
      const fs::path edir = embeddings_dir.empty() ? dir : fs::path(embeddings_dir);
      Embeddings e;
      try {
        e = read_embeddings(edir);
      } catch (const std::exception& ex) {
        throw StageError("train-eval", ex.what());
      }
      print_summary(run_train_eval_stage(config, e));
    } else if (*swp) {
      if (!sweep_param.empty()) {
        nlohmann::json s{{"parameter", sweep_param}, {"values", sweep_values}};
        nlohmann::json tmp = config;
        tmp["sweep"] = s;
        config = tmp.get<ExperimentConfig>();
      }
      for (const auto& p : run_sweep(config)) {
        std::printf("%10g  OaP %+.6f  rare recall %.4f -> %.4f\n", p.value, p.oap, p.rare_recall_origin,
                    p.rare_recall_ssp);
      }
    } else if (*run) {
      const auto outcome = run_experiment(config);
      print_summary(outcome.evaluation);
      std::printf("manifest %s (hash %s)\n", (dir / "manifest.json").string().c_str(),
                  outcome.config_hash.c_str());
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: [config] " << e.what() << '\n';
    return 1;
  }
  return 0;
}
