// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tabcl/experiment.hpp"
#include "tabcl/rng.hpp"

using namespace tabcl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

struct ScratchDir {
  fs::path path;
  explicit ScratchDir(const std::string& tag) {
    std::random_device rd;
    path = fs::temp_directory_path() / ("tabcl_accept_" + tag + "_" + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

Matrix gaussian(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.normal();
  return m;
}

Dataset synthetic_39(std::uint64_t seed, std::size_t n) {
  SyntheticConfig s;
  s.n = n;
  s.seed = seed;
  return generate_synthetic(s);
}

// -------------------------------------------------------------------------

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  const auto data = synthetic_39(101, 60);
  PretextTask task;  // fs+fm, k = 4
  double worst_mlp = 0, worst_tf = 0, worst_clf = 0;
  std::size_t entries = 0, kinks = 0;
  auto check = [&](const diff::Graph& g, const diff::ParamSet& p, diff::NodeId loss) {
    const auto r = diff::finite_diff_report(g, p, loss);
    entries += r.entries;
    kinks += r.kink_entries;
    return r.max_rel_error;
  };

  for (auto kind : {EncoderKind::Mlp, EncoderKind::Transformer}) {
    EncoderConfig enc;
    enc.kind = kind;
    enc.d_in = enc.d_out = 39;
    enc.seed = 202;
    const auto params = init_encoder(enc);
    Rng rng(303);
    const std::size_t idx[] = {0, 7, 19, 33};
    const auto batch = build_contrastive_batch(data, idx, task, 8, rng);
    diff::Graph g;
    const auto loss = build_pretrain_loss(g, enc, batch, 0.5);
    const double err = check(g, params.weights, loss);
    (kind == EncoderKind::Mlp ? worst_mlp : worst_tf) = err;
  }

  {
    // a lightly trained softmax MLP at its usual scale
    StackedDataset train = origin_dataset(data);
    ClassifierSpec spec;
    spec.name = "mlp";
    spec.kind = ClassifierKind::SoftmaxMlp;
    spec.epochs = 5;
    spec.seed = 404;
    const auto model = train_classifier(train, spec);
    const auto& state = std::get<SoftmaxState>(model.state);
    Matrix x(8, 39), y(8, train.num_classes, 0.0);
    for (std::size_t r = 0; r < 8; ++r) {
      std::copy(data.features.row(r).begin(), data.features.row(r).end(), x.row(r).begin());
      y(r, static_cast<std::size_t>(data.labels[r])) = 1.0;
    }
    diff::Graph g;
    const auto loss = build_classifier_loss(g, state.widths, g.input(x), y, spec.lambda);
    worst_clf = check(g, state.params, loss);
  }
  const double secs = seconds_since(t0);
  const bool ok = worst_mlp <= 1e-4 && worst_tf <= 1e-4 && worst_clf <= 1e-4 && secs < 60;
  return {ok, "mlp " + fmt("%.2e", worst_mlp) + ", transformer " + fmt("%.2e", worst_tf) + ", softmax " +
                  fmt("%.2e", worst_clf) + " (" + std::to_string(entries) + " entries, " +
                  std::to_string(kinks) + " re-probed at a ReLU kink), " + fmt("%.1fs", secs)};
}

Outcome loss_identities() {
  double worst_uniform = 0, worst_scale = 0;
  Rng rng(5);
  for (std::size_t L : {1, 8, 32}) {
    const auto a = gaussian(1, 12, rng);
    Matrix negs(L, 12);
    for (std::size_t l = 0; l < L; ++l) std::copy(a.row(0).begin(), a.row(0).end(), negs.row(l).begin());
    const double loss = infonce_loss(a.row(0), a.row(0), negs, 0.5);
    worst_uniform = std::max(worst_uniform, std::abs(loss - std::log(static_cast<double>(L + 1))));
  }
  for (int t = 0; t < 200; ++t) {
    const std::size_t L = 1 + rng.index(32);
    const auto a = gaussian(1, 12, rng), p = gaussian(1, 12, rng), n = gaussian(L, 12, rng);
    const double base = infonce_loss(a.row(0), p.row(0), n, 0.5);
    const double c = std::exp(rng.uniform(-5, 5));
    std::vector<double> ac(a.values());
    for (auto& v : ac) v *= c;
    worst_scale = std::max(worst_scale, std::abs(infonce_loss(ac, p.row(0), n, 0.5) - base));
  }
  return {worst_uniform <= 1e-9 && worst_scale <= 1e-9,
          "ln(L+1) err " + fmt("%.1e", worst_uniform) + ", rescale err " + fmt("%.1e", worst_scale)};
}

Outcome stacking_exactness() {
  Rng rng(6);
  bool ok = true;
  for (int t = 0; t < 1000 && ok; ++t) {
    const std::size_t d = 1 + rng.index(40), dp = 1 + rng.index(40);
    std::vector<double> c(d), e(dp), e_same(d);
    for (auto& v : c) v = rng.normal() * std::exp(rng.uniform(-20, 20));
    for (auto& v : e) v = rng.normal();
    for (auto& v : e_same) v = rng.normal() * std::exp(rng.uniform(-20, 20));
    ok = ok && fuse(c, e_same, 1.0) == c && fuse(c, e_same, 0.0) == e_same;
    const auto cat = concat(c, e);
    ok = ok && std::vector<double>(cat.begin(), cat.begin() + static_cast<std::ptrdiff_t>(d)) == c &&
         std::vector<double>(cat.begin() + static_cast<std::ptrdiff_t>(d), cat.end()) == e;
  }
  const bool vectors_ok = ok;

  ScratchDir dir("alpha1");
  ExperimentConfig cfg;
  cfg.seed = 11;
  SyntheticConfig s;
  s.n = 300;
  cfg.data.synthetic = s;
  cfg.pretrain.epochs = 2;
  cfg.encoder.d_out = 0;
  cfg.stacking = {StackingMode::Fuse, 1.0};
  cfg.output_dir = dir.path.string();
  const auto r = run_experiment(cfg);
  const bool e2e = r.evaluation.ssp.reports == r.evaluation.origin.reports;
  return {vectors_ok && e2e, std::string("fuse/concat bitwise ") + (vectors_ok ? "ok" : "BROKEN") +
                                 ", alpha=1 pipeline " + (e2e ? "identical" : "DIFFERS")};
}

Outcome augmentation_invariants() {
  Rng rng(7);
  std::size_t fs_bad = 0, fm_bad = 0;
  for (int t = 0; t < 10000; ++t) {
    const std::size_t d = 2 + rng.index(60);
    std::vector<double> x(d);
    // nonzero entries so a masked coordinate is always visible
    for (auto& v : x) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.1 + rng.uniform());
    const std::size_t k = 1 + rng.index(d);

    auto swapped = feature_swap(x, k, rng);
    auto a = x;
    std::sort(a.begin(), a.end());
    std::sort(swapped.begin(), swapped.end());
    fs_bad += a != swapped;

    const auto masked = feature_mask(x, k, rng);
    std::size_t changed = 0;
    bool only_zero = true;
    for (std::size_t i = 0; i < d; ++i) {
      if (masked[i] != x[i]) {
        ++changed;
        only_zero = only_zero && masked[i] == 0.0;
      }
    }
    fm_bad += !(changed == k && only_zero);
  }
  return {fs_bad == 0 && fm_bad == 0,
          "10000 trials, FS violations " + std::to_string(fs_bad) + ", FM violations " + std::to_string(fm_bad)};
}

int brute_force_knn(const StackedDataset& d, std::span<const double> x, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < d.size(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double diff = d.vectors(i, j) - x[j];
      s += diff * diff;
    }
    all.emplace_back(s, i);
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> votes(d.num_classes, 0);
  for (std::size_t t = 0; t < k; ++t) ++votes[static_cast<std::size_t>(d.labels[all[t].second])];
  std::size_t best = 0;
  for (std::size_t c = 1; c < votes.size(); ++c) {
    if (votes[c] > votes[best]) best = c;
  }
  return static_cast<int>(best);
}

Outcome knn_oracle() {
  Rng rng(8);
  std::size_t queries = 0, mismatches = 0;
  for (int inst = 0; inst < 50; ++inst) {
    StackedDataset d;
    const std::size_t n = 10 + rng.index(191), dim = 1 + rng.index(10);
    d.num_classes = 2 + rng.index(5);
    d.vectors = Matrix(n, dim);
    // half the instances sit on a small integer grid to force distance ties
    const bool grid = inst % 2 == 0;
    for (std::size_t i = 0; i < d.vectors.size(); ++i) {
      d.vectors[i] = grid ? static_cast<double>(rng.index(3)) : rng.normal();
    }
    for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(rng.index(d.num_classes)));
    ClassifierSpec spec;
    spec.name = "knn";
    spec.kind = ClassifierKind::Knn;
    spec.neighbors = 1 + rng.index(std::min<std::size_t>(n, 9));
    const auto model = train_classifier(d, spec);
    for (int q = 0; q < 40; ++q) {
      std::vector<double> x(dim);
      for (auto& v : x) v = grid ? static_cast<double>(rng.index(3)) : rng.normal();
      ++queries;
      mismatches += predict(model, x).label != brute_force_knn(d, x, spec.neighbors);
    }
  }
  return {mismatches == 0, "50 instances, " + std::to_string(queries) + " queries, " +
                               std::to_string(mismatches) + " mismatches"};
}

ExperimentConfig headline_config(const fs::path& out) {
  ExperimentConfig cfg;  // seed 42, k=4, L=8, tau=0.5, 30 epochs, MLP, concat
  cfg.data.synthetic = SyntheticConfig{};  // n=1000, d=39, m=9, a=1.2, separation 3, noise 1
  cfg.encoder.d_out = 0;
  cfg.output_dir = out.string();
  return cfg;
}

Outcome synthetic_analogue(PretrainResult& mlp_pretrain) {
  ScratchDir dir("headline");
  const auto t0 = Clock::now();
  const auto r = run_experiment(headline_config(dir.path));
  const double secs = seconds_since(t0);
  mlp_pretrain = r.pretrain;
  const double gain = r.evaluation.rare_recall_ssp - r.evaluation.rare_recall_origin;
  std::string detail = "OaP " + fmt("%+.4f", r.evaluation.oap) + ", rare recall " +
                       fmt("%.4f", r.evaluation.rare_recall_origin) + " -> " +
                       fmt("%.4f", r.evaluation.rare_recall_ssp) + " (gain " + fmt("%+.4f", gain) + "), " +
                       fmt("%.1fs", secs);
  for (std::size_t i = 0; i < r.evaluation.ssp.reports.size(); ++i) {
    const auto& o = r.evaluation.origin.reports[i];
    const auto& s = r.evaluation.ssp.reports[i];
    detail += "\n      " + o.classifier + ": acc " + fmt("%.3f", o.accuracy) + "->" + fmt("%.3f", s.accuracy) +
              ", recall " + fmt("%.3f", o.macro_recall) + "->" + fmt("%.3f", s.macro_recall) + ", f1 " +
              fmt("%.3f", o.macro_f1) + "->" + fmt("%.3f", s.macro_f1);
  }
  return {r.evaluation.oap > 0 && gain >= 0.02 && secs < 300, detail};
}

// Not a criterion: how the same comparison behaves at other root seeds.
std::string seed_survey() {
  int positive = 0, both = 0;
  double total = 0.0;
  const int seeds = 10;
  for (int seed = 1; seed <= seeds; ++seed) {
    ScratchDir dir("survey");
    auto cfg = headline_config(dir.path);
    cfg.seed = static_cast<std::uint64_t>(seed);
    const auto r = run_experiment(cfg).evaluation;
    const double gain = r.rare_recall_ssp - r.rare_recall_origin;
    total += r.oap;
    positive += r.oap > 0;
    both += r.oap > 0 && gain >= 0.02;
  }
  return "seeds 1-" + std::to_string(seeds) + ": OaP > 0 in " + std::to_string(positive) + ", both conditions in " +
         std::to_string(both) + ", mean OaP " + fmt("%+.4f", total / seeds);
}

Outcome training_sanity(const PretrainResult& mlp) {
  auto ratio = [](const TrainHistory& h) { return h.epoch_loss.back() / h.epoch_loss.front(); };
  const double mlp_ratio = ratio(mlp.history);

  ScratchDir dir("tf");
  auto cfg = headline_config(dir.path);
  cfg.encoder.kind = EncoderKind::Transformer;
  const auto t0 = Clock::now();
  const auto data = prepare_data(cfg);
  const auto tf = pretrain(data.train.features, resolved_encoder(cfg, data.train.dim()),
                           resolve_seeds(cfg).pretrain);
  const double tf_ratio = ratio(tf.history);
  return {mlp_ratio <= 0.8 && tf_ratio <= 0.8,
          "final/first loss: mlp " + fmt("%.3f", mlp_ratio) + " (" + fmt("%.4f", mlp.history.epoch_loss.front()) +
              " -> " + fmt("%.4f", mlp.history.epoch_loss.back()) + "), transformer " + fmt("%.3f", tf_ratio) +
              " (" + fmt("%.4f", tf.history.epoch_loss.front()) + " -> " + fmt("%.4f", tf.history.epoch_loss.back()) +
              ", " + fmt("%.1fs", seconds_since(t0)) + ")"};
}

Outcome determinism() {
  ScratchDir first("det1"), second("det2"), third("det3");
  auto cfg = headline_config(first.path);
  cfg.pretrain.epochs = 5;
  run_experiment(cfg);
  auto a = load_experiment_config(first.path / "manifest.json");
  auto b = a;
  a.output_dir = second.path.string();
  b.output_dir = third.path.string();
  run_experiment(a);
  run_experiment(b);
  std::size_t compared = 0, differing = 0;
  for (const char* f : {"reports_origin.json", "reports_ssp.json", "reports_origin.csv", "reports_ssp.csv",
                        "summary.json", "encoder.json", "embeddings_test.csv"}) {
    ++compared;
    const auto x = read_file(second.path / f);
    differing += x.empty() || x != read_file(third.path / f);
  }
  // manifests differ only in output_dir; the hash excludes it
  const auto m2 = nlohmann::json::parse(read_file(second.path / "manifest.json"));
  const auto m3 = nlohmann::json::parse(read_file(third.path / "manifest.json"));
  const bool same_hash = m2.at("config_hash") == m3.at("config_hash");
  return {differing == 0 && same_hash,
          std::string(same_hash ? "same" : "DIFFERENT") + " config hash, " + std::to_string(compared) + " report files compared, " + std::to_string(differing) + " differ"};
}

Outcome metric_cross_check() {
  Rng rng(10);
  std::size_t bad = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.index(500), m = 2 + rng.index(9);
    std::vector<int> truth(n), pred(n);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = static_cast<int>(rng.index(m));
      pred[i] = rng.uniform() < 0.5 ? truth[i] : static_cast<int>(rng.index(m));
      agree += truth[i] == pred[i];
    }
    const auto report = evaluate("x", truth, pred, m);
    bad += report.accuracy != static_cast<double>(agree) / static_cast<double>(n);
  }
  return {bad == 0, "100 random pairs, " + std::to_string(bad) + " mismatches"};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  PretrainResult mlp_pretrain;
  const std::vector<Criterion> criteria{
      {"gradient correctness", gradient_checks},
      {"loss identities", loss_identities},
      {"stacking exactness", stacking_exactness},
      {"augmentation invariants", augmentation_invariants},
      {"knn oracle equivalence", knn_oracle},
      {"synthetic analogue (OaP > 0, rare recall +0.02)", [&] { return synthetic_analogue(mlp_pretrain); }},
      {"training sanity", [&] { return training_sanity(mlp_pretrain); }},
      {"determinism from manifest", determinism},
      {"metric cross-check", metric_cross_check},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s  %s: %s\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  try {
    std::printf("INFO  synthetic analogue at other seeds (not gating): %s\n", seed_survey().c_str());
  } catch (const std::exception& e) {
    std::printf("INFO  seed survey failed: %s\n", e.what());
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
