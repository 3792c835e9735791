#include <doctest.h>

#include <cmath>

#include "tabcl/pretrain.hpp"
#include "tabcl/tabular_data.hpp"
#include "test_util.hpp"

using namespace tabcl;

namespace {

Matrix rows(std::initializer_list<std::vector<double>> r) { return Matrix::from_rows(r); }

Dataset small_data(std::uint64_t seed = 3) {
  SyntheticConfig cfg;
  cfg.n = 40;
  cfg.d = 6;
  cfg.m = 3;
  cfg.seed = seed;
  return generate_synthetic(cfg);
}

EncoderConfig small_encoder(EncoderKind kind = EncoderKind::Mlp) {
  EncoderConfig c;
  c.kind = kind;
  c.d_in = 6;
  c.d_out = 6;
  c.mlp_hidden = {8};
  c.tf_model_dim = 4;
  c.tf_heads = 2;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("cosine examples") {
  CHECK(cosine_sim(std::vector<double>{1, 0}, std::vector<double>{2, 0}) ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine_sim(std::vector<double>{1, 0}, std::vector<double>{0, 3}) == 0.0);
  CHECK(std::abs(cosine_sim(std::vector<double>{1, 1}, std::vector<double>{1, 0}) -
                 0.7071067811865475) < 1e-12);
  CHECK(cosine_sim(std::vector<double>{0, 0}, std::vector<double>{1, 2}) == 0.0);
  CHECK_THROWS(cosine_sim(std::vector<double>{1}, std::vector<double>{1, 2}));
}

TEST_CASE("InfoNCE examples") {
  const std::vector<double> a{1, 2, 3};
  SUBCASE("all similarities equal gives ln(L+1)") {
    Matrix negs(8, 3);
    for (std::size_t l = 0; l < 8; ++l) std::copy(a.begin(), a.end(), negs.row(l).begin());
    CHECK(std::abs(infonce_loss(a, a, negs, 0.5) - 2.1972245773362196) < 1e-12);
  }
  SUBCASE("aligned positive, opposite negative") {
    // s_p = 1, s_n = 0 at tau 0.5: ln(1 + e^-2)
    const auto loss = infonce_loss(std::vector<double>{1, 0}, std::vector<double>{1, 0},
                                   rows({{0, 1}}), 0.5);
    CHECK(std::abs(loss - 0.1269280110429726) < 1e-12);
  }
  SUBCASE("monotone in positive similarity") {
    const auto negs = rows({{0, 1}, {-1, 0.5}});
    double prev = 1e9;
    for (double angle = 3.0; angle >= 0.0; angle -= 0.25) {
      const auto loss = infonce_loss(std::vector<double>{1, 0},
                                     std::vector<double>{std::cos(angle), std::sin(angle)}, negs, 0.5);
      CHECK(loss < prev);
      prev = loss;
    }
  }
  SUBCASE("scale invariance") {
    const std::vector<double> p{0.5, -1, 2};
    const auto negs = rows({{1, 1, 1}, {-2, 0, 1}});
    const double base = infonce_loss(a, p, negs, 0.5);
    for (double c : {0.01, 3.0, 250.0}) {
      std::vector<double> ac(a), pc(p);
      Matrix nc = negs;
      for (auto& v : ac) v *= c;
      for (auto& v : pc) v *= c;
      for (std::size_t i = 0; i < nc.size(); ++i) nc[i] *= c;
      CHECK(std::abs(infonce_loss(ac, pc, nc, 0.5) - base) < 1e-9);
    }
  }
  CHECK_THROWS(infonce_loss(a, a, rows({{1, 2}}), 0.5));
  CHECK_THROWS(infonce_loss(a, a, rows({{1, 2, 3}}), 0.0));
}

TEST_CASE("graph InfoNCE agrees with the scalar form") {
  Rng rng(4);
  const std::size_t B = 5, d = 3, L = 4;
  auto random = [&](std::size_t r) {
    Matrix m(r, d);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.normal();
    return m;
  };
  const auto anchors = random(B), positives = random(B);
  std::vector<Matrix> negs;
  for (std::size_t l = 0; l < L; ++l) negs.push_back(random(B));

  diff::Graph g;
  std::vector<diff::NodeId> neg_nodes;
  for (const auto& n : negs) neg_nodes.push_back(g.input(n));
  const auto loss = build_infonce_loss(g, g.input(anchors), g.input(positives), neg_nodes, 0.5);
  const double graph_value = diff::forward(g, {})[loss](0, 0);

  double scalar = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    Matrix nb(L, d);
    for (std::size_t l = 0; l < L; ++l) {
      std::copy(negs[l].row(b).begin(), negs[l].row(b).end(), nb.row(l).begin());
    }
    scalar += infonce_loss(anchors.row(b), positives.row(b), nb, 0.5);
  }
  CHECK(std::abs(graph_value - scalar / B) < 1e-12);
}

TEST_CASE("pretrain loss gradients match finite differences") {
  const auto data = small_data();
  for (auto kind : {EncoderKind::Mlp, EncoderKind::Transformer}) {
    const auto enc = small_encoder(kind);
    const auto params = init_encoder(enc);
    Rng rng(8);
    const std::size_t idx[] = {0, 1, 2, 3};
    const auto batch = build_contrastive_batch(data, idx, {TaskKind::FS_FM, 2}, 3, rng);
    diff::Graph g;
    const auto loss = build_pretrain_loss(g, enc, batch, 0.5);
    CHECK(diff::finite_diff_check(g, params.weights, loss) <= 1e-4);
  }
}

TEST_CASE("pretraining") {
  const auto data = small_data();
  PretrainConfig cfg;
  cfg.L = 4;
  cfg.batch_size = 16;
  cfg.task = {TaskKind::FS, 2};
  cfg.seed = 12;

  SUBCASE("zero epochs return the initialization") {
    cfg.epochs = 0;
    const auto r = pretrain(data, small_encoder(), cfg);
    CHECK(r.params.weights == init_encoder(small_encoder()).weights);
    CHECK(r.history.epoch_loss.empty());
  }
  SUBCASE("deterministic and lowers the loss") {
    cfg.epochs = 25;
    cfg.lr_schedule.initial = 0.01;
    const auto a = pretrain(data, small_encoder(), cfg);
    const auto b = pretrain(data, small_encoder(), cfg);
    CHECK(a.params.weights == b.params.weights);
    CHECK(a.history.epoch_loss == b.history.epoch_loss);
    REQUIRE(a.history.epoch_loss.size() == 25);
    CHECK(a.history.epoch_loss.back() < a.history.epoch_loss.front());
    CHECK(a.history.learning_rate[1] == doctest::Approx(0.01 - 1e-5));
  }
  SUBCASE("input checks") {
    cfg.epochs = 1;
    auto enc = small_encoder();
    enc.d_in = 5;
    CHECK_THROWS(pretrain(data, enc, cfg));
    cfg.L = 40;
    CHECK_THROWS(pretrain(data, small_encoder(), cfg));
  }
}

TEST_CASE("pretrain config JSON") {
  PretrainConfig c;
  c.task = {TaskKind::FM, 3};
  c.L = 16;
  c.tau = 0.2;
  nlohmann::json j = c;
  const auto back = j.get<PretrainConfig>();
  CHECK(back.task.kind == TaskKind::FM);
  CHECK(back.task.k == 3);
  CHECK(back.L == 16);
  CHECK(back.tau == 0.2);
  j["tau"] = -1.0;
  CHECK_THROWS(j.get<PretrainConfig>());
}

TEST_CASE("embedding CSV round trip") {
  testing::TempDir dir("emb");
  const auto data = small_data();
  const auto params = init_encoder(small_encoder());
  embed_and_export(params, data, dir / "e.csv");
  const auto table = read_embedding_csv(dir / "e.csv");
  CHECK(table.values == encode_dataset(params, data));
  CHECK(table.labels == data.labels);
  const auto header = testing::read_text(dir / "e.csv").substr(0, 15);
  CHECK(header.rfind("e0,e1,", 0) == 0);
}
