#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <string>

#include "tabcl/diff.hpp"
#include "tabcl/rng.hpp"

using namespace tabcl;
using namespace tabcl::diff;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = scale * rng.normal();
  return m;
}

// shifts entries away from the relu kink so central differences stay clean
Matrix away_from_zero(Matrix m) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (std::abs(m[i]) < 0.1) m[i] = m[i] < 0 ? -0.3 : 0.3;
  }
  return m;
}

}  // namespace

TEST_CASE("forward examples") {
  Graph g;
  const auto x = g.input(Matrix::row_vector({-1, 0, 2}));
  const auto r = g.relu(x);
  const auto s = g.softmax_row(g.input(Matrix::row_vector({0, 0})));
  const auto ln = g.layer_norm(g.input(Matrix::row_vector({1, 3})),
                               g.input(Matrix::row_vector({1, 1})),
                               g.input(Matrix::row_vector({0, 0})));
  const auto vals = forward(g, {});
  CHECK(vals[r] == Matrix::row_vector({0, 0, 2}));
  CHECK(vals[s](0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(vals[s](0, 1) == doctest::Approx(0.5).epsilon(1e-15));
  // population variance 1, so the result is (-1, 1) / sqrt(1 + 1e-5)
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(std::abs(vals[ln](0, 0) + expect) < 1e-12);
  CHECK(std::abs(vals[ln](0, 1) - expect) < 1e-12);
}

TEST_CASE("softmax rows sum to one even for large logits") {
  Rng rng(3);
  Graph g;
  auto m = random_matrix(20, 7, rng, 200.0);
  const auto s = g.softmax_row(g.input(m));
  const auto ls = g.log_softmax_row(g.input(m));
  const auto vals = forward(g, {});
  for (std::size_t r = 0; r < 20; ++r) {
    double total = 0, total_exp = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      CHECK(std::isfinite(vals[ls](r, c)));
      total += vals[s](r, c);
      total_exp += std::exp(vals[ls](r, c));
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
    CHECK(std::abs(total_exp - 1.0) < 1e-12);
  }
}

TEST_CASE("gradient of sum(w*w) is 2w") {
  Graph g;
  const auto w = g.parameter("w", 1, 3);
  const auto loss = g.sum(g.mul(w, w));
  ParamSet p{{"w", Matrix::row_vector({1, 2, 3})}};
  const auto grads = backward(g, p, loss);
  CHECK(grads.loss == doctest::Approx(14.0));
  CHECK(grads.params.at("w") == Matrix::row_vector({2, 4, 6}));
}

TEST_CASE("cosine of a vector with itself has near-zero gradient") {
  Graph g;
  const auto u = g.parameter("u", 1, 4);
  const auto loss = g.sum(g.cosine_sim(u, u));
  ParamSet p{{"u", Matrix::row_vector({0.3, -1.2, 2.0, 0.7})}};
  const auto grads = backward(g, p, loss);
  CHECK(grads.loss == doctest::Approx(1.0).epsilon(1e-12));
  for (double v : grads.params.at("u").values()) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("unreached parameters get zero gradients") {
  Graph g;
  const auto a = g.parameter("a", 1, 2);
  g.parameter("b", 2, 2);
  const auto loss = g.sum(a);
  ParamSet p{{"a", Matrix(1, 2, 1.0)}, {"b", Matrix(2, 2, 5.0)}};
  const auto grads = backward(g, p, loss);
  CHECK(grads.params.at("b") == Matrix(2, 2, 0.0));
  CHECK(grads.params.at("a") == Matrix(1, 2, 1.0));
}

TEST_CASE("per-op finite differences") {
  Rng rng(11);
  const double tol = 1e-5;

  SUBCASE("matmul add relu") {
    Graph g;
    const auto x = g.input(random_matrix(4, 3, rng));
    const auto w = g.parameter("w", 3, 5);
    const auto b = g.parameter("b", 1, 5);
    const auto loss = g.sum(g.relu(g.add(g.matmul(x, w), b)));
    ParamSet p{{"w", random_matrix(3, 5, rng)}, {"b", away_from_zero(random_matrix(1, 5, rng))}};
    CHECK(finite_diff_check(g, p, loss) < tol);
  }
  SUBCASE("layer norm") {
    Graph g;
    const auto x = g.parameter("x", 3, 6);
    const auto gain = g.parameter("gain", 1, 6);
    const auto shift = g.parameter("shift", 1, 6);
    const auto c = g.input(random_matrix(3, 6, rng));
    const auto loss = g.sum(g.mul(g.layer_norm(x, gain, shift), c));
    ParamSet p{{"x", random_matrix(3, 6, rng)},
               {"gain", random_matrix(1, 6, rng)},
               {"shift", random_matrix(1, 6, rng)}};
    CHECK(finite_diff_check(g, p, loss) < tol);
  }
  SUBCASE("softmax, log softmax, log, exp") {
    Graph g;
    const auto x = g.parameter("x", 3, 4);
    const auto c = g.input(random_matrix(3, 4, rng));
    const auto a = g.sum(g.mul(g.softmax_row(x), c));
    const auto b = g.sum(g.mul(g.log_softmax_row(x), c));
    const auto e = g.sum(g.log(g.exp(g.scale(x, 0.5))));
    const auto one = g.add(g.add(a, b), g.neg(e));
    ParamSet p{{"x", random_matrix(3, 4, rng)}};
    CHECK(finite_diff_check(g, p, one) < tol);
  }
  SUBCASE("concat, slice, mean rows, cosine") {
    Graph g;
    const auto u = g.parameter("u", 4, 3);
    const auto v = g.parameter("v", 4, 3);
    const NodeId parts[] = {u, v};
    const auto rows = g.concat_rows(parts);
    const auto cols = g.concat_cols(parts);
    const auto a = g.slice_rows(rows, 2, 6);
    const auto b = g.slice_cols(cols, 1, 4);
    const auto cos = g.cosine_sim(a, b);
    const auto loss = g.sum(g.mean_rows(g.mul(cos, cos), 2));
    ParamSet p{{"u", random_matrix(4, 3, rng)}, {"v", random_matrix(4, 3, rng)}};
    CHECK(finite_diff_check(g, p, loss) < tol);
  }
  SUBCASE("grouped attention products and feature lift") {
    Graph g;
    const auto x = g.input(random_matrix(2, 3, rng));
    const auto w = g.parameter("w", 3, 4);
    const auto pos = g.parameter("pos", 3, 4);
    const auto tokens = g.add(g.feature_lift(x, w), pos);
    const auto scores = g.softmax_row(g.group_matmul_nt(tokens, tokens, 3));
    const auto mixed = g.group_matmul(scores, tokens, 3);
    const auto c = g.input(random_matrix(6, 4, rng));
    const auto loss = g.sum(g.mul(mixed, c));
    ParamSet p{{"w", random_matrix(3, 4, rng)}, {"pos", random_matrix(3, 4, rng)}};
    CHECK(finite_diff_check(g, p, loss) < tol);
  }
}

TEST_CASE("backward is deterministic") {
  Rng rng(5);
  Graph g;
  const auto w = g.parameter("w", 5, 5);
  const auto x = g.input(random_matrix(8, 5, rng));
  const auto loss = g.sum(g.softmax_row(g.matmul(g.relu(g.matmul(x, w)), w)));
  ParamSet p{{"w", random_matrix(5, 5, rng)}};
  const auto a = backward(g, p, loss);
  const auto b = backward(g, p, loss);
  CHECK(a.loss == b.loss);
  CHECK(a.params == b.params);
}

TEST_CASE("shape errors name the offending node") {
  Graph g;
  const auto a = g.input(Matrix(2, 3), "left");
  const auto b = g.input(Matrix(2, 3), "right");
  try {
    g.matmul(a, b);
    FAIL("expected a shape error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("left") != std::string::npos);
    CHECK(msg.find("2x3") != std::string::npos);
  }
  const auto w = g.parameter("weights", 3, 2);
  CHECK_THROWS(g.parameter("weights", 2, 2));
  try {
    forward(g, {{"weights", Matrix(2, 2)}});
    FAIL("expected a binding error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("weights") != std::string::npos);
  }
  CHECK_THROWS(forward(g, {}));
  CHECK_THROWS(backward(g, {{"weights", Matrix(3, 2)}}, w));  // not 1x1
}

TEST_CASE("adam first step moves each weight by about lr") {
  ParamSet p{{"w", Matrix::row_vector({1.0, -2.0, 0.5})}};
  ParamSet grad{{"w", Matrix::row_vector({0.3, -4.0, 0.0})}};
  auto state = AdamState::for_params(p);
  adam_step(p, grad, state, 0.1);
  CHECK(state.step == 1);
  CHECK(p["w"](0, 0) == doctest::Approx(0.9).epsilon(1e-7));
  CHECK(p["w"](0, 1) == doctest::Approx(-1.9).epsilon(1e-7));
  CHECK(p["w"](0, 2) == 0.5);

  // second step by hand
  ParamSet grad2{{"w", Matrix::row_vector({1.0, 1.0, 1.0})}};
  const double m = 0.9 * 0.1 * 0.3 + 0.1 * 1.0;
  const double v = 0.999 * 0.001 * 0.09 + 0.001 * 1.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  const double expect = p["w"](0, 0) - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
  adam_step(p, grad2, state, 0.1);
  CHECK(p["w"](0, 0) == doctest::Approx(expect).epsilon(1e-12));

  ParamSet bad{{"w", Matrix(1, 2)}};
  CHECK_THROWS(adam_step(p, bad, state, 0.1));
  CHECK_THROWS(adam_step(p, ParamSet{}, state, 0.1));
}

TEST_CASE("learning-rate schedule") {
  LrSchedule s;
  CHECK(s.at(0) == 0.001);
  CHECK(s.at(10) == doctest::Approx(0.0009).epsilon(1e-12));
  CHECK(s.at(100) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(s.at(1000) == 0.0);
  s.floor = 1e-4;
  CHECK(s.at(1000) == 1e-4);
  nlohmann::json j = s;
  CHECK(j.get<LrSchedule>().floor == 1e-4);
}

TEST_CASE("parameter checkpoints round trip bit-exactly") {
  Rng rng(9);
  ParamSet p{{"a", random_matrix(3, 2, rng)}, {"b.c", random_matrix(1, 7, rng)}};
  const auto j = params_to_json(p);
  CHECK(j["format"] == "tabcl-params");
  const auto back = params_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back == p);
  auto broken = j;
  broken["params"][0]["shape"] = {2, 2};
  CHECK_THROWS(params_from_json(broken));
  CHECK(squared_norm({{"x", Matrix::row_vector({3, 4})}}) == 25.0);
}

TEST_CASE("finite differences re-probe entries that straddle a ReLU kink") {
  Graph g;
  const auto w = g.parameter("w", 1, 3);
  const auto loss = g.sum(g.relu(w));
  const ParamSet p{{"w", Matrix::row_vector({3e-6, -1.0, 2.0})}};
  // a plain central difference at h=1e-5 would see slope (1e-5 + 3e-6) / 2e-5 = 0.65
  const auto r = finite_diff_report(g, p, loss);
  CHECK(r.entries == 3);
  CHECK(r.kink_entries == 1);
  CHECK(r.max_rel_error < 1e-9);
  CHECK(finite_diff_check(g, p, loss) == r.max_rel_error);
}
