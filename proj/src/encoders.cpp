#include "tabcl/encoders.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "tabcl/rng.hpp"
#include "tabcl/tabular_data.hpp"

namespace tabcl {
namespace {

enum class InitRule { Uniform, Zero, One };

struct ShapeSpec {
  ParamShape shape;
  InitRule rule;
  std::size_t fan_in;
};

std::size_t ff_dim(const EncoderConfig& c) { return c.tf_ff_dim == 0 ? 2 * c.tf_model_dim : c.tf_ff_dim; }

std::string block_prefix(std::size_t b) { return "tf.block" + std::to_string(b) + "."; }

std::vector<ShapeSpec> shape_specs(const EncoderConfig& c) {
  std::vector<ShapeSpec> specs;
  auto affine = [&](const std::string& prefix, std::size_t in, std::size_t out) {
    specs.push_back({{prefix + ".weight", in, out}, InitRule::Uniform, in});
    specs.push_back({{prefix + ".bias", 1, out}, InitRule::Zero, in});
  };
  if (c.kind == EncoderKind::Mlp) {
    std::size_t width = c.d_in;
    for (std::size_t l = 0; l < c.mlp_hidden.size(); ++l) {
      affine("mlp." + std::to_string(l), width, c.mlp_hidden[l]);
      width = c.mlp_hidden[l];
    }
    affine("mlp." + std::to_string(c.mlp_hidden.size()), width, c.d_out);
    return specs;
  }
  const std::size_t D = c.tf_model_dim;
  specs.push_back({{"tf.lift.weight", c.d_in, D}, InitRule::Uniform, 1});
  specs.push_back({{"tf.position", c.d_in, D}, InitRule::Uniform, 1});
  for (std::size_t b = 0; b < c.tf_blocks; ++b) {
    const auto p = block_prefix(b);
    affine(p + "attn.query", D, D);
    // no key bias: softmax over keys cancels it, so its gradient is identically zero
    specs.push_back({{p + "attn.key.weight", D, D}, InitRule::Uniform, D});
    affine(p + "attn.value", D, D);
    affine(p + "attn.output", D, D);
    specs.push_back({{p + "norm1.gain", 1, D}, InitRule::One, D});
    specs.push_back({{p + "norm1.shift", 1, D}, InitRule::Zero, D});
    affine(p + "ff1", D, ff_dim(c));
    affine(p + "ff2", ff_dim(c), D);
    specs.push_back({{p + "norm2.gain", 1, D}, InitRule::One, D});
    specs.push_back({{p + "norm2.shift", 1, D}, InitRule::Zero, D});
  }
  affine("tf.out", D, c.d_out);
  return specs;
}

diff::NodeId affine_node(diff::Graph& g, const std::string& prefix, diff::NodeId x, std::size_t in,
                         std::size_t out) {
  const auto w = g.parameter(prefix + ".weight", in, out);
  const auto b = g.parameter(prefix + ".bias", 1, out);
  return g.add(g.matmul(x, w), b);
}

diff::NodeId transformer_block(diff::Graph& g, const EncoderConfig& c, std::size_t block,
                               diff::NodeId tokens) {
  const std::size_t D = c.tf_model_dim;
  const std::size_t heads = c.tf_heads;
  const std::size_t head_dim = D / heads;
  const std::size_t seq = c.d_in;
  const auto p = block_prefix(block);

  const auto q = affine_node(g, p + "attn.query", tokens, D, D);
  const auto k = g.matmul(tokens, g.parameter(p + "attn.key.weight", D, D));
  const auto v = affine_node(g, p + "attn.value", tokens, D, D);
  std::vector<diff::NodeId> head_out;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t lo = h * head_dim;
    const std::size_t hi = lo + head_dim;
    const auto scores = g.scale(g.group_matmul_nt(g.slice_cols(q, lo, hi), g.slice_cols(k, lo, hi), seq),
                                1.0 / std::sqrt(static_cast<double>(head_dim)));
    head_out.push_back(g.group_matmul(g.softmax_row(scores), g.slice_cols(v, lo, hi), seq));
  }
  const auto attn = affine_node(g, p + "attn.output", g.concat_cols(head_out), D, D);
  const auto norm1 = g.layer_norm(g.add(tokens, attn), g.parameter(p + "norm1.gain", 1, D),
                                  g.parameter(p + "norm1.shift", 1, D));
  const auto hidden = g.relu(affine_node(g, p + "ff1", norm1, D, ff_dim(c)));
  const auto ff = affine_node(g, p + "ff2", hidden, ff_dim(c), D);
  return g.layer_norm(g.add(norm1, ff), g.parameter(p + "norm2.gain", 1, D),
                      g.parameter(p + "norm2.shift", 1, D));
}

}  // namespace

std::string encoder_kind_name(EncoderKind kind) {
  return kind == EncoderKind::Mlp ? "mlp" : "transformer";
}

EncoderKind parse_encoder_kind(std::string_view name) {
  if (name == "mlp") return EncoderKind::Mlp;
  if (name == "transformer") return EncoderKind::Transformer;
  throw std::invalid_argument("unknown encoder kind '" + std::string(name) + "'");
}

void validate(const EncoderConfig& c) {
  if (c.d_in < 1 || c.d_out < 1) throw std::invalid_argument("encoder: d_in and d_out must be >= 1");
  if (c.kind == EncoderKind::Mlp) {
    for (auto w : c.mlp_hidden) {
      if (w < 1) throw std::invalid_argument("encoder: hidden widths must be >= 1");
    }
    return;
  }
  if (c.tf_model_dim < 1 || c.tf_heads < 1) {
    throw std::invalid_argument("encoder: tf_model_dim and tf_heads must be >= 1");
  }
  if (c.tf_model_dim % c.tf_heads != 0) {
    throw std::invalid_argument("encoder: tf_model_dim " + std::to_string(c.tf_model_dim) +
                                " is not divisible by tf_heads " + std::to_string(c.tf_heads));
  }
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"kind", encoder_kind_name(c.kind)},
                     {"d_in", c.d_in},
                     {"d_out", c.d_out},
                     {"mlp_hidden", c.mlp_hidden},
                     {"tf_model_dim", c.tf_model_dim},
                     {"tf_heads", c.tf_heads},
                     {"tf_blocks", c.tf_blocks},
                     {"tf_ff_dim", c.tf_ff_dim},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c = EncoderConfig{};
  if (j.contains("kind")) c.kind = parse_encoder_kind(j.at("kind").get<std::string>());
  c.d_in = j.value("d_in", c.d_in);
  c.d_out = j.value("d_out", c.d_out);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.tf_model_dim = j.value("tf_model_dim", c.tf_model_dim);
  c.tf_heads = j.value("tf_heads", c.tf_heads);
  c.tf_blocks = j.value("tf_blocks", c.tf_blocks);
  c.tf_ff_dim = j.value("tf_ff_dim", c.tf_ff_dim);
  c.seed = j.value("seed", c.seed);
}

std::vector<ParamShape> encoder_param_shapes(const EncoderConfig& config) {
  validate(config);
  std::vector<ParamShape> out;
  for (auto& s : shape_specs(config)) out.push_back(s.shape);
  return out;
}

EncoderParams init_encoder(const EncoderConfig& config) {
  validate(config);
  EncoderParams params{config, {}};
  Rng rng(config.seed);
  for (const auto& spec : shape_specs(config)) {
    Matrix m(spec.shape.rows, spec.shape.cols);
    switch (spec.rule) {
      case InitRule::Uniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        for (auto& v : m.values()) v = rng.uniform(-bound, bound);
        break;
      }
      case InitRule::Zero:
        break;
      case InitRule::One:
        for (auto& v : m.values()) v = 1.0;
        break;
    }
    params.weights.emplace(spec.shape.name, std::move(m));
  }
  return params;
}

diff::NodeId build_encoder(diff::Graph& g, const EncoderConfig& c, diff::NodeId x) {
  validate(c);
  if (g.node(x).cols != c.d_in) {
    throw std::invalid_argument("encoder: input has " + std::to_string(g.node(x).cols) +
                                " features, expected " + std::to_string(c.d_in));
  }
  if (c.kind == EncoderKind::Mlp) {
    diff::NodeId h = x;
    std::size_t width = c.d_in;
    for (std::size_t l = 0; l < c.mlp_hidden.size(); ++l) {
      h = g.relu(affine_node(g, "mlp." + std::to_string(l), h, width, c.mlp_hidden[l]));
      width = c.mlp_hidden[l];
    }
    return affine_node(g, "mlp." + std::to_string(c.mlp_hidden.size()), h, width, c.d_out);
  }
  const std::size_t D = c.tf_model_dim;
  auto tokens = g.add(g.feature_lift(x, g.parameter("tf.lift.weight", c.d_in, D)),
                      g.parameter("tf.position", c.d_in, D));
  for (std::size_t b = 0; b < c.tf_blocks; ++b) tokens = transformer_block(g, c, b, tokens);
  const auto pooled = g.mean_rows(tokens, c.d_in);
  return affine_node(g, "tf.out", pooled, D, c.d_out);
}

Matrix encode_rows(const EncoderParams& params, const Matrix& x) {
  const auto& c = params.config;
  if (x.cols() != c.d_in) {
    throw std::invalid_argument("encode: input has " + std::to_string(x.cols()) +
                                " features, expected " + std::to_string(c.d_in));
  }
  Matrix out(x.rows(), c.d_out);
  // chunking bounds the attention buffers for large inputs
  const std::size_t chunk = c.kind == EncoderKind::Mlp ? 4096 : 256;
  for (std::size_t start = 0; start < x.rows(); start += chunk) {
    const std::size_t stop = std::min(x.rows(), start + chunk);
    Matrix part(stop - start, x.cols());
    for (std::size_t r = start; r < stop; ++r) {
      const auto src = x.row(r);
      std::copy(src.begin(), src.end(), part.row(r - start).begin());
    }
    diff::Graph g;
    const auto in = g.input(std::move(part));
    const auto y = build_encoder(g, c, in);
    const auto values = diff::forward(g, params.weights);
    const auto& v = values[y].values();
    std::copy(v.begin(), v.end(), out.values().begin() + static_cast<std::ptrdiff_t>(start * c.d_out));
  }
  return out;
}

std::vector<double> encode(const EncoderParams& params, std::span<const double> x) {
  return encode_rows(params, Matrix::row_vector(x)).values();
}

Matrix encode_dataset(const EncoderParams& params, const Dataset& data) {
  if (data.dim() != params.config.d_in) {
    throw std::invalid_argument("encode_dataset: dataset has d=" + std::to_string(data.dim()) +
                                ", encoder expects " + std::to_string(params.config.d_in));
  }
  return encode_rows(params, data.features);
}

nlohmann::json encoder_to_json(const EncoderParams& params) {
  return {{"encoder", params.config}, {"params", diff::params_to_json(params.weights)}};
}

EncoderParams encoder_from_json(const nlohmann::json& j) {
  EncoderParams p{j.at("encoder").get<EncoderConfig>(), diff::params_from_json(j.at("params"))};
  for (const auto& s : encoder_param_shapes(p.config)) {
    const auto it = p.weights.find(s.name);
    if (it == p.weights.end() || it->second.rows() != s.rows || it->second.cols() != s.cols) {
      throw std::invalid_argument("encoder checkpoint: parameter '" + s.name +
                                  "' missing or misshapen");
    }
  }
  if (p.weights.size() != encoder_param_shapes(p.config).size()) {
    throw std::invalid_argument("encoder checkpoint: unexpected extra parameters");
  }
  return p;
}

void save_encoder(const EncoderParams& params, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << encoder_to_json(params).dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

EncoderParams load_encoder(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return encoder_from_json(nlohmann::json::parse(in));
}

}  // namespace tabcl
