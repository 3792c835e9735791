#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tabcl/diff.hpp"
#include "tabcl/matrix.hpp"

namespace tabcl {

struct Dataset;

enum class EncoderKind { Mlp, Transformer };

std::string encoder_kind_name(EncoderKind kind);
EncoderKind parse_encoder_kind(std::string_view name);

struct EncoderConfig {
  EncoderKind kind = EncoderKind::Mlp;
  std::size_t d_in = 39;
  std::size_t d_out = 39;
  std::vector<std::size_t> mlp_hidden = {64};
  std::size_t tf_model_dim = 16;
  std::size_t tf_heads = 2;
  std::size_t tf_blocks = 1;
  /// Feed-forward width inside each block; 0 means 2 * tf_model_dim.
  std::size_t tf_ff_dim = 0;
  std::uint64_t seed = 0;
};

void validate(const EncoderConfig& config);
void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct EncoderParams {
  EncoderConfig config;
  diff::ParamSet weights;
};

struct ParamShape {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// Every learnable tensor of the architecture, in initialization order.
std::vector<ParamShape> encoder_param_shapes(const EncoderConfig& config);

/// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases,
/// unit layer-norm gains.
EncoderParams init_encoder(const EncoderConfig& config);

/// Adds the encoder to `graph`. `x` is a (batch x d_in) node; the returned
/// node is (batch x d_out).
///
/// MLP: affine+ReLU per hidden width, then a final affine map.
/// Transformer: feature i of each row becomes a token x_i * w_i + p_i
/// (per-feature lift plus learned position), then tf_blocks post-norm blocks
/// (self-attention, residual, layer norm, ReLU feed-forward, residual, layer
/// norm), mean pooling over tokens and a final affine map.
diff::NodeId build_encoder(diff::Graph& graph, const EncoderConfig& config, diff::NodeId x);

std::vector<double> encode(const EncoderParams& params, std::span<const double> x);
/// Row-wise encode of a (rows x d_in) matrix.
Matrix encode_rows(const EncoderParams& params, const Matrix& x);
Matrix encode_dataset(const EncoderParams& params, const Dataset& data);

/// {"encoder": EncoderConfig, "params": parameter container}
nlohmann::json encoder_to_json(const EncoderParams& params);
EncoderParams encoder_from_json(const nlohmann::json& j);
void save_encoder(const EncoderParams& params, const std::filesystem::path& path);
EncoderParams load_encoder(const std::filesystem::path& path);

}  // namespace tabcl
