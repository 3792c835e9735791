#pragma once

// Small reverse-mode differentiation engine over dense double matrices.
//
// A Graph is an append-only list of nodes; every node's inputs have smaller
// ids, so id order is a topological order. Parameters are leaves bound by
// name at evaluation time, which lets one graph be re-evaluated under
// perturbed parameters (finite differences) or after an optimizer step.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tabcl/matrix.hpp"

namespace tabcl::diff {

using NodeId = std::size_t;
using ParamSet = std::map<std::string, Matrix>;

enum class Op {
  Input,
  Parameter,
  MatMul,
  Add,
  Mul,
  Relu,
  LayerNorm,
  SoftmaxRow,
  LogSoftmaxRow,
  MeanRows,
  Scale,
  ConcatRows,
  ConcatCols,
  SliceRows,
  SliceCols,
  CosineSim,
  Log,
  Exp,
  Neg,
  Sum,
  GroupMatMulNT,
  GroupMatMul,
  FeatureLift,
};

const char* op_name(Op op);

struct Node {
  Op op = Op::Input;
  std::vector<NodeId> inputs;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string name;     // parameter name, or optional label for inputs
  Matrix constant;      // value of Input nodes
  double scalar = 0.0;  // Scale factor, LayerNorm / CosineSim epsilon
  std::size_t begin = 0;  // slice start, or group size
  std::size_t end = 0;
  bool requires_grad = false;
};

class Graph {
 public:
  NodeId input(Matrix value, std::string label = {});
  NodeId parameter(std::string name, std::size_t rows, std::size_t cols);

  NodeId matmul(NodeId a, NodeId b);
  /// Elementwise sum. `b` may have fewer rows than `a` if it divides them;
  /// it is then tiled down the rows (bias rows, position tables).
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId relu(NodeId x);
  /// Row-wise normalization with 1 x cols gain and shift.
  NodeId layer_norm(NodeId x, NodeId gain, NodeId shift, double eps = 1e-5);
  NodeId softmax_row(NodeId x);
  NodeId log_softmax_row(NodeId x);
  /// Mean over consecutive blocks of `group` rows; group 0 means all rows.
  NodeId mean_rows(NodeId x, std::size_t group = 0);
  NodeId scale(NodeId x, double factor);
  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId concat_cols(std::span<const NodeId> parts);
  NodeId slice_rows(NodeId x, std::size_t begin, std::size_t end);
  NodeId slice_cols(NodeId x, std::size_t begin, std::size_t end);
  /// Row-wise a.b / (|a||b| + eps); result is rows x 1.
  NodeId cosine_sim(NodeId a, NodeId b, double eps = 1e-12);
  NodeId log(NodeId x);
  NodeId exp(NodeId x);
  NodeId neg(NodeId x);
  NodeId sum(NodeId x);
  /// Per block of `group` rows: A_g * B_g^T (group x group blocks).
  NodeId group_matmul_nt(NodeId a, NodeId b, std::size_t group);
  /// Per block of `group` rows: P_g (group x group) * V_g.
  NodeId group_matmul(NodeId p, NodeId v, std::size_t group);
  /// x (B x d), weight (d x D) -> (B*d) x D with row b*d+i = x[b,i] * weight[i].
  NodeId feature_lift(NodeId x, NodeId weight);

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  /// Distinct parameter names in first-use order.
  std::vector<std::string> parameter_names() const;
  std::string describe(NodeId id) const;

 private:
  NodeId push(Node node);
  const Node& checked(NodeId id) const;

  std::vector<Node> nodes_;
};

/// Values of every node. Throws std::invalid_argument naming the node if a
/// parameter is unbound or bound with the wrong shape.
std::vector<Matrix> forward(const Graph& graph, const ParamSet& params);

struct Gradients {
  double loss = 0.0;
  ParamSet params;  // zero-filled for parameters the loss does not reach
};

/// Exact gradients of a 1x1 `loss` node with respect to every parameter.
Gradients backward(const Graph& graph, const ParamSet& params, NodeId loss);
Gradients backward(const Graph& graph, const ParamSet& params, NodeId loss,
                   const std::vector<Matrix>& values);

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  /// Entries whose +-h probe flipped the sign of some ReLU input. The central
  /// difference across a kink is not a derivative estimate, so these are
  /// re-probed with h/10, h/100, ... (down to h*1e-4) until no input flips.
  std::size_t kink_entries = 0;
  std::string worst_parameter;
};

/// Max over parameter entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
/// where numeric is the central difference with step h. Only nodes downstream
/// of the probed parameter are re-evaluated.
FiniteDiffReport finite_diff_report(const Graph& graph, const ParamSet& params, NodeId loss,
                                    double h = 1e-5);
double finite_diff_check(const Graph& graph, const ParamSet& params, NodeId loss, double h = 1e-5);

struct AdamState {
  std::size_t step = 0;
  ParamSet first_moment;
  ParamSet second_moment;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// Zero moments shaped like `params`.
  static AdamState for_params(const ParamSet& params, double beta1 = 0.9, double beta2 = 0.999,
                              double epsilon = 1e-8);
};

/// Bias-corrected Adam update in place. Every gradient must match its
/// parameter's shape; parameters without a gradient entry are an error.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr);

/// lr(epoch) = max(initial - epoch * decay_per_epoch, floor), epoch counted from 0.
struct LrSchedule {
  double initial = 0.001;
  double decay_per_epoch = 0.00001;
  double floor = 0.0;

  double at(std::size_t epoch) const;
};

void to_json(nlohmann::json& j, const LrSchedule& s);
void from_json(const nlohmann::json& j, LrSchedule& s);

/// Checkpoint container:
///   {"format": "tabcl-params", "version": 1,
///    "params": [{"name": ..., "shape": [rows, cols], "values": [row-major]}]}
nlohmann::json params_to_json(const ParamSet& params);
ParamSet params_from_json(const nlohmann::json& j);

double squared_norm(const ParamSet& params);

}  // namespace tabcl::diff
