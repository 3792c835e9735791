#include "tabcl/diff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace tabcl::diff {
namespace {

[[noreturn]] void shape_error(const std::string& what) { throw std::invalid_argument(what); }

void add_into(Matrix& dst, const Matrix& src) {
  auto& d = dst.values();
  const auto& s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// C (r x c) += A (r x k) * B (k x c)
void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t r, std::size_t k,
             std::size_t cols) {
  for (std::size_t i = 0; i < r; ++i) {
    double* ci = c + i * cols;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * cols;
      for (std::size_t j = 0; j < cols; ++j) ci[j] += av * bp[j];
    }
  }
}

// C (r x c) += A (r x k) * B^T where B is (c x k)
void gemm_nt(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t r, std::size_t k,
             std::size_t cols) {
  for (std::size_t i = 0; i < r; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C (k x c) += A^T * B where A is (r x k), B is (r x c)
void gemm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t r, std::size_t k,
             std::size_t cols) {
  for (std::size_t i = 0; i < r; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * cols;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * cols;
      for (std::size_t j = 0; j < cols; ++j) cp[j] += av * bi[j];
    }
  }
}

double row_max(std::span<const double> row) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : row) m = std::max(m, v);
  return m;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Parameter: return "parameter";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Relu: return "relu";
    case Op::LayerNorm: return "layer_norm";
    case Op::SoftmaxRow: return "softmax_row";
    case Op::LogSoftmaxRow: return "log_softmax_row";
    case Op::MeanRows: return "mean_rows";
    case Op::Scale: return "scale";
    case Op::ConcatRows: return "concat_rows";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceRows: return "slice_rows";
    case Op::SliceCols: return "slice_cols";
    case Op::CosineSim: return "cosine_sim";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Neg: return "neg";
    case Op::Sum: return "sum";
    case Op::GroupMatMulNT: return "group_matmul_nt";
    case Op::GroupMatMul: return "group_matmul";
    case Op::FeatureLift: return "feature_lift";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph construction

std::string Graph::describe(NodeId id) const {
  const Node& n = nodes_.at(id);
  std::string s = "node #" + std::to_string(id) + " (" + op_name(n.op);
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s + ", " + std::to_string(n.rows) + "x" + std::to_string(n.cols) + ")";
}

const Node& Graph::checked(NodeId id) const {
  if (id >= nodes_.size()) throw std::out_of_range("graph: unknown node id " + std::to_string(id));
  return nodes_[id];
}

NodeId Graph::push(Node node) {
  for (NodeId in : node.inputs) node.requires_grad = node.requires_grad || checked(in).requires_grad;
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

NodeId Graph::input(Matrix value, std::string label) {
  Node n;
  n.op = Op::Input;
  n.rows = value.rows();
  n.cols = value.cols();
  n.name = std::move(label);
  n.constant = std::move(value);
  return push(std::move(n));
}

NodeId Graph::parameter(std::string name, std::size_t rows, std::size_t cols) {
  if (name.empty()) throw std::invalid_argument("graph: parameter needs a name");
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::Parameter && nodes_[i].name == name) {
      if (nodes_[i].rows != rows || nodes_[i].cols != cols) {
        shape_error("graph: parameter '" + name + "' redeclared with a different shape");
      }
      return i;
    }
  }
  Node n;
  n.op = Op::Parameter;
  n.name = std::move(name);
  n.rows = rows;
  n.cols = cols;
  n.requires_grad = true;
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Node& x = checked(a);
  const Node& y = checked(b);
  if (x.cols != y.rows) {
    shape_error("matmul: inner dimensions differ between " + describe(a) + " and " + describe(b));
  }
  Node n;
  n.op = Op::MatMul;
  n.inputs = {a, b};
  n.rows = x.rows;
  n.cols = y.cols;
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Node& x = checked(a);
  const Node& y = checked(b);
  if (x.cols != y.cols || y.rows == 0 || x.rows % y.rows != 0) {
    shape_error("add: " + describe(b) + " cannot be tiled onto " + describe(a));
  }
  Node n;
  n.op = Op::Add;
  n.inputs = {a, b};
  n.rows = x.rows;
  n.cols = x.cols;
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Node& x = checked(a);
  const Node& y = checked(b);
  if (x.rows != y.rows || x.cols != y.cols) {
    shape_error("mul: shapes differ between " + describe(a) + " and " + describe(b));
  }
  Node n;
  n.op = Op::Mul;
  n.inputs = {a, b};
  n.rows = x.rows;
  n.cols = x.cols;
  return push(std::move(n));
}

namespace {
Node unary(Op op, const Node& x, NodeId id) {
  Node n;
  n.op = op;
  n.inputs = {id};
  n.rows = x.rows;
  n.cols = x.cols;
  return n;
}
}  // namespace

NodeId Graph::relu(NodeId x) { return push(unary(Op::Relu, checked(x), x)); }
NodeId Graph::softmax_row(NodeId x) { return push(unary(Op::SoftmaxRow, checked(x), x)); }
NodeId Graph::log_softmax_row(NodeId x) { return push(unary(Op::LogSoftmaxRow, checked(x), x)); }
NodeId Graph::log(NodeId x) { return push(unary(Op::Log, checked(x), x)); }
NodeId Graph::exp(NodeId x) { return push(unary(Op::Exp, checked(x), x)); }
NodeId Graph::neg(NodeId x) { return push(unary(Op::Neg, checked(x), x)); }

NodeId Graph::scale(NodeId x, double factor) {
  Node n = unary(Op::Scale, checked(x), x);
  n.scalar = factor;
  return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId shift, double eps) {
  const Node& v = checked(x);
  const Node& g = checked(gain);
  const Node& s = checked(shift);
  if (g.rows != 1 || g.cols != v.cols || s.rows != 1 || s.cols != v.cols) {
    shape_error("layer_norm: gain/shift must be 1x" + std::to_string(v.cols) + " for " +
                describe(x));
  }
  if (v.cols < 1) shape_error("layer_norm: empty rows in " + describe(x));
  Node n = unary(Op::LayerNorm, v, x);
  n.inputs = {x, gain, shift};
  n.scalar = eps;
  return push(std::move(n));
}

NodeId Graph::mean_rows(NodeId x, std::size_t group) {
  const Node& v = checked(x);
  const std::size_t g = group == 0 ? v.rows : group;
  if (g == 0 || v.rows % g != 0) {
    shape_error("mean_rows: group " + std::to_string(g) + " does not divide " + describe(x));
  }
  Node n;
  n.op = Op::MeanRows;
  n.inputs = {x};
  n.rows = v.rows / g;
  n.cols = v.cols;
  n.begin = g;
  return push(std::move(n));
}

NodeId Graph::concat_rows(std::span<const NodeId> parts) {
  if (parts.empty()) shape_error("concat_rows: no inputs");
  Node n;
  n.op = Op::ConcatRows;
  n.cols = checked(parts[0]).cols;
  for (NodeId p : parts) {
    if (checked(p).cols != n.cols) shape_error("concat_rows: column mismatch at " + describe(p));
    n.rows += checked(p).rows;
    n.inputs.push_back(p);
  }
  return push(std::move(n));
}

NodeId Graph::concat_cols(std::span<const NodeId> parts) {
  if (parts.empty()) shape_error("concat_cols: no inputs");
  Node n;
  n.op = Op::ConcatCols;
  n.rows = checked(parts[0]).rows;
  for (NodeId p : parts) {
    if (checked(p).rows != n.rows) shape_error("concat_cols: row mismatch at " + describe(p));
    n.cols += checked(p).cols;
    n.inputs.push_back(p);
  }
  return push(std::move(n));
}

NodeId Graph::slice_rows(NodeId x, std::size_t begin, std::size_t end) {
  const Node& v = checked(x);
  if (begin >= end || end > v.rows) shape_error("slice_rows: bad range for " + describe(x));
  Node n;
  n.op = Op::SliceRows;
  n.inputs = {x};
  n.rows = end - begin;
  n.cols = v.cols;
  n.begin = begin;
  n.end = end;
  return push(std::move(n));
}

NodeId Graph::slice_cols(NodeId x, std::size_t begin, std::size_t end) {
  const Node& v = checked(x);
  if (begin >= end || end > v.cols) shape_error("slice_cols: bad range for " + describe(x));
  Node n;
  n.op = Op::SliceCols;
  n.inputs = {x};
  n.rows = v.rows;
  n.cols = end - begin;
  n.begin = begin;
  n.end = end;
  return push(std::move(n));
}

NodeId Graph::cosine_sim(NodeId a, NodeId b, double eps) {
  const Node& x = checked(a);
  const Node& y = checked(b);
  if (x.rows != y.rows || x.cols != y.cols) {
    shape_error("cosine_sim: shapes differ between " + describe(a) + " and " + describe(b));
  }
  Node n;
  n.op = Op::CosineSim;
  n.inputs = {a, b};
  n.rows = x.rows;
  n.cols = 1;
  n.scalar = eps;
  return push(std::move(n));
}

NodeId Graph::sum(NodeId x) {
  checked(x);
  Node n;
  n.op = Op::Sum;
  n.inputs = {x};
  n.rows = 1;
  n.cols = 1;
  return push(std::move(n));
}

NodeId Graph::group_matmul_nt(NodeId a, NodeId b, std::size_t group) {
  const Node& x = checked(a);
  const Node& y = checked(b);
  if (group == 0 || x.rows != y.rows || x.cols != y.cols || x.rows % group != 0) {
    shape_error("group_matmul_nt: incompatible " + describe(a) + " and " + describe(b));
  }
  Node n;
  n.op = Op::GroupMatMulNT;
  n.inputs = {a, b};
  n.rows = x.rows;
  n.cols = group;
  n.begin = group;
  return push(std::move(n));
}

NodeId Graph::group_matmul(NodeId p, NodeId v, std::size_t group) {
  const Node& x = checked(p);
  const Node& y = checked(v);
  if (group == 0 || x.cols != group || x.rows != y.rows || x.rows % group != 0) {
    shape_error("group_matmul: incompatible " + describe(p) + " and " + describe(v));
  }
  Node n;
  n.op = Op::GroupMatMul;
  n.inputs = {p, v};
  n.rows = y.rows;
  n.cols = y.cols;
  n.begin = group;
  return push(std::move(n));
}

NodeId Graph::feature_lift(NodeId x, NodeId weight) {
  const Node& v = checked(x);
  const Node& w = checked(weight);
  if (w.rows != v.cols) {
    shape_error("feature_lift: " + describe(weight) + " needs one row per column of " + describe(x));
  }
  Node n;
  n.op = Op::FeatureLift;
  n.inputs = {x, weight};
  n.rows = v.rows * v.cols;
  n.cols = w.cols;
  return push(std::move(n));
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& n : nodes_) {
    if (n.op == Op::Parameter) names.push_back(n.name);
  }
  return names;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

// Writes the value of node `id` into `out`, reusing its storage when the
// shape already matches. Inputs are read from `values`.
void eval_node(const Graph& graph, NodeId id, const std::vector<Matrix>& values,
               const ParamSet& params, Matrix& out) {
  const Node& n = graph.node(id);
  const auto in = [&](std::size_t k) -> const Matrix& { return values[n.inputs[k]]; };
  if (out.rows() == n.rows && out.cols() == n.cols) {
    std::fill(out.values().begin(), out.values().end(), 0.0);
  } else {
    out = Matrix(n.rows, n.cols);
  }
  auto& o = out.values();
  {
    switch (n.op) {
      case Op::Input:
        out = n.constant;
        break;
      case Op::Parameter: {
        const auto it = params.find(n.name);
        if (it == params.end()) {
          throw std::invalid_argument("forward: unbound " + graph.describe(id));
        }
        if (it->second.rows() != n.rows || it->second.cols() != n.cols) {
          throw std::invalid_argument("forward: " + graph.describe(id) + " bound to a " +
                                      it->second.shape_string() + " value");
        }
        out = it->second;
        break;
      }
      case Op::MatMul: {
        const Matrix& a = in(0);
        const Matrix& b = in(1);
        gemm_nn(a.values().data(), b.values().data(), o.data(), a.rows(), a.cols(), b.cols());
        break;
      }
      case Op::Add: {
        const Matrix& a = in(0);
        const Matrix& b = in(1);
        const std::size_t tile = b.size();
        for (std::size_t base = 0; base < o.size(); base += tile) {
          for (std::size_t i = 0; i < tile; ++i) o[base + i] = a[base + i] + b[i];
        }
        break;
      }
      case Op::Mul:
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = in(0)[i] * in(1)[i];
        break;
      case Op::Relu:
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = in(0)[i] > 0.0 ? in(0)[i] : 0.0;
        break;
      case Op::LayerNorm: {
        const Matrix& x = in(0);
        const Matrix& gain = in(1);
        const Matrix& shift = in(2);
        const double c = static_cast<double>(n.cols);
        for (std::size_t r = 0; r < n.rows; ++r) {
          const auto xr = x.row(r);
          double mu = 0.0;
          for (double v : xr) mu += v;
          mu /= c;
          double var = 0.0;
          for (double v : xr) var += (v - mu) * (v - mu);
          var /= c;
          const double inv = 1.0 / std::sqrt(var + n.scalar);
          auto orow = out.row(r);
          for (std::size_t j = 0; j < n.cols; ++j) orow[j] = gain[j] * (xr[j] - mu) * inv + shift[j];
        }
        break;
      }
      case Op::SoftmaxRow:
      case Op::LogSoftmaxRow: {
        for (std::size_t r = 0; r < n.rows; ++r) {
          const auto xr = in(0).row(r);
          const double mx = row_max(xr);
          double z = 0.0;
          auto er = out.row(r);
          for (std::size_t j = 0; j < n.cols; ++j) z += (er[j] = std::exp(xr[j] - mx));
          auto orow = out.row(r);
          if (n.op == Op::SoftmaxRow) {
            for (std::size_t j = 0; j < n.cols; ++j) orow[j] /= z;
          } else {
            const double lse = mx + std::log(z);
            for (std::size_t j = 0; j < n.cols; ++j) orow[j] = xr[j] - lse;
          }
        }
        break;
      }
      case Op::MeanRows: {
        const std::size_t g = n.begin;
        const Matrix& x = in(0);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          auto orow = out.row(r / g);
          const auto xr = x.row(r);
          for (std::size_t j = 0; j < n.cols; ++j) orow[j] += xr[j];
        }
        for (auto& v : o) v /= static_cast<double>(g);
        break;
      }
      case Op::Scale:
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = in(0)[i] * n.scalar;
        break;
      case Op::ConcatRows: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const auto& v = in(k).values();
          std::copy(v.begin(), v.end(), o.begin() + static_cast<std::ptrdiff_t>(offset));
          offset += v.size();
        }
        break;
      }
      case Op::ConcatCols: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Matrix& part = in(k);
          for (std::size_t r = 0; r < n.rows; ++r) {
            const auto pr = part.row(r);
            std::copy(pr.begin(), pr.end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
          }
          offset += part.cols();
        }
        break;
      }
      case Op::SliceRows: {
        const auto& v = in(0).values();
        std::copy(v.begin() + static_cast<std::ptrdiff_t>(n.begin * n.cols),
                  v.begin() + static_cast<std::ptrdiff_t>(n.end * n.cols), o.begin());
        break;
      }
      case Op::SliceCols:
        for (std::size_t r = 0; r < n.rows; ++r) {
          const auto xr = in(0).row(r);
          std::copy(xr.begin() + static_cast<std::ptrdiff_t>(n.begin),
                    xr.begin() + static_cast<std::ptrdiff_t>(n.end), out.row(r).begin());
        }
        break;
      case Op::CosineSim:
        for (std::size_t r = 0; r < n.rows; ++r) {
          const auto a = in(0).row(r);
          const auto b = in(1).row(r);
          double dot = 0.0, na = 0.0, nb = 0.0;
          for (std::size_t j = 0; j < a.size(); ++j) {
            dot += a[j] * b[j];
            na += a[j] * a[j];
            nb += b[j] * b[j];
          }
          o[r] = dot / (std::sqrt(na) * std::sqrt(nb) + n.scalar);
        }
        break;
      case Op::Log:
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::log(in(0)[i]);
        break;
      case Op::Exp:
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(in(0)[i]);
        break;
      case Op::Neg:
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = -in(0)[i];
        break;
      case Op::Sum: {
        double s = 0.0;
        for (double v : in(0).values()) s += v;
        o[0] = s;
        break;
      }
      case Op::GroupMatMulNT: {
        const std::size_t g = n.begin;
        const Matrix& a = in(0);
        const Matrix& b = in(1);
        const std::size_t k = a.cols();
        for (std::size_t base = 0; base < n.rows; base += g) {
          gemm_nt(a.values().data() + base * k, b.values().data() + base * k,
                  o.data() + base * g, g, k, g);
        }
        break;
      }
      case Op::GroupMatMul: {
        const std::size_t g = n.begin;
        const Matrix& p = in(0);
        const Matrix& v = in(1);
        const std::size_t k = v.cols();
        for (std::size_t base = 0; base < n.rows; base += g) {
          gemm_nn(p.values().data() + base * g, v.values().data() + base * k,
                  o.data() + base * k, g, g, k);
        }
        break;
      }
      case Op::FeatureLift: {
        const Matrix& x = in(0);
        const Matrix& w = in(1);
        const std::size_t d = x.cols();
        for (std::size_t b = 0; b < x.rows(); ++b) {
          for (std::size_t i = 0; i < d; ++i) {
            const double xv = x(b, i);
            const auto wr = w.row(i);
            auto orow = out.row(b * d + i);
            for (std::size_t j = 0; j < n.cols; ++j) orow[j] = xv * wr[j];
          }
        }
        break;
      }
    }
  }
}

}  // namespace

std::vector<Matrix> forward(const Graph& graph, const ParamSet& params) {
  std::vector<Matrix> values(graph.size());
  for (NodeId id = 0; id < graph.size(); ++id) eval_node(graph, id, values, params, values[id]);
  return values;
}

// ---------------------------------------------------------------------------
// Backward

Gradients backward(const Graph& graph, const ParamSet& params, NodeId loss) {
  return backward(graph, params, loss, forward(graph, params));
}

Gradients backward(const Graph& graph, const ParamSet& params, NodeId loss,
                   const std::vector<Matrix>& values) {
  const Node& ln = graph.node(loss);
  if (ln.rows != 1 || ln.cols != 1) {
    throw std::invalid_argument("backward: loss must be 1x1, got " + graph.describe(loss));
  }
  std::vector<Matrix> grads(loss + 1);
  grads[loss] = Matrix(1, 1, 1.0);

  // Accumulates into the gradient slot of input k, allocating on first use.
  auto slot = [&](const Node& n, std::size_t k) -> Matrix* {
    const NodeId id = n.inputs[k];
    const Node& src = graph.node(id);
    if (!src.requires_grad) return nullptr;
    if (grads[id].empty() && src.rows * src.cols > 0) grads[id] = Matrix(src.rows, src.cols);
    return &grads[id];
  };

  for (NodeId id = loss + 1; id-- > 0;) {
    const Node& n = graph.node(id);
    if (grads[id].empty() || !n.requires_grad) continue;
    const Matrix& g = grads[id];
    const Matrix& y = values[id];
    const auto in = [&](std::size_t k) -> const Matrix& { return values[n.inputs[k]]; };

    switch (n.op) {
      case Op::Input:
      case Op::Parameter:
        break;
      case Op::MatMul: {
        const Matrix& a = in(0);
        const Matrix& b = in(1);
        if (Matrix* da = slot(n, 0)) {
          gemm_nt(g.values().data(), b.values().data(), da->values().data(), a.rows(), b.cols(),
                  a.cols());
        }
        if (Matrix* db = slot(n, 1)) {
          gemm_tn(a.values().data(), g.values().data(), db->values().data(), a.rows(), a.cols(),
                  b.cols());
        }
        break;
      }
      case Op::Add: {
        if (Matrix* da = slot(n, 0)) add_into(*da, g);
        if (Matrix* db = slot(n, 1)) {
          const std::size_t tile = db->size();
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i % tile] += g[i];
        }
        break;
      }
      case Op::Mul: {
        if (Matrix* da = slot(n, 0)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * in(1)[i];
        }
        if (Matrix* db = slot(n, 1)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * in(0)[i];
        }
        break;
      }
      case Op::Relu:
        if (Matrix* dx = slot(n, 0)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (in(0)[i] > 0.0) (*dx)[i] += g[i];
          }
        }
        break;
      case Op::LayerNorm: {
        const Matrix& x = in(0);
        const Matrix& gain = in(1);
        Matrix* dx = slot(n, 0);
        Matrix* dgain = slot(n, 1);
        Matrix* dshift = slot(n, 2);
        const double c = static_cast<double>(n.cols);
        std::vector<double> xhat(n.cols);
        std::vector<double> dxhat(n.cols);
        for (std::size_t r = 0; r < n.rows; ++r) {
          const auto xr = x.row(r);
          const auto gr = g.row(r);
          double mu = 0.0;
          for (double v : xr) mu += v;
          mu /= c;
          double var = 0.0;
          for (double v : xr) var += (v - mu) * (v - mu);
          var /= c;
          const double inv = 1.0 / std::sqrt(var + n.scalar);
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < n.cols; ++j) {
            xhat[j] = (xr[j] - mu) * inv;
            dxhat[j] = gr[j] * gain[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
            if (dgain) (*dgain)[j] += gr[j] * xhat[j];
            if (dshift) (*dshift)[j] += gr[j];
          }
          if (dx) {
            auto dxr = dx->row(r);
            for (std::size_t j = 0; j < n.cols; ++j) {
              dxr[j] += inv / c * (c * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
            }
          }
        }
        break;
      }
      case Op::SoftmaxRow:
        if (Matrix* dx = slot(n, 0)) {
          for (std::size_t r = 0; r < n.rows; ++r) {
            const auto yr = y.row(r);
            const auto gr = g.row(r);
            double dot = 0.0;
            for (std::size_t j = 0; j < n.cols; ++j) dot += gr[j] * yr[j];
            auto dxr = dx->row(r);
            for (std::size_t j = 0; j < n.cols; ++j) dxr[j] += yr[j] * (gr[j] - dot);
          }
        }
        break;
      case Op::LogSoftmaxRow:
        if (Matrix* dx = slot(n, 0)) {
          for (std::size_t r = 0; r < n.rows; ++r) {
            const auto yr = y.row(r);
            const auto gr = g.row(r);
            double total = 0.0;
            for (double v : gr) total += v;
            auto dxr = dx->row(r);
            for (std::size_t j = 0; j < n.cols; ++j) dxr[j] += gr[j] - std::exp(yr[j]) * total;
          }
        }
        break;
      case Op::MeanRows:
        if (Matrix* dx = slot(n, 0)) {
          const double inv = 1.0 / static_cast<double>(n.begin);
          for (std::size_t r = 0; r < dx->rows(); ++r) {
            const auto gr = g.row(r / n.begin);
            auto dxr = dx->row(r);
            for (std::size_t j = 0; j < n.cols; ++j) dxr[j] += gr[j] * inv;
          }
        }
        break;
      case Op::Scale:
        if (Matrix* dx = slot(n, 0)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * n.scalar;
        }
        break;
      case Op::ConcatRows: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t len = in(k).size();
          if (Matrix* dx = slot(n, k)) {
            for (std::size_t i = 0; i < len; ++i) (*dx)[i] += g[offset + i];
          }
          offset += len;
        }
        break;
      }
      case Op::ConcatCols: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t width = in(k).cols();
          if (Matrix* dx = slot(n, k)) {
            for (std::size_t r = 0; r < n.rows; ++r) {
              const auto gr = g.row(r);
              auto dxr = dx->row(r);
              for (std::size_t j = 0; j < width; ++j) dxr[j] += gr[offset + j];
            }
          }
          offset += width;
        }
        break;
      }
      case Op::SliceRows:
        if (Matrix* dx = slot(n, 0)) {
          const std::size_t base = n.begin * n.cols;
          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[base + i] += g[i];
        }
        break;
      case Op::SliceCols:
        if (Matrix* dx = slot(n, 0)) {
          for (std::size_t r = 0; r < n.rows; ++r) {
            const auto gr = g.row(r);
            auto dxr = dx->row(r);
            for (std::size_t j = 0; j < n.cols; ++j) dxr[n.begin + j] += gr[j];
          }
        }
        break;
      case Op::CosineSim: {
        Matrix* da = slot(n, 0);
        Matrix* db = slot(n, 1);
        const std::size_t width = in(0).cols();
        for (std::size_t r = 0; r < n.rows; ++r) {
          const auto a = in(0).row(r);
          const auto b = in(1).row(r);
          double dot = 0.0, na = 0.0, nb = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            dot += a[j] * b[j];
            na += a[j] * a[j];
            nb += b[j] * b[j];
          }
          na = std::sqrt(na);
          nb = std::sqrt(nb);
          const double denom = na * nb + n.scalar;
          const double gs = g[r];
          // d/da [dot / (|a||b| + eps)] = b/denom - dot * |b| * a / (|a| denom^2)
          const double ca = na > 0.0 ? dot * nb / (na * denom * denom) : 0.0;
          const double cb = nb > 0.0 ? dot * na / (nb * denom * denom) : 0.0;
          if (da) {
            auto dar = da->row(r);
            for (std::size_t j = 0; j < width; ++j) dar[j] += gs * (b[j] / denom - ca * a[j]);
          }
          if (db) {
            auto dbr = db->row(r);
            for (std::size_t j = 0; j < width; ++j) dbr[j] += gs * (a[j] / denom - cb * b[j]);
          }
        }
        break;
      }
      case Op::Log:
        if (Matrix* dx = slot(n, 0)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] / in(0)[i];
        }
        break;
      case Op::Exp:
        if (Matrix* dx = slot(n, 0)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * y[i];
        }
        break;
      case Op::Neg:
        if (Matrix* dx = slot(n, 0)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] -= g[i];
        }
        break;
      case Op::Sum:
        if (Matrix* dx = slot(n, 0)) {
          for (auto& v : dx->values()) v += g[0];
        }
        break;
      case Op::GroupMatMulNT: {
        const std::size_t grp = n.begin;
        const Matrix& a = in(0);
        const Matrix& b = in(1);
        const std::size_t k = a.cols();
        Matrix* da = slot(n, 0);
        Matrix* db = slot(n, 1);
        for (std::size_t base = 0; base < n.rows; base += grp) {
          const double* gb = g.values().data() + base * grp;
          // out_g = A_g B_g^T: dA_g = G B_g, dB_g = G^T A_g
          if (da) gemm_nn(gb, b.values().data() + base * k, da->values().data() + base * k, grp, grp, k);
          if (db) gemm_tn(gb, a.values().data() + base * k, db->values().data() + base * k, grp, grp, k);
        }
        break;
      }
      case Op::GroupMatMul: {
        const std::size_t grp = n.begin;
        const Matrix& p = in(0);
        const Matrix& v = in(1);
        const std::size_t k = v.cols();
        Matrix* dp = slot(n, 0);
        Matrix* dv = slot(n, 1);
        for (std::size_t base = 0; base < n.rows; base += grp) {
          const double* gb = g.values().data() + base * k;
          // out_g = P_g V_g: dP_g = G V_g^T, dV_g = P_g^T G
          if (dp) gemm_nt(gb, v.values().data() + base * k, dp->values().data() + base * grp, grp, k, grp);
          if (dv) gemm_tn(p.values().data() + base * grp, gb, dv->values().data() + base * k, grp, grp, k);
        }
        break;
      }
      case Op::FeatureLift: {
        const Matrix& x = in(0);
        const Matrix& w = in(1);
        const std::size_t d = x.cols();
        Matrix* dx = slot(n, 0);
        Matrix* dw = slot(n, 1);
        for (std::size_t b = 0; b < x.rows(); ++b) {
          for (std::size_t i = 0; i < d; ++i) {
            const auto gr = g.row(b * d + i);
            const auto wr = w.row(i);
            if (dx) {
              double s = 0.0;
              for (std::size_t j = 0; j < n.cols; ++j) s += gr[j] * wr[j];
              (*dx)(b, i) += s;
            }
            if (dw) {
              const double xv = x(b, i);
              auto dwr = dw->row(i);
              for (std::size_t j = 0; j < n.cols; ++j) dwr[j] += gr[j] * xv;
            }
          }
        }
        break;
      }
    }
  }

  Gradients out;
  out.loss = values[loss][0];
  for (NodeId id = 0; id < graph.size(); ++id) {
    const Node& n = graph.node(id);
    if (n.op != Op::Parameter) continue;
    if (id <= loss && !grads[id].empty()) {
      out.params[n.name] = std::move(grads[id]);
    } else {
      out.params[n.name] = Matrix(n.rows, n.cols);
    }
  }
  (void)params;
  return out;
}

FiniteDiffReport finite_diff_report(const Graph& graph, const ParamSet& params, NodeId loss,
                                    double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be > 0");
  const std::vector<Matrix> base = forward(graph, params);
  const Gradients analytic = backward(graph, params, loss, base);
  std::vector<Matrix> work = base;
  ParamSet probe = params;
  FiniteDiffReport report;

  for (const auto& [name, grad] : analytic.params) {
    // nodes that depend on this parameter, in evaluation order
    std::vector<char> dirty(loss + 1, 0);
    std::vector<NodeId> order;
    std::vector<NodeId> relu_inputs;
    for (NodeId id = 0; id <= loss; ++id) {
      const Node& n = graph.node(id);
      bool d = n.op == Op::Parameter && n.name == name;
      for (auto k : n.inputs) d = d || dirty[k];
      if (!d) continue;
      dirty[id] = 1;
      order.push_back(id);
      if (n.op == Op::Relu) relu_inputs.push_back(n.inputs[0]);
    }
    if (!dirty[loss]) {
      report.entries += grad.size();  // analytic gradient is zero, so is the numeric one
      continue;
    }
    auto loss_at = [&](double value, std::size_t i, bool& flipped) {
      probe.at(name)[i] = value;
      for (auto id : order) eval_node(graph, id, work, probe, work[id]);
      for (auto id : relu_inputs) {
        const auto& now = work[id].values();
        const auto& was = base[id].values();
        for (std::size_t j = 0; j < now.size() && !flipped; ++j) flipped = (now[j] > 0.0) != (was[j] > 0.0);
      }
      return work[loss][0];
    };

    Matrix& value = probe.at(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      double step = h;
      double numeric = 0.0;
      for (int attempt = 0; attempt <= 4; ++attempt, step /= 10.0) {
        bool flipped = false;
        const double up = loss_at(saved + step, i, flipped);
        const double down = loss_at(saved - step, i, flipped);
        numeric = (up - down) / (2.0 * step);
        if (!flipped) break;
        if (attempt == 0) ++report.kink_entries;
      }
      value[i] = saved;
      const double a = grad[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_parameter = name;
      }
      ++report.entries;
    }
    for (auto id : order) work[id].values() = base[id].values();
  }
  return report;
}

double finite_diff_check(const Graph& graph, const ParamSet& params, NodeId loss, double h) {
  return finite_diff_report(graph, params, loss, h).max_rel_error;
}

// ---------------------------------------------------------------------------
// Optimizer

AdamState AdamState::for_params(const ParamSet& params, double beta1, double beta2,
                                double epsilon) {
  AdamState s;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  for (const auto& [name, value] : params) {
    s.first_moment.emplace(name, Matrix(value.rows(), value.cols()));
    s.second_moment.emplace(name, Matrix(value.rows(), value.cols()));
  }
  return s;
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr) {
  for (const auto& [name, value] : params) {
    const auto g = grads.find(name);
    if (g == grads.end()) throw std::invalid_argument("adam_step: no gradient for '" + name + "'");
    if (!g->second.same_shape(value)) {
      throw std::invalid_argument("adam_step: gradient shape " + g->second.shape_string() +
                                  " differs from parameter '" + name + "' " + value.shape_string());
    }
    const auto m = state.first_moment.find(name);
    const auto v = state.second_moment.find(name);
    if (m == state.first_moment.end() || v == state.second_moment.end() ||
        !m->second.same_shape(value) || !v->second.same_shape(value)) {
      throw std::invalid_argument("adam_step: optimizer state does not match parameter '" + name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, value] : params) {
    const Matrix& g = grads.at(name);
    Matrix& m = state.first_moment.at(name);
    Matrix& v = state.second_moment.at(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      value[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

double LrSchedule::at(std::size_t epoch) const {
  return std::max(initial - static_cast<double>(epoch) * decay_per_epoch, floor);
}

void to_json(nlohmann::json& j, const LrSchedule& s) {
  j = nlohmann::json{{"initial", s.initial}, {"decay_per_epoch", s.decay_per_epoch}, {"floor", s.floor}};
}

void from_json(const nlohmann::json& j, LrSchedule& s) {
  s = LrSchedule{};
  s.initial = j.value("initial", s.initial);
  s.decay_per_epoch = j.value("decay_per_epoch", s.decay_per_epoch);
  s.floor = j.value("floor", s.floor);
  if (s.floor < 0.0) throw std::invalid_argument("lr schedule: floor must be >= 0");
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json params_to_json(const ParamSet& params) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, value] : params) {
    list.push_back({{"name", name}, {"shape", {value.rows(), value.cols()}}, {"values", value.values()}});
  }
  return {{"format", "tabcl-params"}, {"version", 1}, {"params", list}};
}

ParamSet params_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "tabcl-params") {
    throw std::invalid_argument("parameter container: unexpected format tag");
  }
  if (j.value("version", 0) != 1) {
    throw std::invalid_argument("parameter container: unsupported version");
  }
  ParamSet out;
  for (const auto& entry : j.at("params")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw std::invalid_argument("parameter '" + name + "': shape needs 2 dims");
    auto values = entry.at("values").get<std::vector<double>>();
    if (!out.emplace(name, Matrix(shape[0], shape[1], std::move(values))).second) {
      throw std::invalid_argument("parameter container: duplicate name '" + name + "'");
    }
  }
  return out;
}

double squared_norm(const ParamSet& params) {
  double s = 0.0;
  for (const auto& [name, value] : params) {
    for (double v : value.values()) s += v * v;
  }
  return s;
}

}  // namespace tabcl::diff
