#include "scatsep/diffcore.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "scatsep/errors.hpp"
#include "scatsep/fft.hpp"

namespace scatsep::diff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::string shape_str(Shape s) {
  return "(" + std::to_string(s.rows) + ", " + std::to_string(s.cols) + ")";
}

Shape broadcast(Shape a, Shape b, const char* op) {
  auto dim = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw TapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
  };
  return {dim(a.rows, b.rows), dim(a.cols, b.cols)};
}

// Flat index into an operand of shape s for output coordinate (r, c).
inline std::size_t bidx(Shape s, std::size_t r, std::size_t c) {
  return (s.rows == 1 ? 0 : r) * s.cols + (s.cols == 1 ? 0 : c);
}

template <OpKind K>
inline double bin_apply(double x, double z, double eps) {
  if constexpr (K == OpKind::Add) return x + z;
  if constexpr (K == OpKind::Sub) return x - z;
  if constexpr (K == OpKind::Mul) return x * z;
  if constexpr (K == OpKind::Div) return x / z;
  if constexpr (K == OpKind::SafeDiv) return z < eps ? 0.0 : x / z;
}

template <OpKind K>
void bin_eval(const double* av, Shape as, const double* bv, Shape bs, double* y, Shape out, double eps) {
  const std::size_t C = out.cols;
  const std::size_t sa = as.cols == 1 ? 0 : 1, sb = bs.cols == 1 ? 0 : 1;
  for (std::size_t r = 0; r < out.rows; ++r) {
    const double* ar = av + (as.rows == 1 ? 0 : r) * as.cols;
    const double* br = bv + (bs.rows == 1 ? 0 : r) * bs.cols;
    double* yr = y + r * C;
    if (sa == 1 && sb == 1) {
      for (std::size_t c = 0; c < C; ++c) yr[c] = bin_apply<K>(ar[c], br[c], eps);
    } else {
      for (std::size_t c = 0; c < C; ++c) yr[c] = bin_apply<K>(ar[c * sa], br[c * sb], eps);
    }
  }
}

template <OpKind K>
void bin_grad(const double* av, Shape as, double* ga, const double* bv, Shape bs, double* gb, const double* gy,
              Shape out, double eps) {
  const std::size_t C = out.cols;
  const std::size_t sa = as.cols == 1 ? 0 : 1, sb = bs.cols == 1 ? 0 : 1;
  for (std::size_t r = 0; r < out.rows; ++r) {
    const std::size_t oa = (as.rows == 1 ? 0 : r) * as.cols;
    const std::size_t ob = (bs.rows == 1 ? 0 : r) * bs.cols;
    const double* g = gy + r * C;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t ia = oa + c * sa, ib = ob + c * sb;
      double da = 0.0, db = 0.0;
      if constexpr (K == OpKind::Add) {
        da = g[c];
        db = g[c];
      } else if constexpr (K == OpKind::Sub) {
        da = g[c];
        db = -g[c];
      } else if constexpr (K == OpKind::Mul) {
        da = g[c] * bv[ib];
        db = g[c] * av[ia];
      } else {
        const double z = bv[ib];
        if (K == OpKind::Div || z >= eps) {
          da = g[c] / z;
          db = -g[c] * av[ia] / (z * z);
        }
      }
      if (ga) ga[ia] += da;
      if (gb) gb[ib] += db;
    }
  }
}

}  // namespace

std::string to_string(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::SafeDiv: return "safe_div";
    case OpKind::ScaleShift: return "scale";
    case OpKind::Square: return "square";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Clamp: return "clamp";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Dft: return "dft";
    case OpKind::DftReal: return "dft_real";
    case OpKind::Idft: return "idft";
    case OpKind::CMul: return "cmul";
    case OpKind::Modulus: return "modulus";
    case OpKind::Mean: return "mean";
    case OpKind::Sum: return "sum";
    case OpKind::SumAll: return "sum_all";
    case OpKind::ComplexMean: return "complex_mean";
    case OpKind::CInner: return "cinner";
    case OpKind::Affine: return "affine";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::Gather: return "gather";
  }
  return "unknown";
}

const LeafGradient& GradReport::at(NodeId node) const {
  for (const auto& l : leaves)
    if (l.node == node) return l;
  throw TapeError("no gradient recorded for node " + std::to_string(node.index));
}

// ---- construction ----------------------------------------------------------

NodeId Tape::push(Node node) {
  node.value.assign(node.shape.size(), 0.0);
  nodes_.push_back(std::move(node));
  forward_done_ = false;
  backward_done_ = false;
  return NodeId{static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::at(NodeId id) const {
  if (id.index < 0 || static_cast<std::size_t>(id.index) >= nodes_.size())
    throw TapeError("invalid node id " + std::to_string(id.index));
  return nodes_[static_cast<std::size_t>(id.index)];
}

Tape::Node& Tape::at(NodeId id) {
  return const_cast<Node&>(static_cast<const Tape&>(*this).at(id));
}

NodeId Tape::leaf(Shape shape, std::string name) {
  Node n;
  n.kind = OpKind::Leaf;
  n.shape = shape;
  n.requires_grad = true;
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId Tape::input(Shape shape, std::string name) {
  Node n;
  n.kind = OpKind::Input;
  n.shape = shape;
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId Tape::constant(Shape shape, std::vector<double> values) {
  if (values.size() != shape.size())
    throw TapeError("constant: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  Node n;
  n.kind = OpKind::Constant;
  n.shape = shape;
  n.bound = true;
  NodeId id = push(std::move(n));
  nodes_.back().value = std::move(values);
  return id;
}

NodeId Tape::binary(OpKind kind, NodeId a, NodeId b, double eps) {
  const Node& na = at(a);
  const Node& nb = at(b);
  Node n;
  n.kind = kind;
  n.shape = broadcast(na.shape, nb.shape, to_string(kind).c_str());
  n.in[0] = a.index;
  n.in[1] = b.index;
  n.p0 = eps;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) { return binary(OpKind::Add, a, b); }
NodeId Tape::sub(NodeId a, NodeId b) { return binary(OpKind::Sub, a, b); }
NodeId Tape::mul(NodeId a, NodeId b) { return binary(OpKind::Mul, a, b); }
NodeId Tape::div(NodeId a, NodeId b) { return binary(OpKind::Div, a, b); }
NodeId Tape::safe_div(NodeId a, NodeId b, double eps) { return binary(OpKind::SafeDiv, a, b, eps); }

NodeId Tape::unary(OpKind kind, NodeId a, double p0, double p1) {
  const Node& na = at(a);
  Node n;
  n.kind = kind;
  n.shape = na.shape;
  n.in[0] = a.index;
  n.p0 = p0;
  n.p1 = p1;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double factor, double offset) {
  return unary(OpKind::ScaleShift, a, factor, offset);
}
NodeId Tape::square(NodeId a) { return unary(OpKind::Square, a); }
NodeId Tape::sqrt(NodeId a) { return unary(OpKind::Sqrt, a); }
NodeId Tape::exp(NodeId a) { return unary(OpKind::Exp, a); }
NodeId Tape::log(NodeId a) { return unary(OpKind::Log, a); }
NodeId Tape::clamp(NodeId a, double lo, double hi) {
  if (!(lo <= hi)) throw TapeError("clamp: lo > hi");
  return unary(OpKind::Clamp, a, lo, hi);
}
NodeId Tape::leaky_relu(NodeId a, double slope) { return unary(OpKind::LeakyRelu, a, slope); }

NodeId Tape::dft(NodeId a) {
  if (at(a).shape.cols % 2 != 0) throw TapeError("dft: input must be interleaved complex");
  return unary(OpKind::Dft, a);
}

NodeId Tape::idft(NodeId a) {
  if (at(a).shape.cols % 2 != 0) throw TapeError("idft: input must be interleaved complex");
  return unary(OpKind::Idft, a);
}

NodeId Tape::dft_real(NodeId a) {
  const Node& na = at(a);
  Node n;
  n.kind = OpKind::DftReal;
  n.shape = {na.shape.rows, 2 * na.shape.cols};
  n.in[0] = a.index;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::cmul(NodeId a, NodeId b, bool conjugate_b) {
  const Node& na = at(a);
  const Node& nb = at(b);
  if (na.shape.cols != nb.shape.cols || na.shape.cols % 2 != 0)
    throw TapeError("cmul: column mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  if (na.shape.rows != nb.shape.rows && na.shape.rows != 1 && nb.shape.rows != 1)
    throw TapeError("cmul: row mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  Node n;
  n.kind = OpKind::CMul;
  n.shape = {std::max(na.shape.rows, nb.shape.rows), na.shape.cols};
  n.in[0] = a.index;
  n.in[1] = b.index;
  n.flag = conjugate_b;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

NodeId Tape::modulus(NodeId a) {
  const Node& na = at(a);
  if (na.shape.cols % 2 != 0) throw TapeError("modulus: input must be interleaved complex");
  Node n;
  n.kind = OpKind::Modulus;
  n.shape = {na.shape.rows, na.shape.cols / 2};
  n.in[0] = a.index;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::complex_mean(NodeId a) {
  const Node& na = at(a);
  if (na.shape.cols % 2 != 0 || na.shape.cols == 0)
    throw TapeError("complex_mean: input must be interleaved complex");
  Node n;
  n.kind = OpKind::ComplexMean;
  n.shape = {na.shape.rows, 2};
  n.in[0] = a.index;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::cinner(NodeId a, NodeId b) {
  const Node& na = at(a);
  const Node& nb = at(b);
  if (na.shape.cols != nb.shape.cols || na.shape.cols % 2 != 0 || na.shape.cols == 0)
    throw TapeError("cinner: column mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  if (na.shape.rows != nb.shape.rows && na.shape.rows != 1 && nb.shape.rows != 1)
    throw TapeError("cinner: row mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  Node n;
  n.kind = OpKind::CInner;
  n.shape = {std::max(na.shape.rows, nb.shape.rows), 2};
  n.in[0] = a.index;
  n.in[1] = b.index;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

NodeId Tape::mean(NodeId a, Axis axis) {
  const Node& na = at(a);
  Node n;
  n.kind = OpKind::Mean;
  n.shape = axis == Axis::Rows ? Shape{1, na.shape.cols} : Shape{na.shape.rows, 1};
  n.flag = axis == Axis::Rows;
  n.in[0] = a.index;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::sum(NodeId a, Axis axis) {
  NodeId id = mean(a, axis);
  nodes_.back().kind = OpKind::Sum;
  return id;
}

NodeId Tape::sum_all(NodeId a) {
  const Node& na = at(a);
  Node n;
  n.kind = OpKind::SumAll;
  n.shape = {1, 1};
  n.in[0] = a.index;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::affine(NodeId x, NodeId weight, NodeId bias) {
  const Node& nx = at(x);
  const Node& nw = at(weight);
  const Node& nb = at(bias);
  if (nw.shape.cols != nx.shape.cols || nb.shape != Shape{1, nw.shape.rows})
    throw TapeError("affine: x " + shape_str(nx.shape) + ", weight " + shape_str(nw.shape) + ", bias " +
                    shape_str(nb.shape));
  Node n;
  n.kind = OpKind::Affine;
  n.shape = {nx.shape.rows, nw.shape.rows};
  n.in[0] = x.index;
  n.in[1] = weight.index;
  n.in[2] = bias.index;
  n.requires_grad = nx.requires_grad || nw.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

NodeId Tape::batch_norm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean, NodeId running_var,
                        bool training, double eps) {
  const Node& nx = at(x);
  const Shape row{1, nx.shape.cols};
  for (NodeId p : {gamma, beta, running_mean, running_var})
    if (at(p).shape != row) throw TapeError("batch_norm: parameter shape must be " + shape_str(row));
  if (at(running_mean).requires_grad || at(running_var).requires_grad)
    throw TapeError("batch_norm: running statistics must not require gradients");
  if (training && nx.shape.rows < 2) throw TapeError("batch_norm: training mode needs at least 2 rows");
  Node n;
  n.kind = OpKind::BatchNorm;
  n.shape = nx.shape;
  n.in[0] = x.index;
  n.in[1] = gamma.index;
  n.in[2] = beta.index;
  n.in[3] = running_mean.index;
  n.in[4] = running_var.index;
  n.flag = training;
  n.p0 = eps;
  n.requires_grad = nx.requires_grad || at(gamma).requires_grad || at(beta).requires_grad;
  return push(std::move(n));
}

NodeId Tape::softmax(NodeId a) { return unary(OpKind::Softmax, a); }
NodeId Tape::log_softmax(NodeId a) { return unary(OpKind::LogSoftmax, a); }

NodeId Tape::concat_cols(std::span<const NodeId> parts) {
  if (parts.empty()) throw TapeError("concat_cols: no inputs");
  Node n;
  n.kind = OpKind::ConcatCols;
  n.shape = {at(parts[0]).shape.rows, 0};
  for (NodeId p : parts) {
    const Node& np = at(p);
    if (np.shape.rows != n.shape.rows) throw TapeError("concat_cols: row mismatch");
    n.shape.cols += np.shape.cols;
    n.index.push_back(static_cast<std::size_t>(p.index));
    n.requires_grad = n.requires_grad || np.requires_grad;
  }
  return push(std::move(n));
}

NodeId Tape::concat_rows(std::span<const NodeId> parts) {
  if (parts.empty()) throw TapeError("concat_rows: no inputs");
  Node n;
  n.kind = OpKind::ConcatRows;
  n.shape = {0, at(parts[0]).shape.cols};
  for (NodeId p : parts) {
    const Node& np = at(p);
    if (np.shape.cols != n.shape.cols) throw TapeError("concat_rows: column mismatch");
    n.shape.rows += np.shape.rows;
    n.index.push_back(static_cast<std::size_t>(p.index));
    n.requires_grad = n.requires_grad || np.requires_grad;
  }
  return push(std::move(n));
}

NodeId Tape::slice_cols(NodeId a, std::size_t begin, std::size_t count) {
  const Node& na = at(a);
  if (begin + count > na.shape.cols) throw TapeError("slice_cols: range out of bounds");
  Node n;
  n.kind = OpKind::SliceCols;
  n.shape = {na.shape.rows, count};
  n.begin = begin;
  n.in[0] = a.index;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::gather_rows(NodeId a, std::vector<std::size_t> rows) {
  const Node& na = at(a);
  for (std::size_t r : rows)
    if (r >= na.shape.rows) throw TapeError("gather_rows: row index out of bounds");
  Node n;
  n.kind = OpKind::GatherRows;
  n.shape = {rows.size(), na.shape.cols};
  n.index = std::move(rows);
  n.in[0] = a.index;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::gather(NodeId a, std::vector<std::size_t> indices, Shape shape) {
  const Node& na = at(a);
  if (indices.size() != shape.size()) throw TapeError("gather: index count does not match shape");
  for (std::size_t i : indices)
    if (i >= na.shape.size()) throw TapeError("gather: index out of bounds");
  Node n;
  n.kind = OpKind::Gather;
  n.shape = shape;
  n.index = std::move(indices);
  n.in[0] = a.index;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

// ---- execution -------------------------------------------------------------

void Tape::bind(NodeId node, std::span<const double> values) {
  Node& n = at(node);
  if (n.kind != OpKind::Leaf && n.kind != OpKind::Input)
    throw TapeError("bind: node " + std::to_string(node.index) + " is a " + to_string(n.kind));
  if (values.size() != n.shape.size())
    throw TapeError("bind: " + std::to_string(values.size()) + " values for '" + n.name + "' of shape " +
                    shape_str(n.shape));
  std::copy(values.begin(), values.end(), n.value.begin());
  n.bound = true;
  forward_done_ = false;
  backward_done_ = false;
}

void Tape::forward() {
  for (auto& n : nodes_) {
    if (n.kind == OpKind::Leaf || n.kind == OpKind::Input) {
      if (!n.bound) throw TapeError("forward: unbound " + to_string(n.kind) + " '" + n.name + "'");
      continue;
    }
    if (n.kind == OpKind::Constant) continue;
    eval(n);
  }
  forward_done_ = true;
  backward_done_ = false;
}

void Tape::eval(Node& n) {
  auto in = [&](int k) -> const Node& { return nodes_[static_cast<std::size_t>(n.in[k])]; };
  double* y = n.value.data();
  const std::size_t R = n.shape.rows;
  const std::size_t C = n.shape.cols;

  switch (n.kind) {
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul:
    case OpKind::Div:
    case OpKind::SafeDiv: {
      const Node& a = in(0);
      const Node& b = in(1);
      const double* av = a.value.data();
      const double* bv = b.value.data();
      const double eps = n.p0;
      switch (n.kind) {
        case OpKind::Add: bin_eval<OpKind::Add>(av, a.shape, bv, b.shape, y, n.shape, eps); break;
        case OpKind::Sub: bin_eval<OpKind::Sub>(av, a.shape, bv, b.shape, y, n.shape, eps); break;
        case OpKind::Mul: bin_eval<OpKind::Mul>(av, a.shape, bv, b.shape, y, n.shape, eps); break;
        case OpKind::Div: bin_eval<OpKind::Div>(av, a.shape, bv, b.shape, y, n.shape, eps); break;
        default: bin_eval<OpKind::SafeDiv>(av, a.shape, bv, b.shape, y, n.shape, eps); break;
      }
      break;
    }
    case OpKind::ScaleShift: {
      const double* x = in(0).value.data();
      for (std::size_t i = 0; i < R * C; ++i) y[i] = n.p0 * x[i] + n.p1;
      break;
    }
    case OpKind::Square: {
      const double* x = in(0).value.data();
      for (std::size_t i = 0; i < R * C; ++i) y[i] = x[i] * x[i];
      break;
    }
    case OpKind::Sqrt: {
      const double* x = in(0).value.data();
      for (std::size_t i = 0; i < R * C; ++i) y[i] = std::sqrt(x[i]);
      break;
    }
    case OpKind::Exp: {
      const double* x = in(0).value.data();
      for (std::size_t i = 0; i < R * C; ++i) y[i] = std::exp(x[i]);
      break;
    }
    case OpKind::Log: {
      const double* x = in(0).value.data();
      for (std::size_t i = 0; i < R * C; ++i) y[i] = std::log(x[i]);
      break;
    }
    case OpKind::Clamp: {
      const double* x = in(0).value.data();
      for (std::size_t i = 0; i < R * C; ++i) y[i] = std::clamp(x[i], n.p0, n.p1);
      break;
    }
    case OpKind::LeakyRelu: {
      const double* x = in(0).value.data();
      for (std::size_t i = 0; i < R * C; ++i) y[i] = x[i] > 0.0 ? x[i] : n.p0 * x[i];
      break;
    }
    case OpKind::Dft:
    case OpKind::Idft: {
      const Node& a = in(0);
      const std::size_t m = C / 2;
      for (std::size_t r = 0; r < R; ++r) {
        std::span<const double> src(a.value.data() + r * C, C);
        std::span<double> dst(y + r * C, C);
        if (n.kind == OpKind::Dft)
          fft::forward(src, dst, m);
        else
          fft::inverse(src, dst, m);
      }
      break;
    }
    case OpKind::DftReal: {
      const Node& a = in(0);
      const std::size_t m = a.shape.cols;
      for (std::size_t r = 0; r < R; ++r)
        fft::forward_real(std::span<const double>(a.value.data() + r * m, m), std::span<double>(y + r * C, C));
      break;
    }
    case OpKind::CMul: {
      const Node& a = in(0);
      const Node& b = in(1);
      const double sgn = n.flag ? -1.0 : 1.0;
      for (std::size_t r = 0; r < R; ++r) {
        const double* ar = a.value.data() + (a.shape.rows == 1 ? 0 : r) * C;
        const double* br = b.value.data() + (b.shape.rows == 1 ? 0 : r) * C;
        double* yr = y + r * C;
        for (std::size_t c = 0; c < C; c += 2) {
          const double xr = ar[c], xi = ar[c + 1];
          const double zr = br[c], zi = sgn * br[c + 1];
          yr[c] = xr * zr - xi * zi;
          yr[c + 1] = xr * zi + xi * zr;
        }
      }
      break;
    }
    case OpKind::Modulus: {
      const double* x = in(0).value.data();
      for (std::size_t i = 0; i < R * C; ++i) y[i] = std::sqrt(x[2 * i] * x[2 * i] + x[2 * i + 1] * x[2 * i + 1]);
      break;
    }
    case OpKind::ComplexMean: {
      const Node& a = in(0);
      const std::size_t m = a.shape.cols / 2;
      for (std::size_t r = 0; r < R; ++r) {
        const double* ar = a.value.data() + r * a.shape.cols;
        double re = 0.0, im = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          re += ar[2 * k];
          im += ar[2 * k + 1];
        }
        y[2 * r] = re / static_cast<double>(m);
        y[2 * r + 1] = im / static_cast<double>(m);
      }
      break;
    }
    case OpKind::CInner: {
      const Node& a = in(0);
      const Node& b = in(1);
      const std::size_t W = a.shape.cols;
      const double w = 2.0 / static_cast<double>(W);
      for (std::size_t r = 0; r < R; ++r) {
        const double* ar = a.value.data() + (a.shape.rows == 1 ? 0 : r) * W;
        const double* br = b.value.data() + (b.shape.rows == 1 ? 0 : r) * W;
        double re = 0.0, im = 0.0;
        for (std::size_t c = 0; c < W; c += 2) {
          re += ar[c] * br[c] + ar[c + 1] * br[c + 1];
          im += ar[c + 1] * br[c] - ar[c] * br[c + 1];
        }
        y[2 * r] = re * w;
        y[2 * r + 1] = im * w;
      }
      break;
    }
    case OpKind::Mean:
    case OpKind::Sum: {
      const Node& a = in(0);
      const bool over_rows = n.flag;
      const double w = n.kind == OpKind::Sum ? 1.0
                       : over_rows          ? 1.0 / static_cast<double>(a.shape.rows)
                                            : 1.0 / static_cast<double>(a.shape.cols);
      std::fill(n.value.begin(), n.value.end(), 0.0);
      for (std::size_t r = 0; r < a.shape.rows; ++r)
        for (std::size_t c = 0; c < a.shape.cols; ++c)
          y[over_rows ? c : r] += a.value[r * a.shape.cols + c];
      for (auto& v : n.value) v *= w;
      break;
    }
    case OpKind::SumAll: {
      const auto& v = in(0).value;
      y[0] = std::accumulate(v.begin(), v.end(), 0.0);
      break;
    }
    case OpKind::Affine: {
      const Node& x = in(0);
      const Node& w = in(1);
      const Node& b = in(2);
      CMapMat X(x.value.data(), x.shape.rows, x.shape.cols);
      CMapMat W(w.value.data(), w.shape.rows, w.shape.cols);
      MapMat Y(y, R, C);
      Y.noalias() = X * W.transpose();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) y[r * C + c] += b.value[c];
      break;
    }
    case OpKind::BatchNorm: {
      const Node& x = in(0);
      const double* g = in(1).value.data();
      const double* be = in(2).value.data();
      const double* rm = in(3).value.data();
      const double* rv = in(4).value.data();
      // aux layout: xhat (R*C) | inv_std (C) | mean (C) | var (C)
      n.aux.assign(R * C + 3 * C, 0.0);
      double* xhat = n.aux.data();
      double* inv_std = xhat + R * C;
      double* mu = inv_std + C;
      double* var = mu + C;
      if (n.flag) {
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0.0;
          for (std::size_t r = 0; r < R; ++r) s += x.value[r * C + c];
          mu[c] = s / static_cast<double>(R);
          double q = 0.0;
          for (std::size_t r = 0; r < R; ++r) {
            const double d = x.value[r * C + c] - mu[c];
            q += d * d;
          }
          var[c] = q / static_cast<double>(R);
        }
      } else {
        std::copy(rm, rm + C, mu);
        std::copy(rv, rv + C, var);
      }
      for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + n.p0);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t i = r * C + c;
          xhat[i] = (x.value[i] - mu[c]) * inv_std[c];
          y[i] = g[c] * xhat[i] + be[c];
        }
      break;
    }
    case OpKind::Softmax:
    case OpKind::LogSoftmax: {
      const double* x = in(0).value.data();
      for (std::size_t r = 0; r < R; ++r) {
        const double* xr = x + r * C;
        double* yr = y + r * C;
        const double mx = *std::max_element(xr, xr + C);
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += std::exp(xr[c] - mx);
        if (n.kind == OpKind::Softmax) {
          for (std::size_t c = 0; c < C; ++c) yr[c] = std::exp(xr[c] - mx) / s;
        } else {
          const double lse = mx + std::log(s);
          for (std::size_t c = 0; c < C; ++c) yr[c] = xr[c] - lse;
        }
      }
      break;
    }
    case OpKind::ConcatCols: {
      std::size_t off = 0;
      for (std::size_t p : n.index) {
        const Node& a = nodes_[p];
        const std::size_t w = a.shape.cols;
        for (std::size_t r = 0; r < R; ++r)
          std::copy_n(a.value.data() + r * w, w, y + r * C + off);
        off += w;
      }
      break;
    }
    case OpKind::ConcatRows: {
      std::size_t off = 0;
      for (std::size_t p : n.index) {
        const Node& a = nodes_[p];
        std::copy(a.value.begin(), a.value.end(), y + off);
        off += a.value.size();
      }
      break;
    }
    case OpKind::SliceCols: {
      const Node& a = in(0);
      for (std::size_t r = 0; r < R; ++r)
        std::copy_n(a.value.data() + r * a.shape.cols + n.begin, C, y + r * C);
      break;
    }
    case OpKind::GatherRows: {
      const Node& a = in(0);
      for (std::size_t r = 0; r < R; ++r) std::copy_n(a.value.data() + n.index[r] * C, C, y + r * C);
      break;
    }
    case OpKind::Gather: {
      const Node& a = in(0);
      for (std::size_t i = 0; i < n.index.size(); ++i) y[i] = a.value[n.index[i]];
      break;
    }
    case OpKind::Leaf:
    case OpKind::Input:
    case OpKind::Constant:
      break;
  }
}

GradReport Tape::backward(NodeId output) {
  const Node& n = at(output);
  if (n.shape.size() != 1)
    throw TapeError("backward: output has shape " + shape_str(n.shape) + "; seed it explicitly");
  const double one = 1.0;
  Seed seed{output, std::span<const double>(&one, 1)};
  backward(std::span<const Seed>(&seed, 1));
  return report();
}

void Tape::backward(std::span<const Seed> seeds) {
  if (!forward_done_) throw TapeError("backward called before forward");
  for (auto& n : nodes_) {
    if (n.requires_grad)
      n.grad.assign(n.shape.size(), 0.0);
    else
      n.grad.clear();
  }
  std::size_t last = 0;
  for (const Seed& s : seeds) {
    Node& n = at(s.node);
    if (s.cotangent.size() != n.shape.size())
      throw TapeError("backward: cotangent size " + std::to_string(s.cotangent.size()) + " for shape " +
                      shape_str(n.shape));
    if (!n.requires_grad) continue;
    for (std::size_t i = 0; i < s.cotangent.size(); ++i) n.grad[i] += s.cotangent[i];
    last = std::max(last, static_cast<std::size_t>(s.node.index) + 1);
  }
  for (std::size_t k = last; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.requires_grad) continue;
    propagate(n);
  }
  backward_done_ = true;
}

void Tape::propagate(Node& n) {
  auto in = [&](int k) -> Node& { return nodes_[static_cast<std::size_t>(n.in[k])]; };
  const double* gy = n.grad.data();
  const std::size_t R = n.shape.rows;
  const std::size_t C = n.shape.cols;

  switch (n.kind) {
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul:
    case OpKind::Div:
    case OpKind::SafeDiv: {
      Node& a = in(0);
      Node& b = in(1);
      double* ga = a.requires_grad ? a.grad.data() : nullptr;
      double* gb = b.requires_grad ? b.grad.data() : nullptr;
      const double* av = a.value.data();
      const double* bv = b.value.data();
      const double eps = n.p0;
      switch (n.kind) {
        case OpKind::Add: bin_grad<OpKind::Add>(av, a.shape, ga, bv, b.shape, gb, gy, n.shape, eps); break;
        case OpKind::Sub: bin_grad<OpKind::Sub>(av, a.shape, ga, bv, b.shape, gb, gy, n.shape, eps); break;
        case OpKind::Mul: bin_grad<OpKind::Mul>(av, a.shape, ga, bv, b.shape, gb, gy, n.shape, eps); break;
        case OpKind::Div: bin_grad<OpKind::Div>(av, a.shape, ga, bv, b.shape, gb, gy, n.shape, eps); break;
        default: bin_grad<OpKind::SafeDiv>(av, a.shape, ga, bv, b.shape, gb, gy, n.shape, eps); break;
      }
      break;
    }
    case OpKind::ScaleShift: {
      Node& a = in(0);
      for (std::size_t i = 0; i < R * C; ++i) a.grad[i] += n.p0 * gy[i];
      break;
    }
    case OpKind::Square: {
      Node& a = in(0);
      for (std::size_t i = 0; i < R * C; ++i) a.grad[i] += 2.0 * a.value[i] * gy[i];
      break;
    }
    case OpKind::Sqrt: {
      Node& a = in(0);
      for (std::size_t i = 0; i < R * C; ++i)
        if (n.value[i] > 0.0) a.grad[i] += gy[i] / (2.0 * n.value[i]);
      break;
    }
    case OpKind::Exp: {
      Node& a = in(0);
      for (std::size_t i = 0; i < R * C; ++i) a.grad[i] += gy[i] * n.value[i];
      break;
    }
    case OpKind::Log: {
      Node& a = in(0);
      for (std::size_t i = 0; i < R * C; ++i) a.grad[i] += gy[i] / a.value[i];
      break;
    }
    case OpKind::Clamp: {
      Node& a = in(0);
      for (std::size_t i = 0; i < R * C; ++i)
        if (a.value[i] >= n.p0 && a.value[i] <= n.p1) a.grad[i] += gy[i];
      break;
    }
    case OpKind::LeakyRelu: {
      Node& a = in(0);
      for (std::size_t i = 0; i < R * C; ++i) a.grad[i] += a.value[i] > 0.0 ? gy[i] : n.p0 * gy[i];
      break;
    }
    case OpKind::Dft:
    case OpKind::Idft: {
      Node& a = in(0);
      const std::size_t m = C / 2;
      std::vector<double> tmp(C);
      for (std::size_t r = 0; r < R; ++r) {
        std::span<const double> g(gy + r * C, C);
        if (n.kind == OpKind::Dft) {
          fft::adjoint(g, tmp, m);
        } else {
          fft::forward(g, tmp, m);
          for (auto& v : tmp) v /= static_cast<double>(m);
        }
        double* ga = a.grad.data() + r * C;
        for (std::size_t c = 0; c < C; ++c) ga[c] += tmp[c];
      }
      break;
    }
    case OpKind::DftReal: {
      Node& a = in(0);
      const std::size_t m = a.shape.cols;
      std::vector<double> tmp(C);
      for (std::size_t r = 0; r < R; ++r) {
        fft::adjoint(std::span<const double>(gy + r * C, C), tmp, m);
        double* ga = a.grad.data() + r * m;
        for (std::size_t t = 0; t < m; ++t) ga[t] += tmp[2 * t];
      }
      break;
    }
    case OpKind::CMul: {
      Node& a = in(0);
      Node& b = in(1);
      const bool conj = n.flag;
      for (std::size_t r = 0; r < R; ++r) {
        const std::size_t ra = a.shape.rows == 1 ? 0 : r;
        const std::size_t rb = b.shape.rows == 1 ? 0 : r;
        const double* av = a.value.data() + ra * C;
        const double* bv = b.value.data() + rb * C;
        const double* g = gy + r * C;
        for (std::size_t c = 0; c < C; c += 2) {
          const double gr = g[c], gi = g[c + 1];
          const double xr = av[c], xi = av[c + 1];
          const double zr = bv[c], zi = bv[c + 1];
          if (a.requires_grad) {
            // out = a*b: abar = g*conj(b); out = a*conj(b): abar = g*b
            double* ga = a.grad.data() + ra * C + c;
            if (!conj) {
              ga[0] += gr * zr + gi * zi;
              ga[1] += gi * zr - gr * zi;
            } else {
              ga[0] += gr * zr - gi * zi;
              ga[1] += gr * zi + gi * zr;
            }
          }
          if (b.requires_grad) {
            // out = a*b: bbar = g*conj(a); out = a*conj(b): bbar = conj(g)*a
            double* gb = b.grad.data() + rb * C + c;
            if (!conj) {
              gb[0] += gr * xr + gi * xi;
              gb[1] += gi * xr - gr * xi;
            } else {
              gb[0] += gr * xr + gi * xi;
              gb[1] += gr * xi - gi * xr;
            }
          }
        }
      }
      break;
    }
    case OpKind::Modulus: {
      Node& a = in(0);
      for (std::size_t i = 0; i < R * C; ++i) {
        const double s = gy[i] / (n.value[i] + kModulusGradEps);
        a.grad[2 * i] += s * a.value[2 * i];
        a.grad[2 * i + 1] += s * a.value[2 * i + 1];
      }
      break;
    }
    case OpKind::ComplexMean: {
      Node& a = in(0);
      const std::size_t m = a.shape.cols / 2;
      const double w = 1.0 / static_cast<double>(m);
      for (std::size_t r = 0; r < R; ++r) {
        double* ga = a.grad.data() + r * a.shape.cols;
        const double gr = gy[2 * r] * w, gi = gy[2 * r + 1] * w;
        for (std::size_t k = 0; k < m; ++k) {
          ga[2 * k] += gr;
          ga[2 * k + 1] += gi;
        }
      }
      break;
    }
    case OpKind::CInner: {
      Node& a = in(0);
      Node& b = in(1);
      const std::size_t W = a.shape.cols;
      const double w = 2.0 / static_cast<double>(W);
      for (std::size_t r = 0; r < R; ++r) {
        const std::size_t oa = (a.shape.rows == 1 ? 0 : r) * W;
        const std::size_t ob = (b.shape.rows == 1 ? 0 : r) * W;
        const double* av = a.value.data() + oa;
        const double* bv = b.value.data() + ob;
        const double gr = gy[2 * r] * w, gi = gy[2 * r + 1] * w;
        if (a.requires_grad) {
          double* ga = a.grad.data() + oa;
          for (std::size_t c = 0; c < W; c += 2) {
            ga[c] += gr * bv[c] - gi * bv[c + 1];
            ga[c + 1] += gr * bv[c + 1] + gi * bv[c];
          }
        }
        if (b.requires_grad) {
          double* gb = b.grad.data() + ob;
          for (std::size_t c = 0; c < W; c += 2) {
            gb[c] += gr * av[c] + gi * av[c + 1];
            gb[c + 1] += gr * av[c + 1] - gi * av[c];
          }
        }
      }
      break;
    }
    case OpKind::Mean:
    case OpKind::Sum: {
      Node& a = in(0);
      const bool over_rows = n.flag;
      const double w = n.kind == OpKind::Sum ? 1.0
                       : over_rows          ? 1.0 / static_cast<double>(a.shape.rows)
                                            : 1.0 / static_cast<double>(a.shape.cols);
      for (std::size_t r = 0; r < a.shape.rows; ++r)
        for (std::size_t c = 0; c < a.shape.cols; ++c)
          a.grad[r * a.shape.cols + c] += w * gy[over_rows ? c : r];
      break;
    }
    case OpKind::SumAll: {
      Node& a = in(0);
      for (auto& g : a.grad) g += gy[0];
      break;
    }
    case OpKind::Affine: {
      Node& x = in(0);
      Node& w = in(1);
      Node& b = in(2);
      CMapMat G(gy, R, C);
      if (x.requires_grad) {
        CMapMat W(w.value.data(), w.shape.rows, w.shape.cols);
        MapMat GX(x.grad.data(), x.shape.rows, x.shape.cols);
        GX.noalias() += G * W;
      }
      if (w.requires_grad) {
        CMapMat X(x.value.data(), x.shape.rows, x.shape.cols);
        MapMat GW(w.grad.data(), w.shape.rows, w.shape.cols);
        GW.noalias() += G.transpose() * X;
      }
      if (b.requires_grad)
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) b.grad[c] += gy[r * C + c];
      break;
    }
    case OpKind::BatchNorm: {
      Node& x = in(0);
      Node& gamma = in(1);
      Node& beta = in(2);
      const double* xhat = n.aux.data();
      const double* inv_std = xhat + R * C;
      const double* g = gamma.value.data();
      for (std::size_t c = 0; c < C; ++c) {
        double sg = 0.0, sgx = 0.0;
        for (std::size_t r = 0; r < R; ++r) {
          const std::size_t i = r * C + c;
          sg += gy[i];
          sgx += gy[i] * xhat[i];
        }
        if (gamma.requires_grad) gamma.grad[c] += sgx;
        if (beta.requires_grad) beta.grad[c] += sg;
        if (!x.requires_grad) continue;
        if (n.flag) {
          const double Rn = static_cast<double>(R);
          const double k = g[c] * inv_std[c] / Rn;
          for (std::size_t r = 0; r < R; ++r) {
            const std::size_t i = r * C + c;
            x.grad[i] += k * (Rn * gy[i] - sg - xhat[i] * sgx);
          }
        } else {
          for (std::size_t r = 0; r < R; ++r) {
            const std::size_t i = r * C + c;
            x.grad[i] += gy[i] * g[c] * inv_std[c];
          }
        }
      }
      break;
    }
    case OpKind::Softmax: {
      Node& a = in(0);
      for (std::size_t r = 0; r < R; ++r) {
        const double* yr = n.value.data() + r * C;
        const double* g = gy + r * C;
        double dot = 0.0;
        for (std::size_t c = 0; c < C; ++c) dot += g[c] * yr[c];
        for (std::size_t c = 0; c < C; ++c) a.grad[r * C + c] += yr[c] * (g[c] - dot);
      }
      break;
    }
    case OpKind::LogSoftmax: {
      Node& a = in(0);
      for (std::size_t r = 0; r < R; ++r) {
        const double* yr = n.value.data() + r * C;
        const double* g = gy + r * C;
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += g[c];
        for (std::size_t c = 0; c < C; ++c) a.grad[r * C + c] += g[c] - std::exp(yr[c]) * s;
      }
      break;
    }
    case OpKind::ConcatCols: {
      std::size_t off = 0;
      for (std::size_t p : n.index) {
        Node& a = nodes_[p];
        const std::size_t w = a.shape.cols;
        if (a.requires_grad)
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < w; ++c) a.grad[r * w + c] += gy[r * C + off + c];
        off += w;
      }
      break;
    }
    case OpKind::ConcatRows: {
      std::size_t off = 0;
      for (std::size_t p : n.index) {
        Node& a = nodes_[p];
        if (a.requires_grad)
          for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += gy[off + i];
        off += a.value.size();
      }
      break;
    }
    case OpKind::SliceCols: {
      Node& a = in(0);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) a.grad[r * a.shape.cols + n.begin + c] += gy[r * C + c];
      break;
    }
    case OpKind::GatherRows: {
      Node& a = in(0);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) a.grad[n.index[r] * C + c] += gy[r * C + c];
      break;
    }
    case OpKind::Gather: {
      Node& a = in(0);
      for (std::size_t i = 0; i < n.index.size(); ++i) a.grad[n.index[i]] += gy[i];
      break;
    }
    case OpKind::Leaf:
    case OpKind::Input:
    case OpKind::Constant:
      break;
  }
}

GradReport Tape::report() const {
  if (!backward_done_) throw TapeError("report: no backward pass has been run");
  GradReport rep;
  double sq = 0.0;
  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    const Node& n = nodes_[k];
    if (n.kind != OpKind::Leaf) continue;
    LeafGradient lg{NodeId{static_cast<std::int32_t>(k)}, n.name, n.shape, n.grad};
    for (double g : lg.values) {
      rep.max_abs = std::max(rep.max_abs, std::abs(g));
      sq += g * g;
    }
    rep.leaves.push_back(std::move(lg));
  }
  rep.norm = std::sqrt(sq);
  return rep;
}

std::span<const double> Tape::value(NodeId node) const { return at(node).value; }

double Tape::scalar_value(NodeId node) const {
  const Node& n = at(node);
  if (n.value.size() != 1) throw TapeError("scalar_value: node is not a scalar");
  return n.value[0];
}

std::span<const double> Tape::grad(NodeId node) const { return at(node).grad; }
Shape Tape::shape(NodeId node) const { return at(node).shape; }
OpKind Tape::kind(NodeId node) const { return at(node).kind; }
bool Tape::requires_grad(NodeId node) const { return at(node).requires_grad; }

std::span<const double> Tape::batch_mean(NodeId node) const {
  const Node& n = at(node);
  if (n.kind != OpKind::BatchNorm || n.aux.empty()) throw TapeError("batch_mean: not an evaluated batch_norm");
  const std::size_t C = n.shape.cols;
  return std::span<const double>(n.aux.data() + n.shape.size() + C, C);
}

std::span<const double> Tape::batch_var(NodeId node) const {
  const Node& n = at(node);
  if (n.kind != OpKind::BatchNorm || n.aux.empty()) throw TapeError("batch_var: not an evaluated batch_norm");
  const std::size_t C = n.shape.cols;
  return std::span<const double>(n.aux.data() + n.shape.size() + 2 * C, C);
}

std::vector<NodeId> Tape::leaves() const {
  std::vector<NodeId> out;
  for (std::size_t k = 0; k < nodes_.size(); ++k)
    if (nodes_[k].kind == OpKind::Leaf) out.push_back(NodeId{static_cast<std::int32_t>(k)});
  return out;
}

// ---- gradcheck -------------------------------------------------------------

GradcheckResult gradcheck(const GraphBuilder& builder, std::span<const double> point, Shape shape,
                          const GradcheckOptions& options) {
  if (point.size() != shape.size()) throw InvalidArgument("gradcheck: point size does not match shape");
  Tape tape;
  NodeId x = tape.leaf(shape, "x");
  tape.bind(x, point);
  NodeId out = builder(tape, x);
  tape.forward();
  GradReport rep = tape.backward(out);
  const std::vector<double> g = rep.at(x).values;
  const double gmax = std::accumulate(g.begin(), g.end(), 0.0,
                                      [](double m, double v) { return std::max(m, std::abs(v)); });

  std::vector<std::size_t> coords(point.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (options.coordinates < coords.size()) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.coordinates);
  }

  std::vector<double> p(point.begin(), point.end());
  auto eval_at = [&](std::size_t i, double v) {
    const double saved = p[i];
    p[i] = v;
    tape.bind(x, p);
    tape.forward();
    p[i] = saved;
    return tape.scalar_value(out);
  };

  GradcheckResult res;
  const double floor = std::max(1e-6 * gmax, std::numeric_limits<double>::min());
  for (std::size_t i : coords) {
    const double h = options.step * std::max(1.0, std::abs(p[i]));
    const double fd = (eval_at(i, p[i] + h) - eval_at(i, p[i] - h)) / (2.0 * h);
    const double err = std::abs(g[i] - fd) / std::max({std::abs(g[i]), std::abs(fd), floor});
    if (res.checked == 0 || err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_coordinate = i;
    }
    ++res.checked;
  }
  return res;
}

}  // namespace scatsep::diff
