#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

// Reverse-mode differentiation over 2-D real arrays.
//
// A Tape records a static graph once; it can then be replayed any number of
// times with fresh leaf/input bindings. Complex arrays are stored as
// interleaved (re, im) pairs along the column axis, so a row of n complex
// samples has 2n columns. All arithmetic is real; gradients are taken with
// respect to the real and imaginary parts independently.
namespace scatsep::diff {

struct Shape {
  std::size_t rows = 1;
  std::size_t cols = 1;

  std::size_t size() const noexcept { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

struct NodeId {
  std::int32_t index = -1;

  bool valid() const noexcept { return index >= 0; }
  bool operator==(const NodeId&) const = default;
};

/// Reduction direction. `Rows` collapses the row axis (result 1 x cols),
/// `Cols` collapses the column axis (result rows x 1).
enum class Axis { Rows, Cols };

enum class OpKind : std::uint8_t {
  Leaf,
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  SafeDiv,
  ScaleShift,
  Square,
  Sqrt,
  Exp,
  Log,
  Clamp,
  LeakyRelu,
  Dft,
  DftReal,
  Idft,
  CMul,
  Modulus,
  Mean,
  Sum,
  SumAll,
  ComplexMean,
  CInner,
  Affine,
  BatchNorm,
  Softmax,
  LogSoftmax,
  ConcatCols,
  ConcatRows,
  SliceCols,
  GatherRows,
  Gather,
};

std::string to_string(OpKind kind);

/// Cotangent seed for `Tape::backward`.
struct Seed {
  NodeId node;
  std::span<const double> cotangent;
};

struct LeafGradient {
  NodeId node;
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct GradReport {
  std::vector<LeafGradient> leaves;
  double max_abs = 0.0;
  double norm = 0.0;

  const LeafGradient& at(NodeId node) const;
};

/// Epsilon added to |z| in the backward pass of the modulus.
inline constexpr double kModulusGradEps = 1e-12;

class Tape {
 public:
  // ---- graph construction -------------------------------------------------
  /// Differentiable leaf, bound before each forward pass.
  NodeId leaf(Shape shape, std::string name = {});
  /// Non-differentiable bindable input (data, frozen noise, running stats).
  NodeId input(Shape shape, std::string name = {});
  NodeId constant(Shape shape, std::vector<double> values);
  NodeId scalar(double value) { return constant({1, 1}, {value}); }

  // Elementwise binary ops broadcast numpy-style over 2-D shapes: each
  // dimension must match or be 1.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  /// a / b, and exactly 0 wherever b < eps (gradient 0 there as well).
  NodeId safe_div(NodeId a, NodeId b, double eps);

  /// factor * a + offset.
  NodeId scale(NodeId a, double factor, double offset = 0.0);
  NodeId neg(NodeId a) { return scale(a, -1.0); }
  NodeId square(NodeId a);
  NodeId sqrt(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId clamp(NodeId a, double lo, double hi);
  NodeId leaky_relu(NodeId a, double slope);

  /// Row-wise complex DFT (unnormalized); input and output are interleaved.
  NodeId dft(NodeId a);
  /// Row-wise DFT of real rows (rows x n) into interleaved spectra (rows x 2n).
  NodeId dft_real(NodeId a);
  /// Row-wise inverse DFT including the 1/n factor.
  NodeId idft(NodeId a);
  /// Complex elementwise product a * b (or a * conj(b)); rows broadcast.
  NodeId cmul(NodeId a, NodeId b, bool conjugate_b = false);
  /// |z| of interleaved complex rows (rows x 2n -> rows x n). Exact in the
  /// forward pass; backward uses z / (|z| + kModulusGradEps).
  NodeId modulus(NodeId a);
  /// Mean of the complex samples of every row (rows x 2n -> rows x 2).
  NodeId complex_mean(NodeId a);
  /// Row-wise mean of a * conj(b) (rows x 2); rows broadcast. Same value as
  /// complex_mean(cmul(a, b, true)) without the elementwise product node.
  NodeId cinner(NodeId a, NodeId b);

  NodeId mean(NodeId a, Axis axis);
  NodeId sum(NodeId a, Axis axis);
  NodeId sum_all(NodeId a);

  /// x (B x in), weight (out x in), bias (1 x out) -> x weight^T + bias.
  NodeId affine(NodeId x, NodeId weight, NodeId bias);
  /// Per-column batch normalization of x (B x d). gamma/beta are (1 x d);
  /// running statistics are (1 x d) non-differentiable inputs used in eval
  /// mode. In training mode the biased batch statistics are exposed through
  /// `batch_mean` / `batch_var` after forward.
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean, NodeId running_var,
                    bool training, double eps = 1e-5);
  NodeId softmax(NodeId a);
  NodeId log_softmax(NodeId a);

  NodeId concat_cols(std::span<const NodeId> parts);
  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId slice_cols(NodeId a, std::size_t begin, std::size_t count);
  NodeId gather_rows(NodeId a, std::vector<std::size_t> rows);
  /// out.flat[i] = a.flat[indices[i]], reshaped to `shape`.
  NodeId gather(NodeId a, std::vector<std::size_t> indices, Shape shape);

  // ---- execution ----------------------------------------------------------
  void bind(NodeId node, std::span<const double> values);
  void forward();
  /// Backward from a scalar output with unit seed.
  GradReport backward(NodeId output);
  /// Backward from arbitrary cotangent seeds; does not build a report.
  void backward(std::span<const Seed> seeds);
  GradReport report() const;

  std::span<const double> value(NodeId node) const;
  double scalar_value(NodeId node) const;
  /// Gradient buffer of a node after backward (empty if it needs no grad).
  std::span<const double> grad(NodeId node) const;
  Shape shape(NodeId node) const;
  OpKind kind(NodeId node) const;
  bool requires_grad(NodeId node) const;
  std::span<const double> batch_mean(NodeId batch_norm_node) const;
  std::span<const double> batch_var(NodeId batch_norm_node) const;

  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::vector<NodeId> leaves() const;
  bool forward_done() const noexcept { return forward_done_; }

 private:
  struct Node {
    OpKind kind = OpKind::Constant;
    Shape shape;
    std::int32_t in[5] = {-1, -1, -1, -1, -1};
    double p0 = 0.0;
    double p1 = 0.0;
    bool flag = false;
    bool requires_grad = false;
    bool bound = false;
    std::size_t begin = 0;
    std::vector<std::size_t> index;
    std::string name;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<double> aux;
  };

  NodeId push(Node node);
  const Node& at(NodeId id) const;
  Node& at(NodeId id);
  NodeId binary(OpKind kind, NodeId a, NodeId b, double eps = 0.0);
  NodeId unary(OpKind kind, NodeId a, double p0 = 0.0, double p1 = 0.0);
  void eval(Node& node);
  void propagate(Node& node);

  std::vector<Node> nodes_;
  bool forward_done_ = false;
  bool backward_done_ = false;
};

struct GradcheckOptions {
  double step = 1e-4;
  std::size_t coordinates = 20;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  std::size_t checked = 0;
};

/// Records a graph on `tape` with `point` as its differentiable leaf and
/// returns the scalar output. The builder binds any other inputs it creates.
using GraphBuilder = std::function<NodeId(Tape& tape, NodeId point)>;

/// Compare tape gradients with central differences on a random subset of
/// coordinates. The relative error of a coordinate is
/// |g - fd| / max(|g|, |fd|, 1e-6 * max|g|).
GradcheckResult gradcheck(const GraphBuilder& builder, std::span<const double> point, Shape shape,
                          const GradcheckOptions& options = {});

}  // namespace scatsep::diff
