#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "ahdmil/rng.hpp"
#include "ahdmil/tensor.hpp"

namespace ahdmil::ag {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
};

/// Reverse-mode tape. Nodes are appended in topological order by the op
/// functions below; backward() walks them in reverse.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Trainable leaf. backward() adds the leaf gradient into param.grad().
  Var leaf(Tensor& param);
  Var constant(Tensor value);
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, allocated on first use.
  std::span<double> grad_of(std::size_t id);
  std::span<const double> grad(Var v) const { return nodes_[v.id].grad; }

  void backward(Var output);
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    Tensor* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

/// Records stochastic draws and straight-through offsets on a first pass and
/// replays them on later passes, so a graph containing sampling and
/// binarization becomes a deterministic function that finite differences can
/// probe. In replay mode a straight-through node evaluates to
/// B(x0) - x0 + x with B(x0) and x0 frozen at the recorded point.
class DrawTape {
 public:
  enum class Mode { record, replay };

  Mode mode() const noexcept { return mode_; }
  void start_replay() {
    mode_ = Mode::replay;
    noise_cursor_ = offset_cursor_ = 0;
  }

  /// Per-entry noise from `draw`, recorded or replayed.
  Tensor noise(const Shape& shape, const std::function<double()>& draw);
  /// Returns the frozen offset for the next straight-through node, or stores
  /// `offset` when recording.
  const std::vector<double>& offset(const std::vector<double>& offset);

 private:
  Mode mode_ = Mode::record;
  std::vector<Tensor> noise_;
  std::vector<std::vector<double>> offsets_;
  std::size_t noise_cursor_ = 0;
  std::size_t offset_cursor_ = 0;
};

/// Running statistics of a batchnorm layer.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 1)
      : running_mean({channels}, 0.0), running_var({channels}, 1.0) {}
};

/// Logistic function evaluated without overflow for large |v|.
double stable_sigmoid(double v);

// ---- linear algebra -------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add_row(Var x, Var bias);  // x: n x m, bias: m
Var linear(Var x, Var weight, Var bias);

// ---- elementwise ----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
Var add_scalar(Var x, double c);
Var tanh(Var x);
Var sigmoid(Var x);
Var exp(Var x);
Var log(Var x);
Var relu(Var x);
Var abs(Var x);
Var square(Var x);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var x) { return scale(x, s); }

// ---- reductions and shape -------------------------------------------------

Var sum(Var x);
Var mean(Var x);
Var pick(Var x, std::size_t index);  // scalar view of one entry
Var gather_rows(Var x, std::span<const std::size_t> rows);
Var reshape(Var x, Shape shape);
Var detach(Var x);

// ---- normalisation --------------------------------------------------------

/// Row-wise softmax over the last dimension of a matrix (a vector is one row).
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
/// Row-wise softmax restricted to entries with mask > 0.5, weighted by the
/// mask value: w = exp(x) m / (sum exp(x) m + eps), with the max taken over
/// selected entries. Rows with no selected entry yield all-zero weights and
/// set the corresponding flag in `degenerate` (when non-null).
Var masked_softmax_rows(Var x, Var mask, double eps = 1e-12,
                        std::vector<bool>* degenerate = nullptr);

// ---- selection ------------------------------------------------------------

/// Forward value B(x, gamma) = [x > gamma]; backward passes the upstream
/// gradient through unchanged.
Var straight_through(Var x, double gamma, DrawTape* tape = nullptr);
/// Fraction of rows with at least one nonzero entry, written as
/// mean_j (1 - prod_c (1 - m_jc)) so it stays differentiable through
/// straight-through masks while being exact on binary inputs.
Var union_rate(Var mask);

// ---- convolution ----------------------------------------------------------

struct ConvGeometry {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_out_size(std::size_t in, const ConvGeometry& g);

/// Cross-correlation. x: B x Cin x H x W, weight: Cout x Cin x k x k.
Var conv2d(Var x, Var weight, const ConvGeometry& g);
/// Per-channel cross-correlation. x: B x C x H x W, weight: C x 1 x k x k.
Var depthwise_conv2d(Var x, Var weight, const ConvGeometry& g);
/// Normalises over (B, H, W) per channel. Training mode uses batch
/// statistics and updates `state`; eval mode uses the running statistics.
Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormState& state, bool training);
Var global_avgpool(Var x);

}  // namespace ahdmil::ag
