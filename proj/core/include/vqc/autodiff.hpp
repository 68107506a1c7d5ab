#pragma once

// Tape-based reverse-mode differentiation over dense double matrices.
//
// Every value is a 2-D array; vectors are 1 x n rows and a batch of vectors
// is a B x n matrix. Nodes are appended to a Tape in execution order, which
// is a topological order, so backward is a single reverse sweep.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "vqc/types.hpp"

namespace vqc::ad {

class Array {
 public:
  Array() = default;
  Array(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Array(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Array scalar(double v) { return Array(1, 1, v); }
  static Array row(std::initializer_list<double> values);
  static Array row(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  bool same_shape(const Array& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double item() const;
  void fill(double v);
  Array& operator+=(const Array& o);

  bool operator==(const Array& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

std::string shape_string(const Array& a);

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Array& value() const;
  const Array& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Records stop-gradient outputs and discrete choices of one forward pass
/// and replays them in a later pass. Replaying freezes everything the
/// backward sweep treats as constant, which turns a straight-through graph
/// into an ordinary smooth function for finite-difference checks.
struct Freeze {
  enum class Mode { off, record, replay };
  Mode mode = Mode::off;
  std::vector<Array> stopped;
  std::vector<std::vector<std::size_t>> choices;
  std::size_t stopped_cursor = 0;
  std::size_t choice_cursor = 0;

  void start_replay() {
    mode = Mode::replay;
    stopped_cursor = 0;
    choice_cursor = 0;
  }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Array& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable leaf; its gradient accumulates across backward calls.
  Var leaf(Array value);
  /// Non-differentiable input.
  Var constant(Array value);

  /// Appends an operation node. `backward` receives the node's output
  /// gradient and must route it to `parents` via accumulate().
  Var record(Array value, std::vector<Var> parents, BackwardFn backward);

  const Array& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of a node, zeros if nothing reached it.
  const Array& grad(Var v);
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  void accumulate(Var v, const Array& g);

  /// Reverse sweep from a 1 x 1 loss. Intermediate gradients are recomputed
  /// on every call; leaf gradients accumulate until zero_grad().
  void backward(Var loss);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }

  void set_freeze(Freeze* freeze) { freeze_ = freeze; }
  Freeze* freeze() const { return freeze_; }
  /// Pass-through for discrete decisions; substitutes recorded values on replay.
  std::vector<std::size_t> choose(std::vector<std::size_t> computed);

 private:
  friend Var stop_gradient(Var a);

  struct Node {
    Array value;
    Array grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  Freeze* freeze_ = nullptr;
};

// Elementwise arithmetic. Shapes must match or one side must be 1 x 1.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var square(Var a);
/// Throws InvalidArgument on negative input.
Var sqrt(Var a);
Var scale(Var a, double s);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }

Var matmul(Var a, Var b);
/// x * W^T + b for x (B x in), W (out x in), b (1 x out).
Var linear(Var x, Var weight, Var bias);
/// x * W^T.
Var linear(Var x, Var weight);
/// Adds a 1 x n row to every row of a B x n matrix.
Var add_row(Var a, Var row);

Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);

/// Sum of all entries, 1 x 1.
Var sum(Var a);
Var mean(Var a);
/// axis 0 collapses rows (-> 1 x n), axis 1 collapses columns (-> B x 1).
Var sum(Var a, int axis);
Var mean(Var a, int axis);

Var concat(std::span<const Var> parts, int axis);
inline Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}
/// Columns [begin, end) of every row (axis 1) or rows [begin, end) (axis 0).
Var slice(Var a, std::size_t begin, std::size_t end, int axis);

/// Identity forward, zero partial derivatives.
Var stop_gradient(Var a);
/// Identity forward, gradient multiplied by `factor` on the way back.
Var scale_grad(Var a, double factor);

/// out[b, :] = source[:, index[b]] for a source whose columns are vectors.
Var gather_columns(Var source, std::span<const std::size_t> index);

/// Unit-modulus normalization of complex pairs. Each row of length 2E holds
/// [real parts | imaginary parts]; pair i is (row[i], row[i + E]). Pairs
/// with magnitude below `floor` become (1, 0) and pass no gradient.
Var normalize_pairs(Var a, double floor = 1e-12);

}  // namespace vqc::ad
