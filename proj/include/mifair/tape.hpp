#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "mifair/tensor.hpp"

namespace mifair {

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatmul,
  kMatmulNT,
  kAdd,
  kMul,
  kScale,
  kSoftmax,
  kLog,
  kMean,
  kSum,
  kGelu,
  kRelu,
  kEmbedding,
  kLayerNorm,
  kConcat,
  kSlice,
  kReshape,
  kGather,
  kStopGradient,
};

std::string_view op_name(OpKind op);

// Gradients produced by one backward traversal, indexed by Var.
class Gradients {
 public:
  Gradients() = default;
  Gradients(std::vector<Tensor> grads, std::vector<Shape> shapes);

  // Zeros of matching shape when the Var is unreachable from the root.
  Tensor of(Var v) const;
  bool reached(Var v) const;

 private:
  std::vector<Tensor> grads_;
  std::vector<Shape> shapes_;
};

// Ordered record of primitive applications. Entries are appended in
// evaluation order, so a reverse sweep is a valid topological traversal.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_out, const Tensor& out, Tape& tape)>;

  explicit Tape(bool track_gradients = true) : track_(track_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that receives a gradient.
  Var leaf(Tensor value);
  // Leaf that never receives a gradient (frozen weights, data).
  Var constant(Tensor value);

  bool tracking() const { return track_; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  OpKind op(Var v) const { return nodes_[v.id].op; }

  std::size_t size() const { return nodes_.size(); }
  // Number of non-leaf entries.
  std::size_t op_count() const { return op_count_; }

  Gradients backward(Var root);
  // Entries visited by the most recent backward sweep.
  std::size_t last_backward_visits() const { return last_visits_; }

  // Used by primitives. `fn` may be empty when no input needs a gradient.
  Var record(OpKind op, Tensor value, std::span<const Var> inputs, BackwardFn fn);
  // Gradient accumulator for an input during backward; null when the input
  // does not require a gradient.
  Tensor* grad_slot(Var v);

 private:
  struct Node {
    Tensor value;
    OpKind op = OpKind::kLeaf;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool track_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::size_t op_count_ = 0;
  std::size_t last_visits_ = 0;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

// Primitive set. Every op checks shapes and throws ShapeError naming the op
// and the offending shapes.
Var matmul(Var a, Var b);     // (m x k)(k x n)
Var matmul_nt(Var a, Var b);  // (m x k)(n x k)^T
// Elementwise sum; b may also be a 1 x n row broadcast over the rows of a.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise, equal shapes
Var scale(Var a, double s);
Var softmax_rows(Var a);
// Natural log with the input clamped to >= kLogFloor; zero gradient below it.
Var log(Var a);
Var mean(Var a);
Var sum(Var a);
Var gelu(Var a);
Var relu(Var a);
Var embedding(Var table, std::span<const std::size_t> ids);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var reshape(Var a, Shape shape);
// Picks entries by flat index into a 1 x k row.
Var gather(Var a, std::span<const std::size_t> flat_indices);
Var stop_gradient(Var a);

inline constexpr double kLogFloor = 1e-12;

}  // namespace mifair
