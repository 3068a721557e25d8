#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "setgen/ndarray.hpp"

namespace setgen {

namespace detail {
struct Node;
}

/// Handle to a value in the reverse-mode differentiation graph. Copies share
/// the underlying node. Leaves own parameters and inputs; every op output
/// records its parents and a backward rule while gradient recording is on
/// and at least one parent requires a gradient.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Array value, bool requires_grad = false);
  static Tensor constant(Array value) { return leaf(std::move(value), false); }
  static Tensor scalar(double value) { return leaf(Array(Shape{}, value), false); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Array& value() const;
  /// Mutable access for in-place parameter updates. Only valid on leaves.
  Array& mutable_value();
  const Shape& shape() const { return value().shape(); }
  Index dim(Index axis) const { return value().dim(axis); }
  Index size() const { return value().size(); }
  double item() const;

  bool requires_grad() const;
  /// Toggles gradient tracking of a leaf (freezing a parameter set).
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  const Array& grad() const;
  void zero_grad();

  /// Sequence number of the producing op or leaf; creation order is a
  /// topological order of the graph.
  std::uint64_t id() const;

  /// Library-internal; exposes the node for op implementations.
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Ordered record of the ops reachable from a scalar loss, in reverse
/// topological order; traversing it visits each op once.
class DiffGraph {
 public:
  static DiffGraph record(const Tensor& loss);
  std::size_t op_count() const noexcept { return nodes_.size(); }
  /// Ids in traversal order (outputs before their inputs).
  std::vector<std::uint64_t> traversal_ids() const;
  /// Runs every backward rule. Leaf gradients accumulate across calls.
  void backward() const;

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Accumulates dLoss/dLeaf into every requires_grad leaf reachable from the
/// scalar loss.
void backward(const Tensor& loss);

// Elementwise arithmetic (identical shapes).
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator*(double s, const Tensor& a);
inline Tensor operator*(const Tensor& a, double s) { return s * a; }
Tensor operator+(const Tensor& a, double s);

Tensor square(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.2);
Tensor sigmoid(const Tensor& x);

/// Sum / mean of all elements as a scalar tensor.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Adds bias[C] along axis 1 of x[B,C,...].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

/// Cross-correlation of input[B,C,s...] with kernel[F,C,3...], zero padding.
Tensor conv_nd(const Tensor& input, const Tensor& kernel, int stride, int padding);
/// Adjoint of conv_nd in its input: input[B,F,s...], kernel[F,C,3...] ->
/// [B,C,dense...] with output padding stride-1.
Tensor conv_transpose_nd(const Tensor& input, const Tensor& kernel, int stride, int padding);

/// Concatenates along axis 1; all other extents must match.
Tensor concat_channels(const std::vector<Tensor>& parts);
/// Channels [start, start+count) of x[B,C,...].
Tensor slice_channels(const Tensor& x, Index start, Index count);

/// Multilinear sample of image[B,C,s...] at map[B,d,s...] (voxel
/// coordinates, border clamped), differentiable in both arguments.
Tensor grid_sample(const Tensor& image, const Tensor& map);

/// Forward difference x[..., i+1, ...] - x[..., i, ...] along a spatial axis
/// (0 = first spatial axis); that axis shrinks by one.
Tensor spatial_diff(const Tensor& x, Index spatial_axis);

}  // namespace setgen
