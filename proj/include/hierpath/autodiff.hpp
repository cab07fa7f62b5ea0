#pragma once

// Tape-based reverse-mode differentiation over hierpath::Tensor.
//
// A Tape owns every intermediate value of one forward pass. Operations are
// free functions taking and returning Var handles; each records a closure
// that pushes its output gradient back to its inputs. Nodes are appended in
// execution order, so the tape is topologically sorted by construction and
// backward() is a single reverse sweep.

#include <cstddef>
#include <functional>
#include <span>
#include <deque>
#include <unordered_map>
#include <vector>

#include "hierpath/tensor.hpp"

namespace hierpath {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var constant(Tensor value);

  /// Leaf bound to an external tensor. Registered once per tensor; repeated
  /// calls return the same node. Tensors with requires_grad() == false are
  /// recorded as constants.
  Var parameter(const Tensor& param);

  /// Records an operation result. `fn` may be empty when no input needs a
  /// gradient.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient buffer of a node, allocated on demand (zero-filled).
  std::vector<double>& grad_buffer(std::size_t id);
  std::span<const double> grad(Var v) const;

  /// Reverse sweep from a scalar node. Clears previous gradients first.
  void backward(Var loss);

  /// Gradient of a bound parameter after backward(); zeros if the parameter
  /// was not reached (or was never placed on the tape).
  std::vector<double> parameter_grad(const Tensor& param) const;

  /// Adds every parameter's gradient into Tensor::mutable_grad().
  void accumulate_into_parameters() const;

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    bool needs_grad = false;
    const Tensor* source = nullptr;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> parameter_nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and reductions

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
/// Sum of all entries, rank-0 result.
Var sum(Var a);
/// Sum of rank-0 terms with per-term weights.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

// ---------------------------------------------------------------------------
// Linear algebra and shape

/// (r×k)·(k×c) or (r×k)·(k) products.
Var matmul(Var a, Var b);
/// w·x + b for a matrix w (r×c), vector x (c) and optional bias (r).
Var linear(Var w, Var x, const Var* bias = nullptr);
/// Concatenation of rank-1 tensors.
Var concat(std::span<const Var> parts);
/// Contiguous sub-range of a rank-1 tensor.
Var slice(Var a, std::size_t offset, std::size_t length);
Var reshape(Var a, Shape shape);
/// Row-major flattening to rank 1.
Var vec(Var a);

// ---------------------------------------------------------------------------
// Softmax family (normalised over the last axis)

Var softmax(Var a);
Var log_softmax(Var a);
/// -log softmax(logits)[target] for a rank-1 logit vector.
Var cross_entropy(Var logits, std::size_t target);
/// -Σ target_i · log softmax(logits)_i for a distribution-valued target.
Var cross_entropy(Var logits, std::span<const double> target);
/// Σ_i mask_i · BCE(sigmoid(logits_i), target_i), computed stably from logits.
/// An empty mask weights every entry by 1.
Var binary_cross_entropy(Var logits, std::span<const double> target,
                         std::span<const double> mask = {});

// ---------------------------------------------------------------------------
// Tensor and image operations (feature maps are D×W×H)

/// t ×_k u with k ∈ {1,2,3}: contracts axis k of a rank-3 tensor with the
/// columns of u.
Var mode_k_product(Var t, Var u, int k);

/// Cross-correlation of a D×W×H map with K×D×F×F filters.
Var conv2d(Var x, Var w, std::size_t stride, std::size_t zero_pad);
/// Adds a per-channel bias (length D) to a D×W×H map.
Var add_channel_bias(Var x, Var bias);

enum class PoolKind { max, avg };

/// Window F, stride G; max routes gradient to the first maximal entry.
Var pool2d(Var x, std::size_t window, std::size_t stride, PoolKind kind);
/// Mean over the spatial axes of a D×W×H map, result length D.
Var global_avg_pool(Var x);

// ---------------------------------------------------------------------------
// Output-shape formulas

std::size_t conv_output_extent(std::size_t in, std::size_t filter, std::size_t stride,
                               std::size_t pad);
std::size_t pool_output_extent(std::size_t in, std::size_t window, std::size_t stride);

// ---------------------------------------------------------------------------
// Finite-difference oracle

/// Central differences (f(x+h·e_i) − f(x−h·e_i)) / 2h for every coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step = 1e-5);

/// max|a−b| / max(max|a|, max|b|, floor); the comparison used by every
/// gradient check in this project.
double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                      double floor = 1e-8);

}  // namespace hierpath
