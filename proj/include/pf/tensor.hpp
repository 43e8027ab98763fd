#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace pf {

class Tape;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major f64 tensor with an optional gradient buffer.
///
/// Tensors are passed around as shared handles (`DiffTensor`).  A tensor is
/// either a *leaf* (created directly; `tape == nullptr`) or *recorded* (the
/// output of a differentiable op on some tape).  Leaves keep their gradient
/// across backward passes and are zeroed explicitly by the caller; recorded
/// tensors use their gradient buffer as scratch that each backward pass
/// re-zeroes before accumulation.
struct Tensor {
  static constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;

  // Autodiff linkage (set by Tape::record; null/defaults for leaves).
  Tape* tape = nullptr;
  std::uint64_t epoch = 0;
  std::size_t node_id = kNoNode;

  std::size_t numel() const { return value.size(); }
  std::size_t rank() const { return shape.size(); }
  bool recorded() const { return tape != nullptr; }

  /// Gradient buffer, allocated and zero-filled on first access.
  std::vector<double>& grad_ref() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }
};

using DiffTensor = std::shared_ptr<Tensor>;

/// Leaf tensor of zeros.
DiffTensor tensor_zeros(std::vector<std::size_t> shape,
                        bool requires_grad = false);

/// Leaf tensor with explicit contents (size must match the shape's numel).
DiffTensor tensor_from(std::vector<std::size_t> shape,
                       std::vector<double> data, bool requires_grad = false);

/// Rank-0 style scalar (shape {1}).
DiffTensor tensor_scalar(double v, bool requires_grad = false);

/// Deep copy of values; the copy is a detached leaf.
DiffTensor clone(const DiffTensor& t, bool requires_grad = false);

/// Same values as `t` but severed from any tape.  Use this to feed a
/// recorded tensor from a finished epoch into new ops as a constant.
DiffTensor detach(const DiffTensor& t);

std::size_t numel_of(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Records the differentiable ops of one forward construction and replays
/// them in reverse to accumulate gradients.
///
/// Usage pattern per optimization step:
///   tape.reset();                 // start a new epoch, drop old nodes
///   auto loss = ops::...(tape, ...);
///   tape.backward(loss);          // leaf grads accumulate
///
/// Multiple `backward` calls against the same epoch are allowed (e.g. to
/// obtain gradients of several scalars sharing one forward pass); leaf
/// gradients accumulate across calls, so callers snapshot and zero them
/// in between.  Feeding a tensor recorded in an older epoch into a new op
/// is an error — `detach` it first.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t epoch() const { return epoch_; }
  std::size_t size() const { return nodes_.size(); }

  /// Drop all recorded nodes and begin a new epoch.  Previously recorded
  /// tensors keep their values but become stale as op inputs.
  void reset();

  /// Register a differentiable op.  `parents` are the op's inputs (only
  /// those participating in gradient flow need listing); `out` is the
  /// freshly created output, which this call stamps with tape/epoch/id.
  /// `backward_fn` must read `out->grad` and *accumulate* into each
  /// parent's `grad_ref()` for parents with `requires_grad`.
  void record(const DiffTensor& out,
              std::vector<DiffTensor> parents,
              std::function<void()> backward_fn);

  /// Reverse sweep from a recorded scalar.  Interior gradients are
  /// re-zeroed here; leaf gradients accumulate.
  void backward(const DiffTensor& root);

  /// Throws if `t` was recorded on another tape or in a stale epoch.
  /// Leaves (never recorded) always pass.
  void check_usable(const Tensor& t, const char* op_name) const;

 private:
  struct Node {
    DiffTensor out;
    std::vector<std::size_t> parent_ids;  // recorded parents only
    std::function<void()> backward_fn;
  };

  std::vector<Node> nodes_;
  std::uint64_t epoch_ = 1;
};

}  // namespace pf
