#pragma once

#include <cstddef>
#include <vector>

#include "pf/tensor.hpp"

namespace pf::ops {

// Differentiable ops.  Every function validates shapes, computes the forward
// value eagerly, and — when any input requires a gradient — records a
// backward closure on the tape.  Ops whose inputs are all constants return a
// detached constant, so graphs stay pruned to what gradient flow needs.

// ---- elementwise ----------------------------------------------------------

DiffTensor add(Tape& tape, const DiffTensor& a, const DiffTensor& b);
DiffTensor sub(Tape& tape, const DiffTensor& a, const DiffTensor& b);
DiffTensor mul(Tape& tape, const DiffTensor& a, const DiffTensor& b);
DiffTensor scale(Tape& tape, const DiffTensor& a, double c);
DiffTensor relu(Tape& tape, const DiffTensor& a);

/// Gaussian error linear unit, exact erf form.
DiffTensor gelu(Tape& tape, const DiffTensor& a);

/// Clamp values into [lo, hi]; gradient passes where the input lies inside
/// the interval (inclusive) and is zero where the clamp is active.
DiffTensor clamp(Tape& tape, const DiffTensor& a, double lo, double hi);

// ---- linear algebra -------------------------------------------------------

/// [m,k] x [k,n] -> [m,n]
DiffTensor matmul(Tape& tape, const DiffTensor& a, const DiffTensor& b);

/// alpha * (a x b^T): a is [m,k], b is [n,k] -> [m,n].  Used for attention
/// scores with alpha = 1/sqrt(head_dim).
DiffTensor matmul_nt(Tape& tape, const DiffTensor& a, const DiffTensor& b,
                     double alpha = 1.0);

/// Broadcast-add a length-D vector to every row of [T,D].
DiffTensor add_rowvec(Tape& tape, const DiffTensor& a, const DiffTensor& bias);

// ---- normalization / activations over rows --------------------------------

/// Softmax over the last dimension.
DiffTensor softmax_rows(Tape& tape, const DiffTensor& a);

/// Layer normalization over the last dimension of [T,D] with affine
/// parameters gamma/beta of length D.  The tiny epsilon keeps normalized
/// rows at unit variance to well below 1e-6 for non-degenerate inputs.
DiffTensor layer_norm(Tape& tape, const DiffTensor& a, const DiffTensor& gamma,
                      const DiffTensor& beta, double eps = 1e-10);

// ---- reductions / losses ---------------------------------------------------

DiffTensor sum_all(Tape& tape, const DiffTensor& a);

/// Weighted sum: dot(a.flat, w).  `w` is a constant, size == a.numel().
DiffTensor sum_weighted(Tape& tape, const DiffTensor& a,
                        const std::vector<double>& w);

/// Numerically stable softmax cross-entropy from logits (any shape, numel ==
/// number of classes) against an integer label.  Returns a scalar.
DiffTensor cross_entropy_logits(Tape& tape, const DiffTensor& logits,
                                std::size_t label);

// ---- data movement ---------------------------------------------------------

/// out.flat[i] = a.flat[idx[i]].  Backward scatter-adds.  Covers patch
/// extraction, layout conversion, transposition and row selection; callers
/// build (and may cache) the index table.
DiffTensor gather(Tape& tape, const DiffTensor& a,
                  const std::vector<std::size_t>& idx,
                  std::vector<std::size_t> out_shape);

/// Same elements, new shape (copying).
DiffTensor reshape(Tape& tape, const DiffTensor& a,
                   std::vector<std::size_t> shape);

/// Vertically stack rank-2 tensors sharing a column count.
DiffTensor concat_rows(Tape& tape, const std::vector<DiffTensor>& parts);

/// Horizontally join rank-2 tensors sharing a row count.
DiffTensor concat_cols(Tape& tape, const std::vector<DiffTensor>& parts);

/// Columns [c0, c0+width) of a rank-2 tensor.
DiffTensor slice_cols(Tape& tape, const DiffTensor& a, std::size_t c0,
                      std::size_t width);

/// Stack equally shaped tensors along a new leading axis.
DiffTensor stack(Tape& tape, const std::vector<DiffTensor>& parts);

// ---- convolutional ---------------------------------------------------------

/// 3x3 convolution, stride 1, zero padding 1.  x is [C,H,W], w is [F,C,3,3],
/// bias is [F]; output [F,H,W].
DiffTensor conv2d(Tape& tape, const DiffTensor& x, const DiffTensor& w,
                  const DiffTensor& bias);

/// 2x2 max pooling with stride 2 on [C,H,W] (H, W even).
DiffTensor maxpool2(Tape& tape, const DiffTensor& x);

// ---- discrete relaxations ---------------------------------------------------

/// Binary mask selecting the k largest entries of `a` (ties broken toward
/// the lower index).  The backward pass is a straight-through estimator:
/// gradients flow to `a` as if the op were the identity.
DiffTensor topk_mask_st(Tape& tape, const DiffTensor& a, std::size_t k);

}  // namespace pf::ops
