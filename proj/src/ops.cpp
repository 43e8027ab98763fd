#include "pf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

namespace pf::ops {

namespace {

void expect(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

DiffTensor make_out(std::vector<std::size_t> shape,
                    std::initializer_list<const DiffTensor*> parents) {
  bool rg = false;
  for (const auto* p : parents) rg = rg || (*p)->requires_grad;
  return tensor_zeros(std::move(shape), rg);
}

// ---- plain f64 GEMM kernels (accumulating) --------------------------------
// Loop orders chosen so the innermost loop walks contiguous memory in both
// the read and the write stream. The reduction dimension is unrolled by four
// so each pass over a C row performs four fused multiply-adds per load/store
// instead of one; at the matrix sizes this library works at that keeps the
// kernels compute-bound rather than C-traffic-bound.

// C[m,n] += alpha * A[m,k] * B[k,n]
void gemm_nn_acc(const double* A, const double* B, double* C, std::size_t m,
                 std::size_t k, std::size_t n, double alpha = 1.0) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = A + i * k;
    double* c_row = C + i * n;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const double a0 = alpha * a_row[p + 0];
      const double a1 = alpha * a_row[p + 1];
      const double a2 = alpha * a_row[p + 2];
      const double a3 = alpha * a_row[p + 3];
      const double* b0 = B + (p + 0) * n;
      const double* b1 = B + (p + 1) * n;
      const double* b2 = B + (p + 2) * n;
      const double* b3 = B + (p + 3) * n;
      for (std::size_t j = 0; j < n; ++j)
        c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; p < k; ++p) {
      const double a = alpha * a_row[p];
      const double* b_row = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[m,n] += alpha * A[m,k] * B[n,k]^T
void gemm_nt_acc(const double* A, const double* B, double* C, std::size_t m,
                 std::size_t k, std::size_t n, double alpha = 1.0) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = A + i * k;
    double* c_row = C + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = B + (j + 0) * k;
      const double* b1 = B + (j + 1) * k;
      const double* b2 = B + (j + 2) * k;
      const double* b3 = B + (j + 3) * k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double a = a_row[p];
        s0 += a * b0[p];
        s1 += a * b1[p];
        s2 += a * b2[p];
        s3 += a * b3[p];
      }
      c_row[j + 0] += alpha * s0;
      c_row[j + 1] += alpha * s1;
      c_row[j + 2] += alpha * s2;
      c_row[j + 3] += alpha * s3;
    }
    for (; j < n; ++j) {
      const double* b_row = B + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
      c_row[j] += alpha * acc;
    }
  }
}

// C[m,n] += alpha * A[k,m]^T * B[k,n]
void gemm_tn_acc(const double* A, const double* B, double* C, std::size_t m,
                 std::size_t k, std::size_t n, double alpha = 1.0) {
  std::size_t p = 0;
  for (; p + 4 <= k; p += 4) {
    const double* a0 = A + (p + 0) * m;
    const double* a1 = A + (p + 1) * m;
    const double* a2 = A + (p + 2) * m;
    const double* a3 = A + (p + 3) * m;
    const double* b0 = B + (p + 0) * n;
    const double* b1 = B + (p + 1) * n;
    const double* b2 = B + (p + 2) * n;
    const double* b3 = B + (p + 3) * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double x0 = alpha * a0[i];
      const double x1 = alpha * a1[i];
      const double x2 = alpha * a2[i];
      const double x3 = alpha * a3[i];
      double* c_row = C + i * n;
      for (std::size_t j = 0; j < n; ++j)
        c_row[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
    }
  }
  for (; p < k; ++p) {
    const double* a_row = A + p * m;
    const double* b_row = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double a = alpha * a_row[i];
      double* c_row = C + i * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

DiffTensor add(Tape& tape, const DiffTensor& a, const DiffTensor& b) {
  tape.check_usable(*a, "add");
  tape.check_usable(*b, "add");
  expect(same_shape(*a, *b), "add: shape mismatch " + shape_str(a->shape) +
                                 " vs " + shape_str(b->shape));
  auto out = make_out(a->shape, {&a, &b});
  const std::size_t n = a->numel();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] + b->value[i];
  if (out->requires_grad) {
    tape.record(out, {a, b}, [a, b, out] {
      const auto& g = out->grad;
      if (a->requires_grad) {
        auto& ga = a->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b->requires_grad) {
        auto& gb = b->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

DiffTensor sub(Tape& tape, const DiffTensor& a, const DiffTensor& b) {
  tape.check_usable(*a, "sub");
  tape.check_usable(*b, "sub");
  expect(same_shape(*a, *b), "sub: shape mismatch " + shape_str(a->shape) +
                                 " vs " + shape_str(b->shape));
  auto out = make_out(a->shape, {&a, &b});
  const std::size_t n = a->numel();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] - b->value[i];
  if (out->requires_grad) {
    tape.record(out, {a, b}, [a, b, out] {
      const auto& g = out->grad;
      if (a->requires_grad) {
        auto& ga = a->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b->requires_grad) {
        auto& gb = b->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

DiffTensor mul(Tape& tape, const DiffTensor& a, const DiffTensor& b) {
  tape.check_usable(*a, "mul");
  tape.check_usable(*b, "mul");
  expect(same_shape(*a, *b), "mul: shape mismatch " + shape_str(a->shape) +
                                 " vs " + shape_str(b->shape));
  auto out = make_out(a->shape, {&a, &b});
  const std::size_t n = a->numel();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] * b->value[i];
  if (out->requires_grad) {
    tape.record(out, {a, b}, [a, b, out] {
      const auto& g = out->grad;
      if (a->requires_grad) {
        auto& ga = a->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b->value[i];
      }
      if (b->requires_grad) {
        auto& gb = b->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a->value[i];
      }
    });
  }
  return out;
}

DiffTensor scale(Tape& tape, const DiffTensor& a, double c) {
  tape.check_usable(*a, "scale");
  auto out = make_out(a->shape, {&a});
  const std::size_t n = a->numel();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = c * a->value[i];
  if (out->requires_grad) {
    tape.record(out, {a}, [a, out, c] {
      auto& ga = a->grad_ref();
      const auto& g = out->grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
  }
  return out;
}

DiffTensor relu(Tape& tape, const DiffTensor& a) {
  tape.check_usable(*a, "relu");
  auto out = make_out(a->shape, {&a});
  const std::size_t n = a->numel();
  for (std::size_t i = 0; i < n; ++i)
    out->value[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
  if (out->requires_grad) {
    tape.record(out, {a}, [a, out] {
      auto& ga = a->grad_ref();
      const auto& g = out->grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a->value[i] > 0.0) ga[i] += g[i];
    });
  }
  return out;
}

DiffTensor gelu(Tape& tape, const DiffTensor& a) {
  tape.check_usable(*a, "gelu");
  auto out = make_out(a->shape, {&a});
  const std::size_t n = a->numel();
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a->value[i];
    out->value[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  if (out->requires_grad) {
    tape.record(out, {a}, [a, out] {
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      auto& ga = a->grad_ref();
      const auto& g = out->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = a->value[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        ga[i] += g[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

DiffTensor clamp(Tape& tape, const DiffTensor& a, double lo, double hi) {
  tape.check_usable(*a, "clamp");
  expect(lo <= hi, "clamp: lo must not exceed hi");
  auto out = make_out(a->shape, {&a});
  const std::size_t n = a->numel();
  for (std::size_t i = 0; i < n; ++i)
    out->value[i] = std::min(hi, std::max(lo, a->value[i]));
  if (out->requires_grad) {
    tape.record(out, {a}, [a, out, lo, hi] {
      auto& ga = a->grad_ref();
      const auto& g = out->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = a->value[i];
        if (x >= lo && x <= hi) ga[i] += g[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

DiffTensor matmul(Tape& tape, const DiffTensor& a, const DiffTensor& b) {
  tape.check_usable(*a, "matmul");
  tape.check_usable(*b, "matmul");
  expect(a->rank() == 2 && b->rank() == 2,
         "matmul: expects rank-2 operands, got " + shape_str(a->shape) +
             " and " + shape_str(b->shape));
  const std::size_t m = a->shape[0], k = a->shape[1];
  expect(b->shape[0] == k, "matmul: inner dimensions differ, " +
                               shape_str(a->shape) + " x " +
                               shape_str(b->shape));
  const std::size_t n = b->shape[1];
  auto out = make_out({m, n}, {&a, &b});
  gemm_nn_acc(a->value.data(), b->value.data(), out->value.data(), m, k, n);
  if (out->requires_grad) {
    tape.record(out, {a, b}, [a, b, out, m, k, n] {
      const double* g = out->grad.data();
      if (a->requires_grad) {
        // dA += G * B^T
        gemm_nt_acc(g, b->value.data(), a->grad_ref().data(), m, n, k);
      }
      if (b->requires_grad) {
        // dB += A^T * G
        gemm_tn_acc(a->value.data(), g, b->grad_ref().data(), k, m, n);
      }
    });
  }
  return out;
}

DiffTensor matmul_nt(Tape& tape, const DiffTensor& a, const DiffTensor& b,
                     double alpha) {
  tape.check_usable(*a, "matmul_nt");
  tape.check_usable(*b, "matmul_nt");
  expect(a->rank() == 2 && b->rank() == 2,
         "matmul_nt: expects rank-2 operands, got " + shape_str(a->shape) +
             " and " + shape_str(b->shape));
  const std::size_t m = a->shape[0], k = a->shape[1];
  expect(b->shape[1] == k, "matmul_nt: inner dimensions differ, " +
                               shape_str(a->shape) + " x " +
                               shape_str(b->shape) + "^T");
  const std::size_t n = b->shape[0];
  auto out = make_out({m, n}, {&a, &b});
  gemm_nt_acc(a->value.data(), b->value.data(), out->value.data(), m, k, n,
              alpha);
  if (out->requires_grad) {
    tape.record(out, {a, b}, [a, b, out, m, k, n, alpha] {
      const double* g = out->grad.data();
      if (a->requires_grad) {
        // dA += alpha * G * B
        gemm_nn_acc(g, b->value.data(), a->grad_ref().data(), m, n, k, alpha);
      }
      if (b->requires_grad) {
        // dB[n,k] += alpha * G^T[n,m] * A[m,k]
        gemm_tn_acc(g, a->value.data(), b->grad_ref().data(), n, m, k, alpha);
      }
    });
  }
  return out;
}

DiffTensor add_rowvec(Tape& tape, const DiffTensor& a, const DiffTensor& bias) {
  tape.check_usable(*a, "add_rowvec");
  tape.check_usable(*bias, "add_rowvec");
  expect(a->rank() == 2, "add_rowvec: expects a rank-2 left operand");
  const std::size_t rows = a->shape[0], cols = a->shape[1];
  expect(bias->numel() == cols,
         "add_rowvec: bias length " + std::to_string(bias->numel()) +
             " does not match column count " + std::to_string(cols));
  auto out = make_out(a->shape, {&a, &bias});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out->value[r * cols + c] = a->value[r * cols + c] + bias->value[c];
  if (out->requires_grad) {
    tape.record(out, {a, bias}, [a, bias, out, rows, cols] {
      const auto& g = out->grad;
      if (a->requires_grad) {
        auto& ga = a->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bias->requires_grad) {
        auto& gb = bias->grad_ref();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise normalization / softmax
// ---------------------------------------------------------------------------

DiffTensor softmax_rows(Tape& tape, const DiffTensor& a) {
  tape.check_usable(*a, "softmax_rows");
  expect(a->rank() >= 1, "softmax_rows: scalar input");
  const std::size_t cols = a->shape.back();
  const std::size_t rows = a->numel() / cols;
  auto out = make_out(a->shape, {&a});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a->value.data() + r * cols;
    double* y = out->value.data() + r * cols;
    double mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      sum += y[c];
    }
    const double inv = 1.0 / sum;
    for (std::size_t c = 0; c < cols; ++c) y[c] *= inv;
  }
  if (out->requires_grad) {
    tape.record(out, {a}, [a, out, rows, cols] {
      auto& ga = a->grad_ref();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = out->value.data() + r * cols;
        const double* g = out->grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
        double* d = ga.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) d[c] += y[c] * (g[c] - dot);
      }
    });
  }
  return out;
}

DiffTensor layer_norm(Tape& tape, const DiffTensor& a, const DiffTensor& gamma,
                      const DiffTensor& beta, double eps) {
  tape.check_usable(*a, "layer_norm");
  tape.check_usable(*gamma, "layer_norm");
  tape.check_usable(*beta, "layer_norm");
  expect(a->rank() == 2, "layer_norm: expects rank-2 input, got " +
                             shape_str(a->shape));
  const std::size_t rows = a->shape[0], cols = a->shape[1];
  expect(gamma->numel() == cols && beta->numel() == cols,
         "layer_norm: affine parameter length does not match feature dim");
  auto out = make_out(a->shape, {&a, &gamma, &beta});

  // Normalized activations and per-row inverse stddev are needed by the
  // backward pass; keep them alive in the closure.
  auto xhat = std::make_shared<std::vector<double>>(rows * cols);
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a->value.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += x[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = x[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    double* xh = xhat->data() + r * cols;
    double* y = out->value.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      xh[c] = (x[c] - mean) * inv;
      y[c] = gamma->value[c] * xh[c] + beta->value[c];
    }
  }
  if (out->requires_grad) {
    tape.record(out, {a, gamma, beta},
                [a, gamma, beta, out, xhat, inv_std, rows, cols] {
      std::vector<double> dxhat(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* g = out->grad.data() + r * cols;
        const double* xh = xhat->data() + r * cols;
        if (a->requires_grad) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            dxhat[c] = g[c] * gamma->value[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
          }
          m1 /= static_cast<double>(cols);
          m2 /= static_cast<double>(cols);
          const double inv = (*inv_std)[r];
          double* da = a->grad_ref().data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c)
            da[c] += inv * (dxhat[c] - m1 - xh[c] * m2);
        }
        if (gamma->requires_grad) {
          double* dg = gamma->grad_ref().data();
          for (std::size_t c = 0; c < cols; ++c) dg[c] += g[c] * xh[c];
        }
        if (beta->requires_grad) {
          double* db = beta->grad_ref().data();
          for (std::size_t c = 0; c < cols; ++c) db[c] += g[c];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions / losses
// ---------------------------------------------------------------------------

DiffTensor sum_all(Tape& tape, const DiffTensor& a) {
  tape.check_usable(*a, "sum_all");
  auto out = make_out({1}, {&a});
  out->value[0] = std::accumulate(a->value.begin(), a->value.end(), 0.0);
  if (out->requires_grad) {
    tape.record(out, {a}, [a, out] {
      const double g = out->grad[0];
      auto& ga = a->grad_ref();
      for (double& v : ga) v += g;
    });
  }
  return out;
}

DiffTensor sum_weighted(Tape& tape, const DiffTensor& a,
                        const std::vector<double>& w) {
  tape.check_usable(*a, "sum_weighted");
  expect(w.size() == a->numel(),
         "sum_weighted: weight count " + std::to_string(w.size()) +
             " does not match tensor numel " + std::to_string(a->numel()));
  auto out = make_out({1}, {&a});
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += a->value[i] * w[i];
  out->value[0] = acc;
  if (out->requires_grad) {
    auto weights = std::make_shared<std::vector<double>>(w);
    tape.record(out, {a}, [a, out, weights] {
      const double g = out->grad[0];
      auto& ga = a->grad_ref();
      const auto& wv = *weights;
      for (std::size_t i = 0; i < wv.size(); ++i) ga[i] += g * wv[i];
    });
  }
  return out;
}

DiffTensor cross_entropy_logits(Tape& tape, const DiffTensor& logits,
                                std::size_t label) {
  tape.check_usable(*logits, "cross_entropy_logits");
  const std::size_t classes = logits->numel();
  expect(classes >= 2, "cross_entropy_logits: needs at least two classes");
  expect(label < classes,
         "cross_entropy_logits: label " + std::to_string(label) +
             " out of range for " + std::to_string(classes) + " classes");
  auto out = make_out({1}, {&logits});

  const double* z = logits->value.data();
  double mx = z[0];
  for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, z[c]);
  auto probs = std::make_shared<std::vector<double>>(classes);
  double sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    (*probs)[c] = std::exp(z[c] - mx);
    sum += (*probs)[c];
  }
  for (std::size_t c = 0; c < classes; ++c) (*probs)[c] /= sum;
  out->value[0] = std::log(sum) + mx - z[label];

  if (out->requires_grad) {
    tape.record(out, {logits}, [logits, out, probs, label] {
      const double g = out->grad[0];
      auto& gl = logits->grad_ref();
      const auto& p = *probs;
      for (std::size_t c = 0; c < p.size(); ++c) gl[c] += g * p[c];
      gl[label] -= g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data movement
// ---------------------------------------------------------------------------

DiffTensor gather(Tape& tape, const DiffTensor& a,
                  const std::vector<std::size_t>& idx,
                  std::vector<std::size_t> out_shape) {
  tape.check_usable(*a, "gather");
  expect(idx.size() == numel_of(out_shape),
         "gather: index count does not match output shape numel");
  const std::size_t n = a->numel();
  for (std::size_t i : idx)
    expect(i < n, "gather: index " + std::to_string(i) + " out of range");
  auto out = make_out(std::move(out_shape), {&a});
  for (std::size_t i = 0; i < idx.size(); ++i)
    out->value[i] = a->value[idx[i]];
  if (out->requires_grad) {
    auto index = std::make_shared<std::vector<std::size_t>>(idx);
    tape.record(out, {a}, [a, out, index] {
      auto& ga = a->grad_ref();
      const auto& g = out->grad;
      const auto& ix = *index;
      for (std::size_t i = 0; i < ix.size(); ++i) ga[ix[i]] += g[i];
    });
  }
  return out;
}

DiffTensor reshape(Tape& tape, const DiffTensor& a,
                   std::vector<std::size_t> shape) {
  tape.check_usable(*a, "reshape");
  expect(numel_of(shape) == a->numel(),
         "reshape: new shape " + shape_str(shape) + " has wrong numel for " +
             shape_str(a->shape));
  auto out = make_out(std::move(shape), {&a});
  out->value = a->value;
  if (out->requires_grad) {
    tape.record(out, {a}, [a, out] {
      auto& ga = a->grad_ref();
      const auto& g = out->grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

DiffTensor concat_rows(Tape& tape, const std::vector<DiffTensor>& parts) {
  expect(!parts.empty(), "concat_rows: no parts");
  const std::size_t cols = parts[0]->shape.back();
  std::size_t rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    tape.check_usable(*p, "concat_rows");
    expect(p->rank() == 2 && p->shape[1] == cols,
           "concat_rows: parts must be rank-2 with matching column counts");
    rows += p->shape[0];
    rg = rg || p->requires_grad;
  }
  auto out = tensor_zeros({rows, cols}, rg);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->value.begin(), p->value.end(), out->value.begin() + off);
    off += p->numel();
  }
  if (rg) {
    auto parts_copy = parts;
    tape.record(out, parts, [parts_copy, out] {
      std::size_t off = 0;
      for (const auto& p : parts_copy) {
        if (p->requires_grad) {
          auto& gp = p->grad_ref();
          for (std::size_t i = 0; i < gp.size(); ++i)
            gp[i] += out->grad[off + i];
        }
        off += p->numel();
      }
    });
  }
  return out;
}

DiffTensor concat_cols(Tape& tape, const std::vector<DiffTensor>& parts) {
  expect(!parts.empty(), "concat_cols: no parts");
  const std::size_t rows = parts[0]->shape[0];
  std::size_t cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    tape.check_usable(*p, "concat_cols");
    expect(p->rank() == 2 && p->shape[0] == rows,
           "concat_cols: parts must be rank-2 with matching row counts");
    cols += p->shape[1];
    rg = rg || p->requires_grad;
  }
  auto out = tensor_zeros({rows, cols}, rg);
  std::size_t col_off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p->shape[1];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(p->value.begin() + r * w, p->value.begin() + (r + 1) * w,
                out->value.begin() + r * cols + col_off);
    col_off += w;
  }
  if (rg) {
    auto parts_copy = parts;
    tape.record(out, parts, [parts_copy, out, rows, cols] {
      std::size_t col_off = 0;
      for (const auto& p : parts_copy) {
        const std::size_t w = p->shape[1];
        if (p->requires_grad) {
          auto& gp = p->grad_ref();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c)
              gp[r * w + c] += out->grad[r * cols + col_off + c];
        }
        col_off += w;
      }
    });
  }
  return out;
}

DiffTensor slice_cols(Tape& tape, const DiffTensor& a, std::size_t c0,
                      std::size_t width) {
  tape.check_usable(*a, "slice_cols");
  expect(a->rank() == 2, "slice_cols: expects rank-2 input");
  const std::size_t rows = a->shape[0], cols = a->shape[1];
  expect(c0 + width <= cols, "slice_cols: column range [" +
                                 std::to_string(c0) + ", " +
                                 std::to_string(c0 + width) +
                                 ") exceeds width " + std::to_string(cols));
  auto out = make_out({rows, width}, {&a});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(a->value.begin() + r * cols + c0,
              a->value.begin() + r * cols + c0 + width,
              out->value.begin() + r * width);
  if (out->requires_grad) {
    tape.record(out, {a}, [a, out, rows, cols, c0, width] {
      auto& ga = a->grad_ref();
      const auto& g = out->grad;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < width; ++c)
          ga[r * cols + c0 + c] += g[r * width + c];
    });
  }
  return out;
}

DiffTensor stack(Tape& tape, const std::vector<DiffTensor>& parts) {
  expect(!parts.empty(), "stack: no parts");
  const auto& s0 = parts[0]->shape;
  bool rg = false;
  for (const auto& p : parts) {
    tape.check_usable(*p, "stack");
    expect(p->shape == s0, "stack: parts must share a shape");
    rg = rg || p->requires_grad;
  }
  std::vector<std::size_t> shape;
  shape.push_back(parts.size());
  shape.insert(shape.end(), s0.begin(), s0.end());
  auto out = tensor_zeros(std::move(shape), rg);
  const std::size_t chunk = parts[0]->numel();
  for (std::size_t i = 0; i < parts.size(); ++i)
    std::copy(parts[i]->value.begin(), parts[i]->value.end(),
              out->value.begin() + i * chunk);
  if (rg) {
    auto parts_copy = parts;
    tape.record(out, parts, [parts_copy, out, chunk] {
      for (std::size_t i = 0; i < parts_copy.size(); ++i) {
        const auto& p = parts_copy[i];
        if (!p->requires_grad) continue;
        auto& gp = p->grad_ref();
        for (std::size_t j = 0; j < chunk; ++j)
          gp[j] += out->grad[i * chunk + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutional
// ---------------------------------------------------------------------------

DiffTensor conv2d(Tape& tape, const DiffTensor& x, const DiffTensor& w,
                  const DiffTensor& bias) {
  tape.check_usable(*x, "conv2d");
  tape.check_usable(*w, "conv2d");
  tape.check_usable(*bias, "conv2d");
  expect(x->rank() == 3, "conv2d: input must be [C,H,W], got " +
                             shape_str(x->shape));
  expect(w->rank() == 4 && w->shape[2] == 3 && w->shape[3] == 3,
         "conv2d: weights must be [F,C,3,3], got " + shape_str(w->shape));
  const std::size_t C = x->shape[0], H = x->shape[1], W = x->shape[2];
  const std::size_t F = w->shape[0];
  expect(w->shape[1] == C, "conv2d: weight channel count " +
                               std::to_string(w->shape[1]) +
                               " does not match input channels " +
                               std::to_string(C));
  expect(bias->numel() == F, "conv2d: bias length must equal filter count");

  auto out = make_out({F, H, W}, {&x, &w, &bias});
  // Forward: accumulate each (filter, channel, tap) contribution with the
  // inner loop running along contiguous image rows.
  for (std::size_t f = 0; f < F; ++f) {
    double* y_plane = out->value.data() + f * H * W;
    for (std::size_t i = 0; i < H * W; ++i) y_plane[i] = bias->value[f];
    for (std::size_t c = 0; c < C; ++c) {
      const double* x_plane = x->value.data() + c * H * W;
      for (std::size_t u = 0; u < 3; ++u) {
        const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(u) - 1;
        const std::size_t i_lo = di < 0 ? 1 : 0;
        const std::size_t i_hi = di > 0 ? H - 1 : H;
        for (std::size_t v = 0; v < 3; ++v) {
          const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(v) - 1;
          const std::size_t j_lo = dj < 0 ? 1 : 0;
          const std::size_t j_hi = dj > 0 ? W - 1 : W;
          const double wv = w->value[((f * C + c) * 3 + u) * 3 + v];
          for (std::size_t i = i_lo; i < i_hi; ++i) {
            const double* x_row = x_plane + (i + di) * W + dj;
            double* y_row = y_plane + i * W;
            for (std::size_t j = j_lo; j < j_hi; ++j)
              y_row[j] += wv * x_row[j];
          }
        }
      }
    }
  }

  if (out->requires_grad) {
    tape.record(out, {x, w, bias}, [x, w, bias, out, C, H, W, F] {
      const double* G = out->grad.data();
      for (std::size_t f = 0; f < F; ++f) {
        const double* g_plane = G + f * H * W;
        if (bias->requires_grad) {
          double acc = 0.0;
          for (std::size_t i = 0; i < H * W; ++i) acc += g_plane[i];
          bias->grad_ref()[f] += acc;
        }
        for (std::size_t c = 0; c < C; ++c) {
          const double* x_plane = x->value.data() + c * H * W;
          double* dx_plane =
              x->requires_grad ? x->grad_ref().data() + c * H * W : nullptr;
          for (std::size_t u = 0; u < 3; ++u) {
            const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(u) - 1;
            const std::size_t i_lo = di < 0 ? 1 : 0;
            const std::size_t i_hi = di > 0 ? H - 1 : H;
            for (std::size_t v = 0; v < 3; ++v) {
              const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(v) - 1;
              const std::size_t j_lo = dj < 0 ? 1 : 0;
              const std::size_t j_hi = dj > 0 ? W - 1 : W;
              const std::size_t w_idx = ((f * C + c) * 3 + u) * 3 + v;
              const double wv = w->value[w_idx];
              double dw_acc = 0.0;
              for (std::size_t i = i_lo; i < i_hi; ++i) {
                const double* g_row = g_plane + i * W;
                const double* x_row = x_plane + (i + di) * W + dj;
                if (dx_plane) {
                  double* dx_row = dx_plane + (i + di) * W + dj;
                  for (std::size_t j = j_lo; j < j_hi; ++j)
                    dx_row[j] += wv * g_row[j];
                }
                if (w->requires_grad) {
                  for (std::size_t j = j_lo; j < j_hi; ++j)
                    dw_acc += g_row[j] * x_row[j];
                }
              }
              if (w->requires_grad) w->grad_ref()[w_idx] += dw_acc;
            }
          }
        }
      }
    });
  }
  return out;
}

DiffTensor maxpool2(Tape& tape, const DiffTensor& x) {
  tape.check_usable(*x, "maxpool2");
  expect(x->rank() == 3, "maxpool2: input must be [C,H,W]");
  const std::size_t C = x->shape[0], H = x->shape[1], W = x->shape[2];
  expect(H % 2 == 0 && W % 2 == 0,
         "maxpool2: spatial dimensions must be even, got " +
             shape_str(x->shape));
  const std::size_t Ho = H / 2, Wo = W / 2;
  auto out = make_out({C, Ho, Wo}, {&x});
  auto argmax = std::make_shared<std::vector<std::size_t>>(C * Ho * Wo);
  for (std::size_t c = 0; c < C; ++c) {
    const double* xp = x->value.data() + c * H * W;
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        std::size_t best = (2 * i) * W + 2 * j;
        const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (std::size_t k = 0; k < 3; ++k)
          if (xp[cand[k]] > xp[best]) best = cand[k];
        const std::size_t o = (c * Ho + i) * Wo + j;
        out->value[o] = xp[best];
        (*argmax)[o] = c * H * W + best;
      }
    }
  }
  if (out->requires_grad) {
    tape.record(out, {x}, [x, out, argmax] {
      auto& gx = x->grad_ref();
      const auto& g = out->grad;
      const auto& am = *argmax;
      for (std::size_t i = 0; i < am.size(); ++i) gx[am[i]] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Discrete relaxations
// ---------------------------------------------------------------------------

DiffTensor topk_mask_st(Tape& tape, const DiffTensor& a, std::size_t k) {
  tape.check_usable(*a, "topk_mask_st");
  const std::size_t n = a->numel();
  auto out = make_out(a->shape, {&a});
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    if (a->value[i] != a->value[j]) return a->value[i] > a->value[j];
    return i < j;  // deterministic tie-break toward lower index
  });
  const std::size_t keep = std::min(k, n);
  for (std::size_t i = 0; i < keep; ++i) out->value[order[i]] = 1.0;
  if (out->requires_grad) {
    tape.record(out, {a}, [a, out] {
      // Straight-through: the binarization is treated as identity.
      auto& ga = a->grad_ref();
      const auto& g = out->grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

}  // namespace pf::ops
