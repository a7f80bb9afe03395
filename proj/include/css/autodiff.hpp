#pragma once

// Reverse-mode autodiff on a tape of backward closures.
//
// Every op takes an optional Tape*.  With a tape, the op records a closure
// that adds into input->grad buffers; gradients therefore accumulate across
// multiple uses of a tensor and across chunks of a micro-batch.  With a null
// tape the op is a plain forward computation.  The tape is single-threaded
// and the closure order is fixed by construction order, so repeated runs on
// the same inputs produce bit-identical gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "css/tensor.hpp"

namespace css {

template <class Real>
class Tape {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  // Runs closures newest-first.  Called through backward() below.
  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

namespace detail {

template <class Real>
bool wants_grad(Tape<Real>* tape, std::initializer_list<const Var<Real>*> in) {
  if (!tape) return false;
  for (const auto* v : in)
    if ((*v)->requires_grad) return true;
  return false;
}

template <class Real>
Real stable_sigmoid(Real x) {
  if (x >= Real(0)) {
    const Real e = std::exp(-x);
    return Real(1) / (Real(1) + e);
  }
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

}  // namespace detail

// Seeds d(loss)/d(loss) = 1 and runs the tape.  `loss` must be scalar and
// must have been produced by ops recorded on this tape.
template <class Real>
void backward(Tape<Real>& tape, const Var<Real>& loss) {
  if (loss->numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_to_string(loss->shape));
  if (!loss->requires_grad)
    throw ContractError(
        "backward: loss does not depend on any tensor that requires grad");
  loss->grad[0] += Real(1);
  tape.run_backward();
}

// ============================================================================
// Elementwise ops
// ============================================================================

template <class Real>
Var<Real> add(Tape<Real>* tape, const Var<Real>& a, const Var<Real>& b) {
  if (!same_shape(*a, *b))
    throw ShapeError("add: shape mismatch " + shape_to_string(a->shape) +
                     " vs " + shape_to_string(b->shape));
  auto out = tensor_zeros<Real>(a->shape);
  const int64_t n = out->numel();
  for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
  if (detail::wants_grad(tape, {&a, &b})) {
    out->set_requires_grad(true);
    tape->record([a, b, out] {
      const int64_t n = out->numel();
      if (a->requires_grad)
        for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i];
    });
  }
  return out;
}

template <class Real>
Var<Real> sub(Tape<Real>* tape, const Var<Real>& a, const Var<Real>& b) {
  if (!same_shape(*a, *b))
    throw ShapeError("sub: shape mismatch " + shape_to_string(a->shape) +
                     " vs " + shape_to_string(b->shape));
  auto out = tensor_zeros<Real>(a->shape);
  const int64_t n = out->numel();
  for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] - b->data[i];
  if (detail::wants_grad(tape, {&a, &b})) {
    out->set_requires_grad(true);
    tape->record([a, b, out] {
      const int64_t n = out->numel();
      if (a->requires_grad)
        for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (int64_t i = 0; i < n; ++i) b->grad[i] -= out->grad[i];
    });
  }
  return out;
}

template <class Real>
Var<Real> mul(Tape<Real>* tape, const Var<Real>& a, const Var<Real>& b) {
  if (!same_shape(*a, *b))
    throw ShapeError("mul: shape mismatch " + shape_to_string(a->shape) +
                     " vs " + shape_to_string(b->shape));
  auto out = tensor_zeros<Real>(a->shape);
  const int64_t n = out->numel();
  for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
  if (detail::wants_grad(tape, {&a, &b})) {
    out->set_requires_grad(true);
    tape->record([a, b, out] {
      const int64_t n = out->numel();
      if (a->requires_grad)
        for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->data[i];
      if (b->requires_grad)
        for (int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i] * a->data[i];
    });
  }
  return out;
}

template <class Real>
Var<Real> scale(Tape<Real>* tape, const Var<Real>& a, Real c) {
  auto out = tensor_zeros<Real>(a->shape);
  const int64_t n = out->numel();
  for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * c;
  if (detail::wants_grad(tape, {&a})) {
    out->set_requires_grad(true);
    tape->record([a, out, c] {
      const int64_t n = out->numel();
      for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * c;
    });
  }
  return out;
}

// Broadcast add of a rank-1 bias over the last dimension.
template <class Real>
Var<Real> add_bias(Tape<Real>* tape, const Var<Real>& x, const Var<Real>& b) {
  if (b->rank() != 1 || b->last_dim() != x->last_dim())
    throw ShapeError("add_bias: bias " + shape_to_string(b->shape) +
                     " does not match input " + shape_to_string(x->shape));
  auto out = tensor_zeros<Real>(x->shape);
  const int64_t d = x->last_dim();
  const int64_t slices = x->numel() / d;
  for (int64_t s = 0; s < slices; ++s)
    for (int64_t j = 0; j < d; ++j)
      out->data[s * d + j] = x->data[s * d + j] + b->data[j];
  if (detail::wants_grad(tape, {&x, &b})) {
    out->set_requires_grad(true);
    tape->record([x, b, out, d, slices] {
      if (x->requires_grad) {
        const int64_t n = out->numel();
        for (int64_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        for (int64_t s = 0; s < slices; ++s)
          for (int64_t j = 0; j < d; ++j) b->grad[j] += out->grad[s * d + j];
      }
    });
  }
  return out;
}

template <class Real>
Var<Real> sigmoid(Tape<Real>* tape, const Var<Real>& x) {
  auto out = tensor_zeros<Real>(x->shape);
  const int64_t n = out->numel();
  for (int64_t i = 0; i < n; ++i)
    out->data[i] = detail::stable_sigmoid(x->data[i]);
  if (detail::wants_grad(tape, {&x})) {
    out->set_requires_grad(true);
    tape->record([x, out] {
      const int64_t n = out->numel();
      for (int64_t i = 0; i < n; ++i) {
        const Real y = out->data[i];
        x->grad[i] += out->grad[i] * y * (Real(1) - y);
      }
    });
  }
  return out;
}

// swish(x) = x * sigmoid(x)
template <class Real>
Var<Real> swish(Tape<Real>* tape, const Var<Real>& x) {
  auto out = tensor_zeros<Real>(x->shape);
  const int64_t n = out->numel();
  for (int64_t i = 0; i < n; ++i) {
    const Real s = detail::stable_sigmoid(x->data[i]);
    out->data[i] = x->data[i] * s;
  }
  if (detail::wants_grad(tape, {&x})) {
    out->set_requires_grad(true);
    tape->record([x, out] {
      const int64_t n = out->numel();
      for (int64_t i = 0; i < n; ++i) {
        const Real s = detail::stable_sigmoid(x->data[i]);
        x->grad[i] += out->grad[i] * (s + x->data[i] * s * (Real(1) - s));
      }
    });
  }
  return out;
}

// Gated linear unit over the last dimension: the first half is the value
// path, the second half is the gate.  glu([a; b]) = a * sigmoid(b).
template <class Real>
Var<Real> glu(Tape<Real>* tape, const Var<Real>& x) {
  const int64_t d = x->last_dim();
  if (d % 2 != 0)
    throw ShapeError("glu: last extent must be even, got " +
                     shape_to_string(x->shape));
  const int64_t h = d / 2;
  auto shape = x->shape;
  shape.back() = h;
  auto out = tensor_zeros<Real>(shape);
  const int64_t slices = x->numel() / d;
  for (int64_t s = 0; s < slices; ++s) {
    const Real* a = &x->data[s * d];
    const Real* g = a + h;
    Real* y = &out->data[s * h];
    for (int64_t j = 0; j < h; ++j)
      y[j] = a[j] * detail::stable_sigmoid(g[j]);
  }
  if (detail::wants_grad(tape, {&x})) {
    out->set_requires_grad(true);
    tape->record([x, out, d, h, slices] {
      for (int64_t s = 0; s < slices; ++s) {
        const Real* a = &x->data[s * d];
        const Real* g = a + h;
        Real* da = &x->grad[s * d];
        Real* dg = da + h;
        const Real* dy = &out->grad[s * h];
        for (int64_t j = 0; j < h; ++j) {
          const Real sg = detail::stable_sigmoid(g[j]);
          da[j] += dy[j] * sg;
          dg[j] += dy[j] * a[j] * sg * (Real(1) - sg);
        }
      }
    });
  }
  return out;
}

// ============================================================================
// matmul
// ============================================================================

template <class Real>
Var<Real> matmul(Tape<Real>* tape, const Var<Real>& a, const Var<Real>& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->cols() != b->rows())
    throw ShapeError("matmul: incompatible shapes " +
                     shape_to_string(a->shape) + " x " +
                     shape_to_string(b->shape));
  const int64_t m = a->rows(), k = a->cols(), n = b->cols();
  auto out = tensor_zeros<Real>({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const Real* arow = &a->data[i * k];
    Real* crow = &out->data[i * n];
    for (int64_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real* brow = &b->data[p * n];
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  if (detail::wants_grad(tape, {&a, &b})) {
    out->set_requires_grad(true);
    tape->record([a, b, out, m, k, n] {
      if (a->requires_grad) {
        // dA = dC * B^T
        for (int64_t i = 0; i < m; ++i) {
          const Real* dcrow = &out->grad[i * n];
          Real* darow = &a->grad[i * k];
          for (int64_t p = 0; p < k; ++p) {
            const Real* brow = &b->data[p * n];
            Real s = 0;
            for (int64_t j = 0; j < n; ++j) s += dcrow[j] * brow[j];
            darow[p] += s;
          }
        }
      }
      if (b->requires_grad) {
        // dB = A^T * dC
        for (int64_t i = 0; i < m; ++i) {
          const Real* arow = &a->data[i * k];
          const Real* dcrow = &out->grad[i * n];
          for (int64_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            Real* dbrow = &b->grad[p * n];
            for (int64_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
          }
        }
      }
    });
  }
  return out;
}

// ============================================================================
// Normalizations
// ============================================================================

template <class Real>
Var<Real> layernorm(Tape<Real>* tape, const Var<Real>& x, const Var<Real>& gain,
                    const Var<Real>& bias, Real eps = Real(1e-5)) {
  const int64_t d = x->last_dim();
  if (gain->rank() != 1 || gain->last_dim() != d || bias->rank() != 1 ||
      bias->last_dim() != d)
    throw ShapeError("layernorm: gain/bias must be [" + std::to_string(d) +
                     "], got " + shape_to_string(gain->shape) + " and " +
                     shape_to_string(bias->shape));
  const int64_t slices = x->numel() / d;
  auto out = tensor_zeros<Real>(x->shape);
  std::vector<Real> mean(slices), rstd(slices);
  for (int64_t s = 0; s < slices; ++s) {
    const Real* xs = &x->data[s * d];
    Real mu = 0;
    for (int64_t j = 0; j < d; ++j) mu += xs[j];
    mu /= Real(d);
    Real var = 0;
    for (int64_t j = 0; j < d; ++j) {
      const Real c = xs[j] - mu;
      var += c * c;
    }
    var /= Real(d);
    const Real r = Real(1) / std::sqrt(var + eps);
    mean[s] = mu;
    rstd[s] = r;
    Real* ys = &out->data[s * d];
    for (int64_t j = 0; j < d; ++j)
      ys[j] = gain->data[j] * (xs[j] - mu) * r + bias->data[j];
  }
  if (detail::wants_grad(tape, {&x, &gain, &bias})) {
    out->set_requires_grad(true);
    tape->record([x, gain, bias, out, d, slices, mean = std::move(mean),
                  rstd = std::move(rstd)] {
      std::vector<Real> dxhat(static_cast<size_t>(d));
      for (int64_t s = 0; s < slices; ++s) {
        const Real* xs = &x->data[s * d];
        const Real* dy = &out->grad[s * d];
        const Real mu = mean[static_cast<size_t>(s)];
        const Real r = rstd[static_cast<size_t>(s)];
        Real sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int64_t j = 0; j < d; ++j) {
          const Real xhat = (xs[j] - mu) * r;
          const Real dxh = dy[j] * gain->data[j];
          dxhat[static_cast<size_t>(j)] = dxh;
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xhat;
          if (gain->requires_grad) gain->grad[j] += dy[j] * xhat;
          if (bias->requires_grad) bias->grad[j] += dy[j];
        }
        if (x->requires_grad) {
          Real* dx = &x->grad[s * d];
          for (int64_t j = 0; j < d; ++j) {
            const Real xhat = (xs[j] - mu) * r;
            dx[j] += r * (dxhat[static_cast<size_t>(j)] -
                          (sum_dxhat + xhat * sum_dxhat_xhat) / Real(d));
          }
        }
      }
    });
  }
  return out;
}

// Batchnorm over the time (first) axis of a [T x D] tensor.  In training
// mode the batch statistics normalize and the running buffers are updated in
// place with `momentum`; in eval mode the running buffers normalize.  The
// running buffers never receive gradients.  Variance is the biased estimate.
template <class Real>
Var<Real> batchnorm_time(Tape<Real>* tape, const Var<Real>& x,
                         const Var<Real>& gamma, const Var<Real>& beta,
                         const Var<Real>& run_mean, const Var<Real>& run_var,
                         bool training, Real momentum = Real(0.99),
                         Real eps = Real(1e-5)) {
  if (x->rank() != 2)
    throw ShapeError("batchnorm_time: input must be [T x D], got " +
                     shape_to_string(x->shape));
  const int64_t t_len = x->rows(), d = x->cols();
  auto check1d = [d](const Var<Real>& v, const char* name) {
    if (v->rank() != 1 || v->last_dim() != d)
      throw ShapeError(std::string("batchnorm_time: ") + name + " must be [" +
                       std::to_string(d) + "], got " +
                       shape_to_string(v->shape));
  };
  check1d(gamma, "gamma");
  check1d(beta, "beta");
  check1d(run_mean, "running mean");
  check1d(run_var, "running var");

  auto out = tensor_zeros<Real>(x->shape);
  std::vector<Real> mean(static_cast<size_t>(d)), rstd(static_cast<size_t>(d));
  if (training) {
    for (int64_t j = 0; j < d; ++j) {
      Real mu = 0;
      for (int64_t t = 0; t < t_len; ++t) mu += x->data[t * d + j];
      mu /= Real(t_len);
      Real var = 0;
      for (int64_t t = 0; t < t_len; ++t) {
        const Real c = x->data[t * d + j] - mu;
        var += c * c;
      }
      var /= Real(t_len);
      mean[static_cast<size_t>(j)] = mu;
      rstd[static_cast<size_t>(j)] = Real(1) / std::sqrt(var + eps);
      run_mean->data[j] = momentum * run_mean->data[j] + (Real(1) - momentum) * mu;
      run_var->data[j] = momentum * run_var->data[j] + (Real(1) - momentum) * var;
    }
  } else {
    for (int64_t j = 0; j < d; ++j) {
      mean[static_cast<size_t>(j)] = run_mean->data[j];
      rstd[static_cast<size_t>(j)] =
          Real(1) / std::sqrt(run_var->data[j] + eps);
    }
  }
  for (int64_t t = 0; t < t_len; ++t)
    for (int64_t j = 0; j < d; ++j) {
      const Real xhat =
          (x->data[t * d + j] - mean[static_cast<size_t>(j)]) *
          rstd[static_cast<size_t>(j)];
      out->data[t * d + j] = gamma->data[j] * xhat + beta->data[j];
    }

  if (detail::wants_grad(tape, {&x, &gamma, &beta})) {
    out->set_requires_grad(true);
    tape->record([x, gamma, beta, out, t_len, d, training,
                  mean = std::move(mean), rstd = std::move(rstd)] {
      for (int64_t j = 0; j < d; ++j) {
        const Real mu = mean[static_cast<size_t>(j)];
        const Real r = rstd[static_cast<size_t>(j)];
        Real sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int64_t t = 0; t < t_len; ++t) {
          const Real xhat = (x->data[t * d + j] - mu) * r;
          const Real dxh = out->grad[t * d + j] * gamma->data[j];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xhat;
          if (gamma->requires_grad)
            gamma->grad[j] += out->grad[t * d + j] * xhat;
          if (beta->requires_grad) beta->grad[j] += out->grad[t * d + j];
        }
        if (x->requires_grad) {
          for (int64_t t = 0; t < t_len; ++t) {
            const Real xhat = (x->data[t * d + j] - mu) * r;
            const Real dxh = out->grad[t * d + j] * gamma->data[j];
            if (training) {
              x->grad[t * d + j] +=
                  r * (dxh - (sum_dxhat + xhat * sum_dxhat_xhat) / Real(t_len));
            } else {
              // Running stats are constants, so the map is affine.
              x->grad[t * d + j] += dxh * r;
            }
          }
        }
      }
    });
  }
  return out;
}

// ============================================================================
// softmax
// ============================================================================

template <class Real>
Var<Real> softmax_lastdim(Tape<Real>* tape, const Var<Real>& x) {
  const int64_t d = x->last_dim();
  const int64_t slices = x->numel() / d;
  auto out = tensor_zeros<Real>(x->shape);
  for (int64_t s = 0; s < slices; ++s) {
    const Real* xs = &x->data[s * d];
    Real* ys = &out->data[s * d];
    Real mx = xs[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xs[j]);
    Real denom = 0;
    for (int64_t j = 0; j < d; ++j) {
      ys[j] = std::exp(xs[j] - mx);
      denom += ys[j];
    }
    for (int64_t j = 0; j < d; ++j) ys[j] /= denom;
  }
  if (detail::wants_grad(tape, {&x})) {
    out->set_requires_grad(true);
    tape->record([x, out, d, slices] {
      for (int64_t s = 0; s < slices; ++s) {
        const Real* y = &out->data[s * d];
        const Real* dy = &out->grad[s * d];
        Real dot = 0;
        for (int64_t j = 0; j < d; ++j) dot += dy[j] * y[j];
        Real* dx = &x->grad[s * d];
        for (int64_t j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

// ============================================================================
// Depthwise 1-D convolution
// ============================================================================

// x: [T x D], kernel: [K x D] with K odd.  Zero padding keeps the length,
// no bias.  Channel d of the output sees only channel d of the input.
template <class Real>
Var<Real> conv1d_depthwise(Tape<Real>* tape, const Var<Real>& x,
                           const Var<Real>& kernel) {
  if (x->rank() != 2 || kernel->rank() != 2)
    throw ShapeError("conv1d_depthwise: need [T x D] input and [K x D] kernel");
  const int64_t t_len = x->rows(), d = x->cols(), k_len = kernel->rows();
  if (kernel->cols() != d)
    throw ShapeError("conv1d_depthwise: kernel channels " +
                     std::to_string(kernel->cols()) + " != input channels " +
                     std::to_string(d));
  if (k_len % 2 == 0)
    throw ConfigError("conv1d_depthwise: kernel length must be odd, got " +
                      std::to_string(k_len));
  const int64_t half = k_len / 2;
  auto out = tensor_zeros<Real>({t_len, d});
  for (int64_t t = 0; t < t_len; ++t) {
    Real* yrow = &out->data[t * d];
    const int64_t j0 = std::max<int64_t>(0, half - t);
    const int64_t j1 = std::min<int64_t>(k_len, t_len + half - t);
    for (int64_t j = j0; j < j1; ++j) {
      const Real* xrow = &x->data[(t + j - half) * d];
      const Real* krow = &kernel->data[j * d];
      for (int64_t c = 0; c < d; ++c) yrow[c] += krow[c] * xrow[c];
    }
  }
  if (detail::wants_grad(tape, {&x, &kernel})) {
    out->set_requires_grad(true);
    tape->record([x, kernel, out, t_len, d, k_len, half] {
      for (int64_t t = 0; t < t_len; ++t) {
        const Real* dyrow = &out->grad[t * d];
        const int64_t j0 = std::max<int64_t>(0, half - t);
        const int64_t j1 = std::min<int64_t>(k_len, t_len + half - t);
        for (int64_t j = j0; j < j1; ++j) {
          const int64_t src = t + j - half;
          if (x->requires_grad) {
            Real* dxrow = &x->grad[src * d];
            const Real* krow = &kernel->data[j * d];
            for (int64_t c = 0; c < d; ++c) dxrow[c] += krow[c] * dyrow[c];
          }
          if (kernel->requires_grad) {
            Real* dkrow = &kernel->grad[j * d];
            const Real* xrow = &x->data[src * d];
            for (int64_t c = 0; c < d; ++c) dkrow[c] += xrow[c] * dyrow[c];
          }
        }
      }
    });
  }
  return out;
}

// ============================================================================
// Relative-position attention scores
// ============================================================================

// score[m, n] = q_m . (k_n + rel[idx(m, n)]) / sqrt(d_k)
//
// q holds the queries of the current chunk (T rows); k holds cached keys
// followed by the current chunk's keys (L >= T rows), so query m sits at key
// position L - T + m.  The relative offset n - (L - T + m) indexes a table of
// 2*max_len - 1 embeddings laid out from offset -(max_len-1) to max_len-1;
// offsets that reach further back than the table (cached frames beyond the
// chunk span) clip to the most-negative entry.
template <class Real>
Var<Real> relative_scores(Tape<Real>* tape, const Var<Real>& q,
                          const Var<Real>& k, const Var<Real>& rel,
                          int64_t max_len) {
  if (q->rank() != 2 || k->rank() != 2 || rel->rank() != 2)
    throw ShapeError("relative_scores: q, k, rel must all be rank 2");
  const int64_t t_len = q->rows(), dk = q->cols(), l_len = k->rows();
  if (k->cols() != dk)
    throw ShapeError("relative_scores: key dim " + std::to_string(k->cols()) +
                     " != query dim " + std::to_string(dk));
  if (max_len < 1)
    throw ConfigError("relative_scores: max_len must be positive");
  const int64_t table = 2 * max_len - 1;
  if (rel->rows() != table || rel->cols() != dk)
    throw ShapeError("relative_scores: rel table must be [" +
                     std::to_string(table) + " x " + std::to_string(dk) +
                     "], got " + shape_to_string(rel->shape));
  if (l_len < t_len)
    throw ContractError("relative_scores: keys (" + std::to_string(l_len) +
                        ") shorter than queries (" + std::to_string(t_len) +
                        ")");
  const Real inv = Real(1) / std::sqrt(Real(dk));
  const int64_t base = l_len - t_len;  // key position of query row 0

  auto index_of = [max_len, base](int64_t m, int64_t n) -> int64_t {
    int64_t off = n - (base + m);
    off = std::clamp<int64_t>(off, -(max_len - 1), max_len - 1);
    return off + (max_len - 1);
  };

  // qk[m, n] and qrel[m, u] = q_m . rel_u, gathered by offset index.
  auto out = tensor_zeros<Real>({t_len, l_len});
  std::vector<Real> qrel(static_cast<size_t>(t_len * table), Real(0));
  for (int64_t m = 0; m < t_len; ++m) {
    const Real* qrow = &q->data[m * dk];
    for (int64_t u = 0; u < table; ++u) {
      const Real* rrow = &rel->data[u * dk];
      Real s = 0;
      for (int64_t c = 0; c < dk; ++c) s += qrow[c] * rrow[c];
      qrel[static_cast<size_t>(m * table + u)] = s;
    }
    Real* orow = &out->data[m * l_len];
    for (int64_t n = 0; n < l_len; ++n) {
      const Real* krow = &k->data[n * dk];
      Real s = 0;
      for (int64_t c = 0; c < dk; ++c) s += qrow[c] * krow[c];
      orow[n] = (s + qrel[static_cast<size_t>(m * table + index_of(m, n))]) * inv;
    }
  }

  if (detail::wants_grad(tape, {&q, &k, &rel})) {
    out->set_requires_grad(true);
    tape->record([q, k, rel, out, t_len, l_len, dk, table, inv, index_of] {
      for (int64_t m = 0; m < t_len; ++m) {
        const Real* qrow = &q->data[m * dk];
        const Real* drow = &out->grad[m * l_len];
        for (int64_t n = 0; n < l_len; ++n) {
          const Real g = drow[n] * inv;
          if (g == Real(0)) continue;
          const int64_t u = index_of(m, n);
          const Real* krow = &k->data[n * dk];
          const Real* rrow = &rel->data[u * dk];
          if (q->requires_grad) {
            Real* dq = &q->grad[m * dk];
            for (int64_t c = 0; c < dk; ++c)
              dq[c] += g * (krow[c] + rrow[c]);
          }
          if (k->requires_grad) {
            Real* dkr = &k->grad[n * dk];
            for (int64_t c = 0; c < dk; ++c) dkr[c] += g * qrow[c];
          }
          if (rel->requires_grad) {
            Real* dr = &rel->grad[u * dk];
            for (int64_t c = 0; c < dk; ++c) dr[c] += g * qrow[c];
          }
        }
      }
    });
  }
  return out;
}

// ============================================================================
// Shape ops
// ============================================================================

template <class Real>
Var<Real> slice_lastdim(Tape<Real>* tape, const Var<Real>& x, int64_t start,
                        int64_t len) {
  const int64_t d = x->last_dim();
  if (start < 0 || len <= 0 || start + len > d)
    throw ShapeError("slice_lastdim: [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of range for " +
                     shape_to_string(x->shape));
  auto shape = x->shape;
  shape.back() = len;
  auto out = tensor_zeros<Real>(shape);
  const int64_t slices = x->numel() / d;
  for (int64_t s = 0; s < slices; ++s)
    for (int64_t j = 0; j < len; ++j)
      out->data[s * len + j] = x->data[s * d + start + j];
  if (detail::wants_grad(tape, {&x})) {
    out->set_requires_grad(true);
    tape->record([x, out, d, start, len, slices] {
      for (int64_t s = 0; s < slices; ++s)
        for (int64_t j = 0; j < len; ++j)
          x->grad[s * d + start + j] += out->grad[s * len + j];
    });
  }
  return out;
}

template <class Real>
Var<Real> concat_lastdim(Tape<Real>* tape, const std::vector<Var<Real>>& parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no inputs");
  auto lead = parts[0]->shape;
  lead.pop_back();
  int64_t total = 0;
  for (const auto& p : parts) {
    auto l = p->shape;
    l.pop_back();
    if (l != lead)
      throw ShapeError("concat_lastdim: leading extents differ: " +
                       shape_to_string(parts[0]->shape) + " vs " +
                       shape_to_string(p->shape));
    total += p->last_dim();
  }
  auto shape = parts[0]->shape;
  shape.back() = total;
  auto out = tensor_zeros<Real>(shape);
  const int64_t slices = out->numel() / total;
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t d = p->last_dim();
    for (int64_t s = 0; s < slices; ++s)
      for (int64_t j = 0; j < d; ++j)
        out->data[s * total + offset + j] = p->data[s * d + j];
    offset += d;
  }
  bool rg = false;
  if (tape)
    for (const auto& p : parts) rg = rg || p->requires_grad;
  if (rg) {
    out->set_requires_grad(true);
    tape->record([parts, out, total, slices] {
      int64_t offset = 0;
      for (const auto& p : parts) {
        const int64_t d = p->last_dim();
        if (p->requires_grad)
          for (int64_t s = 0; s < slices; ++s)
            for (int64_t j = 0; j < d; ++j)
              p->grad[s * d + j] += out->grad[s * total + offset + j];
        offset += d;
      }
    });
  }
  return out;
}

// Row-wise concatenation of 2-D tensors.  Values only (no tape); used to
// prepend cached keys/values, which never carry gradients.
template <class Real>
Var<Real> concat_rows_values(const std::vector<const Tensor<Real>*>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows_values: no inputs");
  const int64_t cols = parts[0]->shape.back();
  int64_t rows = 0;
  for (const auto* p : parts) {
    if (p->rank() != 2 || p->shape.back() != cols)
      throw ShapeError("concat_rows_values: parts must be 2-D with equal cols");
    rows += p->shape[0];
  }
  auto out = tensor_zeros<Real>({rows, cols});
  int64_t r = 0;
  for (const auto* p : parts) {
    std::copy(p->data.begin(), p->data.end(), out->data.begin() + r * cols);
    r += p->shape[0];
  }
  return out;
}

template <class Real>
Var<Real> sum_all(Tape<Real>* tape, const Var<Real>& x) {
  auto out = tensor_zeros<Real>({1});
  Real s = 0;
  const int64_t n = x->numel();
  for (int64_t i = 0; i < n; ++i) s += x->data[i];
  out->data[0] = s;
  if (detail::wants_grad(tape, {&x})) {
    out->set_requires_grad(true);
    tape->record([x, out] {
      const Real g = out->grad[0];
      const int64_t n = x->numel();
      for (int64_t i = 0; i < n; ++i) x->grad[i] += g;
    });
  }
  return out;
}

// Mean of squared entries; the workhorse of the mask-approximation loss.
template <class Real>
Var<Real> mean_square(Tape<Real>* tape, const Var<Real>& x) {
  auto sq = mul(tape, x, x);
  auto s = sum_all(tape, sq);
  return scale(tape, s, Real(1) / Real(x->numel()));
}

}  // namespace css
