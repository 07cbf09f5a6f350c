#include "regionlets/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace regionlets {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
}

std::vector<double> transpose(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  }
  return t;
}

// Both kernels compute c[m, n] += sum_k a[m, k] * b[k, n] with every sum
// taken in increasing k, so they agree with the plain triple loop bit for bit.

// Sparse-friendly form: zero entries of `a` (post-ReLU activations) are skipped.
void outer_accumulate(const double* a, const double* b, double* c, std::size_t m_dim,
                      std::size_t k_dim, std::size_t n_dim) {
  for (std::size_t k = 0; k < k_dim; ++k) {
    const double* b_row = b + k * n_dim;
    for (std::size_t m = 0; m < m_dim; ++m) {
      const double x = a[m * k_dim + k];
      if (x == 0.0) continue;
      double* c_row = c + m * n_dim;
      for (std::size_t n = 0; n < n_dim; ++n) c_row[n] += x * b_row[n];
    }
  }
}

// Dense form: tiles of kRows x kCols outputs stay in registers while k runs.
constexpr std::size_t kRows = 8;
constexpr std::size_t kCols = 4;

void matmul_tile(const double* __restrict a, const double* __restrict b, double* __restrict c,
                 std::size_t k_dim, std::size_t n_dim) {
  double acc[kRows][kCols];
  for (std::size_t r = 0; r < kRows; ++r) {
    for (std::size_t q = 0; q < kCols; ++q) acc[r][q] = c[r * n_dim + q];
  }
  for (std::size_t k = 0; k < k_dim; ++k) {
    const double* b_row = b + k * n_dim;
    for (std::size_t r = 0; r < kRows; ++r) {
      const double x = a[r * k_dim + k];
      for (std::size_t q = 0; q < kCols; ++q) acc[r][q] += x * b_row[q];
    }
  }
  for (std::size_t r = 0; r < kRows; ++r) {
    for (std::size_t q = 0; q < kCols; ++q) c[r * n_dim + q] = acc[r][q];
  }
}

void matmul_edge(const double* a, const double* b, double* c, std::size_t k_dim, std::size_t n_dim,
                 std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* c_row = c + r * n_dim;
    for (std::size_t k = 0; k < k_dim; ++k) {
      const double x = a[r * k_dim + k];
      if (x == 0.0) continue;
      const double* b_row = b + k * n_dim;
      for (std::size_t q = 0; q < cols; ++q) c_row[q] += x * b_row[q];
    }
  }
}

void matmul_accumulate(const double* a, const double* b, double* c, std::size_t m_dim,
                       std::size_t k_dim, std::size_t n_dim) {
  const std::size_t m_full = m_dim - m_dim % kRows, n_full = n_dim - n_dim % kCols;
  for (std::size_t m = 0; m < m_full; m += kRows) {
    for (std::size_t n = 0; n < n_full; n += kCols) {
      matmul_tile(a + m * k_dim, b + n, c + m * n_dim + n, k_dim, n_dim);
    }
    if (n_full < n_dim) {
      matmul_edge(a + m * k_dim, b + n_full, c + m * n_dim + n_full, k_dim, n_dim, kRows,
                  n_dim - n_full);
    }
  }
  if (m_full < m_dim) {
    matmul_edge(a + m_full * k_dim, b, c + m_full * n_dim, k_dim, n_dim, m_dim - m_full, n_dim);
  }
}

}  // namespace

Tensor fc_forward(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  require_rank(input, 2, "fc_forward input");
  require_rank(weights, 2, "fc_forward weights");
  require_rank(bias, 1, "fc_forward bias");
  const std::size_t batch = input.dim(0), d_in = input.dim(1), d_out = weights.dim(1);
  if (weights.dim(0) != d_in || bias.dim(0) != d_out) {
    throw ShapeError("fc_forward: input " + shape_to_string(input.shape()) + ", weights " +
                     shape_to_string(weights.shape()) + ", bias " + shape_to_string(bias.shape()));
  }
  Tensor out({batch, d_out});
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(bias.data(), d_out, out.data() + b * d_out);
  outer_accumulate(input.data(), weights.data(), out.data(), batch, d_in, d_out);
  return out;
}

LayerGradients fc_backward(const Tensor& input, const Tensor& weights, const Tensor& upstream) {
  require_rank(input, 2, "fc_backward input");
  require_rank(weights, 2, "fc_backward weights");
  const std::size_t batch = input.dim(0), d_in = input.dim(1), d_out = weights.dim(1);
  if (weights.dim(0) != d_in) throw ShapeError("fc_backward: weights do not match input");
  require_shape(upstream, {batch, d_out}, "fc_backward upstream");

  Tensor d_input({batch, d_in});
  Tensor d_weights({d_in, d_out});
  Tensor d_bias({d_out});
  const std::vector<double> w_t = transpose(weights.data(), d_in, d_out);
  matmul_accumulate(upstream.data(), w_t.data(), d_input.data(), batch, d_out, d_in);
  const std::vector<double> in_t = transpose(input.data(), batch, d_in);
  outer_accumulate(in_t.data(), upstream.data(), d_weights.data(), d_in, batch, d_out);
  const double* up = upstream.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < d_out; ++j) d_bias[j] += up[b * d_out + j];
  }
  return {std::move(d_input), {std::move(d_weights), std::move(d_bias)}};
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, ConvGeometry geom) {
  if (geom.stride == 0) throw std::invalid_argument("conv stride must be positive");
  if (in + 2 * geom.pad < kernel) {
    throw ShapeError("conv kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + 2 * geom.pad));
  }
  return (in + 2 * geom.pad - kernel) / geom.stride + 1;
}

namespace {

struct ConvDims {
  std::size_t c_in, h, w, c_out, k, h_out, w_out;
};

ConvDims conv_dims(const Tensor& input, const Tensor& weights, ConvGeometry geom, const char* what) {
  require_rank(input, 3, what);
  require_rank(weights, 4, what);
  if (weights.dim(1) != input.dim(0) || weights.dim(2) != weights.dim(3)) {
    throw ShapeError(std::string(what) + ": weights " + shape_to_string(weights.shape()) +
                     " do not match input " + shape_to_string(input.shape()));
  }
  ConvDims d{input.dim(0), input.dim(1), input.dim(2), weights.dim(0), weights.dim(2), 0, 0};
  d.h_out = conv_output_extent(d.h, d.k, geom);
  d.w_out = conv_output_extent(d.w, d.k, geom);
  return d;
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      ConvGeometry geom) {
  const ConvDims d = conv_dims(input, weights, geom, "conv2d_forward");
  require_shape(bias, {d.c_out}, "conv2d_forward bias");
  Tensor out({d.c_out, d.h_out, d.w_out});
  const auto s = static_cast<std::ptrdiff_t>(geom.stride);
  const auto pad = static_cast<std::ptrdiff_t>(geom.pad);
  for (std::size_t co = 0; co < d.c_out; ++co) {
    double* plane = out.data() + co * d.h_out * d.w_out;
    std::fill_n(plane, d.h_out * d.w_out, bias[co]);
    for (std::size_t ci = 0; ci < d.c_in; ++ci) {
      const double* in_plane = input.data() + ci * d.h * d.w;
      for (std::size_t ky = 0; ky < d.k; ++ky) {
        for (std::size_t kx = 0; kx < d.k; ++kx) {
          const double wv = weights.data()[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
          for (std::size_t oy = 0; oy < d.h_out; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s + ky - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t ox = 0; ox < d.w_out; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s + kx - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
              plane[oy * d.w_out + ox] += wv * in_plane[iy * d.w + ix];
            }
          }
        }
      }
    }
  }
  return out;
}

LayerGradients conv2d_backward(const Tensor& input, const Tensor& weights, const Tensor& upstream,
                               ConvGeometry geom) {
  const ConvDims d = conv_dims(input, weights, geom, "conv2d_backward");
  require_shape(upstream, {d.c_out, d.h_out, d.w_out}, "conv2d_backward upstream");
  Tensor d_input = Tensor::zeros_like(input);
  Tensor d_weights = Tensor::zeros_like(weights);
  Tensor d_bias({d.c_out});
  const auto s = static_cast<std::ptrdiff_t>(geom.stride);
  const auto pad = static_cast<std::ptrdiff_t>(geom.pad);
  for (std::size_t co = 0; co < d.c_out; ++co) {
    const double* up = upstream.data() + co * d.h_out * d.w_out;
    for (std::size_t i = 0; i < d.h_out * d.w_out; ++i) d_bias[co] += up[i];
    for (std::size_t ci = 0; ci < d.c_in; ++ci) {
      const double* in_plane = input.data() + ci * d.h * d.w;
      double* din_plane = d_input.data() + ci * d.h * d.w;
      for (std::size_t ky = 0; ky < d.k; ++ky) {
        for (std::size_t kx = 0; kx < d.k; ++kx) {
          const std::size_t widx = ((co * d.c_in + ci) * d.k + ky) * d.k + kx;
          const double wv = weights.data()[widx];
          double dw = 0.0;
          for (std::size_t oy = 0; oy < d.h_out; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s + ky - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t ox = 0; ox < d.w_out; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s + kx - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
              const double g = up[oy * d.w_out + ox];
              dw += g * in_plane[iy * d.w + ix];
              din_plane[iy * d.w + ix] += g * wv;
            }
          }
          d_weights.data()[widx] = dw;
        }
      }
    }
  }
  return {std::move(d_input), {std::move(d_weights), std::move(d_bias)}};
}

Tensor relu_forward(const Tensor& input) {
  Tensor out = input;
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& upstream) {
  require_same_shape(input, upstream, "relu_backward");
  Tensor out = upstream;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(input[i] > 0.0)) out[i] = 0.0;
  }
  return out;
}

Tensor sigmoid_forward(const Tensor& input) {
  Tensor out = input;
  for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return out;
}

Tensor sigmoid_backward(const Tensor& output, const Tensor& upstream) {
  require_same_shape(output, upstream, "sigmoid_backward");
  Tensor out = upstream;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= output[i] * (1.0 - output[i]);
  return out;
}

Tensor softmax(const Tensor& logits) {
  require_rank(logits, 2, "softmax");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  Tensor out({rows, k});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = logits.data() + r * k;
    double* o = out.data() + r * k;
    const double peak = *std::max_element(in, in + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      o[j] = std::exp(in[j] - peak);
      total += o[j];
    }
    for (std::size_t j = 0; j < k; ++j) o[j] /= total;
  }
  return out;
}

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (labels.size() != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) +
                              " outside [0," + std::to_string(k) + ")");
    }
  }
  LossResult result{0.0, softmax(logits)};
  const double inv_rows = 1.0 / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = logits.data() + r * k;
    const auto label = static_cast<std::size_t>(labels[r]);
    // log-sum-exp form keeps the loss exact when one logit dominates.
    const double peak = *std::max_element(in, in + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(in[j] - peak);
    result.loss += (peak + std::log(total) - in[label]) * inv_rows;
    double* g = result.grad.data() + r * k;
    g[label] -= 1.0;
    for (std::size_t j = 0; j < k; ++j) g[j] *= inv_rows;
  }
  return result;
}

LossResult smooth_l1(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "smooth_l1");
  LossResult result{0.0, Tensor::zeros_like(pred)};
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double x = pred[i] - target[i];
    const double ax = std::abs(x);
    if (ax < 1.0) {
      result.loss += 0.5 * x * x;
      result.grad[i] = x * inv_n;
    } else {
      result.loss += ax - 0.5;
      result.grad[i] = (x > 0.0 ? 1.0 : -1.0) * inv_n;
    }
  }
  result.loss *= inv_n;
  return result;
}

void sgd_step(Tensor& params, const Tensor& grads, double lr, double momentum, Tensor& state) {
  require_same_shape(params, grads, "sgd_step grads");
  require_same_shape(params, state, "sgd_step state");
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  require_finite(grads, "sgd_step gradient");
  for (std::size_t i = 0; i < params.size(); ++i) {
    state[i] = momentum * state[i] + grads[i];
    params[i] -= lr * state[i];
  }
}

}  // namespace regionlets
