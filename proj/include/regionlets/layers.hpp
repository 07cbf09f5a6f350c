#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "regionlets/tensor.hpp"

namespace regionlets {

/// Result of a backward pass: gradient w.r.t. the layer input plus one
/// gradient per parameter tensor, in the layer's parameter order.
struct LayerGradients {
  Tensor wrt_input;
  std::vector<Tensor> wrt_params;
};

/// Weights [d_in, d_out] and bias [d_out] of a fully connected layer.
struct FcParams {
  Tensor weights;
  Tensor bias;
};

/// Weights [c_out, c_in, k, k] and bias [c_out] of a 2-D convolution.
struct ConvParams {
  Tensor weights;
  Tensor bias;
};

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// Fully connected: input [batch, d_in] -> [batch, d_out].
Tensor fc_forward(const Tensor& input, const Tensor& weights, const Tensor& bias);
// wrt_params = {d weights, d bias}.
LayerGradients fc_backward(const Tensor& input, const Tensor& weights, const Tensor& upstream);

inline Tensor fc_forward(const Tensor& input, const FcParams& p) {
  return fc_forward(input, p.weights, p.bias);
}

// Zero-padded cross-correlation on a single image: input [c_in, h, w].
Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      ConvGeometry geom);
// wrt_params = {d weights, d bias}.
LayerGradients conv2d_backward(const Tensor& input, const Tensor& weights, const Tensor& upstream,
                               ConvGeometry geom);

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, ConvGeometry geom);

Tensor relu_forward(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& upstream);

Tensor sigmoid_forward(const Tensor& input);
/// Takes the sigmoid *output*, since s' = s (1 - s).
Tensor sigmoid_backward(const Tensor& output, const Tensor& upstream);

struct LossResult {
  double loss = 0.0;
  Tensor grad;
};

/// Row-wise softmax of logits [batch, k].
Tensor softmax(const Tensor& logits);

/// Mean over rows of -log softmax(logits)[label].
LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Elementwise smooth-L1 of pred - target, summed and divided by the element count.
LossResult smooth_l1(const Tensor& pred, const Tensor& target);

/// Momentum SGD: state <- momentum * state + grads; params <- params - lr * state.
/// Rejects non-finite gradients before touching params or state.
void sgd_step(Tensor& params, const Tensor& grads, double lr, double momentum, Tensor& state);

}  // namespace regionlets
