// Copyright 2026 The blockprune Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef BP_OPS_HPP_
#define BP_OPS_HPP_

#include <cstdint>
#include <span>
#include <vector>

#include "bp/tensor.hpp"

namespace bp {

enum class Mode { Train, Eval };

// Normalization running state; plain buffers, never part of the graph.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;

  static BatchNormState make(int64_t channels);
  BatchNormState clone() const;
};

// All operations are differentiable free functions recording onto the tape
// (unless a NoGradGuard is active). Inputs are NCHW row-major float32.

// Cross-correlation. input [N,Cin,H,W] x weight [Cout,Cin,kh,kw] -> [N,Cout,H',W']
// with H' = (H + 2*padding - kh)/stride + 1. bias may be null.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias,
              int stride, int padding);

// One filter per channel. input [N,C,H,W] x weight [C,1,kh,kw] -> [N,C,H',W'].
Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight,
                        const Tensor* bias, int stride, int padding);

// input [N,Din] x weight [Dout,Din] + bias [Dout] -> [N,Dout].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& input);

Tensor maxpool2d(const Tensor& input, int kernel, int stride, int padding = 0);
Tensor avgpool2d(const Tensor& input, int kernel, int stride);

// Mean over the spatial extent: [N,C,H,W] -> [N,C].
Tensor global_avgpool(const Tensor& input);

// Batch normalization over the channel axis. Train mode normalizes by batch
// statistics (biased variance) and updates the running state in place as
// running <- (1-momentum)*running + momentum*batch; eval mode uses the
// running state and never mutates it. Train mode requires N*H*W >= 2.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, Mode mode, float momentum = 0.1f,
                   float epsilon = 1e-5f);

// Mean over the batch of -log softmax(logits)[label]; max-subtraction
// stabilized. Returns a scalar (shape [1]) tensor.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int32_t> labels);

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Sum of all elements -> scalar.
Tensor sum(const Tensor& input);

// Concatenate along the channel axis; all inputs [N,Ci,H,W] with equal N,H,W.
Tensor concat_channels(const std::vector<Tensor>& inputs);

// [N,C,H,W] -> [N,C*H*W].
Tensor flatten2d(const Tensor& input);

}  // namespace bp

#endif  // BP_OPS_HPP_
