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

#include "bp/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

namespace bp {
namespace {

using detail::Node;
using detail::TensorImpl;

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::MatrixXf;
using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;

using ApplyFn = std::function<void(const std::vector<float>&,
                                   const std::vector<std::vector<float>*>&)>;

bool wants_grad(std::initializer_list<const Tensor*> ins) {
  if (!detail::autograd_enabled()) return false;
  for (const Tensor* t : ins) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

Tensor make_output(Shape shape, std::vector<float> data, const char* name,
                   std::vector<std::shared_ptr<TensorImpl>> inputs, ApplyFn apply,
                   bool record) {
  Tensor out = Tensor::from_data(std::move(shape), std::move(data));
  if (record) {
    auto node = std::make_shared<Node>();
    node->name = name;
    node->inputs = std::move(inputs);
    node->apply = std::move(apply);
    out.impl()->grad_fn = std::move(node);
    out.impl()->requires_grad = true;
  }
  return out;
}

void check_4d(const Tensor& t, const char* op, const char* role) {
  if (!t.defined() || t.ndim() != 4) {
    throw ShapeError(std::string(op) + ": " + role + " must be 4-D [N,C,H,W], got " +
                     (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
  }
}

int64_t conv_out_extent(const char* op, const char* axis, int64_t in, int64_t k,
                        int64_t stride, int64_t pad) {
  int64_t out = (in + 2 * pad - k) / stride + 1;
  if (in + 2 * pad < k || out < 1) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) +
                     " does not fit input axis " + axis + "=" + std::to_string(in) +
                     " with padding " + std::to_string(pad));
  }
  return out;
}

// Unfold [N,C,H,W] into a (C*kh*kw) x (N*Hout*Wout) matrix; column
// l = (n*Hout + y)*Wout + x, row k = (c*kh + i)*kw + j.
void im2col(const float* in, int64_t N, int64_t C, int64_t H, int64_t W,
            int64_t kh, int64_t kw, int64_t stride, int64_t pad,
            int64_t Hout, int64_t Wout, ColMat& col) {
  const int64_t K = C * kh * kw;
  col.resize(K, N * Hout * Wout);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t y = 0; y < Hout; ++y) {
      for (int64_t x = 0; x < Wout; ++x) {
        const int64_t l = (n * Hout + y) * Wout + x;
        float* cp = col.data() + l * K;  // column-major: column l is contiguous
        const int64_t y0 = y * stride - pad;
        const int64_t x0 = x * stride - pad;
        for (int64_t c = 0; c < C; ++c) {
          const float* plane = in + (n * C + c) * H * W;
          for (int64_t i = 0; i < kh; ++i) {
            const int64_t iy = y0 + i;
            if (iy < 0 || iy >= H) {
              for (int64_t j = 0; j < kw; ++j) *cp++ = 0.0f;
              continue;
            }
            const float* row = plane + iy * W;
            for (int64_t j = 0; j < kw; ++j) {
              const int64_t ix = x0 + j;
              *cp++ = (ix >= 0 && ix < W) ? row[ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

// Scatter-add of the unfolded gradient back onto the input layout.
void col2im_add(const ColMat& dcol, int64_t N, int64_t C, int64_t H, int64_t W,
                int64_t kh, int64_t kw, int64_t stride, int64_t pad,
                int64_t Hout, int64_t Wout, float* dx) {
  const int64_t K = C * kh * kw;
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t y = 0; y < Hout; ++y) {
      for (int64_t x = 0; x < Wout; ++x) {
        const int64_t l = (n * Hout + y) * Wout + x;
        const float* cp = dcol.data() + l * K;
        const int64_t y0 = y * stride - pad;
        const int64_t x0 = x * stride - pad;
        for (int64_t c = 0; c < C; ++c) {
          float* plane = dx + (n * C + c) * H * W;
          for (int64_t i = 0; i < kh; ++i) {
            const int64_t iy = y0 + i;
            if (iy < 0 || iy >= H) {
              cp += kw;
              continue;
            }
            float* row = plane + iy * W;
            for (int64_t j = 0; j < kw; ++j) {
              const int64_t ix = x0 + j;
              if (ix >= 0 && ix < W) row[ix] += cp[j];
            }
            cp += kw;
          }
        }
      }
    }
  }
}

}  // namespace

BatchNormState BatchNormState::make(int64_t channels) {
  BatchNormState s;
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::full({channels}, 1.0f);
  return s;
}

BatchNormState BatchNormState::clone() const {
  BatchNormState s;
  s.running_mean = running_mean.clone();
  s.running_var = running_var.clone();
  return s;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias,
              int stride, int padding) {
  check_4d(input, "conv2d", "input");
  check_4d(weight, "conv2d", "weight");
  if (stride < 1) throw ValueError("conv2d: stride must be positive");
  if (padding < 0) throw ValueError("conv2d: padding must be non-negative");
  const int64_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != Cin) {
    throw ShapeError("conv2d: input channel axis Cin=" + std::to_string(Cin) +
                     " does not match weight channel axis Cin=" + std::to_string(weight.dim(1)));
  }
  if (bias && bias->defined() && (bias->ndim() != 1 || bias->dim(0) != Cout)) {
    throw ShapeError("conv2d: bias axis must be [Cout=" + std::to_string(Cout) + "], got " +
                     shape_str(bias->shape()));
  }
  const int64_t Hout = conv_out_extent("conv2d", "H", H, kh, stride, padding);
  const int64_t Wout = conv_out_extent("conv2d", "W", W, kw, stride, padding);

  const int64_t K = Cin * kh * kw;
  const int64_t L = N * Hout * Wout;
  ColMat col;
  im2col(input.data(), N, Cin, H, W, kh, kw, stride, padding, Hout, Wout, col);
  ConstRowMap wmap(weight.data(), Cout, K);
  ColMat out_mat(Cout, L);
  out_mat.noalias() = wmap * col;

  std::vector<float> out(static_cast<size_t>(N * Cout * Hout * Wout));
  const float* bias_ptr = (bias && bias->defined()) ? bias->data() : nullptr;
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t co = 0; co < Cout; ++co) {
      const float b = bias_ptr ? bias_ptr[co] : 0.0f;
      float* dst = out.data() + (n * Cout + co) * Hout * Wout;
      for (int64_t y = 0; y < Hout; ++y) {
        for (int64_t x = 0; x < Wout; ++x) {
          dst[y * Wout + x] = out_mat(co, (n * Hout + y) * Wout + x) + b;
        }
      }
    }
  }

  const bool record = wants_grad({&input, &weight, bias});
  auto xi = input.impl();
  auto wi = weight.impl();
  auto bi = (bias && bias->defined()) ? bias->impl() : nullptr;
  ApplyFn apply;
  if (record) {
    // The unfolded input is recomputed in backward instead of captured; only
    // the input buffer itself is retained (the graph holds it regardless).
    apply = [=, s = int64_t(stride), p = int64_t(padding)](
                const std::vector<float>& up,
                const std::vector<std::vector<float>*>& gs) {
      ColMat g_mat(Cout, L);
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Cout; ++co) {
          const float* src = up.data() + (n * Cout + co) * Hout * Wout;
          for (int64_t y = 0; y < Hout; ++y)
            for (int64_t x = 0; x < Wout; ++x)
              g_mat(co, (n * Hout + y) * Wout + x) = src[y * Wout + x];
        }
      }
      if (gs[1]) {
        ColMat col2;
        im2col(xi->data.data(), N, Cin, H, W, kh, kw, s, p, Hout, Wout, col2);
        RowMap dw(gs[1]->data(), Cout, K);
        dw.noalias() += g_mat * col2.transpose();
      }
      if (gs.size() > 2 && gs[2]) {
        for (int64_t co = 0; co < Cout; ++co) (*gs[2])[co] += g_mat.row(co).sum();
      }
      if (gs[0]) {
        ColMat dcol(K, L);
        dcol.noalias() = ConstRowMap(wi->data.data(), Cout, K).transpose() * g_mat;
        col2im_add(dcol, N, Cin, H, W, kh, kw, s, p, Hout, Wout, gs[0]->data());
      }
    };
  }
  std::vector<std::shared_ptr<TensorImpl>> node_inputs = {xi, wi};
  if (bi) node_inputs.push_back(bi);
  return make_output({N, Cout, Hout, Wout}, std::move(out), "conv2d",
                     std::move(node_inputs), std::move(apply), record);
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight,
                        const Tensor* bias, int stride, int padding) {
  check_4d(input, "depthwise_conv2d", "input");
  check_4d(weight, "depthwise_conv2d", "weight");
  if (stride < 1) throw ValueError("depthwise_conv2d: stride must be positive");
  if (padding < 0) throw ValueError("depthwise_conv2d: padding must be non-negative");
  const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(0) != C || weight.dim(1) != 1) {
    throw ShapeError("depthwise_conv2d: weight must be [C=" + std::to_string(C) +
                     ",1,kh,kw], got " + shape_str(weight.shape()));
  }
  if (bias && bias->defined() && (bias->ndim() != 1 || bias->dim(0) != C)) {
    throw ShapeError("depthwise_conv2d: bias axis must be [C=" + std::to_string(C) +
                     "], got " + shape_str(bias->shape()));
  }
  const int64_t Hout = conv_out_extent("depthwise_conv2d", "H", H, kh, stride, padding);
  const int64_t Wout = conv_out_extent("depthwise_conv2d", "W", W, kw, stride, padding);

  std::vector<float> out(static_cast<size_t>(N * C * Hout * Wout), 0.0f);
  const float* bias_ptr = (bias && bias->defined()) ? bias->data() : nullptr;
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const float* plane = input.data() + (n * C + c) * H * W;
      const float* wk = weight.data() + c * kh * kw;
      float* dst = out.data() + (n * C + c) * Hout * Wout;
      const float b = bias_ptr ? bias_ptr[c] : 0.0f;
      for (int64_t y = 0; y < Hout; ++y) {
        for (int64_t x = 0; x < Wout; ++x) {
          const int64_t y0 = y * stride - padding;
          const int64_t x0 = x * stride - padding;
          float acc = 0.0f;
          for (int64_t i = 0; i < kh; ++i) {
            const int64_t iy = y0 + i;
            if (iy < 0 || iy >= H) continue;
            for (int64_t j = 0; j < kw; ++j) {
              const int64_t ix = x0 + j;
              if (ix < 0 || ix >= W) continue;
              acc += plane[iy * W + ix] * wk[i * kw + j];
            }
          }
          dst[y * Wout + x] = acc + b;
        }
      }
    }
  }

  const bool record = wants_grad({&input, &weight, bias});
  auto xi = input.impl();
  auto wi = weight.impl();
  auto bi = (bias && bias->defined()) ? bias->impl() : nullptr;
  ApplyFn apply;
  if (record) {
    apply = [=, s = int64_t(stride), p = int64_t(padding)](
                const std::vector<float>& up,
                const std::vector<std::vector<float>*>& gs) {
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          const float* plane = xi->data.data() + (n * C + c) * H * W;
          const float* wk = wi->data.data() + c * kh * kw;
          const float* g = up.data() + (n * C + c) * Hout * Wout;
          for (int64_t y = 0; y < Hout; ++y) {
            for (int64_t x = 0; x < Wout; ++x) {
              const float gv = g[y * Wout + x];
              if (gs.size() > 2 && gs[2]) (*gs[2])[c] += gv;
              const int64_t y0 = y * s - p;
              const int64_t x0 = x * s - p;
              for (int64_t i = 0; i < kh; ++i) {
                const int64_t iy = y0 + i;
                if (iy < 0 || iy >= H) continue;
                for (int64_t j = 0; j < kw; ++j) {
                  const int64_t ix = x0 + j;
                  if (ix < 0 || ix >= W) continue;
                  if (gs[1]) (*gs[1])[c * kh * kw + i * kw + j] += gv * plane[iy * W + ix];
                  if (gs[0]) (*gs[0])[(n * C + c) * H * W + iy * W + ix] += gv * wk[i * kw + j];
                }
              }
            }
          }
        }
      }
    };
  }
  std::vector<std::shared_ptr<TensorImpl>> node_inputs = {xi, wi};
  if (bi) node_inputs.push_back(bi);
  return make_output({N, C, Hout, Wout}, std::move(out), "depthwise_conv2d",
                     std::move(node_inputs), std::move(apply), record);
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.ndim() != 2) {
    throw ShapeError("linear: input must be 2-D [N,Din], got " + shape_str(input.shape()));
  }
  if (weight.ndim() != 2) {
    throw ShapeError("linear: weight must be 2-D [Dout,Din], got " + shape_str(weight.shape()));
  }
  const int64_t N = input.dim(0), Din = input.dim(1);
  const int64_t Dout = weight.dim(0);
  if (weight.dim(1) != Din) {
    throw ShapeError("linear: input feature axis Din=" + std::to_string(Din) +
                     " does not match weight axis Din=" + std::to_string(weight.dim(1)));
  }
  if (bias.ndim() != 1 || bias.dim(0) != Dout) {
    throw ShapeError("linear: bias axis must be [Dout=" + std::to_string(Dout) + "], got " +
                     shape_str(bias.shape()));
  }

  std::vector<float> out(static_cast<size_t>(N * Dout));
  {
    ConstRowMap x(input.data(), N, Din);
    ConstRowMap w(weight.data(), Dout, Din);
    RowMap o(out.data(), N, Dout);
    o.noalias() = x * w.transpose();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t d = 0; d < Dout; ++d) out[n * Dout + d] += bias.data()[d];
  }

  const bool record = wants_grad({&input, &weight, &bias});
  auto xi = input.impl();
  auto wi = weight.impl();
  auto bi = bias.impl();
  ApplyFn apply;
  if (record) {
    apply = [=](const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      ConstRowMap g(up.data(), N, Dout);
      if (gs[0]) {
        RowMap dx(gs[0]->data(), N, Din);
        dx.noalias() += g * ConstRowMap(wi->data.data(), Dout, Din);
      }
      if (gs[1]) {
        RowMap dw(gs[1]->data(), Dout, Din);
        dw.noalias() += g.transpose() * ConstRowMap(xi->data.data(), N, Din);
      }
      if (gs[2]) {
        for (int64_t n = 0; n < N; ++n)
          for (int64_t d = 0; d < Dout; ++d) (*gs[2])[d] += up[n * Dout + d];
      }
    };
  }
  return make_output({N, Dout}, std::move(out), "linear", {xi, wi, bi},
                     std::move(apply), record);
}

Tensor relu(const Tensor& input) {
  if (!input.defined()) throw ValueError("relu: undefined input");
  std::vector<float> out(input.values().begin(), input.values().end());
  for (float& v : out) v = v > 0.0f ? v : 0.0f;

  const bool record = wants_grad({&input});
  auto xi = input.impl();
  ApplyFn apply;
  if (record) {
    // Subgradient at 0 is 0: only strictly positive inputs pass gradient.
    apply = [xi](const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      if (!gs[0]) return;
      const auto& x = xi->data;
      for (size_t i = 0; i < up.size(); ++i) {
        if (x[i] > 0.0f) (*gs[0])[i] += up[i];
      }
    };
  }
  return make_output(input.shape(), std::move(out), "relu", {xi}, std::move(apply), record);
}

Tensor maxpool2d(const Tensor& input, int kernel, int stride, int padding) {
  check_4d(input, "maxpool2d", "input");
  if (kernel < 1 || stride < 1) throw ValueError("maxpool2d: kernel and stride must be positive");
  if (padding < 0) throw ValueError("maxpool2d: padding must be non-negative");
  const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Hout = conv_out_extent("maxpool2d", "H", H, kernel, stride, padding);
  const int64_t Wout = conv_out_extent("maxpool2d", "W", W, kernel, stride, padding);

  std::vector<float> out(static_cast<size_t>(N * C * Hout * Wout));
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const float* plane = input.data() + (n * C + c) * H * W;
      float* dst = out.data() + (n * C + c) * Hout * Wout;
      for (int64_t y = 0; y < Hout; ++y) {
        for (int64_t x = 0; x < Wout; ++x) {
          float best = -std::numeric_limits<float>::infinity();
          for (int64_t i = 0; i < kernel; ++i) {
            const int64_t iy = y * stride - padding + i;
            if (iy < 0 || iy >= H) continue;
            for (int64_t j = 0; j < kernel; ++j) {
              const int64_t ix = x * stride - padding + j;
              if (ix < 0 || ix >= W) continue;
              best = std::max(best, plane[iy * W + ix]);
            }
          }
          dst[y * Wout + x] = best;
        }
      }
    }
  }

  const bool record = wants_grad({&input});
  auto xi = input.impl();
  ApplyFn apply;
  if (record) {
    // Gradient routes to the first maximum in scan order (fixed tie rule).
    apply = [=, k = int64_t(kernel), s = int64_t(stride), p = int64_t(padding)](
                const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      if (!gs[0]) return;
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          const float* plane = xi->data.data() + (n * C + c) * H * W;
          const float* g = up.data() + (n * C + c) * Hout * Wout;
          float* dx = gs[0]->data() + (n * C + c) * H * W;
          for (int64_t y = 0; y < Hout; ++y) {
            for (int64_t x = 0; x < Wout; ++x) {
              float best = -std::numeric_limits<float>::infinity();
              int64_t arg = -1;
              for (int64_t i = 0; i < k; ++i) {
                const int64_t iy = y * s - p + i;
                if (iy < 0 || iy >= H) continue;
                for (int64_t j = 0; j < k; ++j) {
                  const int64_t ix = x * s - p + j;
                  if (ix < 0 || ix >= W) continue;
                  if (plane[iy * W + ix] > best) {
                    best = plane[iy * W + ix];
                    arg = iy * W + ix;
                  }
                }
              }
              if (arg >= 0) dx[arg] += g[y * Wout + x];
            }
          }
        }
      }
    };
  }
  return make_output({N, C, Hout, Wout}, std::move(out), "maxpool2d", {xi},
                     std::move(apply), record);
}

Tensor avgpool2d(const Tensor& input, int kernel, int stride) {
  check_4d(input, "avgpool2d", "input");
  if (kernel < 1 || stride < 1) throw ValueError("avgpool2d: kernel and stride must be positive");
  const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Hout = conv_out_extent("avgpool2d", "H", H, kernel, stride, 0);
  const int64_t Wout = conv_out_extent("avgpool2d", "W", W, kernel, stride, 0);
  const float inv = 1.0f / static_cast<float>(kernel * kernel);

  std::vector<float> out(static_cast<size_t>(N * C * Hout * Wout));
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const float* plane = input.data() + (n * C + c) * H * W;
      float* dst = out.data() + (n * C + c) * Hout * Wout;
      for (int64_t y = 0; y < Hout; ++y) {
        for (int64_t x = 0; x < Wout; ++x) {
          float acc = 0.0f;
          for (int64_t i = 0; i < kernel; ++i)
            for (int64_t j = 0; j < kernel; ++j)
              acc += plane[(y * stride + i) * W + (x * stride + j)];
          dst[y * Wout + x] = acc * inv;
        }
      }
    }
  }

  const bool record = wants_grad({&input});
  auto xi = input.impl();
  ApplyFn apply;
  if (record) {
    apply = [=, k = int64_t(kernel), s = int64_t(stride)](
                const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      if (!gs[0]) return;
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          const float* g = up.data() + (n * C + c) * Hout * Wout;
          float* dx = gs[0]->data() + (n * C + c) * H * W;
          for (int64_t y = 0; y < Hout; ++y)
            for (int64_t x = 0; x < Wout; ++x) {
              const float gv = g[y * Wout + x] * inv;
              for (int64_t i = 0; i < k; ++i)
                for (int64_t j = 0; j < k; ++j)
                  dx[(y * s + i) * W + (x * s + j)] += gv;
            }
        }
      }
    };
  }
  return make_output({N, C, Hout, Wout}, std::move(out), "avgpool2d", {xi},
                     std::move(apply), record);
}

Tensor global_avgpool(const Tensor& input) {
  check_4d(input, "global_avgpool", "input");
  const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const float inv = 1.0f / static_cast<float>(H * W);
  std::vector<float> out(static_cast<size_t>(N * C));
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const float* plane = input.data() + (n * C + c) * H * W;
      float acc = 0.0f;
      for (int64_t i = 0; i < H * W; ++i) acc += plane[i];
      out[n * C + c] = acc * inv;
    }
  }
  const bool record = wants_grad({&input});
  auto xi = input.impl();
  ApplyFn apply;
  if (record) {
    apply = [=](const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      if (!gs[0]) return;
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          const float gv = up[n * C + c] * inv;
          float* dx = gs[0]->data() + (n * C + c) * H * W;
          for (int64_t i = 0; i < H * W; ++i) dx[i] += gv;
        }
    };
  }
  return make_output({N, C}, std::move(out), "global_avgpool", {xi},
                     std::move(apply), record);
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, Mode mode, float momentum, float epsilon) {
  check_4d(input, "batchnorm2d", "input");
  const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (gamma.ndim() != 1 || gamma.dim(0) != C || beta.ndim() != 1 || beta.dim(0) != C) {
    throw ShapeError("batchnorm2d: gamma/beta must be [C=" + std::to_string(C) + "], got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  const int64_t m = N * H * W;
  const int64_t plane = H * W;

  std::vector<float> mean(static_cast<size_t>(C)), invstd(static_cast<size_t>(C));
  if (mode == Mode::Train) {
    if (m < 2) {
      throw ValueError("batchnorm2d: train mode requires N*H*W >= 2, got " + std::to_string(m));
    }
    for (int64_t c = 0; c < C; ++c) {
      float acc = 0.0f;
      for (int64_t n = 0; n < N; ++n) {
        const float* p = input.data() + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      const float mu = acc / static_cast<float>(m);
      float var_acc = 0.0f;
      for (int64_t n = 0; n < N; ++n) {
        const float* p = input.data() + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const float d = p[i] - mu;
          var_acc += d * d;
        }
      }
      const float var = var_acc / static_cast<float>(m);
      mean[c] = mu;
      invstd[c] = 1.0f / std::sqrt(var + epsilon);
      // Biased variance feeds both normalization and the running estimate.
      float* rm = state.running_mean.data();
      float* rv = state.running_var.data();
      rm[c] = (1.0f - momentum) * rm[c] + momentum * mu;
      rv[c] = (1.0f - momentum) * rv[c] + momentum * var;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean.data()[c];
      invstd[c] = 1.0f / std::sqrt(state.running_var.data()[c] + epsilon);
    }
  }

  std::vector<float> out(static_cast<size_t>(input.numel()));
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const float* p = input.data() + (n * C + c) * plane;
      float* o = out.data() + (n * C + c) * plane;
      const float g = gamma.data()[c], b = beta.data()[c];
      const float mu = mean[c], is = invstd[c];
      for (int64_t i = 0; i < plane; ++i) o[i] = g * (p[i] - mu) * is + b;
    }
  }

  const bool record = wants_grad({&input, &gamma, &beta});
  auto xi = input.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  ApplyFn apply;
  if (record) {
    const bool train = mode == Mode::Train;
    apply = [=, mean = std::move(mean), invstd = std::move(invstd)](
                const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      const float inv_m = 1.0f / static_cast<float>(m);
      for (int64_t c = 0; c < C; ++c) {
        const float mu = mean[c], is = invstd[c], gm = gi->data[c];
        // Channel reductions of upstream and upstream*xhat.
        float s_up = 0.0f, s_upx = 0.0f;
        for (int64_t n = 0; n < N; ++n) {
          const float* p = xi->data.data() + (n * C + c) * plane;
          const float* g = up.data() + (n * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            s_up += g[i];
            s_upx += g[i] * (p[i] - mu) * is;
          }
        }
        if (gs[1]) (*gs[1])[c] += s_upx;
        if (gs[2]) (*gs[2])[c] += s_up;
        if (gs[0]) {
          for (int64_t n = 0; n < N; ++n) {
            const float* p = xi->data.data() + (n * C + c) * plane;
            const float* g = up.data() + (n * C + c) * plane;
            float* dx = gs[0]->data() + (n * C + c) * plane;
            if (train) {
              for (int64_t i = 0; i < plane; ++i) {
                const float xhat = (p[i] - mu) * is;
                dx[i] += gm * is * (g[i] - inv_m * s_up - xhat * inv_m * s_upx);
              }
            } else {
              for (int64_t i = 0; i < plane; ++i) dx[i] += gm * is * g[i];
            }
          }
        }
      }
    };
  }
  return make_output(input.shape(), std::move(out), "batchnorm2d", {xi, gi, bi},
                     std::move(apply), record);
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int32_t> labels) {
  if (logits.ndim() != 2) {
    throw ShapeError("softmax_cross_entropy: logits must be 2-D [N,C], got " +
                     shape_str(logits.shape()));
  }
  const int64_t N = logits.dim(0), C = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != N) {
    throw ShapeError("softmax_cross_entropy: batch axis N=" + std::to_string(N) +
                     " does not match labels length " + std::to_string(labels.size()));
  }
  auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(N * C));
  float loss = 0.0f;
  for (int64_t n = 0; n < N; ++n) {
    const int32_t y = labels[n];
    if (y < 0 || y >= C) {
      throw ValueError("softmax_cross_entropy: label " + std::to_string(y) +
                       " out of range [0," + std::to_string(C) + ") at row " + std::to_string(n));
    }
    const float* row = logits.data() + n * C;
    float mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    float denom = 0.0f;
    for (int64_t c = 0; c < C; ++c) denom += std::exp(row[c] - mx);
    const float log_denom = std::log(denom);
    for (int64_t c = 0; c < C; ++c) (*probs)[n * C + c] = std::exp(row[c] - mx) / denom;
    loss += -(row[y] - mx - log_denom);
  }
  loss /= static_cast<float>(N);

  const bool record = wants_grad({&logits});
  auto li = logits.impl();
  ApplyFn apply;
  if (record) {
    std::vector<int32_t> labels_copy(labels.begin(), labels.end());
    apply = [=, labels = std::move(labels_copy)](
                const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      if (!gs[0]) return;
      const float scale = up[0] / static_cast<float>(N);
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          float g = (*probs)[n * C + c];
          if (c == labels[n]) g -= 1.0f;
          (*gs[0])[n * C + c] += scale * g;
        }
      }
    };
  }
  return make_output({1}, {loss}, "softmax_cross_entropy", {li}, std::move(apply), record);
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape " + shape_str(a.shape()) + " does not match " +
                     shape_str(b.shape()));
  }
  std::vector<float> out(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] + b.data()[i];
  const bool record = wants_grad({&a, &b});
  ApplyFn apply;
  if (record) {
    apply = [](const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      for (auto* g : gs) {
        if (!g) continue;
        for (size_t i = 0; i < up.size(); ++i) (*g)[i] += up[i];
      }
    };
  }
  return make_output(a.shape(), std::move(out), "add", {a.impl(), b.impl()},
                     std::move(apply), record);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape " + shape_str(a.shape()) + " does not match " +
                     shape_str(b.shape()));
  }
  std::vector<float> out(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] * b.data()[i];
  const bool record = wants_grad({&a, &b});
  auto ai = a.impl();
  auto bi = b.impl();
  ApplyFn apply;
  if (record) {
    apply = [ai, bi](const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      if (gs[0])
        for (size_t i = 0; i < up.size(); ++i) (*gs[0])[i] += up[i] * bi->data[i];
      if (gs[1])
        for (size_t i = 0; i < up.size(); ++i) (*gs[1])[i] += up[i] * ai->data[i];
    };
  }
  return make_output(a.shape(), std::move(out), "mul", {ai, bi}, std::move(apply), record);
}

Tensor sum(const Tensor& input) {
  float acc = 0.0f;
  for (int64_t i = 0; i < input.numel(); ++i) acc += input.data()[i];
  const bool record = wants_grad({&input});
  const size_t n = static_cast<size_t>(input.numel());
  ApplyFn apply;
  if (record) {
    apply = [n](const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      if (!gs[0]) return;
      for (size_t i = 0; i < n; ++i) (*gs[0])[i] += up[0];
    };
  }
  return make_output({1}, {acc}, "sum", {input.impl()}, std::move(apply), record);
}

Tensor concat_channels(const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw ValueError("concat_channels: no inputs");
  for (const Tensor& t : inputs) check_4d(t, "concat_channels", "input");
  const int64_t N = inputs[0].dim(0), H = inputs[0].dim(2), W = inputs[0].dim(3);
  int64_t Ctot = 0;
  for (const Tensor& t : inputs) {
    if (t.dim(0) != N || t.dim(2) != H || t.dim(3) != W) {
      throw ShapeError("concat_channels: non-channel axes must match, got " +
                       shape_str(t.shape()) + " vs " + shape_str(inputs[0].shape()));
    }
    Ctot += t.dim(1);
  }
  const int64_t plane = H * W;
  std::vector<float> out(static_cast<size_t>(N * Ctot * plane));
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const Tensor& t : inputs) {
    offsets.push_back(off);
    const int64_t Ci = t.dim(1);
    for (int64_t n = 0; n < N; ++n) {
      std::copy(t.data() + n * Ci * plane, t.data() + (n + 1) * Ci * plane,
                out.data() + (n * Ctot + off) * plane);
    }
    off += Ci;
  }

  bool record = false;
  std::vector<std::shared_ptr<TensorImpl>> node_inputs;
  for (const Tensor& t : inputs) {
    node_inputs.push_back(t.impl());
    if (detail::autograd_enabled() && t.requires_grad()) record = true;
  }
  std::vector<int64_t> channels;
  for (const Tensor& t : inputs) channels.push_back(t.dim(1));
  ApplyFn apply;
  if (record) {
    apply = [=](const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      for (size_t k = 0; k < gs.size(); ++k) {
        if (!gs[k]) continue;
        const int64_t Ci = channels[k];
        for (int64_t n = 0; n < N; ++n) {
          const float* src = up.data() + (n * Ctot + offsets[k]) * plane;
          float* dst = gs[k]->data() + n * Ci * plane;
          for (int64_t i = 0; i < Ci * plane; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return make_output({N, Ctot, H, W}, std::move(out), "concat_channels",
                     std::move(node_inputs), std::move(apply), record);
}

Tensor flatten2d(const Tensor& input) {
  check_4d(input, "flatten2d", "input");
  const int64_t N = input.dim(0);
  const int64_t F = input.dim(1) * input.dim(2) * input.dim(3);
  std::vector<float> out(input.values().begin(), input.values().end());
  const bool record = wants_grad({&input});
  ApplyFn apply;
  if (record) {
    apply = [](const std::vector<float>& up, const std::vector<std::vector<float>*>& gs) {
      if (!gs[0]) return;
      for (size_t i = 0; i < up.size(); ++i) (*gs[0])[i] += up[i];
    };
  }
  return make_output({N, F}, std::move(out), "flatten2d", {input.impl()},
                     std::move(apply), record);
}

}  // namespace bp
