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

#ifndef BP_TENSOR_HPP_
#define BP_TENSOR_HPP_

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bp/error.hpp"

namespace bp {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;

// Shared tensor storage. Data is a row-major 32-bit float buffer; grad is
// allocated lazily and only ever populated for leaves (requires_grad set and
// no grad_fn). All arithmetic everywhere in the engine is float32.
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first backward reaches this leaf
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;  // null for leaves

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

// One recorded operation. `inputs` are the parents in the DAG; `apply` adds
// the op's input gradients into the supplied flow buffers (nullptr where an
// input does not require grad). Buffers are pre-zeroed by the engine.
struct Node {
  std::string name;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const std::vector<float>& upstream,
                     const std::vector<std::vector<float>*>& input_grads)>
      apply;
};

bool autograd_enabled();

}  // namespace detail

// Dense n-dimensional float32 array with optional recorded gradient. Value
// semantics over shared storage: copying a Tensor aliases the same buffer;
// clone() makes an independent deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data,
                          bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return impl_->numel(); }

  float* data() { return impl_->data.data(); }
  const float* data() const { return impl_->data.data(); }
  std::span<float> values() { return impl_->data; }
  std::span<const float> values() const { return impl_->data; }

  // Scalar extraction; requires numel() == 1.
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }

  // Accumulated gradient of a leaf; empty span before any backward.
  std::span<const float> grad() const { return impl_->grad; }
  void zero_grad();

  // Deep copy of data; result is a leaf and carries no graph history.
  Tensor clone() const;
  // Same storage, detached from the graph (no grad_fn, requires_grad off).
  Tensor detach() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode sweep from a scalar loss. Gradients flow through scratch
// buffers in deterministic (reverse topological) order and are accumulated
// (+=) into the .grad of every reachable leaf with requires_grad set, so a
// second backward over the same graph doubles the leaf gradients.
void backward(const Tensor& loss);

// RAII guard disabling graph recording; forwards run under the guard build
// no nodes. Used by evaluation and the latency harness.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

}  // namespace bp

#endif  // BP_TENSOR_HPP_
