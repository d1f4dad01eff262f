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

#include "bp/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace bp {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

namespace {
thread_local bool g_autograd_enabled = true;
}

bool autograd_enabled() { return g_autograd_enabled; }

}  // namespace detail

NoGradGuard::NoGradGuard() : prev_(detail::g_autograd_enabled) {
  detail::g_autograd_enabled = false;
}

NoGradGuard::~NoGradGuard() { detail::g_autograd_enabled = prev_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError("tensor extent must be positive, got shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError("tensor extent must be positive, got shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

float Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires a scalar tensor, got shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
  }
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;  // copies the buffer; history-free by construction
  impl->requires_grad = false;
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

void backward(const Tensor& loss) {
  using detail::TensorImpl;
  auto root = loss.impl();
  if (!root) throw ValueError("backward on an undefined tensor");
  if (root->numel() != 1) {
    throw ValueError("backward requires a scalar loss, got shape " + shape_str(root->shape));
  }

  // Postorder DFS; input order inside each node is fixed, so the traversal
  // (and with it gradient accumulation order) is deterministic.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::unordered_map<TensorImpl*, std::shared_ptr<TensorImpl>> keepalive;
  {
    struct Frame {
      TensorImpl* impl;
      size_t next_input;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    keepalive[root.get()] = root;
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (!f.impl->grad_fn || f.next_input >= f.impl->grad_fn->inputs.size()) {
        order.push_back(f.impl);
        stack.pop_back();
        continue;
      }
      auto& in = f.impl->grad_fn->inputs[f.next_input++];
      if (in && !visited.count(in.get())) {
        visited.insert(in.get());
        keepalive[in.get()] = in;
        stack.push_back({in.get(), 0});
      }
    }
  }

  std::unordered_map<TensorImpl*, std::vector<float>> flow;
  flow[root.get()] = {1.0f};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    if (!impl->grad_fn) continue;
    auto fit = flow.find(impl);
    if (fit == flow.end()) continue;  // no gradient reached this node
    auto& node = *impl->grad_fn;
    std::vector<std::vector<float>*> input_grads(node.inputs.size(), nullptr);
    for (size_t i = 0; i < node.inputs.size(); ++i) {
      auto& in = node.inputs[i];
      if (!in || !in->requires_grad) continue;
      auto& buf = flow[in.get()];
      if (buf.empty()) buf.assign(static_cast<size_t>(in->numel()), 0.0f);
      input_grads[i] = &buf;
    }
    node.apply(fit->second, input_grads);
  }

  // Deterministic leaf accumulation: walk the topological order.
  for (TensorImpl* impl : order) {
    if (!impl->requires_grad || impl->grad_fn) continue;
    auto fit = flow.find(impl);
    if (fit == flow.end()) continue;
    if (impl->grad.empty()) impl->grad.assign(static_cast<size_t>(impl->numel()), 0.0f);
    const auto& src = fit->second;
    for (size_t i = 0; i < src.size(); ++i) impl->grad[i] += src[i];
  }
}

}  // namespace bp
