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

#include "bp/sgd.hpp"

namespace bp {

std::vector<float>& SgdState::velocity(const std::string& name, size_t numel) {
  auto& v = velocity_[name];
  if (v.size() != numel) v.assign(numel, 0.0f);
  return v;
}

void sgd_step(ParamStore& params, SgdState& state, float lr, float weight_decay,
              float momentum) {
  for (auto& [name, t] : params.entries()) {
    auto impl = t.impl();
    const size_t n = impl->data.size();
    auto& v = state.velocity(name, n);
    const bool has_grad = !impl->grad.empty();
    for (size_t i = 0; i < n; ++i) {
      const float g = has_grad ? impl->grad[i] : 0.0f;
      v[i] = momentum * v[i] + g + weight_decay * impl->data[i];
      impl->data[i] -= lr * v[i];
    }
    if (has_grad) std::fill(impl->grad.begin(), impl->grad.end(), 0.0f);
  }
}

}  // namespace bp
