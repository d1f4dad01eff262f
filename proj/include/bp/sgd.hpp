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

#ifndef BP_SGD_HPP_
#define BP_SGD_HPP_

#include <string>
#include <unordered_map>
#include <vector>

#include "bp/param_store.hpp"

namespace bp {

// Per-parameter velocity buffers, keyed by parameter name, created lazily at
// zero on first use.
class SgdState {
 public:
  std::vector<float>& velocity(const std::string& name, size_t numel);

 private:
  std::unordered_map<std::string, std::vector<float>> velocity_;
};

// One SGD update over every parameter in the store:
//   v     <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
// Gradients are zeroed afterwards. Parameters whose gradient buffer was
// never touched are treated as having zero gradient.
void sgd_step(ParamStore& params, SgdState& state, float lr, float weight_decay,
              float momentum);

}  // namespace bp

#endif  // BP_SGD_HPP_
