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

#ifndef BP_PARAM_STORE_HPP_
#define BP_PARAM_STORE_HPP_

#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bp/tensor.hpp"

namespace bp {

// Ordered, uniquely named collection of trainable tensors. Entries alias the
// owning layers' tensors (shared storage), so the optimizer mutates the live
// parameters. Iteration order is insertion order and therefore deterministic.
class ParamStore {
 public:
  void add(std::string name, Tensor t);
  Tensor* find(std::string_view name);
  const Tensor* find(std::string_view name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  // Total scalar count across all entries.
  int64_t scalar_count() const;

  void zero_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace bp

#endif  // BP_PARAM_STORE_HPP_
