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

#ifndef BP_ERROR_HPP_
#define BP_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace bp {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shape / dimension violations (names the offending axes).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Inconsistent block or network specs (names the violated constraint).
class SpecError : public Error {
 public:
  using Error::Error;
};

// Bad argument values (ranges, fractions, labels).
class ValueError : public Error {
 public:
  using Error::Error;
};

// Malformed files: dataset records, checkpoints, spec files, configs.
// The CLI maps these to exit code 2.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Training diverged (non-finite loss). Carries the epoch index.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

}  // namespace bp

#endif  // BP_ERROR_HPP_
