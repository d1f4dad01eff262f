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

#ifndef BP_RNG_HPP_
#define BP_RNG_HPP_

#include <cstdint>
#include <random>
#include <span>

namespace bp {

// Seeded pseudo-random source with bit-portable output.
//
// The raw generator is std::mt19937_64, whose bit-level behavior (including
// single-value seeding) is fixed by the C++ standard, so the u64 stream is
// identical on every conforming platform. Distribution mappings are
// implemented here rather than with std::*_distribution (which is not
// specified bit-exactly):
//   - uniform():  next_u64() >> 11, scaled by 2^-53  -> double in [0,1)
//   - normal():   Marsaglia polar method over uniform() pairs; the required
//     logarithm uses an internal fixed-term series (frexp + atanh expansion)
//     so no libm transcendentals enter the stream. Values come in pairs; the
//     spare is cached.
// All stochastic library operations take an Rng (or a seed) explicitly;
// there is no global generator state.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(seed) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() { return gen_(); }

  // Uniform double in [0,1), 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  float uniform(float lo, float hi) {
    return static_cast<float>(lo + (hi - lo) * uniform());
  }

  // Integer in [0, n), n >= 1. Rejection-free modulo bias is avoided by
  // rejection sampling on the top range.
  uint64_t uniform_index(uint64_t n);

  // Standard normal (mean 0, stddev 1) as float.
  float normal();

  void fill_uniform(std::span<float> out, float lo, float hi);
  void fill_normal(std::span<float> out, float stddev);

  // Deterministically derived child generator for independent streams
  // (per-sample noise, per-trial re-initialization, per-epoch shuffles).
  Rng child(uint64_t salt) const;

  // splitmix64 mixing step; used for child-seed derivation.
  static uint64_t mix(uint64_t x);

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace bp

#endif  // BP_RNG_HPP_
