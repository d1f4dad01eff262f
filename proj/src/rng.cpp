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

#include "bp/rng.hpp"

#include <cmath>

namespace bp {
namespace {

// ln(x) for x in (0, 1], built only from IEEE +,-,*,/ and frexp so the result
// is bit-identical wherever IEEE-754 double arithmetic is. Decompose
// x = m * 2^e with m in [0.5, 1), then ln(m) = 2*atanh(t) with t = (m-1)/(m+1),
// |t| <= 1/3. Twenty series terms leave the truncation error below 1e-20.
double portable_log(double x) {
  int e = 0;
  double m = std::frexp(x, &e);
  double t = (m - 1.0) / (m + 1.0);
  double t2 = t * t;
  double term = t;
  double sum = 0.0;
  for (int k = 0; k < 20; ++k) {
    sum += term / static_cast<double>(2 * k + 1);
    term *= t2;
  }
  constexpr double kLn2 = 0x1.62e42fefa39efp-1;
  return 2.0 * sum + static_cast<double>(e) * kLn2;
}

}  // namespace

uint64_t Rng::mix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Rng Rng::child(uint64_t salt) const {
  return Rng(mix(seed_ ^ mix(salt)));
}

uint64_t Rng::uniform_index(uint64_t n) {
  const uint64_t limit = n * (UINT64_MAX / n);
  uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

float Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return static_cast<float>(spare_);
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  double f = std::sqrt(-2.0 * portable_log(s) / s);
  spare_ = v * f;
  have_spare_ = true;
  return static_cast<float>(u * f);
}

void Rng::fill_uniform(std::span<float> out, float lo, float hi) {
  for (float& x : out) x = uniform(lo, hi);
}

void Rng::fill_normal(std::span<float> out, float stddev) {
  for (float& x : out) x = stddev * normal();
}

}  // namespace bp
