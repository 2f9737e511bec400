#pragma once

#include <random>
#include <vector>

#include "mambatrack/tensor.hpp"

namespace testutil {

inline mambatrack::Tensor randn(std::vector<int64_t> shape, std::mt19937_64& rng,
                                double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  mambatrack::Tensor t = mambatrack::Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = dist(rng);
  return t;
}

inline mambatrack::Tensor uniform(std::vector<int64_t> shape, std::mt19937_64& rng,
                                  double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  mambatrack::Tensor t = mambatrack::Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = dist(rng);
  return t;
}

}  // namespace testutil
