#pragma once

#include <functional>
#include <random>
#include <vector>

#include "llamba/autodiff.hpp"
#include "llamba/tensor.hpp"

namespace llamba::testing {

// Central finite differences of a scalar function of several tensors,
// compared against analytic gradients. Returns the max relative error,
// with an absolute floor so near-zero gradients don't blow up the ratio.
inline double fd_max_rel_error(
    const std::function<double(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
    const std::vector<Tensor>& analytic, double eps = 1e-6, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      double orig = inputs[t].get(i);
      inputs[t].set(i, orig + eps);
      double fp = f(inputs);
      inputs[t].set(i, orig - eps);
      double fm = f(inputs);
      inputs[t].set(i, orig);
      double fd = (fp - fm) / (2 * eps);
      double an = analytic[t].get(i);
      double err = std::abs(fd - an) / std::max(std::abs(fd), floor);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline Tensor randn(std::vector<std::size_t> shape, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor::randn(std::move(shape), rng, stddev, DType::F64);
}

}  // namespace llamba::testing
