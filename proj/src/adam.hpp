#pragma once

#include <vector>

#include "matrix.hpp"

namespace nbr {

// Adaptive per-parameter step sizes with bias correction.
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long long t = 0;

  static AdamState like(const std::vector<const Matrix*>& params);
};

// Applies one update. `params` and `grads` must match the shapes the state
// was built from, in the same order.
void adam_step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
               AdamState& state, const AdamConfig& cfg);

}  // namespace nbr
