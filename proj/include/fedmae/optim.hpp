#pragma once

#include <cstdint>

#include "fedmae/layers.hpp"

namespace fedmae {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Adam with decoupled weight decay. Decay applies to weight matrices
// (names ending in ".w") only; biases, norms, positional tables and the mask
// token are not decayed.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamStore& params, AdamWConfig config);

  void step(ParamStore& params);
  void reset();

  const AdamWConfig& config() const { return config_; }
  std::int64_t step_count() const { return steps_; }
  const ParamStore& first_moment() const { return m_; }
  const ParamStore& second_moment() const { return v_; }

 private:
  AdamWConfig config_;
  ParamStore m_;
  ParamStore v_;
  std::int64_t steps_ = 0;
};

}  // namespace fedmae
