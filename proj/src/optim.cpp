#include "fedmae/optim.hpp"

#include <cmath>

#include "fedmae/error.hpp"

namespace fedmae {
namespace {

bool decays(const std::string& name) {
  return name.size() >= 2 && name.compare(name.size() - 2, 2, ".w") == 0;
}

}  // namespace

AdamW::AdamW(const ParamStore& params, AdamWConfig config) : config_(config) {
  for (const auto& [name, p] : params) {
    m_.add(name, Tensor(p.value.shape(), 0.0));
    v_.add(name, Tensor(p.value.shape(), 0.0));
  }
}

void AdamW::reset() {
  for (auto& [_, p] : m_) p.value.fill(0.0);
  for (auto& [_, p] : v_) p.value.fill(0.0);
  steps_ = 0;
}

void AdamW::step(ParamStore& params) {
  require(params.size() == m_.size(), "optimizer state does not match the parameter set");
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double lr = config_.lr;

  for (auto& [name, p] : params) {
    auto& m = m_.at(name).value;
    auto& v = v_.at(name).value;
    require(m.size() == p.value.size(), "optimizer moment shape mismatch for " + name);
    const double wd = decays(name) ? config_.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + wd * p.value[i]);
    }
  }
}

}  // namespace fedmae
