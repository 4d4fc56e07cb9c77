#include "mvdiff/optim.hpp"

#include <cmath>

namespace mvdiff::numerics {

void Adam::set_override(const std::string& name, double lr, double weight_decay) {
  overrides_[name] = Override{lr, weight_decay};
}

void Adam::step(ParameterStore& store) {
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (auto& p : store) {
    if (!p.trainable || p.grad.empty()) continue;
    double lr = config_.lr;
    double decay = config_.weight_decay;
    if (auto it = overrides_.find(p.name); it != overrides_.end()) {
      lr = it->second.lr;
      decay = it->second.weight_decay;
    }
    auto [it, inserted] = state_.try_emplace(p.name);
    Moments& mom = it->second;
    if (inserted) {
      mom.m = Tensor(p.value.shape());
      mom.v = Tensor(p.value.shape());
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i] + decay * p.value[i];
      mom.m[i] = config_.beta1 * mom.m[i] + (1.0 - config_.beta1) * g;
      mom.v[i] = config_.beta2 * mom.v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

Tensor random_normal(std::size_t rows, std::size_t cols, double stddev, CounterRng& rng) {
  Tensor t = Tensor::zeros(rows, cols);
  for (auto& v : t.values()) v = stddev * rng.normal();
  return t;
}

Tensor xavier(std::size_t fan_in, std::size_t fan_out, CounterRng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return random_normal(fan_in, fan_out, stddev, rng);
}

std::vector<double> sinusoidal_embedding(double position, std::size_t width) {
  std::vector<double> out(width, 0.0);
  const std::size_t half = width / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(position * freq);
    out[half + i] = std::cos(position * freq);
  }
  return out;
}

}  // namespace mvdiff::numerics
