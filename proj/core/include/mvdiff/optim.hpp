#pragma once

#include <map>
#include <string>
#include <vector>

#include "mvdiff/autodiff.hpp"
#include "mvdiff/rng.hpp"

namespace mvdiff::numerics {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// L2 penalty folded into the gradient (coupled decay).
  double weight_decay = 5e-4;
};

/// Adam over every trainable parameter of a store. Per-parameter learning
/// rate and decay overrides are keyed by parameter name.
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  void set_override(const std::string& name, double lr, double weight_decay);
  void step(ParameterStore& store);
  std::size_t steps() const noexcept { return step_; }
  const AdamConfig& config() const noexcept { return config_; }

 private:
  struct Override {
    double lr;
    double weight_decay;
  };
  struct Moments {
    Tensor m;
    Tensor v;
  };
  AdamConfig config_;
  std::size_t step_ = 0;
  std::map<std::string, Moments> state_;
  std::map<std::string, Override> overrides_;
};

/// N(0, stddev^2) entries drawn from `rng`.
Tensor random_normal(std::size_t rows, std::size_t cols, double stddev, CounterRng& rng);
/// Xavier/Glorot-scaled normal initialization for a [fan_in, fan_out] matrix.
Tensor xavier(std::size_t fan_in, std::size_t fan_out, CounterRng& rng);

/// Sinusoidal embedding of a scalar position or timestep into `width` features.
std::vector<double> sinusoidal_embedding(double position, std::size_t width);

}  // namespace mvdiff::numerics
