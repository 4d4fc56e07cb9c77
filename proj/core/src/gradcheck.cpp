#include "mvdiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mvdiff/rng.hpp"

namespace mvdiff::numerics {

double relative_error(double a, double b) noexcept {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

namespace {

double evaluate_loss(ParameterStore& store, const LossBuilder& build) {
  Graph g;
  ParamBinder binder(g, store);
  return build(binder).value().item();
}

}  // namespace

GradCheckReport grad_check(ParameterStore& store, const LossBuilder& build, const GradCheckOptions& options) {
  GradCheckReport report;

  store.zero_grad();
  {
    Graph g;
    ParamBinder binder(g, store);
    Var loss = build(binder);
    g.backward(loss);
  }
  std::map<std::string, Tensor> analytic;
  for (auto& p : store) {
    if (p.trainable) analytic.emplace(p.name, p.grad);
  }

  CounterRng rng(options.seed, 0x6772616463686bULL);
  for (auto& p : store) {
    if (!p.trainable) continue;
    const std::size_t n = p.value.size();
    const auto wanted = static_cast<std::size_t>(std::ceil(options.fraction * static_cast<double>(n)));
    const std::size_t count = std::min(n, std::max(options.min_coords, wanted));
    auto coords = rng.sample_without_replacement(n, count);
    const Tensor& grad = analytic.at(p.name);
    for (auto idx : coords) {
      const double original = p.value[idx];
      p.value[idx] = original + options.epsilon;
      const double up = evaluate_loss(store, build);
      p.value[idx] = original - options.epsilon;
      const double down = evaluate_loss(store, build);
      p.value[idx] = original;
      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double err = relative_error(grad[idx], numeric);
      ++report.coords_checked;
      if (err > report.max_rel_err || report.worst_param.empty()) {
        if (err >= report.max_rel_err) {
          report.max_rel_err = err;
          report.worst_param = p.name;
          report.worst_index = idx;
          report.worst_analytic = grad[idx];
          report.worst_numeric = numeric;
        }
      }
    }
  }
  report.passed = report.max_rel_err < options.tolerance;
  return report;
}

}  // namespace mvdiff::numerics
