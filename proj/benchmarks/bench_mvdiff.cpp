#include <benchmark/benchmark.h>

#include "mvdiff/diffusion.hpp"
#include "mvdiff/eval.hpp"
#include "mvdiff/optim.hpp"
#include "mvdiff/predictor.hpp"

using namespace mvdiff;
using numerics::Graph;
using numerics::ParamBinder;
using numerics::Tensor;

namespace {

corpus::Cohort bench_cohort(std::size_t patients) {
  corpus::CohortConfig cc;
  cc.patients = patients;
  return corpus::generate_cohort(cc, 1);
}

const diffusion::DiffusionModel& bench_model() {
  static const auto model = [] {
    diffusion::DiffusionConfig dc;
    dc.epochs = 1;
    dc.seed = 1;
    return diffusion::train_diffusion(bench_cohort(40), dc).model;
  }();
  return model;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  CounterRng rng(1);
  auto a = numerics::random_normal(n, n, 1.0, rng);
  auto b = numerics::random_normal(n, n, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(numerics::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(96)->Arg(192);

static void BM_AttentionForwardBackward(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  CounterRng rng(2);
  numerics::ParameterStore store;
  store.add("x", numerics::random_normal(rows, 96, 1.0, rng));
  for (auto _ : state) {
    store.zero_grad();
    Graph g;
    ParamBinder p(g, store);
    auto x = p("x");
    auto y = g.attention(x, x, x, numerics::AttentionOptions{2, std::vector<std::size_t>(rows / 12, 12), false, 0.0});
    g.backward(g.sum(y));
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_AttentionForwardBackward)->Arg(12 * 8)->Arg(12 * 32);

// One optimizer step of the full diffusion loss at the default width.
static void BM_DiffusionTrainStep(benchmark::State& state) {
  const auto& model = bench_model();
  auto cohort = bench_cohort(40);
  auto store = model.params;
  std::vector<diffusion::TrainingItem> items;
  CounterRng rng(3);
  for (const auto& r : cohort.records)
    for (std::size_t j = 0; j < r.visits.size() && items.size() < 32; ++j) {
      diffusion::TrainingItem it;
      it.visit = &r.visits[j];
      for (std::size_t h = 0; h < j; ++h) it.history.push_back(&r.visits[h]);
      it.observed = {true, rng.bernoulli(0.5), false};
      it.t = 1 + rng.uniform_index(model.schedule.steps);
      it.noise = numerics::random_normal(1, 3 * model.config.denoiser.dim, 1.0, rng);
      items.push_back(std::move(it));
    }
  numerics::Adam adam({});
  for (auto _ : state) {
    store.zero_grad();
    Graph g;
    ParamBinder p(g, store);
    auto parts = diffusion::vlb_loss(p, items, model.prototypes, model.schedule, model.config.denoiser);
    g.backward(parts.total);
    adam.step(store);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(items.size()));
}
BENCHMARK(BM_DiffusionTrainStep)->Unit(benchmark::kMillisecond);

// Twenty guided reverse steps per incomplete visit.
static void BM_ImputeCohort(benchmark::State& state) {
  const auto& model = bench_model();
  auto masked = corpus::apply_missingness(bench_cohort(20), 0.3, 2);
  std::size_t rows = 0;
  for (const auto& r : masked.records)
    for (const auto& v : r.visits) rows += !v.complete();
  for (auto _ : state) benchmark::DoNotOptimize(diffusion::impute_cohort(masked, model, {0.5, 20, 1}));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows));
}
BENCHMARK(BM_ImputeCohort)->Unit(benchmark::kMillisecond);

static void BM_PredictorBatch(benchmark::State& state) {
  auto cohort = bench_cohort(32);
  predictor::PredictorConfig pc;
  CounterRng rng(4);
  numerics::ParameterStore s;
  predictor::add_predictor_parameters(s, pc, {40, 30, 40}, cohort.n_phenotypes, rng);
  std::vector<const corpus::PatientRecord*> ptrs;
  for (const auto& r : cohort.records) ptrs.push_back(&r);
  for (auto _ : state) {
    s.zero_grad();
    Graph g;
    ParamBinder p(g, s);
    auto losses = predictor::batch_losses(p, ptrs, pc, cohort.n_phenotypes);
    g.backward(losses.objective);
  }
}
BENCHMARK(BM_PredictorBatch)->Unit(benchmark::kMillisecond);

static void BM_Auroc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  CounterRng rng(5);
  std::vector<double> s(n);
  std::vector<std::uint8_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = rng.uniform();
    y[i] = rng.bernoulli(0.2);
  }
  for (auto _ : state) benchmark::DoNotOptimize(eval::auroc(s, y));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Auroc)->Arg(1000)->Arg(100000);

static void BM_Kmeans(benchmark::State& state) {
  CounterRng rng(6);
  auto pts = numerics::random_normal(static_cast<std::size_t>(state.range(0)), 32, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(encoder::kmeans(pts, 10, 1, 50));
}
BENCHMARK(BM_Kmeans)->Arg(500)->Arg(5000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
