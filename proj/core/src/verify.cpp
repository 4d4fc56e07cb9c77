#include "mvdiff/verify.hpp"

#include <chrono>
#include <functional>
#include <utility>

#include "mvdiff/diffusion.hpp"
#include "mvdiff/encoder.hpp"
#include "mvdiff/optim.hpp"
#include "mvdiff/predictor.hpp"
#include "mvdiff/rng.hpp"

namespace mvdiff::verify {

using namespace numerics;

namespace {

// Random contraction so each output entry gets its own upstream gradient.
Var probe(ParamBinder& p, Var out, std::uint64_t seed) {
  CounterRng rng(seed, 99);
  Var w = p.graph().constant(random_normal(out.rows(), out.cols(), 1.0, rng));
  return p.graph().sum(out * w);
}

void perturb_affine(ParameterStore& store, CounterRng& rng, const std::string& extra = {}) {
  for (auto& prm : store)
    if (prm.name.ends_with(".b") || prm.name.ends_with(".g") || (!extra.empty() && prm.name == extra))
      for (double& v : prm.value.values()) v += 0.1 * rng.normal();
}

class Suite {
 public:
  explicit Suite(double tolerance) : tolerance_(tolerance) {}

  void run(std::string name, ParameterStore& store, const LossBuilder& build, GradCheckOptions opt = {}) {
    opt.tolerance = tolerance_;
    auto report = grad_check(store, build, opt);
    if (result_.entries.empty() || report.max_rel_err > result_.max_rel_err) {
      result_.max_rel_err = report.max_rel_err;
      result_.worst = name;
    }
    if (!report.passed || !(report.max_rel_err < tolerance_)) result_.passed = false;
    result_.entries.push_back({std::move(name), std::move(report)});
  }

  SuiteResult take() { return std::move(result_); }

 private:
  double tolerance_;
  SuiteResult result_;
};

void op_cases(Suite& suite) {
  CounterRng rng(11);
  ParameterStore store;
  store.add("a", random_normal(4, 5, 1.0, rng));
  store.add("b", random_normal(4, 5, 1.0, rng));
  store.add("c", random_normal(5, 3, 1.0, rng));
  store.add("r", random_normal(1, 5, 1.0, rng));
  store.add("t", random_normal(6, 5, 1.0, rng));
  store.add("pos", Tensor::filled(4, 5, 0.3));

  using Op = std::function<Var(ParamBinder&)>;
  const std::vector<std::pair<const char*, Op>> ops = {
      {"add", [](ParamBinder& p) { return p.graph().add(p("a"), p("b")); }},
      {"sub", [](ParamBinder& p) { return p.graph().sub(p("a"), p("b")); }},
      {"mul", [](ParamBinder& p) { return p.graph().mul(p("a"), p("b")); }},
      {"scale", [](ParamBinder& p) { return p.graph().scale(p("a"), -1.7); }},
      {"add_row", [](ParamBinder& p) { return p.graph().add_row(p("a"), p("r")); }},
      {"mul_row", [](ParamBinder& p) { return p.graph().mul_row(p("a"), p("r")); }},
      {"matmul", [](ParamBinder& p) { return p.graph().matmul(p("a"), p("c")); }},
      {"transpose", [](ParamBinder& p) { return p.graph().transpose(p("a")); }},
      {"concat_cols",
       [](ParamBinder& p) {
         Var parts[] = {p("a"), p("b")};
         return p.graph().concat_cols(parts);
       }},
      {"concat_rows",
       [](ParamBinder& p) {
         Var parts[] = {p("a"), p("t")};
         return p.graph().concat_rows(parts);
       }},
      {"slice_cols", [](ParamBinder& p) { return p.graph().slice_cols(p("a"), 1, 4); }},
      {"reshape", [](ParamBinder& p) { return p.graph().reshape(p("a"), 2, 10); }},
      {"gather_rows", [](ParamBinder& p) { return p.graph().gather_rows(p("t"), {5, 0, 0, 3}); }},
      {"tile_rows", [](ParamBinder& p) { return p.graph().tile_rows(p("r"), 3); }},
      {"embedding_lookup", [](ParamBinder& p) { return p.graph().embedding_lookup(p("t"), {1, 4, 1}); }},
      {"embedding_bag", [](ParamBinder& p) { return p.graph().embedding_bag(p("t"), {{0, 2}, {}, {5, 5, 1}}); }},
      {"segment_mean", [](ParamBinder& p) { return p.graph().segment_mean(p("t"), {2, 0, 4}); }},
      {"softmax_rows", [](ParamBinder& p) { return p.graph().softmax_rows(p("a")); }},
      {"layer_norm", [](ParamBinder& p) { return p.graph().layer_norm(p("a")); }},
      {"sigmoid", [](ParamBinder& p) { return p.graph().sigmoid(p("a")); }},
      {"log", [](ParamBinder& p) { return p.graph().log(p.graph().add(p("pos"), p.graph().scale(p("a"), 0.01))); }},
      {"gelu", [](ParamBinder& p) { return p.graph().gelu(p("a")); }},
      {"mse", [](ParamBinder& p) { return p.graph().mse(p("a"), p("b")); }},
      {"sum", [](ParamBinder& p) { return p.graph().sum(p("a")); }},
      {"mean", [](ParamBinder& p) { return p.graph().mean(p("a")); }},
  };
  GradCheckOptions opt;
  opt.min_coords = 64;
  for (const auto& [name, op] : ops)
    suite.run(std::string("op.") + name, store, [&op](ParamBinder& p) { return probe(p, op(p), 5); }, opt);

  Tensor targets = Tensor::zeros(4, 5);
  targets(0, 1) = targets(2, 3) = targets(3, 0) = 1.0;
  suite.run("op.bce_with_logits", store,
            [&](ParamBinder& p) { return p.graph().bce_with_logits(p("a"), targets); }, opt);
  suite.run("op.cross_entropy", store,
            [](ParamBinder& p) { return p.graph().cross_entropy(p("a"), {0, 4, 2, 2}); }, opt);

  ParameterStore att;
  CounterRng arng(21);
  att.add("x", random_normal(7, 8, 1.0, arng));
  for (const char* n : {"wq", "wk", "wv"}) att.add(n, random_normal(8, 8, 0.5, arng));
  for (bool causal : {false, true})
    for (std::size_t heads : {1u, 2u}) {
      AttentionOptions ao{heads, {3, 4}, causal, 0.0};
      suite.run("op.attention.h" + std::to_string(heads) + (causal ? ".causal" : ""), att,
                [&](ParamBinder& p) {
                  auto& g = p.graph();
                  auto x = p("x");
                  return probe(
                      p, g.attention(g.matmul(x, p("wq")), g.matmul(x, p("wk")), g.matmul(x, p("wv")), ao), 8);
                },
                opt);
    }
}

void encoder_case(Suite& suite) {
  constexpr std::size_t d = 4;
  ParameterStore store;
  CounterRng rng(5);
  encoder::add_encoder_parameters(store, {6, 5, 7}, d, rng);
  auto mk = [](std::vector<std::uint32_t> a, std::vector<std::uint32_t> b, std::vector<std::uint32_t> c) {
    corpus::Visit v;
    v.codes = {std::move(a), std::move(b), std::move(c)};
    v.observed = {true, true, true};
    return v;
  };
  std::vector<corpus::Visit> visits = {mk({0, 5}, {1, 2}, {3}), mk({1}, {4}, {0, 6}), mk({2, 3}, {0}, {5})};
  std::vector<const corpus::Visit*> ptrs = {&visits[0], &visits[1], &visits[2]};
  std::vector<std::array<bool, 3>> keep = {{true, false, true}, {true, true, true}, {false, true, true}};
  std::vector<std::vector<const corpus::Visit*>> histories = {{}, {&visits[0]}, {&visits[0], &visits[1]}};
  CounterRng wrng(77);
  Tensor w = random_normal(3, 9 * d, 1.0, wrng);
  suite.run("encoder", store, [&](ParamBinder& p) {
    auto& g = p.graph();
    Var parts[] = {encoder::encode_visits(p, ptrs, keep), encoder::mask_vectors(p, keep),
                   encoder::intra_conditions(p, histories, d)};
    return g.sum(g.concat_cols(parts) * g.constant(w));
  });
}

void diffusion_case(Suite& suite) {
  diffusion::DenoiserConfig dc{4, 2, 2, 2};
  ParameterStore store;
  CounterRng rng(13);
  std::array<std::size_t, 3> vocab{5, 4, 5};
  encoder::add_encoder_parameters(store, vocab, dc.dim, rng);
  diffusion::add_denoiser_parameters(store, dc, vocab, rng);
  perturb_affine(store, rng);

  auto mk = [](std::vector<std::uint32_t> a, std::vector<std::uint32_t> b, std::vector<std::uint32_t> c) {
    corpus::Visit v;
    v.codes = {std::move(a), std::move(b), std::move(c)};
    v.observed = {true, true, true};
    return v;
  };
  std::vector<corpus::Visit> visits{mk({0, 2}, {1}, {3, 4}), mk({1}, {0, 3}, {2}), mk({4, 3}, {2}, {0, 1}),
                                    mk({2}, {1, 2}, {4})};
  encoder::PrototypeSet protos;
  for (std::size_t k = 0; k < 3; ++k) protos.centroids[k] = random_normal(2, dc.dim, 1.0, rng);
  auto sched = diffusion::make_schedule(10);

  std::vector<diffusion::TrainingItem> items;
  const diffusion::Flags patterns[] = {
      {true, false, false}, {false, true, true}, {true, true, false}, {false, false, true}};
  const std::size_t steps[] = {1, 4, 9, 6};
  for (std::size_t i = 0; i < 4; ++i) {
    diffusion::TrainingItem it;
    it.visit = &visits[(i + 2) % 4];
    it.history = {&visits[i], &visits[(i + 1) % 4]};
    it.observed = patterns[i];
    it.t = steps[i];
    it.drop_condition = i == 3;
    it.noise = random_normal(1, 3 * dc.dim, 1.0, rng);
    items.push_back(std::move(it));
  }
  suite.run(
      "diffusion.vlb", store,
      [&](ParamBinder& p) { return diffusion::vlb_loss(p, items, protos, sched, dc).total; },
      {1e-5, 1e-4, 0.2, 8, 1});
}

void predictor_cases(Suite& suite) {
  corpus::CohortConfig cfg;
  cfg.patients = 3;
  cfg.min_visits = 2;
  cfg.max_visits = 5;
  cfg.vocab_sizes = {12, 10, 12};
  cfg.phenotypes = 5;
  cfg.latent_classes = 4;
  cfg.template_size = 3;
  auto cohort = corpus::generate_cohort(cfg, 5);
  for (auto& r : cohort.records) r.visits.resize(std::min<std::size_t>(r.visits.size(), 3));
  std::vector<const corpus::PatientRecord*> ptrs;
  for (const auto& r : cohort.records) ptrs.push_back(&r);

  for (predictor::Task task : {predictor::Task::phe, predictor::Task::los}) {
    predictor::PredictorConfig c;
    c.task = task;
    c.dim = 4;
    c.heads = 2;
    c.ffn_mult = 2;
    const std::size_t out_dim = task == predictor::Task::phe ? 5 : 10;
    ParameterStore s;
    CounterRng rng(11);
    predictor::add_predictor_parameters(s, c, cfg.vocab_sizes, out_dim, rng);
    perturb_affine(s, rng, predictor::kRho);
    const std::array<double, 3> r{0.2, -0.4, 0.1};
    suite.run(
        std::string("predictor.") + std::string(predictor::task_name(task)), s,
        [&](ParamBinder& p) {
          Graph& g = p.graph();
          auto targets = predictor::make_targets(ptrs, task, out_dim);
          auto enc = predictor::encode_longitudinal(p, ptrs, c);
          std::array<Var, 3> u;
          for (std::size_t k = 0; k < 3; ++k) u[k] = g.gather_rows(enc.u[k], targets.rows);
          auto heads = predictor::predict(p, u);
          std::array<Var, 3> views;
          for (std::size_t k = 0; k < 3; ++k) views[k] = predictor::task_loss(g, heads.per_view[k], targets, task);
          return g.add(predictor::task_loss(g, heads.fused, targets, task),
                       predictor::total_loss(g, views, r, predictor::advantage_weights(p), 0.5));
        },
        {1e-5, 1e-4, 0.2, 8, 2});
  }
}

}  // namespace

SuiteResult run_gradcheck_suite(double tolerance) {
  const auto start = std::chrono::steady_clock::now();
  Suite suite(tolerance);
  op_cases(suite);
  encoder_case(suite);
  diffusion_case(suite);
  predictor_cases(suite);
  auto result = suite.take();
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace mvdiff::verify
