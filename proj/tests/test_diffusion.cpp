#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "mvdiff/checkpoint.hpp"
#include "mvdiff/diffusion.hpp"
#include "mvdiff/error.hpp"
#include "mvdiff/gradcheck.hpp"
#include "mvdiff/optim.hpp"

using namespace mvdiff;
using namespace mvdiff::diffusion;
using encoder::Block;
using encoder::DiffusionState;
using numerics::Graph;

namespace {

corpus::Cohort small_cohort(std::size_t patients, std::uint64_t seed) {
  corpus::CohortConfig cfg;
  cfg.patients = patients;
  cfg.max_visits = 4;
  cfg.vocab_sizes = {12, 10, 12};
  cfg.phenotypes = 4;
  cfg.latent_classes = 4;
  cfg.template_size = 3;
  return corpus::generate_cohort(cfg, seed);
}

DiffusionConfig tiny_config() {
  DiffusionConfig c;
  c.denoiser = {8, 1, 2, 2};
  c.steps = 50;
  c.sample_steps = 5;
  c.prototypes = 3;
  c.kmeans_iters = 10;
  c.batch = 16;
  c.epochs = 3;
  c.lr = 3e-3;
  c.seed = 5;
  return c;
}

DiffusionState single_row_state(std::size_t d, CounterRng& rng, std::array<bool, 3> noised) {
  const std::size_t w = 3 * d;
  auto z = numerics::random_normal(1, w, 1.0, rng);
  auto c = numerics::random_normal(1, w, 1.0, rng);
  auto b = numerics::random_normal(1, w, 1.0, rng);
  auto v = numerics::random_normal(1, w, 1.0, rng);
  auto s = encoder::assemble_h0(z, c, b, v);
  s.noised = {noised};
  return s;
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

}  // namespace

TEST_CASE("schedule closed forms") {
  auto s = make_schedule(2, 0.1, 0.2);
  CHECK(s.alpha_bar[0] == 1.0);
  CHECK(s.alpha_bar[1] == doctest::Approx(0.9));
  CHECK(s.alpha_bar[2] == doctest::Approx(0.72));

  auto full = make_schedule(1000);
  CHECK(full.beta[1] == doctest::Approx(1e-4));
  CHECK(full.beta[1000] == doctest::Approx(0.02));
  CHECK(full.alpha_bar[1000] < 0.01);
  for (std::size_t t = 1; t <= 1000; ++t) {
    CHECK(full.alpha_bar[t] < full.alpha_bar[t - 1]);
    CHECK(full.post_var[t] >= 0.0);
  }
  CHECK_THROWS_AS(make_schedule(0), DomainError);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.1), DomainError);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 0.1), DomainError);
  CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), DomainError);
}

TEST_CASE("posterior coefficients match gaussian conditioning") {
  auto s = make_schedule(1000);
  CounterRng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = 1 + rng.uniform_index(1000);
    const std::size_t from = trial % 2 == 0 ? t - 1 : rng.uniform_index(t);
    const double ab_t = s.alpha_bar[t], ab_s = s.alpha_bar[from];
    const double ap = ab_t / ab_s;
    // h_s = sqrt(ab_s) h0 + sqrt(1-ab_s) e1, h_t = sqrt(ap) h_s + sqrt(1-ap) e2
    const double var_s = 1.0 - ab_s, var_t = 1.0 - ab_t;
    const double cov = std::sqrt(ap) * var_s;
    const double a = cov / var_t;
    const double b = std::sqrt(ab_s) - a * std::sqrt(ab_t);
    const double v = var_s - cov * cov / var_t;
    auto c = s.between(t, from);
    CHECK(c.a == doctest::Approx(a).epsilon(1e-9));
    CHECK(c.b == doctest::Approx(b).epsilon(1e-9));
    CHECK(c.var == doctest::Approx(v).epsilon(1e-7));
    CHECK(c.a + c.b / std::sqrt(ab_t) == doctest::Approx(std::sqrt(ab_s / ab_t)));
  }
  auto one = s.between(1, 0);
  CHECK(one.a == doctest::Approx(0.0));
  CHECK(one.b == doctest::Approx(1.0));
  CHECK(one.var == doctest::Approx(0.0));
  for (std::size_t t = 1; t <= 1000; t += 37) {
    auto c = s.between(t, t - 1);
    CHECK(c.a == s.post_a[t]);
    CHECK(c.b == s.post_b[t]);
  }
  CHECK_THROWS_AS(s.between(5, 5), DomainError);
  CHECK_THROWS_AS(s.between(1001, 3), DomainError);
}

TEST_CASE("zero betas give identity posteriors") {
  auto s = NoiseSchedule::from_betas({0.0, 0.0, 0.0});
  for (std::size_t t = 1; t <= 3; ++t) {
    CHECK(s.alpha_bar[t] == 1.0);
    auto c = s.between(t, t - 1);
    CHECK(c.a == 1.0);
    CHECK(c.b == 0.0);
    CHECK(c.var == 0.0);
  }
  CHECK_THROWS_AS(NoiseSchedule::from_betas({}), DomainError);
  CHECK_THROWS_AS(NoiseSchedule::from_betas({1.0}), DomainError);
}

TEST_CASE("strided steps") {
  auto st = strided_steps(1000, 20);
  REQUIRE(st.size() == 20);
  CHECK(st.front() == 1000);
  CHECK(st.back() == 50);
  for (std::size_t i = 1; i < st.size(); ++i) CHECK(st[i] < st[i - 1]);
  auto all = strided_steps(7, 7);
  CHECK(all.back() == 1);
  CHECK_THROWS_AS(strided_steps(10, 0), DomainError);
  CHECK_THROWS_AS(strided_steps(10, 11), DomainError);
}

TEST_CASE("q_sample moments and untouched slots") {
  const std::size_t d = 2;
  CounterRng rng(9);
  auto h0 = single_row_state(d, rng, {false, true, false});
  auto sched = make_schedule(1000);
  const std::size_t t = 400;
  const std::size_t n = 10000;
  const std::size_t col = h0.layout.slot_offset(Block::v, 1);
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto noise = numerics::random_normal(1, 3 * d, 1.0, rng);
    auto ht = q_sample(h0, t, noise, sched);
    CHECK(ht.t == t);
    for (std::size_t c = 0; c < ht.h.cols(); ++c) {
      if (c >= col && c < col + d) continue;
      if (ht.h(0, c) != h0.h(0, c)) FAIL("untouched entry changed");
    }
    sum += ht.h(0, col);
    sum2 += ht.h(0, col) * ht.h(0, col);
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  const double want_mean = std::sqrt(sched.alpha_bar[t]) * h0.h(0, col);
  const double want_var = 1.0 - sched.alpha_bar[t];
  CHECK(std::abs(mean - want_mean) < 3.0 * std::sqrt(want_var / n));
  CHECK(std::abs(var - want_var) < 3.0 * want_var * std::sqrt(2.0 / n));
  CHECK_THROWS_AS(q_sample(h0, 0, Tensor::zeros(1, 3 * d), sched), DomainError);
  CHECK_THROWS_AS(q_sample(h0, 1, Tensor::zeros(1, d), sched), ShapeError);
}

TEST_CASE("two q_sample hops compose to one") {
  // Noise at s then the extra hop s -> t has total coefficient sqrt(ab_s) sqrt(ab_t/ab_s).
  auto sched = make_schedule(100);
  const std::size_t s = 30, t = 80;
  const double ap = sched.alpha_bar[t] / sched.alpha_bar[s];
  const double coef = std::sqrt(sched.alpha_bar[s]) * std::sqrt(ap);
  const double var = ap * (1.0 - sched.alpha_bar[s]) + (1.0 - ap);
  CHECK(coef == doctest::Approx(std::sqrt(sched.alpha_bar[t])));
  CHECK(var == doctest::Approx(1.0 - sched.alpha_bar[t]));
}

TEST_CASE("posterior step is deterministic without noise and leaves conditions alone") {
  const std::size_t d = 3;
  CounterRng rng(4);
  auto h = single_row_state(d, rng, {true, false, true});
  auto sched = make_schedule(100);
  h.t = 60;
  auto h0_hat = numerics::random_normal(1, 3 * d, 1.0, rng);
  auto next = posterior_step(h, 40, h0_hat, Tensor(), sched);
  auto coef = sched.between(60, 40);
  CHECK(next.t == 40);
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t off = h.layout.slot_offset(Block::v, k);
    for (std::size_t c = 0; c < d; ++c) {
      const double want = h.noised[0][k] ? coef.a * h.h(0, off + c) + coef.b * h0_hat(0, k * d + c) : h.h(0, off + c);
      CHECK(next.h(0, off + c) == doctest::Approx(want));
    }
  }
  const std::size_t v_off = h.layout.block_offset(Block::v);
  CHECK(same_bits(next.h.row_span(0).subspan(0, v_off), h.h.row_span(0).subspan(0, v_off)));
  // Landing on 0 returns the estimate.
  auto last = posterior_step(h, 0, h0_hat, Tensor(), sched);
  CHECK(last.h(0, v_off) == doctest::Approx(h0_hat(0, 0)));
}

TEST_CASE("cfg_combine endpoints") {
  auto u = Tensor::matrix(1, 3, {1.0, -2.0, 0.5});
  auto c = Tensor::matrix(1, 3, {3.0, 4.0, -1.5});
  CHECK(same_bits(cfg_combine(u, c, 0.0).values(), u.values()));
  CHECK(same_bits(cfg_combine(u, c, 1.0).values(), c.values()));
  auto half = cfg_combine(u, c, 0.5);
  CHECK(half[0] == doctest::Approx(2.0));
  CHECK(half[1] == doctest::Approx(1.0));
  CHECK(half[2] == doctest::Approx(-0.5));
  auto over = cfg_combine(u, c, 2.0);
  CHECK(over[0] == doctest::Approx(5.0));
  CHECK_THROWS_AS(cfg_combine(u, Tensor::zeros(1, 2), 0.5), ShapeError);
}

TEST_CASE("round decode") {
  auto table = Tensor::identity(4);
  auto bias = Tensor::filled(1, 4, -0.5);
  std::vector<double> slot{1.0, 0.0, 1.0, 0.2};
  CHECK(round_decode(slot, table, bias) == std::vector<std::uint32_t>{0, 2});
  std::vector<double> weak{0.1, 0.3, 0.3, 0.0};
  CHECK(round_decode(weak, table, bias) == std::vector<std::uint32_t>{1});
  auto zero_bias = Tensor::zeros(1, 4);
  CounterRng rng(2);
  auto t = numerics::random_normal(6, 3, 1.0, rng);
  auto zb = Tensor::zeros(1, 6);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = numerics::random_normal(1, 3, 1.0, rng);
    std::vector<double> scaled(x.values().begin(), x.values().end());
    for (double& v : scaled) v *= 3.7;
    CHECK(round_decode(x.values(), t, zb) == round_decode(scaled, t, zb));
  }
  std::vector<double> short_slot{1.0};
  CHECK_THROWS_AS(round_decode(short_slot, table, zero_bias), ShapeError);
}

TEST_CASE("vlb_combine by hand") {
  Graph g;
  // d = 1, two rows. Row 0 noised view 1 at t = 1, row 1 noised views 0 and 2 at t = 7.
  auto pred = g.constant(Tensor::matrix(2, 3, {0.0, 2.0, 5.0, 1.0, 9.0, -1.0}));
  auto clean = g.constant(Tensor::matrix(2, 3, {0.0, 1.0, 0.0, 0.0, 0.0, 1.0}));
  std::vector<Flags> noised{{false, true, false}, {true, false, true}};
  std::vector<std::size_t> t{1, 7};
  std::vector<Var> logits{g.constant(Tensor::matrix(2, 1, {0.0, 0.0}))};
  std::vector<Tensor> targets{Tensor::matrix(2, 1, {1.0, 0.0})};
  auto parts = vlb_combine(g, pred, clean, noised, t, logits, targets);
  CHECK(parts.mse_emb == doctest::Approx(1.0 / 2.0));        // (2-1)^2 / 1 / B
  CHECK(parts.mse_t == doctest::Approx((1.0 + 4.0) / 2.0 / 2.0));
  CHECK(parts.nll_round == doctest::Approx(std::log(2.0)));
  CHECK(parts.total.value().item() == doctest::Approx(0.5 + 1.25 + std::log(2.0)));

  Graph g2;
  auto exact = g2.constant(Tensor::matrix(2, 3, {0.0, 1.0, 0.0, 0.0, 0.0, 1.0}));
  std::vector<Var> no_logits;
  std::vector<Tensor> no_targets;
  auto zero = vlb_combine(g2, exact, exact, noised, t, no_logits, no_targets);
  CHECK(zero.total.value().item() == 0.0);
}

TEST_CASE("vlb components are nonnegative on random batches") {
  auto cohort = small_cohort(20, 1);
  DenoiserConfig dc{8, 1, 2, 2};
  numerics::ParameterStore store;
  CounterRng rng(7);
  std::array<std::size_t, 3> vocab{12, 10, 12};
  encoder::add_encoder_parameters(store, vocab, dc.dim, rng);
  add_denoiser_parameters(store, dc, vocab, rng);
  auto protos = encoder::fit_prototypes(cohort, encoder::EmbeddingTables::from_store(store), 2, 1, 10);
  auto sched = make_schedule(50);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<TrainingItem> items;
    for (const auto& rec : cohort.records) {
      for (std::size_t j = 0; j < rec.visits.size(); ++j) {
        TrainingItem it;
        it.visit = &rec.visits[j];
        for (std::size_t h = 0; h < j; ++h) it.history.push_back(&rec.visits[h]);
        const std::size_t bits = 1 + rng.uniform_index(6);
        for (std::size_t k = 0; k < 3; ++k) it.observed[k] = ((bits >> k) & 1U) == 0;
        it.t = 1 + rng.uniform_index(50);
        it.drop_condition = rng.bernoulli(0.3);
        it.noise = numerics::random_normal(1, 24, 1.0, rng);
        items.push_back(std::move(it));
      }
    }
    Graph g;
    numerics::ParamBinder p(g, store);
    auto parts = vlb_loss(p, items, protos, sched, dc);
    CHECK(parts.mse_t >= 0.0);
    CHECK(parts.mse_emb >= 0.0);
    CHECK(parts.nll_round >= 0.0);
    CHECK(std::isfinite(parts.total.value().item()));
  }
}

TEST_CASE("denoiser and full loss pass a gradient check") {
  DenoiserConfig dc{4, 2, 2, 2};
  numerics::ParameterStore store;
  CounterRng rng(13);
  std::array<std::size_t, 3> vocab{5, 4, 5};
  encoder::add_encoder_parameters(store, vocab, dc.dim, rng);
  add_denoiser_parameters(store, dc, vocab, rng);
  // Nonzero gains and biases so none of their gradients vanish by symmetry.
  for (auto& prm : store)
    if (prm.name.ends_with(".b") || prm.name.ends_with(".g"))
      for (double& v : prm.value.values()) v += 0.1 * rng.normal();

  auto mk = [](std::vector<std::uint32_t> d, std::vector<std::uint32_t> p, std::vector<std::uint32_t> m) {
    corpus::Visit v;
    v.codes = {std::move(d), std::move(p), std::move(m)};
    v.observed = {true, true, true};
    return v;
  };
  std::vector<corpus::Visit> visits{mk({0, 2}, {1}, {3, 4}), mk({1}, {0, 3}, {2}), mk({4, 3}, {2}, {0, 1}),
                                    mk({2}, {1, 2}, {4})};
  encoder::PrototypeSet protos;
  for (std::size_t k = 0; k < 3; ++k) protos.centroids[k] = numerics::random_normal(2, dc.dim, 1.0, rng);
  auto sched = make_schedule(10);

  std::vector<TrainingItem> items;
  const Flags patterns[] = {{true, false, false}, {false, true, true}, {true, true, false}, {false, false, true}};
  const std::size_t steps[] = {1, 4, 9, 6};
  for (std::size_t i = 0; i < 4; ++i) {
    TrainingItem it;
    it.visit = &visits[(i + 2) % 4];
    it.history = {&visits[i], &visits[(i + 1) % 4]};
    it.observed = patterns[i];
    it.t = steps[i];
    it.drop_condition = i == 3;
    it.noise = numerics::random_normal(1, 3 * dc.dim, 1.0, rng);
    items.push_back(std::move(it));
  }
  auto report = numerics::grad_check(
      store,
      [&](numerics::ParamBinder& p) { return vlb_loss(p, items, protos, sched, dc).total; },
      {1e-5, 1e-4, 0.2, 8, 1});
  INFO(report.worst_param, " ", report.worst_analytic, " ", report.worst_numeric);
  CHECK(report.passed);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("vlb_loss rejects incomplete visits") {
  numerics::ParameterStore store;
  DenoiserConfig dc{4, 1, 1, 1};
  CounterRng rng(1);
  encoder::add_encoder_parameters(store, {3, 3, 3}, 4, rng);
  add_denoiser_parameters(store, dc, {3, 3, 3}, rng);
  corpus::Visit v;
  v.codes = {std::vector<std::uint32_t>{0}, std::vector<std::uint32_t>{}, std::vector<std::uint32_t>{1}};
  v.observed = {true, false, true};
  TrainingItem it;
  it.visit = &v;
  it.noise = Tensor::zeros(1, 12);
  encoder::PrototypeSet protos;
  for (auto& c : protos.centroids) c = Tensor::zeros(1, 4);
  Graph g;
  numerics::ParamBinder p(g, store);
  std::vector<TrainingItem> batch{it};
  CHECK_THROWS_AS(vlb_loss(p, batch, protos, make_schedule(5), dc), ValidationError);
}

TEST_CASE("diffusion config json") {
  auto c = tiny_config();
  auto back = DiffusionConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK_NOTHROW(c.validate());
  auto bad = c.to_json();
  bad["nope"] = 1;
  try {
    DiffusionConfig::from_json(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "nope");
  }
  c.sample_steps = c.steps + 1;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "sample_steps");
  }
  auto wrong = tiny_config().to_json();
  wrong["lr"] = "fast";
  CHECK_THROWS_AS(DiffusionConfig::from_json(wrong), ConfigError);
}

TEST_CASE("training is deterministic and the loss drops") {
  auto cohort = small_cohort(40, 2);
  auto cfg = tiny_config();
  std::vector<double> seen;
  auto a = train_diffusion(cohort, cfg, [&](const DiffusionModel&, const EpochStats& s) { seen.push_back(s.loss); });
  auto b = train_diffusion(cohort, cfg);
  REQUIRE(a.history.size() == 3);
  CHECK(seen.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) CHECK(a.history[e].loss == b.history[e].loss);
  CHECK(a.history[2].loss < a.history[0].loss);
  for (auto it = a.model.params.begin(); it != a.model.params.end(); ++it) {
    const auto& other = b.model.params.at(it->name);
    CHECK(same_bits(it->value.values(), other.value.values()));
  }
  CHECK(a.model.prototypes.k() == cfg.prototypes);

  auto empty = corpus::apply_missingness(cohort, 0.99, 1);
  bool any_complete = false;
  for (const auto& r : empty.records)
    for (const auto& v : r.visits) any_complete = any_complete || v.complete();
  if (!any_complete) CHECK_THROWS_AS(train_diffusion(empty, cfg), DomainError);
}

TEST_CASE("imputation properties") {
  auto cohort = small_cohort(30, 3);
  auto cfg = tiny_config();
  cfg.epochs = 1;
  auto model = train_diffusion(cohort, cfg).model;
  auto masked = corpus::apply_missingness(cohort, 0.4, 8);
  ImputeOptions opt{0.5, 5, 21};

  SUBCASE("complete visit is a no-op") {
    const auto& v = cohort.records[0].visits[0];
    auto out = impute_visit(v, {}, model, opt);
    CHECK(out == v);
  }

  SUBCASE("deterministic and only fills missing views") {
    auto a = impute_cohort(masked, model, opt, 1);
    auto b = impute_cohort(masked, model, opt, 1);
    CHECK(a == b);
    CHECK(a.imputation_annotated);
    for (std::size_t i = 0; i < masked.records.size(); ++i) {
      for (std::size_t j = 0; j < masked.records[i].visits.size(); ++j) {
        const auto& before = masked.records[i].visits[j];
        const auto& after = a.records[i].visits[j];
        CHECK(after.complete());
        for (std::size_t k = 0; k < 3; ++k) {
          if (before.observed[k]) {
            CHECK(after.codes[k] == before.codes[k]);
            CHECK_FALSE(after.imputed[k]);
          } else {
            CHECK(after.imputed[k]);
            CHECK_FALSE(after.codes[k].empty());
            for (auto c : after.codes[k]) CHECK(c < masked.vocabs[k].size);
          }
        }
      }
    }
    CHECK_NOTHROW(corpus::validate_cohort(a));
  }

  SUBCASE("jobs do not change the result") {
    CHECK(impute_cohort(masked, model, opt, 1) == impute_cohort(masked, model, opt, 3));
  }

  SUBCASE("trajectory never touches observed or condition slots") {
    const corpus::Visit* target = nullptr;
    std::vector<const corpus::Visit*> hist;
    for (const auto& r : masked.records) {
      for (std::size_t j = 1; j < r.visits.size() && !target; ++j) {
        if (!r.visits[j].complete()) {
          target = &r.visits[j];
          for (std::size_t h = 0; h < j; ++h) hist.push_back(&r.visits[h]);
        }
      }
    }
    REQUIRE(target != nullptr);
    ImputeOptions twenty{0.5, 20, 4};
    std::vector<DiffusionState> states;
    const corpus::Visit* rows[] = {target};
    std::vector<std::vector<const corpus::Visit*>> hists{hist};
    const std::uint64_t seeds[] = {99};
    auto final_state = sample(model, rows, hists, seeds, twenty, &states);
    REQUIRE(states.size() == 21);
    CHECK(final_state.t == 0);
    const auto& first = states.front();
    const std::size_t d = first.layout.dim;
    for (const auto& s : states) {
      for (std::size_t slot = 0; slot < first.layout.slot_count(); ++slot) {
        const std::size_t view = slot % 3;
        const bool generative = slot / 3 == 3 && !target->observed[view];
        if (generative) continue;
        CHECK(same_bits(s.h.row_span(0).subspan(slot * d, d), first.h.row_span(0).subspan(slot * d, d)));
      }
    }
  }

  SUBCASE("vocabulary mismatch") {
    auto other = small_cohort(5, 1);
    other.vocabs[0].size = 99;
    CHECK_THROWS_AS(impute_cohort(other, model, opt), ValidationError);
  }
}

TEST_CASE("model save and load") {
  auto cohort = small_cohort(20, 4);
  auto cfg = tiny_config();
  cfg.epochs = 1;
  auto model = train_diffusion(cohort, cfg).model;
  auto dir = std::filesystem::temp_directory_path() / "mvdiff_test_diffusion_model";
  std::filesystem::remove_all(dir);
  save_model(model, dir);
  auto back = load_model(dir);
  CHECK(back.config.to_json() == model.config.to_json());
  CHECK(back.vocab_sizes == model.vocab_sizes);
  CHECK(back.params.size() == model.params.size());
  auto rounded = model.params;
  numerics::round_to_float32(rounded);
  for (const auto& prm : rounded) CHECK(same_bits(prm.value.values(), back.params.at(prm.name).value.values()));
  CHECK(back.prototypes.k() == model.prototypes.k());
  std::filesystem::remove_all(dir);
}
