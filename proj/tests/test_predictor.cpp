#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "mvdiff/error.hpp"
#include "mvdiff/gradcheck.hpp"
#include "mvdiff/optim.hpp"
#include "mvdiff/predictor.hpp"

using namespace mvdiff;
using namespace mvdiff::predictor;

namespace {

corpus::Cohort cohort_for(std::size_t patients, std::uint64_t seed) {
  corpus::CohortConfig cfg;
  cfg.patients = patients;
  cfg.min_visits = 2;
  cfg.max_visits = 5;
  cfg.vocab_sizes = {12, 10, 12};
  cfg.phenotypes = 5;
  cfg.latent_classes = 4;
  cfg.template_size = 3;
  return corpus::generate_cohort(cfg, seed);
}

PredictorConfig small_config(Task task = Task::phe) {
  PredictorConfig c;
  c.task = task;
  c.dim = 8;
  c.heads = 2;
  c.batch = 8;
  c.epochs = 3;
  c.lr = 5e-3;
  c.seed = 3;
  return c;
}

ParameterStore store_for(const PredictorConfig& c, std::size_t out_dim, std::uint64_t seed = 1) {
  ParameterStore s;
  CounterRng rng(seed);
  add_predictor_parameters(s, c, {12, 10, 12}, out_dim, rng);
  return s;
}

std::vector<const corpus::PatientRecord*> pointers(const corpus::Cohort& c) {
  std::vector<const corpus::PatientRecord*> out;
  for (const auto& r : c.records) out.push_back(&r);
  return out;
}

}  // namespace

TEST_CASE("relative advantage arithmetic") {
  auto same = relative_advantage(1.7, {1.7, 1.7, 1.7});
  for (double v : same) CHECK(v == 0.0);
  auto r = relative_advantage(1.0, {0.5, 2.0, 1.0});
  CHECK(r[0] == 0.5);
  CHECK(r[1] == -1.0);
  CHECK(r[2] == 0.0);
  CHECK_THROWS_AS(relative_advantage(1e-9, {1.0, 1.0, 1.0}), DomainError);
  CHECK_THROWS_AS(relative_advantage(0.0, {1.0, 1.0, 1.0}), DomainError);
  CounterRng rng(4);
  for (int i = 0; i < 100; ++i) {
    const double f = 0.1 + rng.uniform();
    std::array<double, 3> v{rng.uniform(), rng.uniform(), rng.uniform()};
    auto a = relative_advantage(f, v);
    auto b = relative_advantage(10.0 * f, {10.0 * v[0], 10.0 * v[1], 10.0 * v[2]});
    for (std::size_t k = 0; k < 3; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-13));
  }
}

TEST_CASE("inverse advantage and total loss hand cases") {
  Graph g;
  ParameterStore s;
  s.add(kRho, Tensor::zeros(1, 3));
  ParamBinder p(g, s);
  Var n = advantage_weights(p);
  CHECK(inverse_advantage_loss(g, {0.3, -0.1, 0.1}, n).value().item() == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(inverse_advantage_loss(g, {0.0, 0.0, 0.0}, n).value().item() == 0.0);
  std::array<Var, 3> losses{g.constant(Tensor::scalar(1.0)), g.constant(Tensor::scalar(2.0)),
                            g.constant(Tensor::scalar(3.0))};
  CHECK(total_loss(g, losses, {0.0, 0.0, 0.0}, n, 1.0).value().item() == doctest::Approx(2.0).epsilon(1e-14));

  CounterRng rng(8);
  for (int i = 0; i < 50; ++i) {
    Graph h;
    ParameterStore t;
    t.add(kRho, numerics::random_normal(1, 3, 3.0, rng));
    ParamBinder q(h, t);
    Var w = advantage_weights(q);
    const Tensor nv = w.value();
    CHECK(std::abs(nv[0] + nv[1] + nv[2] - 1.0) < 1e-12);
    for (std::size_t k = 0; k < 3; ++k) CHECK(nv[k] > 0.0);
    std::array<double, 3> l{rng.uniform(), rng.uniform(), rng.uniform()};
    std::array<Var, 3> lv{h.constant(Tensor::scalar(l[0])), h.constant(Tensor::scalar(l[1])),
                          h.constant(Tensor::scalar(l[2]))};
    const double plain = nv[0] * l[0] + nv[1] * l[1] + nv[2] * l[2];
    CHECK(total_loss(h, lv, {0.2, 0.1, -0.3}, w, 0.0).value().item() == plain);
  }
}

TEST_CASE("head outputs") {
  auto cohort = cohort_for(4, 1);
  auto c = small_config();
  auto s = store_for(c, 5);
  for (auto& prm : s)
    if (prm.name.starts_with("head.")) std::fill(prm.value.values().begin(), prm.value.values().end(), 0.0);
  Graph g;
  ParamBinder p(g, s);
  std::array<Var, 3> u{g.constant(Tensor::zeros(2, 8)), g.constant(Tensor::zeros(2, 8)),
                       g.constant(Tensor::zeros(2, 8))};
  auto out = predict(p, u);
  CHECK(out.fused.cols() == 5);
  for (double v : out.fused.value().values()) CHECK(v == 0.0);
  for (auto& v : out.per_view) CHECK(v.cols() == 5);
  std::array<Var, 3> bad{g.constant(Tensor::zeros(2, 8)), g.constant(Tensor::zeros(2, 7)),
                         g.constant(Tensor::zeros(2, 8))};
  CHECK_THROWS_AS(predict(p, bad), ShapeError);
  CHECK(task_dim(Task::phe, cohort) == 5);
  CHECK(task_dim(Task::los, cohort) == 10);
  CHECK(task_from_name("los") == Task::los);
  CHECK_THROWS_AS(task_from_name("mortality"), ConfigError);
}

TEST_CASE("longitudinal encoder is causal and pure") {
  auto cohort = cohort_for(6, 2);
  auto c = small_config();
  auto s = store_for(c, 5);
  const ParameterStore& frozen = s;

  corpus::PatientRecord base = cohort.records[0];
  base.visits.resize(2);
  corpus::PatientRecord longer = base;
  longer.visits.push_back(cohort.records[1].visits[0]);
  longer.visits.push_back(cohort.records[2].visits[1]);
  corpus::PatientRecord altered = longer;
  altered.visits[2].codes[0] = {0, 1, 2};

  Graph g;
  ParamBinder p(g, frozen);
  const corpus::PatientRecord* batch[] = {&base, &longer, &altered};
  auto enc = encode_longitudinal(p, batch, c);
  CHECK(enc.lengths == std::vector<std::size_t>{2, 4, 4});
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& u = enc.u[k].value();
    CHECK(u.cols() == 8);
    for (std::size_t j = 0; j < 2; ++j) {
      auto a = u.row_span(j), b = u.row_span(2 + j);
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
    for (std::size_t j = 0; j < 3; ++j) {
      auto a = u.row_span(2 + j), b = u.row_span(6 + j);
      if (j < 2) {
        CHECK(std::equal(a.begin(), a.end(), b.begin()));
      } else if (k == 0) {
        CHECK_FALSE(std::equal(a.begin(), a.end(), b.begin()));
      }
    }
  }

  corpus::PatientRecord single = base;
  single.visits.resize(1);
  const corpus::PatientRecord* one[] = {&single};
  Graph g2;
  ParamBinder p2(g2, frozen);
  auto e1 = encode_longitudinal(p2, one, c);
  CHECK(e1.u[0].rows() == 1);
  corpus::PatientRecord none;
  const corpus::PatientRecord* empty[] = {&none};
  CHECK_THROWS_AS(encode_longitudinal(p2, empty, c), DomainError);
}

TEST_CASE("targets follow the task") {
  auto cohort = cohort_for(5, 3);
  auto ptrs = pointers(cohort);
  auto phe = make_targets(ptrs, Task::phe, 5);
  auto los = make_targets(ptrs, Task::los, 10);
  std::size_t visits = 0;
  for (const auto& r : cohort.records) visits += r.visits.size();
  CHECK(los.rows.size() == visits);
  CHECK(phe.rows.size() == visits - cohort.records.size());
  for (std::size_t i = 0; i < phe.rows.size(); ++i) {
    const auto [patient, visit] = phe.source[i];
    CHECK(visit >= 1);
    for (auto label : cohort.records[patient].visits[visit].phenotypes) CHECK(phe.multi(i, label) == 1.0);
  }
}

TEST_CASE("predictor stack passes a gradient check") {
  auto cohort = cohort_for(3, 5);
  for (auto& r : cohort.records) r.visits.resize(std::min<std::size_t>(r.visits.size(), 3));
  for (Task task : {Task::phe, Task::los}) {
    PredictorConfig c;
    c.task = task;
    c.dim = 4;
    c.heads = 2;
    c.ffn_mult = 2;
    const std::size_t out_dim = task == Task::phe ? 5 : 10;
    ParameterStore s;
    CounterRng rng(11);
    add_predictor_parameters(s, c, {12, 10, 12}, out_dim, rng);
    for (auto& prm : s)
      if (prm.name.ends_with(".b") || prm.name.ends_with(".g") || prm.name == kRho)
        for (double& v : prm.value.values()) v += 0.1 * rng.normal();
    auto ptrs = pointers(cohort);
    const std::array<double, 3> r{0.2, -0.4, 0.1};
    auto report = numerics::grad_check(
        s,
        [&](ParamBinder& p) {
          Graph& g = p.graph();
          auto targets = make_targets(ptrs, task, out_dim);
          auto enc = encode_longitudinal(p, ptrs, c);
          std::array<Var, 3> u;
          for (std::size_t k = 0; k < 3; ++k) u[k] = g.gather_rows(enc.u[k], targets.rows);
          auto heads = predict(p, u);
          std::array<Var, 3> views;
          for (std::size_t k = 0; k < 3; ++k) views[k] = task_loss(g, heads.per_view[k], targets, task);
          return g.add(task_loss(g, heads.fused, targets, task), total_loss(g, views, r, advantage_weights(p), 0.5));
        },
        {1e-5, 1e-4, 0.2, 8, 2});
    INFO(task_name(task), " ", report.worst_param, " ", report.worst_analytic, " ", report.worst_numeric);
    CHECK(report.passed);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("batch objective moves rho only through the advantage term") {
  auto cohort = cohort_for(6, 6);
  auto ptrs = pointers(cohort);
  for (double eta : {0.0, 1e-3}) {
    auto c = small_config();
    c.eta = eta;
    auto s = store_for(c, 5);
    s.zero_grad();
    Graph g;
    ParamBinder p(g, s);
    auto losses = batch_losses(p, ptrs, c, 5);
    g.backward(losses.objective);
    const auto& grad = s.at(kRho).grad;
    double want_total = losses.fused.value().item();
    for (std::size_t k = 0; k < 3; ++k) want_total += losses.n[k] * losses.views[k].value().item();
    for (std::size_t k = 0; k < 3; ++k) want_total += eta * losses.r[k] * losses.n[k];
    CHECK(losses.objective.value().item() == doctest::Approx(want_total).epsilon(1e-12));
    if (eta == 0.0) {
      for (double v : grad.values()) CHECK(v == 0.0);
    } else {
      // d(r.n)/dρ_k = n_k (r_k - r.n), scaled by η.
      const double rn = losses.r[0] * losses.n[0] + losses.r[1] * losses.n[1] + losses.r[2] * losses.n[2];
      for (std::size_t k = 0; k < 3; ++k) CHECK(grad[k] == doctest::Approx(eta * losses.n[k] * (losses.r[k] - rn)));
    }
  }
}

TEST_CASE("training is deterministic and learns") {
  auto cohort = cohort_for(40, 7);
  auto c = small_config();
  std::size_t calls = 0;
  auto a = train_predictor(cohort, c, [&](const PredictorModel& m, const PredictorEpoch& e) {
    ++calls;
    double sum = 0.0;
    for (double v : e.n) {
      CHECK(v > 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
    CHECK(m.weights() == e.n);
  });
  auto b = train_predictor(cohort, c);
  CHECK(calls == 3);
  REQUIRE(a.history.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) CHECK(a.history[e].loss == b.history[e].loss);
  CHECK(a.history[2].loss < a.history[0].loss);
  CHECK(predict_cohort(a.model, cohort) .size() == make_targets(pointers(cohort), Task::phe, 5).rows.size());

  auto zero = c;
  zero.eta = 0.0;
  auto z = train_predictor(cohort, zero);
  for (double v : z.model.params.at(kRho).value.values()) CHECK(v == 0.0);

  auto los = train_predictor(cohort, small_config(Task::los));
  CHECK(los.model.out_dim == 10);

  auto singles = cohort;
  for (auto& r : singles.records) r.visits.resize(1);
  CHECK_THROWS_AS(train_predictor(singles, c), DomainError);
}

TEST_CASE("predictions: jobs, persistence and dumps") {
  auto cohort = cohort_for(20, 9);
  auto c = small_config();
  c.epochs = 1;
  auto model = train_predictor(cohort, c).model;
  auto one = predict_cohort(model, cohort, 1);
  auto three = predict_cohort(model, cohort, 3);
  REQUIRE(one.size() == three.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(one[i].scores == three[i].scores);
    CHECK(one[i].visit == three[i].visit);
    for (double s : one[i].scores) CHECK((s > 0.0 && s < 1.0));
  }

  auto dir = std::filesystem::temp_directory_path() / "mvdiff_test_predictor";
  std::filesystem::remove_all(dir);
  save_predictor(model, dir / "ckpt");
  auto back = load_predictor(dir / "ckpt");
  CHECK(back.out_dim == model.out_dim);
  CHECK(back.config.to_json() == model.config.to_json());
  auto again = predict_cohort(back, cohort);
  for (std::size_t i = 0; i < one.size(); ++i)
    for (std::size_t j = 0; j < one[i].scores.size(); ++j) CHECK(again[i].scores[j] == doctest::Approx(one[i].scores[j]).epsilon(1e-4));

  write_predictions(one, Task::phe, dir / "pred.jsonl");
  auto read = read_predictions(dir / "pred.jsonl", Task::phe);
  REQUIRE(read.size() == one.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(read[i].scores == one[i].scores);
    CHECK(read[i].label_set == one[i].label_set);
    CHECK(read[i].patient == one[i].patient);
  }
  std::filesystem::remove_all(dir);

  corpus::Cohort other = cohort;
  other.n_phenotypes = 7;
  CHECK_THROWS_AS(predict_cohort(model, other), ValidationError);
}

TEST_CASE("fused input gradients respect wiring") {
  auto cohort = cohort_for(8, 10);
  auto c = small_config();
  PredictorModel m;
  m.config = c;
  m.out_dim = 5;
  m.vocab_sizes = {12, 10, 12};
  CounterRng rng(2);
  add_predictor_parameters(m.params, c, m.vocab_sizes, 5, rng);
  auto& w = m.params.at(std::string(kFusedHead) + ".w").value;
  for (std::size_t r = 8; r < 24; ++r)
    for (std::size_t col = 0; col < w.cols(); ++col) w(r, col) = 0.0;
  auto norms = fused_input_gradient_norms(m, pointers(cohort));
  CHECK(norms[0] > 0.0);
  CHECK(norms[1] == 0.0);
  CHECK(norms[2] == 0.0);
}

TEST_CASE("predictor config json") {
  auto c = small_config(Task::los);
  auto back = PredictorConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto bad = c.to_json();
  bad["eta"] = -1.0;
  try {
    PredictorConfig::from_json(bad).validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "eta");
  }
  bad = c.to_json();
  bad["task"] = "x";
  CHECK_THROWS_AS(PredictorConfig::from_json(bad), ConfigError);
}
