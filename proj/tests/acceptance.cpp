// Acceptance run: one PASS/FAIL line per criterion. Exit status 0 only when
// every selected criterion passes. `mvdiff_acceptance 4 6` runs a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include <unistd.h>

#include "mvdiff/cli.hpp"
#include "mvdiff/corpus.hpp"
#include "mvdiff/diffusion.hpp"
#include "mvdiff/error.hpp"
#include "mvdiff/eval.hpp"
#include "mvdiff/hash.hpp"
#include "mvdiff/optim.hpp"
#include "mvdiff/predictor.hpp"
#include "mvdiff/verify.hpp"

using namespace mvdiff;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Notes {
 public:
  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass_ = false;
      failures_.push_back(what);
    }
  }
  template <typename... Args>
  void say(const char* f, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    if (!text_.empty()) text_ += "; ";
    text_ += buf;
  }
  Outcome done() const {
    std::string d = text_;
    for (const auto& f : failures_) d += (d.empty() ? "" : "; ") + std::string("failed: ") + f;
    return {pass_, d};
  }

 private:
  bool pass_ = true;
  std::string text_;
  std::vector<std::string> failures_;
};

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

// ---- 1
Outcome numerics_suite() {
  Notes n;
  auto r = verify::run_gradcheck_suite(1e-4);
  n.say("%zu checks, max rel err %.3g (%s), %.2f s", r.entries.size(), r.max_rel_err, r.worst.c_str(), r.seconds);
  n.check(r.passed && r.max_rel_err < 1e-4, "max rel err < 1e-4");
  n.check(r.seconds < 60.0, "runtime < 60 s");
  return n.done();
}

// ---- 2
Outcome diffusion_algebra() {
  Notes n;
  using encoder::Block;
  const std::size_t d = 2;
  CounterRng rng(2024);
  auto row = [&](std::size_t w) { return numerics::random_normal(1, w, 1.0, rng); };

  // (a) moments of q_sample on one noised slot
  auto h0 = encoder::assemble_h0(row(3 * d), row(3 * d), row(3 * d), row(3 * d));
  h0.noised = {{true, false, true}};
  auto sched = diffusion::make_schedule(1000);
  const std::size_t t = 300, draws = 10000;
  std::vector<double> sum(3 * d, 0.0), sum2(3 * d, 0.0);
  bool untouched = true;
  for (std::size_t i = 0; i < draws; ++i) {
    auto ht = diffusion::q_sample(h0, t, numerics::random_normal(1, 3 * d, 1.0, rng), sched);
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t off = h0.layout.slot_offset(Block::v, k);
      for (std::size_t c = 0; c < d; ++c) {
        const double x = ht.h(0, off + c);
        if (!h0.noised[0][k]) {
          untouched &= x == h0.h(0, off + c);
          continue;
        }
        sum[k * d + c] += x;
        sum2[k * d + c] += x * x;
      }
    }
    const std::size_t v_off = h0.layout.block_offset(Block::v);
    untouched &= same_bits(ht.h.row_span(0).subspan(0, v_off), h0.h.row_span(0).subspan(0, v_off));
  }
  const double ab = sched.alpha_bar[t];
  const double want_var = 1.0 - ab;
  double worst_mean = 0.0, worst_var = 0.0;
  for (std::size_t k : {0u, 2u}) {
    const std::size_t off = h0.layout.slot_offset(Block::v, k);
    for (std::size_t c = 0; c < d; ++c) {
      const double mean = sum[k * d + c] / draws;
      const double var = sum2[k * d + c] / draws - mean * mean;
      const double z_mean = std::abs(mean - std::sqrt(ab) * h0.h(0, off + c)) / std::sqrt(want_var / draws);
      const double z_var = std::abs(var - want_var) / (want_var * std::sqrt(2.0 / (draws - 1)));
      worst_mean = std::max(worst_mean, z_mean);
      worst_var = std::max(worst_var, z_var);
    }
  }
  n.say("(a) worst |z| mean %.2f var %.2f", worst_mean, worst_var);
  n.check(worst_mean < 3.0 && worst_var < 3.0, "(a) moments within 3 SE");
  n.check(untouched, "(a) untouched entries bit-identical");

  // (b) zero betas
  auto flat = diffusion::NoiseSchedule::from_betas(std::vector<double>(10, 0.0));
  bool identity = true;
  for (std::size_t s = 1; s <= 10; ++s) {
    auto q = diffusion::q_sample(h0, s, row(3 * d), flat);
    identity &= same_bits(q.h.values(), h0.h.values());
    auto c = flat.between(s, s - 1);
    identity &= c.a == 1.0 && c.b == 0.0 && c.var == 0.0;
    auto hs = h0;
    hs.t = s;
    auto back = diffusion::posterior_step(hs, s - 1, row(3 * d), row(3 * d), flat);
    identity &= same_bits(back.h.values(), h0.h.values());
  }
  n.check(identity, "(b) beta = 0 identities");

  // (c) guidance endpoints
  bool cfg_ok = true;
  for (int i = 0; i < 50; ++i) {
    auto u = numerics::random_normal(3, 7, 2.0, rng);
    auto c = numerics::random_normal(3, 7, 2.0, rng);
    cfg_ok &= same_bits(diffusion::cfg_combine(u, c, 0.0).values(), u.values());
    cfg_ok &= same_bits(diffusion::cfg_combine(u, c, 1.0).values(), c.values());
  }
  n.check(cfg_ok, "(c) s = 0 / s = 1");

  // (d) 20-step sampling trajectory
  corpus::CohortConfig cc;
  cc.patients = 30;
  cc.min_visits = 2;
  cc.max_visits = 4;
  auto cohort = corpus::generate_cohort(cc, 5);
  diffusion::DiffusionConfig dc;
  dc.denoiser.dim = 8;
  dc.steps = 100;
  dc.prototypes = 3;
  dc.epochs = 1;
  dc.seed = 2;
  auto model = diffusion::train_diffusion(cohort, dc).model;
  auto masked = corpus::apply_missingness(cohort, 0.5, 3);
  std::vector<const corpus::Visit*> rows;
  std::vector<std::vector<const corpus::Visit*>> hists;
  std::vector<std::uint64_t> seeds;
  for (const auto& r : masked.records)
    for (std::size_t j = 1; j < r.visits.size(); ++j)
      if (!r.visits[j].complete() && rows.size() < 8) {
        rows.push_back(&r.visits[j]);
        hists.emplace_back();
        for (std::size_t h = 0; h < j; ++h) hists.back().push_back(&r.visits[h]);
        seeds.push_back(rows.size());
      }
  std::vector<encoder::DiffusionState> states;
  diffusion::sample(model, rows, hists, seeds, {0.5, 20, 1}, &states);
  bool frozen = states.size() == 21;
  const auto& first = states.front();
  const std::size_t w = first.layout.dim;
  for (const auto& s : states)
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t slot = 0; slot < first.layout.slot_count(); ++slot) {
        if (slot / 3 == 3 && !rows[i]->observed[slot % 3]) continue;
        frozen &= same_bits(s.h.row_span(i).subspan(slot * w, w), first.h.row_span(i).subspan(slot * w, w));
      }
  n.say("(d) %zu rows over %zu states", rows.size(), states.size());
  n.check(frozen, "(d) observed and condition slots bit-identical");
  return n.done();
}

// ---- 3
Outcome metric_oracles() {
  Notes n;
  const double tol = 1e-12;
  n.check(std::abs(eval::jaccard({1}, {1, 2}) - 0.5) < tol, "jaccard {B} vs {B,C}");
  n.check(std::abs(eval::set_f1({1}, {1, 2}) - 2.0 / 3.0) < tol, "f1 {B} vs {B,C}");
  n.check(std::abs(eval::cohen_kappa({{2, 1}, {1, 2}}) - 1.0 / 3.0) < tol, "kappa [[2,1],[1,2]]");
  n.check(std::abs(eval::cohen_kappa({{0, 3}, {0, 3}})) < tol, "kappa of a constant predictor");
  n.check(std::abs(eval::cohen_kappa({{4, 0}, {0, 5}}) - 1.0) < tol, "kappa of a perfect predictor");
  // JSD as entropy of the mixture minus mean entropy: H(3/4, 1/4) - (1 + 0) / 2
  const double h_mix = -(0.75 * std::log2(0.75) + 0.25 * std::log2(0.25));
  const double a[] = {1, 1}, b[] = {1, 0}, c[] = {0, 1};
  n.check(std::abs(eval::jsd(a, b) - (h_mix - 0.5)) < tol, "jsd [1,1] vs [1,0]");
  n.check(std::abs(eval::jsd(a, a)) < tol, "jsd identical");
  n.check(std::abs(eval::jsd(b, c) - 1.0) < tol, "jsd disjoint");
  const double s3[] = {0.9, 0.8, 0.1};
  const std::uint8_t y3[] = {1, 0, 1};
  n.check(std::abs(eval::auroc(s3, y3) - 0.5) < tol, "auroc hand case");

  CounterRng rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(100);
    std::vector<std::uint8_t> y(100);
    for (std::size_t i = 0; i < 100; ++i) {
      s[i] = std::round(rng.uniform() * 20.0) / 20.0;  // plenty of ties
      y[i] = rng.bernoulli(0.3);
    }
    y[0] = 1;
    y[1] = 0;
    double good = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < 100; ++i)
      for (std::size_t j = 0; j < 100; ++j)
        if (y[i] && !y[j]) {
          pairs += 1.0;
          good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
    worst = std::max(worst, std::abs(eval::auroc(s, y) - good / pairs));
  }
  n.say("auroc vs pair counting over 50x100 samples: max diff %.2g", worst);
  n.check(worst < tol, "auroc brute force");
  return n.done();
}

// ---- 4
Outcome imputation_efficacy() {
  Notes n;
  corpus::CohortConfig cc;
  cc.patients = 200;
  cc.coupling = 1.0;
  auto cohort = corpus::generate_cohort(cc, 1);
  auto split = corpus::split_cohort(cohort, 1);
  diffusion::DiffusionConfig dc;
  dc.denoiser.dim = 32;
  dc.lr = 3e-3;
  dc.epochs = 120;
  dc.seed = 1;
  const auto start = Clock::now();
  auto model = diffusion::train_diffusion(split.train, dc).model;
  const double train_s = since(start);
  n.say("trained %zu epochs in %.0f s", dc.epochs, train_s);
  n.check(train_s < 600.0, "training within 10 min");
  for (std::size_t view = 0; view < corpus::kViewCount; ++view) {
    auto masked = split.test;
    for (auto& r : masked.records)
      for (auto& v : r.visits) {
        v.observed[view] = false;
        v.codes[view].clear();
      }
    auto imputed = diffusion::impute_cohort(masked, model, {0.5, 20, 3});
    auto q = eval::imputation_quality(imputed, split.test).views[view];
    auto rq = eval::imputation_quality(eval::random_imputation(masked, split.test, 7), split.test).views[view];
    const char* key = corpus::view_key(corpus::kViews[view]).data();
    n.say("view %s recall %.3f vs random %.3f (%.1fx), jsd %.3f vs %.3f", key, q.recall, rq.recall,
          q.recall / rq.recall, q.jsd, rq.jsd);
    n.check(q.recall >= 5.0 * rq.recall, std::string("recall ratio ") + key);
    n.check(q.jsd < rq.jsd, std::string("jsd ") + key);
  }
  return n.done();
}

// ---- 5
double phenotype_jaccard(const corpus::Cohort& train, const corpus::Cohort& test, std::uint64_t seed) {
  predictor::PredictorConfig pc;
  pc.lr = 3e-3;
  pc.epochs = 40;
  pc.eta = 1e-3;
  pc.seed = seed;
  auto model = predictor::train_predictor(train, pc).model;
  auto preds = predictor::predict_cohort(model, test);
  return eval::task_metrics(preds, predictor::Task::phe, test.n_phenotypes)["jaccard"].get<double>();
}

Outcome downstream_gain() {
  Notes n;
  corpus::CohortConfig cc;
  cc.patients = 200;
  auto cohort = corpus::generate_cohort(cc, 1);
  auto masked = corpus::apply_missingness(cohort, 0.3, 2);
  auto split = corpus::split_cohort(masked, 1);
  diffusion::DiffusionConfig dc;
  dc.lr = 3e-3;
  dc.epochs = 400;
  dc.seed = 1;
  auto model = diffusion::train_diffusion(split.train, dc).model;
  const diffusion::ImputeOptions opt{0.5, 20, 3};
  auto train_imp = diffusion::impute_cohort(split.train, model, opt);
  auto test_imp = diffusion::impute_cohort(split.test, model, opt);
  double zero = 0.0, imp = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    const double z = phenotype_jaccard(split.train, split.test, seed);
    const double i = phenotype_jaccard(train_imp, test_imp, seed);
    zero += z / 3.0;
    imp += i / 3.0;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%.3f/%.3f", per_seed.empty() ? "" : " ", i, z);
    per_seed += buf;
  }
  n.say("phenotype jaccard imputed %.4f vs zero-pad %.4f (seeds 1-3 imputed/zero: %s)", imp, zero, per_seed.c_str());
  n.check(imp > zero, "imputed > zero-pad");
  return n.done();
}

// ---- 6
Outcome view_laziness() {
  Notes n;
  corpus::CohortConfig cc;
  cc.patients = 200;
  cc.coupling = 0.0;  // procedures and medications carry no signal
  auto cohort = corpus::generate_cohort(cc, 1);
  auto split = corpus::split_cohort(cohort, 1);
  std::vector<const corpus::PatientRecord*> ptrs;
  for (const auto& r : split.test.records) ptrs.push_back(&r);
  bool simplex = true;
  double worst_sum = 0.0, min_component = 1.0;
  auto on_simplex = [&](const std::array<double, 3>& w) {
    const double sum = w[0] + w[1] + w[2];
    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    min_component = std::min({min_component, w[0], w[1], w[2]});
    simplex &= std::abs(sum - 1.0) <= 1e-12 && w[0] > 0.0 && w[1] > 0.0 && w[2] > 0.0;
  };
  for (std::uint64_t seed : {1, 2, 3}) {
    std::array<double, 2> spread{};
    for (int e = 0; e < 2; ++e) {
      predictor::PredictorConfig pc;
      pc.lr = 3e-3;
      pc.epochs = 30;
      pc.eta = e == 0 ? 0.0 : 1e-3;
      pc.seed = seed;
      auto tr = predictor::train_predictor(split.train, pc,
                                           [&](const predictor::PredictorModel& m, const predictor::PredictorEpoch& h) {
                                             on_simplex(h.n);
                                             on_simplex(m.weights());
                                           });
      spread[e] = eval::contribution_spread(eval::gradient_contribution(tr.model, ptrs));
    }
    n.say("seed %lu spread eta=1e-3 %.4f vs eta=0 %.4f", static_cast<unsigned long>(seed), spread[1], spread[0]);
    n.check(spread[1] < spread[0], "spread lower with eta at seed " + std::to_string(seed));
  }
  n.say("simplex: max |sum-1| %.2g, min component %.4f", worst_sum, min_component);
  n.check(simplex, "n on the simplex every epoch");
  return n.done();
}

// ---- 7
std::map<std::string, std::string> run_pipeline(const fs::path& w) {
  auto go = [](std::vector<std::string> args) {
    std::ostringstream out, err;
    if (cli::run(args, out, err) != 0) throw Error("pipeline step failed: " + args.front() + ": " + err.str());
  };
  auto p = [&](const char* name) { return (w / name).string(); };
  go({"gen-data", "--patients", "40", "--seed", "11", "--missing-rate", "0.3", "--split", "--out", p("c.jsonl")});
  go({"-q", "train-diffusion", "--train", p("c.train.complete.jsonl"), "--out", p("dm"), "--dim", "8", "--steps", "100",
      "--prototypes", "3", "--epochs", "2", "--seed", "4"});
  go({"impute", "--cohort", p("c.train.jsonl"), "--model", p("dm"), "--out", p("i.train.jsonl"), "--jobs", "2"});
  go({"impute", "--cohort", p("c.test.jsonl"), "--model", p("dm"), "--out", p("i.test.jsonl"), "--jobs", "3"});
  go({"-q", "train-predictor", "--train", p("i.train.jsonl"), "--out", p("pm"), "--dim", "8", "--epochs", "2",
      "--seed", "5"});
  go({"evaluate", "--model", p("pm"), "--cohort", p("i.test.jsonl"), "--truth", p("c.test.complete.jsonl"), "--out",
      p("ev"), "--jobs", "2"});
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(w)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    // run manifests carry paths and wall-clock timings
    if (name.ends_with(".manifest.json") && name != "manifest.json") continue;
    out[fs::relative(e.path(), w).string()] = git_blob_sha1_file(e.path());
  }
  return out;
}

Outcome determinism() {
  Notes n;
  const auto base = fs::temp_directory_path() / ("mvdiff_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(base);
  auto a = run_pipeline(base / "a");
  auto b = run_pipeline(base / "b");
  std::size_t differ = 0;
  for (const auto& [k, v] : a)
    if (!b.count(k) || b[k] != v) ++differ;
  n.say("%zu artifacts, %zu differ", a.size(), differ + (a.size() != b.size()));
  n.check(differ == 0 && a.size() == b.size() && a.size() > 20, "bit-identical artifacts");
  fs::remove_all(base);
  return n.done();
}

// ---- 8
Outcome group_bins() {
  Notes n;
  using corpus::MissingGroup;
  struct Case {
    std::size_t missing, total;
    MissingGroup want;
  };
  const Case cases[] = {
      {0, 6, MissingGroup::G4},  {1, 6, MissingGroup::G4},   {2, 6, MissingGroup::G3},  {3, 6, MissingGroup::G2},
      {4, 6, MissingGroup::G1},  {0, 3, MissingGroup::G4},   {1, 3, MissingGroup::G3},  {2, 3, MissingGroup::G1},
      {2, 12, MissingGroup::G4}, {4, 12, MissingGroup::G3},  {6, 12, MissingGroup::G2}, {8, 12, MissingGroup::G1},
      {3, 17, MissingGroup::G3}, {5, 15, MissingGroup::G3},  {7, 14, MissingGroup::G2}, {10, 15, MissingGroup::G1},
      {1, 7, MissingGroup::G4},  {6, 17, MissingGroup::G2},  {9, 17, MissingGroup::G1}, {20, 120, MissingGroup::G4},
      {21, 120, MissingGroup::G3}, {41, 120, MissingGroup::G2}, {61, 120, MissingGroup::G1}};
  std::size_t ok = 0;
  for (const auto& c : cases) {
    const bool good = corpus::missing_group_of(c.missing, c.total) == c.want;
    ok += good;
    n.check(good, std::to_string(c.missing) + "/" + std::to_string(c.total));
  }
  // Patient level: six visits of three views with 3, 6, 9 and 12 missing views.
  for (std::size_t missing : {0u, 3u, 6u, 9u, 12u}) {
    corpus::PatientRecord p;
    p.visits.resize(6);
    std::size_t left = missing;
    for (auto& v : p.visits)
      for (std::size_t k = 0; k < 2 && left > 0; ++k, --left) v.observed[k] = false;
    const auto want = corpus::missing_group_of(missing, 18);
    n.check(corpus::missing_group_of(p) == want, "patient " + std::to_string(missing) + "/18");
  }
  n.say("%zu/%zu boundary ratios", ok, std::size(cases));
  return n.done();
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"numerics gradient suite", numerics_suite},
      {"diffusion algebra", diffusion_algebra},
      {"metric oracles", metric_oracles},
      {"synthetic imputation efficacy", imputation_efficacy},
      {"downstream gain over zero padding", downstream_gain},
      {"view-laziness mitigation", view_laziness},
      {"pipeline determinism", determinism},
      {"group bin boundaries", group_bins},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all &= o.pass;
    std::printf("criterion %d %s: %s (%s) [%.1f s]\n", id, criteria[i].first, o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), since(start));
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
