#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "mvdiff/corpus.hpp"
#include "mvdiff/error.hpp"

using namespace mvdiff;
using namespace mvdiff::corpus;

namespace {

double entropy(const std::map<std::uint64_t, double>& counts, double total) {
  double h = 0;
  for (const auto& [k, c] : counts)
    if (c > 0) h -= c / total * std::log(c / total);
  return h;
}

// Mutual information between single diagnosis codes and single medication
// codes, counting every (d, m) pair within a visit.
double diag_med_information(const Cohort& c) {
  std::map<std::uint64_t, double> joint, pd, pm;
  double total = 0;
  for (const auto& r : c.records)
    for (const auto& v : r.visits)
      for (auto d : v.codes[0])
        for (auto m : v.codes[2]) {
          joint[(std::uint64_t{d} << 32) | m] += 1;
          pd[d] += 1;
          pm[m] += 1;
          total += 1;
        }
  return entropy(pd, total) + entropy(pm, total) - entropy(joint, total);
}

}  // namespace

TEST_CASE("generation is deterministic and valid") {
  CohortConfig cfg;
  cfg.patients = 40;
  auto a = generate_cohort(cfg, 7);
  auto b = generate_cohort(cfg, 7);
  CHECK(a == b);
  CHECK(serialize_cohort(a) == serialize_cohort(b));
  CHECK_NOTHROW(validate_cohort(a));
  CHECK(generate_cohort(cfg, 8) != a);
  for (const auto& r : a.records) {
    CHECK(r.visits.size() >= cfg.min_visits);
    CHECK(r.visits.size() <= cfg.max_visits);
    for (const auto& v : r.visits) CHECK(v.complete());
  }
}

TEST_CASE("zero patients gives an empty cohort with vocabularies") {
  CohortConfig cfg;
  cfg.patients = 0;
  auto c = generate_cohort(cfg, 1);
  CHECK(c.records.empty());
  CHECK(c.vocabs[0].size == 40);
  CHECK(c.vocabs[1].names.size() == 30);
}

TEST_CASE("invalid config names the field") {
  CohortConfig cfg;
  cfg.coupling = 1.5;
  try {
    generate_cohort(cfg, 1);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "coupling");
  }
  cfg = {};
  cfg.vocab_sizes[1] = 0;
  CHECK_THROWS_AS(generate_cohort(cfg, 1), ConfigError);
  CHECK_THROWS_AS(CohortConfig::from_json({{"bogus", 1}}), ConfigError);
}

TEST_CASE("config json round trip") {
  CohortConfig cfg;
  cfg.coupling = 0.37;
  cfg.patients = 9;
  CHECK(CohortConfig::from_json(cfg.to_json()) == cfg);
}

TEST_CASE("planted pairs co-occur with their diagnosis at coupling 1") {
  CohortConfig cfg;
  cfg.patients = 50;
  cfg.coupling = 1.0;
  auto c = generate_cohort(cfg, 3);
  auto maps = planted_maps(cfg, 3);
  std::map<std::uint32_t, int> diag_count, pair_count;
  for (const auto& r : c.records)
    for (const auto& v : r.visits)
      for (auto d : v.codes[0]) {
        ++diag_count[d];
        const auto& meds = v.codes[2];
        if (std::find(meds.begin(), meds.end(), maps.medication_of[d]) != meds.end()) ++pair_count[d];
      }
  REQUIRE_FALSE(diag_count.empty());
  for (const auto& [d, n] : diag_count) CHECK(pair_count[d] == n);
}

TEST_CASE("coupling raises diagnosis-medication mutual information") {
  CohortConfig cfg;
  cfg.patients = 400;
  cfg.coupling = 1.0;
  auto coupled = generate_cohort(cfg, 5);
  REQUIRE(coupled.visit_count() >= 1000);
  cfg.coupling = 0.0;
  auto noise = generate_cohort(cfg, 5);
  CHECK(diag_med_information(coupled) > diag_med_information(noise));
}

TEST_CASE("missingness") {
  CohortConfig cfg;
  cfg.patients = 200;
  auto c = generate_cohort(cfg, 1);

  SUBCASE("rate 0 is a no-op") { CHECK(apply_missingness(c, 0.0, 3) == c); }

  SUBCASE("rate >= 1 is rejected") {
    CHECK_THROWS_AS(apply_missingness(c, 1.0, 3), DomainError);
    CHECK_THROWS_AS(apply_missingness(c, -0.1, 3), DomainError);
  }

  SUBCASE("every visit keeps a view and missing views are empty") {
    for (double rate : {0.3, 0.5, 0.9, 0.999}) {
      auto m = apply_missingness(c, rate, 11);
      CHECK_NOTHROW(validate_cohort(m));
      for (const auto& r : m.records)
        for (const auto& v : r.visits) {
          CHECK(v.observed_count() >= 1);
          for (std::size_t k = 0; k < kViewCount; ++k)
            if (!v.observed[k]) CHECK(v.codes[k].empty());
        }
    }
  }

  SUBCASE("rate 0.5 drops about half the views") {
    CohortConfig big = cfg;
    big.patients = 1200;
    auto m = apply_missingness(generate_cohort(big, 2), 0.5, 4);
    std::size_t missing = 0, total = 0;
    for (const auto& r : m.records)
      for (const auto& v : r.visits) {
        missing += kViewCount - v.observed_count();
        total += kViewCount;
      }
    REQUIRE(total >= 10000);
    const double frac = static_cast<double>(missing) / static_cast<double>(total);
    CHECK(frac >= 0.45);
    CHECK(frac <= 0.55);
  }

  SUBCASE("deterministic given seed") { CHECK(apply_missingness(c, 0.4, 9) == apply_missingness(c, 0.4, 9)); }
}

TEST_CASE("split sizes, partition and determinism") {
  CohortConfig cfg;
  cfg.patients = 10;
  auto c = generate_cohort(cfg, 1);
  auto s = split_cohort(c, 4);
  CHECK(s.train.records.size() == 6);
  CHECK(s.val.records.size() == 2);
  CHECK(s.test.records.size() == 2);

  for (std::size_t n : {5u, 7u, 13u, 101u}) {
    cfg.patients = n;
    auto cc = generate_cohort(cfg, 2);
    auto sp = split_cohort(cc, 9);
    CHECK(sp.train.records.size() == 6 * n / 10);
    CHECK(sp.val.records.size() == 2 * n / 10);
    std::multiset<std::string> ids;
    for (const Cohort* part : {&sp.train, &sp.val, &sp.test})
      for (const auto& r : part->records) ids.insert(r.id);
    std::multiset<std::string> all;
    for (const auto& r : cc.records) all.insert(r.id);
    CHECK(ids == all);
    auto again = split_cohort(cc, 9);
    CHECK(again.train == sp.train);
    CHECK(again.test == sp.test);
  }

  cfg.patients = 4;
  CHECK_THROWS_AS(split_cohort(generate_cohort(cfg, 1), 1), DomainError);
}

TEST_CASE("jsonl round trip") {
  CohortConfig cfg;
  cfg.patients = 30;
  auto c = apply_missingness(generate_cohort(cfg, 6), 0.4, 2);
  CHECK(parse_cohort(serialize_cohort(c)) == c);

  auto path = std::filesystem::temp_directory_path() / "mvdiff_corpus_rt.jsonl";
  persist_cohort(c, path);
  CHECK(load_cohort(path) == c);
  std::filesystem::remove(path);

  c.imputation_annotated = true;
  c.records[0].visits[0].imputed[1] = true;
  c.records[0].visits[0].observed[1] = true;
  if (c.records[0].visits[0].codes[1].empty()) c.records[0].visits[0].codes[1] = {3};
  CHECK(parse_cohort(serialize_cohort(c)) == c);
}

TEST_CASE("jsonl errors") {
  const std::string header = R"({"cohort_schema":1,"vocab_sizes":[5,5,5],"n_phenotypes":3,"seed":0})";

  SUBCASE("header only") {
    auto c = parse_cohort(header + "\n");
    CHECK(c.records.empty());
    CHECK(c.vocabs[2].size == 5);
  }
  SUBCASE("empty file") { CHECK_THROWS_AS(parse_cohort(""), ParseError); }
  SUBCASE("malformed line reports its number") {
    try {
      parse_cohort(header + "\n{not json\n");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
    }
  }
  SUBCASE("code overflow names the visit") {
    const std::string line =
        R"({"id":"X1","visits":[{"d":[1],"p":[2],"m":[3],"obs":[true,true,true],"phe":[],"los":0},)"
        R"({"d":[1],"p":[7],"m":[3],"obs":[true,true,true],"phe":[],"los":0}]})";
    try {
      parse_cohort(header + "\n" + line + "\n");
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("X1") != std::string::npos);
      CHECK(msg.find("visit 1") != std::string::npos);
    }
  }
  SUBCASE("all views missing is invalid") {
    const std::string line =
        R"({"id":"X","visits":[{"d":[],"p":[],"m":[],"obs":[false,false,false],"phe":[],"los":0}]})";
    CHECK_THROWS_AS(parse_cohort(header + "\n" + line + "\n"), ValidationError);
  }
  SUBCASE("observed empty view is invalid") {
    const std::string line =
        R"({"id":"X","visits":[{"d":[],"p":[1],"m":[1],"obs":[true,true,true],"phe":[],"los":0}]})";
    CHECK_THROWS_AS(parse_cohort(header + "\n" + line + "\n"), ValidationError);
  }
}

TEST_CASE("missing-ratio groups at the bin edges") {
  CHECK(missing_group_of(0, 3) == MissingGroup::G4);
  CHECK(missing_group_of(1, 3) == MissingGroup::G3);
  CHECK(missing_group_of(2, 3) == MissingGroup::G1);
  CHECK(missing_group_of(1, 6) == MissingGroup::G4);
  CHECK(missing_group_of(2, 6) == MissingGroup::G3);
  CHECK(missing_group_of(3, 6) == MissingGroup::G2);
  CHECK(missing_group_of(4, 6) == MissingGroup::G1);
  CHECK(missing_group_of_ratio(0.0) == MissingGroup::G4);
  CHECK(missing_group_of_ratio(1.0 / 6.0) == MissingGroup::G4);
  CHECK(missing_group_of_ratio(1.0 / 3.0) == MissingGroup::G3);
  CHECK(missing_group_of_ratio(0.5) == MissingGroup::G2);
  CHECK(missing_group_of_ratio(2.0 / 3.0) == MissingGroup::G1);
  CHECK(missing_group_of_ratio(std::nextafter(1.0 / 6.0, 1.0)) == MissingGroup::G3);
  CHECK(missing_group_of_ratio(std::nextafter(0.5, 1.0)) == MissingGroup::G1);

  Visit v;
  CHECK(missing_group_of(v) == MissingGroup::G4);
  v.observed[2] = false;
  CHECK(missing_group_of(v) == MissingGroup::G3);
  v.observed[2] = true;
  v.imputed[2] = true;
  CHECK(missing_group_of(v) == MissingGroup::G3);
  v.observed[0] = false;
  CHECK(missing_group_of(v) == MissingGroup::G1);
}
