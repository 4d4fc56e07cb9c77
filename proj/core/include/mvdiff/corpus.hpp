#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace mvdiff::corpus {

enum class View : std::uint8_t { diagnosis = 0, procedure = 1, medication = 2 };

inline constexpr std::size_t kViewCount = 3;
inline constexpr std::array<View, kViewCount> kViews = {View::diagnosis, View::procedure, View::medication};
inline constexpr std::size_t kLosClasses = 10;
inline constexpr int kCohortSchema = 1;

constexpr std::size_t index_of(View v) noexcept { return static_cast<std::size_t>(v); }
/// "d", "p" or "m"; the key used in the JSONL format.
std::string_view view_key(View v) noexcept;
View view_from_key(std::string_view key);

struct CodeVocab {
  View view = View::diagnosis;
  std::size_t size = 1;
  std::vector<std::string> names;

  static CodeVocab make(View view, std::size_t size);
  bool operator==(const CodeVocab&) const = default;
};

/// One visit. Code lists are sorted and duplicate-free (set semantics).
struct Visit {
  std::array<std::vector<std::uint32_t>, kViewCount> codes;
  std::array<bool, kViewCount> observed{true, true, true};
  /// Views filled in by imputation (observed is true for them afterwards).
  std::array<bool, kViewCount> imputed{false, false, false};
  std::vector<std::uint32_t> phenotypes;
  std::uint32_t los_class = 0;

  std::size_t observed_count() const noexcept;
  bool complete() const noexcept { return observed_count() == kViewCount; }
  /// Missing before any imputation happened.
  bool originally_missing(std::size_t view) const noexcept { return !observed[view] || imputed[view]; }
  std::size_t originally_missing_count() const noexcept;
  bool operator==(const Visit&) const = default;
};

struct PatientRecord {
  std::string id;
  std::vector<Visit> visits;
  bool operator==(const PatientRecord&) const = default;
};

struct CohortConfig {
  std::size_t patients = 200;
  std::size_t min_visits = 1;
  std::size_t max_visits = 6;
  std::array<std::size_t, kViewCount> vocab_sizes{40, 30, 40};
  std::size_t phenotypes = 12;
  /// Number of latent visit classes.
  std::size_t latent_classes = 8;
  /// Diagnosis template size per latent class.
  std::size_t template_size = 6;
  std::size_t min_codes = 2;
  std::size_t max_codes = 4;
  /// Probability that a diagnosis code comes from the class template.
  double template_fidelity = 0.9;
  /// Probability that a procedure/medication code is the planted image of
  /// its diagnosis code rather than uniform noise.
  double coupling = 1.0;
  /// Probability that a later visit keeps the patient's base latent class.
  double class_persistence = 0.8;
  double label_noise = 0.05;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  static CohortConfig from_json(const nlohmann::json& j);
  bool operator==(const CohortConfig&) const = default;
};

struct Cohort {
  std::array<CodeVocab, kViewCount> vocabs;
  std::size_t n_phenotypes = 1;
  std::vector<PatientRecord> records;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
  /// Whether visits carry the "imputed" annotation on disk.
  bool imputation_annotated = false;

  std::size_t visit_count() const noexcept;
  const CodeVocab& vocab(View v) const noexcept { return vocabs[index_of(v)]; }
  bool operator==(const Cohort&) const = default;
};

/// Planted per-diagnosis images used by the generator; exposed for oracles.
struct PlantedMaps {
  std::vector<std::uint32_t> procedure_of;   // indexed by diagnosis code
  std::vector<std::uint32_t> medication_of;  // indexed by diagnosis code
};

Cohort generate_cohort(const CohortConfig& config, std::uint64_t seed);
PlantedMaps planted_maps(const CohortConfig& config, std::uint64_t seed);

/// Each view of each visit goes missing with probability `rate`; when all
/// three would be lost, one uniformly chosen view is kept.
Cohort apply_missingness(const Cohort& cohort, double rate, std::uint64_t seed);

struct CohortSplit {
  Cohort train;
  Cohort val;
  Cohort test;
};

/// Patient-level 6:2:2 partition; each part keeps the original record order.
CohortSplit split_cohort(const Cohort& cohort, std::uint64_t seed);

/// Invariant check over every visit; throws ValidationError naming the visit.
void validate_cohort(const Cohort& cohort);

void persist_cohort(const Cohort& cohort, const std::filesystem::path& path);
/// Serialized form, identical to the file `persist_cohort` writes.
std::string serialize_cohort(const Cohort& cohort);
Cohort load_cohort(const std::filesystem::path& path);
Cohort parse_cohort(std::string_view text);

enum class MissingGroup { G1, G2, G3, G4 };
std::string_view group_name(MissingGroup g) noexcept;

/// Bins (1/2,2/3] -> G1, (1/3,1/2] -> G2, (1/6,1/3] -> G3, [0,1/6] -> G4,
/// compared exactly in integer arithmetic. Ratios above 2/3 land in G1.
MissingGroup missing_group_of(std::size_t missing, std::size_t total);
MissingGroup missing_group_of_ratio(double ratio);
MissingGroup missing_group_of(const Visit& visit);
/// Ratio over all views of all visits of the patient.
MissingGroup missing_group_of(const PatientRecord& patient);

}  // namespace mvdiff::corpus
