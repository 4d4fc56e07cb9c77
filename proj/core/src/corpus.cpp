#include "mvdiff/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mvdiff/error.hpp"
#include "mvdiff/rng.hpp"

namespace mvdiff::corpus {

using nlohmann::json;

std::string_view view_key(View v) noexcept {
  switch (v) {
    case View::diagnosis: return "d";
    case View::procedure: return "p";
    case View::medication: return "m";
  }
  return "?";
}

View view_from_key(std::string_view key) {
  if (key == "d") return View::diagnosis;
  if (key == "p") return View::procedure;
  if (key == "m") return View::medication;
  throw ValidationError("unknown view key '" + std::string(key) + "'");
}

CodeVocab CodeVocab::make(View view, std::size_t size) {
  CodeVocab v;
  v.view = view;
  v.size = size;
  v.names.reserve(size);
  for (std::size_t i = 0; i < size; ++i) v.names.push_back(std::string(view_key(view)) + std::to_string(i));
  return v;
}

std::size_t Visit::observed_count() const noexcept {
  return static_cast<std::size_t>(std::count(observed.begin(), observed.end(), true));
}

std::size_t Visit::originally_missing_count() const noexcept {
  std::size_t n = 0;
  for (std::size_t k = 0; k < kViewCount; ++k) n += originally_missing(k) ? 1 : 0;
  return n;
}

std::size_t Cohort::visit_count() const noexcept {
  std::size_t n = 0;
  for (const auto& r : records) n += r.visits.size();
  return n;
}

void CohortConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(field, "must be positive");
  };
  auto probability = [](double v, const char* field) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(field, "must lie in [0, 1]");
  };
  positive(min_visits, "min_visits");
  positive(max_visits, "max_visits");
  if (min_visits > max_visits) throw ConfigError("min_visits", "exceeds max_visits");
  positive(vocab_sizes[0], "vocab_sizes[0]");
  positive(vocab_sizes[1], "vocab_sizes[1]");
  positive(vocab_sizes[2], "vocab_sizes[2]");
  positive(phenotypes, "phenotypes");
  positive(latent_classes, "latent_classes");
  positive(template_size, "template_size");
  if (template_size > vocab_sizes[0]) throw ConfigError("template_size", "exceeds the diagnosis vocabulary");
  positive(min_codes, "min_codes");
  positive(max_codes, "max_codes");
  if (min_codes > max_codes) throw ConfigError("min_codes", "exceeds max_codes");
  probability(template_fidelity, "template_fidelity");
  probability(coupling, "coupling");
  probability(class_persistence, "class_persistence");
  probability(label_noise, "label_noise");
}

json CohortConfig::to_json() const {
  return json{{"patients", patients},
              {"min_visits", min_visits},
              {"max_visits", max_visits},
              {"vocab_sizes", vocab_sizes},
              {"phenotypes", phenotypes},
              {"latent_classes", latent_classes},
              {"template_size", template_size},
              {"min_codes", min_codes},
              {"max_codes", max_codes},
              {"template_fidelity", template_fidelity},
              {"coupling", coupling},
              {"class_persistence", class_persistence},
              {"label_noise", label_noise}};
}

CohortConfig CohortConfig::from_json(const json& j) {
  CohortConfig c;
  if (!j.is_object()) throw ConfigError("cohort", "expected an object");
  static const char* known[] = {"patients",  "min_visits", "max_visits",        "vocab_sizes",       "phenotypes",
                                "latent_classes", "template_size", "min_codes", "max_codes", "template_fidelity",
                                "coupling",  "class_persistence", "label_noise"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ConfigError(key, "unknown cohort field");
    }
  }
  auto read = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception&) {
      throw ConfigError(key, "wrong type");
    }
  };
  read("patients", c.patients);
  read("min_visits", c.min_visits);
  read("max_visits", c.max_visits);
  read("vocab_sizes", c.vocab_sizes);
  read("phenotypes", c.phenotypes);
  read("latent_classes", c.latent_classes);
  read("template_size", c.template_size);
  read("min_codes", c.min_codes);
  read("max_codes", c.max_codes);
  read("template_fidelity", c.template_fidelity);
  read("coupling", c.coupling);
  read("class_persistence", c.class_persistence);
  read("label_noise", c.label_noise);
  return c;
}

namespace {

// Stream ids for the generator's independent sub-streams.
enum : std::uint64_t { kMapStream = 1, kClassStream = 2, kPatientStream = 3, kMissingStream = 4, kSplitStream = 5 };

std::vector<std::uint32_t> balanced_map(std::size_t from, std::size_t to, CounterRng& rng) {
  std::vector<std::uint32_t> out(from);
  for (std::size_t i = 0; i < from; ++i) out[i] = static_cast<std::uint32_t>(i % to);
  rng.shuffle(out);
  return out;
}

struct LatentClass {
  std::vector<std::uint32_t> diagnosis_template;
  std::vector<bool> phenotypes;
  std::uint32_t los = 0;
};

void normalize(std::vector<std::uint32_t>& codes) {
  std::sort(codes.begin(), codes.end());
  codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
}

std::string patient_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "P%06zu", i);
  return buf;
}

}  // namespace

PlantedMaps planted_maps(const CohortConfig& config, std::uint64_t seed) {
  config.validate();
  CounterRng rng(seed, kMapStream);
  PlantedMaps maps;
  maps.procedure_of = balanced_map(config.vocab_sizes[0], config.vocab_sizes[1], rng);
  maps.medication_of = balanced_map(config.vocab_sizes[0], config.vocab_sizes[2], rng);
  return maps;
}

Cohort generate_cohort(const CohortConfig& config, std::uint64_t seed) {
  config.validate();
  const PlantedMaps maps = planted_maps(config, seed);
  const std::size_t vd = config.vocab_sizes[0];

  CounterRng class_rng(seed, kClassStream);
  std::vector<LatentClass> classes(config.latent_classes);
  for (auto& cls : classes) {
    for (auto idx : class_rng.sample_without_replacement(vd, config.template_size)) {
      cls.diagnosis_template.push_back(static_cast<std::uint32_t>(idx));
    }
    cls.phenotypes.assign(config.phenotypes, false);
    const std::size_t n_phe = std::min<std::size_t>(config.phenotypes, 1 + class_rng.uniform_index(3));
    for (auto g : class_rng.sample_without_replacement(config.phenotypes, n_phe)) cls.phenotypes[g] = true;
    cls.los = static_cast<std::uint32_t>(class_rng.uniform_index(kLosClasses));
  }

  Cohort cohort;
  for (auto v : kViews) cohort.vocabs[index_of(v)] = CodeVocab::make(v, config.vocab_sizes[index_of(v)]);
  cohort.n_phenotypes = config.phenotypes;
  cohort.seed = seed;
  cohort.config = config.to_json();
  cohort.records.reserve(config.patients);

  for (std::size_t i = 0; i < config.patients; ++i) {
    CounterRng rng = CounterRng(seed, kPatientStream).fork(i);
    PatientRecord rec;
    rec.id = patient_id(i);
    const std::size_t n_visits =
        config.min_visits + rng.uniform_index(config.max_visits - config.min_visits + 1);
    const std::size_t base = rng.uniform_index(config.latent_classes);
    for (std::size_t j = 0; j < n_visits; ++j) {
      const std::size_t cls_id =
          rng.bernoulli(config.class_persistence) ? base : rng.uniform_index(config.latent_classes);
      const LatentClass& cls = classes[cls_id];
      Visit visit;

      auto& d = visit.codes[0];
      const std::size_t k = config.min_codes + rng.uniform_index(config.max_codes - config.min_codes + 1);
      for (std::size_t c = 0; c < k; ++c) {
        if (rng.bernoulli(config.template_fidelity)) {
          d.push_back(cls.diagnosis_template[rng.uniform_index(cls.diagnosis_template.size())]);
        } else {
          d.push_back(static_cast<std::uint32_t>(rng.uniform_index(vd)));
        }
      }
      normalize(d);

      for (std::size_t c : d) {
        auto draw = [&](const std::vector<std::uint32_t>& image, std::size_t vocab) {
          return rng.bernoulli(config.coupling) ? image[c] : static_cast<std::uint32_t>(rng.uniform_index(vocab));
        };
        visit.codes[1].push_back(draw(maps.procedure_of, config.vocab_sizes[1]));
        visit.codes[2].push_back(draw(maps.medication_of, config.vocab_sizes[2]));
      }
      normalize(visit.codes[1]);
      normalize(visit.codes[2]);

      for (std::size_t g = 0; g < config.phenotypes; ++g) {
        const bool flip = rng.bernoulli(config.label_noise);
        if (cls.phenotypes[g] != flip) visit.phenotypes.push_back(static_cast<std::uint32_t>(g));
      }
      visit.los_class = rng.bernoulli(config.label_noise) ? static_cast<std::uint32_t>(rng.uniform_index(kLosClasses))
                                                          : cls.los;
      rec.visits.push_back(std::move(visit));
    }
    cohort.records.push_back(std::move(rec));
  }
  return cohort;
}

Cohort apply_missingness(const Cohort& cohort, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("missing rate must lie in [0, 1)");
  Cohort out = cohort;
  if (rate == 0.0) return out;
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    CounterRng rng = CounterRng(seed, kMissingStream).fork(i);
    for (auto& visit : out.records[i].visits) {
      std::vector<std::size_t> present;
      for (std::size_t k = 0; k < kViewCount; ++k)
        if (visit.observed[k]) present.push_back(k);
      std::array<bool, kViewCount> drop{};
      bool any_left = false;
      for (auto k : present) {
        drop[k] = rng.bernoulli(rate);
        any_left = any_left || !drop[k];
      }
      if (!any_left && !present.empty()) drop[present[rng.uniform_index(present.size())]] = false;
      for (auto k : present) {
        if (!drop[k]) continue;
        visit.observed[k] = false;
        visit.imputed[k] = false;
        visit.codes[k].clear();
      }
    }
  }
  return out;
}

CohortSplit split_cohort(const Cohort& cohort, std::uint64_t seed) {
  const std::size_t n = cohort.records.size();
  if (n < 5) throw DomainError("split needs at least 5 patients, got " + std::to_string(n));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  CounterRng rng(seed, kSplitStream);
  rng.shuffle(order);

  const std::size_t n_train = 6 * n / 10;
  const std::size_t n_val = 2 * n / 10;
  auto take = [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
    std::sort(idx.begin(), idx.end());
    Cohort part = cohort;
    part.records.clear();
    for (auto i : idx) part.records.push_back(cohort.records[i]);
    return part;
  };
  return {take(0, n_train), take(n_train, n_train + n_val), take(n_train + n_val, n)};
}

namespace {

std::string where(const PatientRecord& rec, std::size_t visit) {
  return "patient " + rec.id + " visit " + std::to_string(visit);
}

}  // namespace

void validate_cohort(const Cohort& cohort) {
  for (const auto& rec : cohort.records) {
    if (rec.visits.empty()) throw ValidationError("patient " + rec.id + " has no visits");
    for (std::size_t j = 0; j < rec.visits.size(); ++j) {
      const Visit& v = rec.visits[j];
      if (v.observed_count() == 0) throw ValidationError(where(rec, j) + ": no observed view");
      for (std::size_t k = 0; k < kViewCount; ++k) {
        const auto key = std::string(view_key(kViews[k]));
        if (v.observed[k] && v.codes[k].empty()) {
          throw ValidationError(where(rec, j) + ": observed view " + key + " has no codes");
        }
        if (!v.observed[k] && !v.codes[k].empty()) {
          throw ValidationError(where(rec, j) + ": missing view " + key + " carries codes");
        }
        if (v.imputed[k] && !v.observed[k]) {
          throw ValidationError(where(rec, j) + ": imputed view " + key + " is not filled");
        }
        for (auto c : v.codes[k]) {
          if (c >= cohort.vocabs[k].size) {
            throw ValidationError(where(rec, j) + ": view " + key + " code " + std::to_string(c) +
                                  " out of range (vocab size " + std::to_string(cohort.vocabs[k].size) + ")");
          }
        }
      }
      for (auto g : v.phenotypes) {
        if (g >= cohort.n_phenotypes) {
          throw ValidationError(where(rec, j) + ": phenotype " + std::to_string(g) + " out of range");
        }
      }
      if (v.los_class >= kLosClasses) {
        throw ValidationError(where(rec, j) + ": los class " + std::to_string(v.los_class) + " out of range");
      }
    }
  }
}

std::string serialize_cohort(const Cohort& cohort) {
  std::ostringstream out;
  json header{{"cohort_schema", kCohortSchema},
              {"vocab_sizes", {cohort.vocabs[0].size, cohort.vocabs[1].size, cohort.vocabs[2].size}},
              {"n_phenotypes", cohort.n_phenotypes},
              {"seed", cohort.seed}};
  if (!cohort.config.empty()) header["config"] = cohort.config;
  if (cohort.imputation_annotated) header["imputed"] = true;
  out << header.dump() << '\n';
  for (const auto& rec : cohort.records) {
    json visits = json::array();
    for (const auto& v : rec.visits) {
      json jv{{"d", v.codes[0]}, {"p", v.codes[1]}, {"m", v.codes[2]},
              {"obs", v.observed}, {"phe", v.phenotypes}, {"los", v.los_class}};
      if (cohort.imputation_annotated) {
        json imputed = json::array();
        for (std::size_t k = 0; k < kViewCount; ++k)
          if (v.imputed[k]) imputed.push_back(view_key(kViews[k]));
        jv["imputed"] = std::move(imputed);
      }
      visits.push_back(std::move(jv));
    }
    out << json{{"id", rec.id}, {"visits", std::move(visits)}}.dump() << '\n';
  }
  return out.str();
}

void persist_cohort(const Cohort& cohort, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << serialize_cohort(cohort);
  if (!out) throw Error("short write to " + path.string());
}

namespace {

template <typename T>
T field(const json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) throw ParseError(line, std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParseError(line, std::string("field '") + key + "' has the wrong type");
  }
}

}  // namespace

Cohort parse_cohort(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  Cohort cohort;
  bool have_header = false;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line_no, "expected a JSON object");

    if (!have_header) {
      if (!j.contains("cohort_schema")) throw ParseError(line_no, "missing cohort_schema header");
      if (field<int>(j, "cohort_schema", line_no) != kCohortSchema) {
        throw ParseError(line_no, "unsupported cohort_schema");
      }
      auto sizes = field<std::vector<std::size_t>>(j, "vocab_sizes", line_no);
      if (sizes.size() != kViewCount) throw ParseError(line_no, "vocab_sizes must have 3 entries");
      for (auto v : kViews) {
        if (sizes[index_of(v)] == 0) throw ParseError(line_no, "vocab size must be positive");
        cohort.vocabs[index_of(v)] = CodeVocab::make(v, sizes[index_of(v)]);
      }
      cohort.n_phenotypes = field<std::size_t>(j, "n_phenotypes", line_no);
      if (cohort.n_phenotypes == 0) throw ParseError(line_no, "n_phenotypes must be positive");
      cohort.seed = field<std::uint64_t>(j, "seed", line_no);
      cohort.config = j.value("config", json::object());
      cohort.imputation_annotated = j.value("imputed", false);
      have_header = true;
      continue;
    }

    PatientRecord rec;
    const json& id = j.contains("id") ? j.at("id") : throw ParseError(line_no, "missing field 'id'");
    rec.id = id.is_string() ? id.get<std::string>() : id.dump();
    const json& visits = j.contains("visits") ? j.at("visits") : throw ParseError(line_no, "missing field 'visits'");
    if (!visits.is_array()) throw ParseError(line_no, "field 'visits' must be an array");
    for (const auto& jv : visits) {
      if (!jv.is_object()) throw ParseError(line_no, "visit must be an object");
      Visit v;
      for (auto view : kViews) {
        const auto k = index_of(view);
        v.codes[k] = field<std::vector<std::uint32_t>>(jv, std::string(view_key(view)).c_str(), line_no);
        normalize(v.codes[k]);
      }
      auto obs = field<std::vector<bool>>(jv, "obs", line_no);
      if (obs.size() != kViewCount) throw ParseError(line_no, "obs must have 3 entries");
      for (std::size_t k = 0; k < kViewCount; ++k) v.observed[k] = obs[k];
      v.phenotypes = field<std::vector<std::uint32_t>>(jv, "phe", line_no);
      normalize(v.phenotypes);
      v.los_class = field<std::uint32_t>(jv, "los", line_no);
      if (jv.contains("imputed")) {
        for (const auto& key : field<std::vector<std::string>>(jv, "imputed", line_no)) {
          try {
            v.imputed[index_of(view_from_key(key))] = true;
          } catch (const ValidationError& e) {
            throw ParseError(line_no, e.what());
          }
        }
      }
      rec.visits.push_back(std::move(v));
    }
    cohort.records.push_back(std::move(rec));
  }
  if (!have_header) throw ParseError(std::max<std::size_t>(line_no, 1), "missing cohort_schema header");
  validate_cohort(cohort);
  return cohort;
}

Cohort load_cohort(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_cohort(buf.str());
}

std::string_view group_name(MissingGroup g) noexcept {
  switch (g) {
    case MissingGroup::G1: return "G1";
    case MissingGroup::G2: return "G2";
    case MissingGroup::G3: return "G3";
    case MissingGroup::G4: return "G4";
  }
  return "?";
}

MissingGroup missing_group_of(std::size_t missing, std::size_t total) {
  if (total == 0) throw DomainError("missing ratio over zero views");
  if (6 * missing <= total) return MissingGroup::G4;
  if (3 * missing <= total) return MissingGroup::G3;
  if (2 * missing <= total) return MissingGroup::G2;
  return MissingGroup::G1;
}

MissingGroup missing_group_of_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw DomainError("missing ratio must lie in [0, 1]");
  if (ratio <= 1.0 / 6.0) return MissingGroup::G4;
  if (ratio <= 1.0 / 3.0) return MissingGroup::G3;
  if (ratio <= 0.5) return MissingGroup::G2;
  return MissingGroup::G1;
}

MissingGroup missing_group_of(const Visit& visit) {
  return missing_group_of(visit.originally_missing_count(), kViewCount);
}

MissingGroup missing_group_of(const PatientRecord& patient) {
  std::size_t missing = 0;
  for (const auto& v : patient.visits) missing += v.originally_missing_count();
  return missing_group_of(missing, kViewCount * patient.visits.size());
}

}  // namespace mvdiff::corpus
