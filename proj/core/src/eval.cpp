#include "mvdiff/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mvdiff/error.hpp"
#include "mvdiff/rng.hpp"

namespace mvdiff::eval {

namespace {

std::size_t intersection_size(const CodeSet& a, const CodeSet& b) {
  std::size_t n = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

void check_labels(std::span<const double> scores, std::span<const std::uint8_t> labels, const char* what) {
  if (scores.size() != labels.size()) throw ShapeError(std::string(what) + ": scores and labels differ in length");
  for (double s : scores)
    if (!std::isfinite(s)) throw DomainError(std::string(what) + ": non-finite score");
}

}  // namespace

double jaccard(const CodeSet& a, const CodeSet& b) {
  if (a.empty() && b.empty()) return 1.0;
  const std::size_t inter = intersection_size(a, b);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

double set_f1(const CodeSet& a, const CodeSet& b) {
  if (a.empty() && b.empty()) return 1.0;
  return 2.0 * static_cast<double>(intersection_size(a, b)) / static_cast<double>(a.size() + b.size());
}

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_labels(scores, labels, "auroc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] < scores[y]; });
  // Twice the rank sum of positives keeps tied half-ranks integral.
  std::uint64_t twice_rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t twice_rank = (i + 1) + j;  // 2 * mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]]) {
        twice_rank_sum += twice_rank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw DomainError("auroc: needs both classes");
  const double u = static_cast<double>(twice_rank_sum - pos * (pos + 1)) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_labels(scores, labels, "average_precision");
  const std::size_t n = scores.size();
  const auto total = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  if (total == 0) throw DomainError("average_precision: needs a positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]]) ++tp;
      else ++fp;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(total);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

namespace {

void check_multilabel(const MultiLabelResult& r) {
  if (r.truth.empty()) throw DomainError("multilabel metrics: empty result");
  if (r.predicted.size() != r.truth.size() || r.scores.size() != r.truth.size()) {
    throw ShapeError("multilabel metrics: per-sample lists differ in length");
  }
  for (std::size_t i = 0; i < r.truth.size(); ++i) {
    if (r.scores[i].size() != r.labels) throw ShapeError("multilabel metrics: score vector width");
    for (auto c : r.truth[i])
      if (c >= r.labels) throw ValidationError("multilabel metrics: label out of range");
    for (auto c : r.predicted[i])
      if (c >= r.labels) throw ValidationError("multilabel metrics: label out of range");
  }
}

struct Macro {
  double auroc = 0.0, auprc = 0.0;
  std::size_t valid = 0;
};

Macro macro_ranking(const MultiLabelResult& r) {
  Macro m;
  const std::size_t n = r.truth.size();
  std::vector<double> col(n);
  std::vector<std::uint8_t> lab(n);
  for (std::size_t l = 0; l < r.labels; ++l) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = r.scores[i][l];
      lab[i] = std::binary_search(r.truth[i].begin(), r.truth[i].end(), static_cast<std::uint32_t>(l)) ? 1 : 0;
      pos += lab[i];
    }
    if (pos == 0 || pos == n) continue;
    m.auroc += auroc(col, lab);
    m.auprc += average_precision(col, lab);
    ++m.valid;
  }
  if (m.valid > 0) {
    m.auroc /= static_cast<double>(m.valid);
    m.auprc /= static_cast<double>(m.valid);
  }
  return m;
}

std::pair<double, double> example_based(const MultiLabelResult& r) {
  double j = 0.0, f = 0.0;
  for (std::size_t i = 0; i < r.truth.size(); ++i) {
    j += jaccard(r.predicted[i], r.truth[i]);
    f += set_f1(r.predicted[i], r.truth[i]);
  }
  const double n = static_cast<double>(r.truth.size());
  return {j / n, f / n};
}

}  // namespace

MultiLabelMetrics multilabel_metrics(const MultiLabelResult& result) {
  check_multilabel(result);
  const Macro macro = macro_ranking(result);
  if (macro.valid == 0) throw DomainError("multilabel metrics: every label has a single class");
  MultiLabelMetrics m;
  std::tie(m.jaccard, m.f1) = example_based(result);
  m.auroc = macro.auroc;
  m.auprc = macro.auprc;
  m.valid_labels = macro.valid;
  return m;
}

std::vector<std::vector<std::size_t>> confusion_matrix(const MultiClassResult& r) {
  if (r.predicted.size() != r.truth.size()) throw ShapeError("confusion: lengths differ");
  std::vector<std::vector<std::size_t>> c(r.classes, std::vector<std::size_t>(r.classes, 0));
  for (std::size_t i = 0; i < r.truth.size(); ++i) {
    if (r.truth[i] >= r.classes || r.predicted[i] >= r.classes) throw ValidationError("confusion: class out of range");
    ++c[r.truth[i]][r.predicted[i]];
  }
  return c;
}

double cohen_kappa(const std::vector<std::vector<std::size_t>>& confusion) {
  const std::size_t k = confusion.size();
  double total = 0.0, agree = 0.0;
  std::vector<double> rows(k, 0.0), cols(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    if (confusion[i].size() != k) throw ShapeError("kappa: confusion matrix must be square");
    for (std::size_t j = 0; j < k; ++j) {
      const double v = static_cast<double>(confusion[i][j]);
      total += v;
      rows[i] += v;
      cols[j] += v;
      if (i == j) agree += v;
    }
  }
  if (total == 0.0) throw DomainError("kappa: empty confusion matrix");
  double chance = 0.0;
  for (std::size_t i = 0; i < k; ++i) chance += rows[i] * cols[i];
  const double p_e = chance / (total * total);
  const double p_o = agree / total;
  if (p_e >= 1.0) throw DomainError("kappa: chance agreement is 1");
  return (p_o - p_e) / (1.0 - p_e);
}

namespace {

double accuracy_of(const MultiClassResult& r) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < r.truth.size(); ++i) hit += r.truth[i] == r.predicted[i];
  return static_cast<double>(hit) / static_cast<double>(r.truth.size());
}

double macro_f1_of(const std::vector<std::vector<std::size_t>>& c) {
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < c.size(); ++k) {
    std::size_t tp = c[k][k], support = 0, predicted = 0;
    for (std::size_t j = 0; j < c.size(); ++j) {
      support += c[k][j];
      predicted += c[j][k];
    }
    if (support + predicted == 0) continue;
    sum += 2.0 * static_cast<double>(tp) / static_cast<double>(support + predicted);
    ++used;
  }
  return sum / static_cast<double>(used);
}

std::optional<double> ovr_auroc(const MultiClassResult& r) {
  const std::size_t n = r.truth.size();
  std::vector<double> col(n);
  std::vector<std::uint8_t> lab(n);
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < r.classes; ++k) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = r.scores[i][k];
      lab[i] = r.truth[i] == k ? 1 : 0;
      pos += lab[i];
    }
    if (pos == 0 || pos == n) continue;
    sum += auroc(col, lab);
    ++used;
  }
  if (used == 0) return std::nullopt;
  return sum / static_cast<double>(used);
}

void check_multiclass(const MultiClassResult& r) {
  if (r.scores.size() != r.truth.size()) throw ShapeError("multiclass metrics: score list length");
  for (const auto& s : r.scores)
    if (s.size() != r.classes) throw ShapeError("multiclass metrics: score vector width");
}

}  // namespace

MultiClassMetrics multiclass_metrics(const MultiClassResult& result) {
  if (result.truth.size() < 2) throw DomainError("multiclass metrics: need at least two samples");
  check_multiclass(result);
  const auto c = confusion_matrix(result);
  MultiClassMetrics m;
  m.accuracy = accuracy_of(result);
  m.f1_macro = macro_f1_of(c);
  m.kappa = cohen_kappa(c);
  auto a = ovr_auroc(result);
  if (!a) throw DomainError("multiclass metrics: a single class is present");
  m.auroc = *a;
  return m;
}

double jsd(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DomainError("jsd: vectors differ in length");
  double sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] >= 0.0) || !(b[i] >= 0.0)) throw DomainError("jsd: negative or non-finite entry");
    sa += a[i];
    sb += b[i];
  }
  if (sa == 0.0 || sb == 0.0) throw DomainError("jsd: all-zero vector");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double p = a[i] / sa, q = b[i] / sb, m = 0.5 * (p + q);
    if (p > 0.0) d += 0.5 * p * std::log2(p / m);
    if (q > 0.0) d += 0.5 * q * std::log2(q / m);
  }
  return std::clamp(d, 0.0, 1.0);
}

std::vector<double> code_frequencies(const corpus::Cohort& cohort, std::size_t view,
                                     const std::function<bool(const corpus::Visit&)>& select) {
  if (view >= kViewCount) throw DomainError("code_frequencies: view out of range");
  std::vector<double> f(cohort.vocabs[view].size, 0.0);
  for (const auto& r : cohort.records) {
    for (const auto& v : r.visits) {
      if (!v.observed[view] || (select && !select(v))) continue;
      for (auto c : v.codes[view]) {
        if (c >= f.size()) throw ValidationError("code_frequencies: code out of range");
        f[c] += 1.0;
      }
    }
  }
  return f;
}

ViewContribution normalize_contribution(const std::array<double, kViewCount>& norms) {
  double s = 0.0;
  for (double v : norms) {
    if (!(v >= 0.0)) throw DomainError("gradient contribution: negative or non-finite norm");
    s += v;
  }
  if (s == 0.0) throw DomainError("gradient contribution: zero total gradient");
  ViewContribution c;
  for (std::size_t k = 0; k < kViewCount; ++k) c.share[k] = norms[k] / s;
  return c;
}

ViewContribution gradient_contribution(const predictor::PredictorModel& model,
                                       std::span<const corpus::PatientRecord* const> patients) {
  return normalize_contribution(predictor::fused_input_gradient_norms(model, patients));
}

double contribution_spread(const ViewContribution& c) {
  const double mean = (c.share[0] + c.share[1] + c.share[2]) / 3.0;
  double s = 0.0;
  for (double v : c.share) s += (v - mean) * (v - mean);
  return std::sqrt(s / 3.0);
}

MultiLabelResult to_multilabel(std::span<const predictor::Prediction> predictions, std::size_t labels, double threshold) {
  MultiLabelResult r;
  r.labels = labels;
  for (const auto& p : predictions) {
    if (p.scores.size() != labels) throw ShapeError("to_multilabel: score width");
    CodeSet set;
    for (std::size_t l = 0; l < labels; ++l)
      if (p.scores[l] > threshold) set.push_back(static_cast<std::uint32_t>(l));
    r.predicted.push_back(std::move(set));
    r.truth.push_back(p.label_set);
    r.scores.push_back(p.scores);
  }
  return r;
}

MultiClassResult to_multiclass(std::span<const predictor::Prediction> predictions, std::size_t classes) {
  MultiClassResult r;
  r.classes = classes;
  for (const auto& p : predictions) {
    if (p.scores.size() != classes) throw ShapeError("to_multiclass: score width");
    r.predicted.push_back(
        static_cast<std::size_t>(std::max_element(p.scores.begin(), p.scores.end()) - p.scores.begin()));
    r.truth.push_back(p.label_class);
    r.scores.push_back(p.scores);
  }
  return r;
}

nlohmann::json task_metrics(std::span<const predictor::Prediction> predictions, predictor::Task task,
                            std::size_t out_dim) {
  if (predictions.empty()) return nullptr;
  nlohmann::json j = nlohmann::json::object();
  if (task == predictor::Task::phe) {
    const auto r = to_multilabel(predictions, out_dim);
    check_multilabel(r);
    const auto [jac, f1] = example_based(r);
    const Macro macro = macro_ranking(r);
    j["jaccard"] = jac;
    j["f1"] = f1;
    j["auprc"] = macro.valid ? nlohmann::json(macro.auprc) : nlohmann::json(nullptr);
    j["auroc"] = macro.valid ? nlohmann::json(macro.auroc) : nlohmann::json(nullptr);
  } else {
    const auto r = to_multiclass(predictions, out_dim);
    check_multiclass(r);
    const auto c = confusion_matrix(r);
    j["accuracy"] = accuracy_of(r);
    j["f1_macro"] = macro_f1_of(c);
    try {
      j["kappa"] = cohen_kappa(c);
    } catch (const DomainError&) {
      j["kappa"] = nullptr;
    }
    auto a = ovr_auroc(r);
    j["auroc"] = a ? nlohmann::json(*a) : nlohmann::json(nullptr);
  }
  return j;
}

std::vector<GroupRow> group_report(const corpus::Cohort& cohort, std::span<const predictor::Prediction> predictions,
                                   predictor::Task task, std::size_t out_dim) {
  static constexpr std::array<const char*, 7> kNames = {"G1", "G2", "G3", "G4", "warm", "cold", "other"};
  std::vector<std::vector<predictor::Prediction>> buckets(kNames.size());
  std::vector<std::size_t> patient_counts(kNames.size(), 0);
  std::vector<std::array<std::size_t, 2>> slot(cohort.records.size());
  for (std::size_t i = 0; i < cohort.records.size(); ++i) {
    const auto& rec = cohort.records[i];
    if (rec.visits.empty()) {
      slot[i] = {kNames.size(), kNames.size()};
      continue;
    }
    const std::size_t g = static_cast<std::size_t>(corpus::missing_group_of(rec));
    const std::size_t n = rec.visits.size();
    const std::size_t w = n > 2 ? 4 : (n == 1 ? 5 : 6);
    slot[i] = {g, w};
    ++patient_counts[g];
    ++patient_counts[w];
  }
  for (const auto& p : predictions) {
    if (p.patient >= cohort.records.size() || p.visit >= cohort.records[p.patient].visits.size()) {
      throw ValidationError("group_report: prediction does not align with the cohort");
    }
    for (std::size_t s : slot[p.patient]) buckets[s].push_back(p);
  }
  std::vector<GroupRow> rows;
  for (std::size_t b = 0; b < kNames.size(); ++b) {
    GroupRow row;
    row.group = kNames[b];
    row.patients = patient_counts[b];
    row.samples = buckets[b].size();
    row.metrics = task_metrics(buckets[b], task, out_dim);
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {
std::string format_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}
}  // namespace

std::string group_report_csv(const std::vector<GroupRow>& rows) {
  std::ostringstream out;
  out << "group,patients,samples,metric,value\n";
  for (const auto& r : rows) {
    if (r.metrics.is_null()) {
      out << r.group << ',' << r.patients << ',' << r.samples << ",,\n";
      continue;
    }
    for (const auto& [name, value] : r.metrics.items()) {
      out << r.group << ',' << r.patients << ',' << r.samples << ',' << name << ','
          << (value.is_null() ? std::string() : format_double(value.get<double>())) << '\n';
    }
  }
  return out.str();
}

nlohmann::json group_report_json(const std::vector<GroupRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({{"group", r.group}, {"patients", r.patients}, {"samples", r.samples}, {"metrics", r.metrics}});
  return j;
}

std::string frequency_csv(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("frequency_csv: lengths differ");
  std::ostringstream out;
  out << "code,a,b\n";
  for (std::size_t i = 0; i < a.size(); ++i) out << i << ',' << format_double(a[i]) << ',' << format_double(b[i]) << '\n';
  return out.str();
}

namespace {

void check_aligned(const corpus::Cohort& a, const corpus::Cohort& b) {
  if (a.records.size() != b.records.size()) throw ValidationError("cohorts differ in patient count");
  for (std::size_t k = 0; k < kViewCount; ++k)
    if (a.vocabs[k].size != b.vocabs[k].size) throw ValidationError("cohorts differ in vocabulary");
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& x = a.records[i];
    const auto& y = b.records[i];
    if (x.id != y.id || x.visits.size() != y.visits.size())
      throw ValidationError("patient " + std::to_string(i) + " (" + x.id + ") does not line up");
  }
}

}  // namespace

ImputationQuality imputation_quality(const corpus::Cohort& imputed, const corpus::Cohort& truth) {
  check_aligned(imputed, truth);
  if (!imputed.imputation_annotated) throw ValidationError("cohort carries no imputation annotation");
  ImputationQuality q;
  for (std::size_t k = 0; k < kViewCount; ++k) {
    auto& v = q.views[k];
    v.imputed_frequencies.assign(imputed.vocabs[k].size, 0.0);
    v.true_frequencies.assign(truth.vocabs[k].size, 0.0);
  }
  std::array<double, kViewCount> jac{};
  for (std::size_t i = 0; i < imputed.records.size(); ++i) {
    for (std::size_t j = 0; j < imputed.records[i].visits.size(); ++j) {
      const auto& vi = imputed.records[i].visits[j];
      const auto& vt = truth.records[i].visits[j];
      for (std::size_t k = 0; k < kViewCount; ++k) {
        if (!vi.imputed[k]) continue;
        auto& v = q.views[k];
        ++v.visits;
        v.true_codes += vt.codes[k].size();
        v.imputed_codes += vi.codes[k].size();
        v.hits += intersection_size(vi.codes[k], vt.codes[k]);
        jac[k] += jaccard(vi.codes[k], vt.codes[k]);
        for (auto c : vi.codes[k]) v.imputed_frequencies.at(c) += 1.0;
        for (auto c : vt.codes[k]) v.true_frequencies.at(c) += 1.0;
      }
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t k = 0; k < kViewCount; ++k) {
    auto& v = q.views[k];
    if (v.visits == 0) {
      v.recall = v.precision = v.jaccard = v.jsd = nan;
      continue;
    }
    v.recall = v.true_codes ? static_cast<double>(v.hits) / static_cast<double>(v.true_codes) : nan;
    v.precision = v.imputed_codes ? static_cast<double>(v.hits) / static_cast<double>(v.imputed_codes) : nan;
    v.jaccard = jac[k] / static_cast<double>(v.visits);
    v.jsd = v.imputed_codes && v.true_codes ? jsd(v.imputed_frequencies, v.true_frequencies) : nan;
  }
  return q;
}

corpus::Cohort random_imputation(const corpus::Cohort& masked, const corpus::Cohort& truth, std::uint64_t seed) {
  check_aligned(masked, truth);
  corpus::Cohort out = masked;
  out.imputation_annotated = true;
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    for (std::size_t j = 0; j < out.records[i].visits.size(); ++j) {
      auto& v = out.records[i].visits[j];
      CounterRng rng(mix64(seed ^ mix64((static_cast<std::uint64_t>(i) << 20) | j)), 0x72616e64);
      for (std::size_t k = 0; k < kViewCount; ++k) {
        if (v.observed[k]) continue;
        const std::size_t n = out.vocabs[k].size;
        const std::size_t want = std::min(truth.records[i].visits[j].codes[k].size(), n);
        auto picks = rng.sample_without_replacement(n, want);
        v.codes[k].assign(picks.begin(), picks.end());
        std::sort(v.codes[k].begin(), v.codes[k].end());
        v.observed[k] = true;
        v.imputed[k] = true;
      }
    }
  }
  return out;
}

nlohmann::json imputation_json(const ImputationQuality& quality) {
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t k = 0; k < kViewCount; ++k) {
    const auto& v = quality.views[k];
    j[std::string(corpus::view_key(corpus::kViews[k]))] = {
        {"visits", v.visits},       {"true_codes", v.true_codes}, {"imputed_codes", v.imputed_codes},
        {"hits", v.hits},           {"recall", num(v.recall)},    {"precision", num(v.precision)},
        {"jaccard", num(v.jaccard)}, {"jsd", num(v.jsd)}};
  }
  return j;
}

}  // namespace mvdiff::eval
