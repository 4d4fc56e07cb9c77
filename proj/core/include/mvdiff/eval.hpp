#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvdiff/corpus.hpp"
#include "mvdiff/predictor.hpp"

namespace mvdiff::eval {

using corpus::kViewCount;
using CodeSet = std::vector<std::uint32_t>;

/// |a ∩ b| / |a ∪ b|; two empty sets score 1. Inputs are sorted and unique.
double jaccard(const CodeSet& a, const CodeSet& b);
/// 2|a ∩ b| / (|a| + |b|); two empty sets score 1.
double set_f1(const CodeSet& a, const CodeSet& b);

/// Mann-Whitney statistic: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. DomainError without both classes.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);
/// Step-wise area under precision-recall, tied scores taken as one threshold.
/// DomainError without a positive.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct MultiLabelResult {
  std::size_t labels = 0;
  std::vector<CodeSet> predicted;
  std::vector<CodeSet> truth;
  std::vector<std::vector<double>> scores;
};

struct MultiLabelMetrics {
  double jaccard = 0.0;
  double f1 = 0.0;
  double auprc = 0.0;
  double auroc = 0.0;
  /// Labels contributing to the macro averages.
  std::size_t valid_labels = 0;
};

/// Example-based Jaccard and F1; AUROC and AUPRC macro over labels with both
/// classes present. DomainError when empty or when no label is usable.
MultiLabelMetrics multilabel_metrics(const MultiLabelResult& result);

struct MultiClassResult {
  std::size_t classes = 0;
  std::vector<std::size_t> predicted;
  std::vector<std::size_t> truth;
  std::vector<std::vector<double>> scores;
};

struct MultiClassMetrics {
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double kappa = 0.0;
  double auroc = 0.0;
};

/// Confusion matrix indexed [truth][predicted].
std::vector<std::vector<std::size_t>> confusion_matrix(const MultiClassResult& result);
/// Cohen's kappa with chance agreement Σ_k row_k col_k / N². DomainError when
/// that agreement is 1.
double cohen_kappa(const std::vector<std::vector<std::size_t>>& confusion);
/// Macro F1 over classes seen in truth or predictions; one-vs-rest AUROC over
/// classes with both outcomes present. DomainError below two samples.
MultiClassMetrics multiclass_metrics(const MultiClassResult& result);

/// Base-2 Jensen-Shannon divergence of two count vectors after normalization.
/// DomainError for an all-zero or negative vector or a length mismatch.
double jsd(std::span<const double> a, std::span<const double> b);

/// Code counts of one view over visits where `select(visit)` holds.
std::vector<double> code_frequencies(const corpus::Cohort& cohort, std::size_t view,
                                     const std::function<bool(const corpus::Visit&)>& select = {});

struct ViewContribution {
  std::array<double, kViewCount> share{};
};
/// Normalizes per-view gradient norms. DomainError when they sum to zero.
ViewContribution normalize_contribution(const std::array<double, kViewCount>& norms);
ViewContribution gradient_contribution(const predictor::PredictorModel& model,
                                       std::span<const corpus::PatientRecord* const> patients);
/// Population standard deviation of the shares.
double contribution_spread(const ViewContribution& c);

MultiLabelResult to_multilabel(std::span<const predictor::Prediction> predictions, std::size_t labels,
                               double threshold = 0.5);
MultiClassResult to_multiclass(std::span<const predictor::Prediction> predictions, std::size_t classes);

/// Metrics as a JSON object; metrics that are undefined on the sample are null.
nlohmann::json task_metrics(std::span<const predictor::Prediction> predictions, predictor::Task task,
                            std::size_t out_dim);

struct GroupRow {
  std::string group;
  std::size_t patients = 0;
  std::size_t samples = 0;
  /// Null when the group has no sample.
  nlohmann::json metrics;
};

/// Rows G1..G4 by each patient's missing ratio, then warm (more than two
/// visits), cold (one visit) and other. `cohort` must carry the imputation
/// annotation (or be the raw masked cohort) so missingness can be recovered.
std::vector<GroupRow> group_report(const corpus::Cohort& cohort, std::span<const predictor::Prediction> predictions,
                                   predictor::Task task, std::size_t out_dim);

/// group,patients,samples,metric,value (empty value for null).
std::string group_report_csv(const std::vector<GroupRow>& rows);
nlohmann::json group_report_json(const std::vector<GroupRow>& rows);

/// Writes code,a,b rows for external plotting.
std::string frequency_csv(std::span<const double> a, std::span<const double> b);

struct ViewQuality {
  /// Visits where the view was imputed.
  std::size_t visits = 0;
  std::size_t true_codes = 0;
  std::size_t imputed_codes = 0;
  std::size_t hits = 0;
  /// hits / true_codes and hits / imputed_codes, pooled over visits.
  double recall = 0.0;
  double precision = 0.0;
  double jaccard = 0.0;
  /// Between imputed-code and true-code frequencies over those visits.
  double jsd = 0.0;
  std::vector<double> imputed_frequencies;
  std::vector<double> true_frequencies;
};

struct ImputationQuality {
  std::array<ViewQuality, kViewCount> views;
};

/// Compares the imputed views against an aligned complete cohort. Throws
/// ValidationError when the two do not line up or `imputed` carries no
/// imputation annotation.
ImputationQuality imputation_quality(const corpus::Cohort& imputed, const corpus::Cohort& truth);

/// Uniform-random decoder: each missing view gets as many distinct codes as
/// the truth holds, drawn uniformly. Output is annotated like a real imputation.
corpus::Cohort random_imputation(const corpus::Cohort& masked, const corpus::Cohort& truth, std::uint64_t seed);

/// Views without imputed visits come out with null scores.
nlohmann::json imputation_json(const ImputationQuality& quality);

}  // namespace mvdiff::eval
