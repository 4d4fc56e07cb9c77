#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvdiff/autodiff.hpp"
#include "mvdiff/corpus.hpp"
#include "mvdiff/rng.hpp"

namespace mvdiff::predictor {

using numerics::Graph;
using numerics::ParamBinder;
using numerics::ParameterStore;
using numerics::Tensor;
using numerics::Var;
using corpus::kViewCount;

/// phe: multi-label phenotypes of the next visit. los: the visit's own
/// length-of-stay class.
enum class Task : std::uint8_t { phe, los };
std::string_view task_name(Task t) noexcept;
/// Throws ConfigError for anything but "phe" or "los".
Task task_from_name(std::string_view name);
std::size_t task_dim(Task t, const corpus::Cohort& cohort);

struct PredictorConfig {
  Task task = Task::phe;
  std::size_t dim = 32;
  std::size_t layers = 1;
  std::size_t heads = 2;
  std::size_t ffn_mult = 2;
  double eta = 1e-3;
  double loss_guard = 1e-8;
  double lr = 1e-3;
  /// Learning rate of the advantage logits ρ (no decay on them).
  double rho_lr = 1e-2;
  double weight_decay = 5e-4;
  /// Patients per batch.
  std::size_t batch = 32;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static PredictorConfig from_json(const nlohmann::json& j);
};

/// Parameter names; view tables are "pe.d" etc, blocks "pl.d.l0.q" etc.
inline constexpr std::array<const char*, kViewCount> kViewTags = {"d", "p", "m"};
inline constexpr const char* kFusedHead = "head.f";
inline constexpr const char* kRho = "adv.rho";
std::string view_head(std::size_t view);

void add_predictor_parameters(ParameterStore& store, const PredictorConfig& config,
                              const std::array<std::size_t, kViewCount>& vocab_sizes, std::size_t out_dim,
                              CounterRng& rng);

struct Longitudinal {
  /// u^k for every visit of every patient, rows in patient-major order. [R, d]
  std::array<Var, kViewCount> u;
  std::vector<std::size_t> lengths;
};

/// Causal per-view transformers over each patient's visit sequence. Missing
/// views contribute a zero code sum. Throws DomainError for an empty sequence.
Longitudinal encode_longitudinal(ParamBinder& p, std::span<const corpus::PatientRecord* const> patients,
                                 const PredictorConfig& config);

struct HeadOutputs {
  Var fused;                             // W (u^d ⊕ u^p ⊕ u^m)
  std::array<Var, kViewCount> per_view;  // W* u*
};
/// Throws ShapeError when widths disagree with the heads.
HeadOutputs predict(ParamBinder& p, const std::array<Var, kViewCount>& u);

/// Which encoder rows are scored and against what.
struct Targets {
  std::vector<std::size_t> rows;
  /// [rows, |G|] for phe.
  Tensor multi;
  /// Class per row for los.
  std::vector<std::size_t> classes;
  /// (patient, visit) whose label row i carries.
  std::vector<std::pair<std::size_t, std::size_t>> source;
  bool empty() const noexcept { return rows.empty(); }
};
Targets make_targets(std::span<const corpus::PatientRecord* const> patients, Task task, std::size_t out_dim);

/// Mean binary CE over labels (phe) or categorical CE (los).
Var task_loss(Graph& g, Var logits, const Targets& targets, Task task);

/// r* = (L_fused - L*) / L_fused. Throws DomainError when L_fused <= guard.
std::array<double, kViewCount> relative_advantage(double fused, const std::array<double, kViewCount>& views,
                                                  double guard = 1e-8);
/// n = softmax(ρ) as a [1, 3] row.
Var advantage_weights(ParamBinder& p);
/// r · n with r constant.
Var inverse_advantage_loss(Graph& g, const std::array<double, kViewCount>& r, Var n);
/// Σ n* L* + η r · n.
Var total_loss(Graph& g, const std::array<Var, kViewCount>& losses, const std::array<double, kViewCount>& r, Var n,
               double eta);

struct BatchLosses {
  Var objective;
  Var fused;
  std::array<Var, kViewCount> views;
  std::array<double, kViewCount> r{};
  std::array<double, kViewCount> n{};
};
/// Training objective for one batch: L_fused + Σ sg(n*) L* + η r · n.
/// The fused head is what evaluation reads, so it is trained directly; the
/// weights enter the task term as constants so only the advantage term moves ρ.
BatchLosses batch_losses(ParamBinder& p, std::span<const corpus::PatientRecord* const> patients,
                         const PredictorConfig& config, std::size_t out_dim);

struct PredictorModel {
  PredictorConfig config;
  ParameterStore params;
  std::array<std::size_t, kViewCount> vocab_sizes{};
  std::size_t out_dim = 1;

  std::array<double, kViewCount> weights() const;
};

struct PredictorEpoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double fused = 0.0;
  std::array<double, kViewCount> views{};
  std::array<double, kViewCount> r{};
  std::array<double, kViewCount> n{};
  std::size_t batches = 0;
};

using PredictorCallback = std::function<void(const PredictorModel&, const PredictorEpoch&)>;

struct PredictorTraining {
  PredictorModel model;
  std::vector<PredictorEpoch> history;
};

/// Throws DomainError when the cohort yields no target, TrainingError on a
/// non-finite loss.
PredictorTraining train_predictor(const corpus::Cohort& train, const PredictorConfig& config,
                                  const PredictorCallback& on_epoch = {});

void save_predictor(const PredictorModel& model, const std::filesystem::path& dir);
PredictorModel load_predictor(const std::filesystem::path& dir);

struct Prediction {
  std::size_t patient = 0;
  std::string id;
  /// Visit whose label is predicted.
  std::size_t visit = 0;
  /// Sigmoid probabilities (phe) or softmax (los).
  std::vector<double> scores;
  std::vector<std::uint32_t> label_set;
  std::size_t label_class = 0;
};

/// Scores every target of the cohort; patients are split over `jobs` threads.
std::vector<Prediction> predict_cohort(const PredictorModel& model, const corpus::Cohort& cohort,
                                       std::size_t jobs = 1);

/// One JSON object per line: patient, visit, scores, label.
void write_predictions(const std::vector<Prediction>& predictions, Task task, const std::filesystem::path& path);
std::vector<Prediction> read_predictions(const std::filesystem::path& path, Task task);

/// Frobenius norm of ∂L_fused/∂u^k over a batch, per view.
std::array<double, kViewCount> fused_input_gradient_norms(const PredictorModel& model,
                                                          std::span<const corpus::PatientRecord* const> patients);

}  // namespace mvdiff::predictor
