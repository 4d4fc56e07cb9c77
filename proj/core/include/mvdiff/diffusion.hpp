#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvdiff/autodiff.hpp"
#include "mvdiff/corpus.hpp"
#include "mvdiff/encoder.hpp"

namespace mvdiff::diffusion {

using numerics::ParamBinder;
using numerics::ParameterStore;
using numerics::Tensor;
using numerics::Var;
using corpus::kViewCount;
using Flags = std::array<bool, kViewCount>;

/// β, α, ᾱ indexed 0..T with β_0 = 0 and ᾱ_0 = 1, plus the posterior
/// coefficients of q(h_{t-1} | h_t, h_0) for t = 1..T.
struct NoiseSchedule {
  std::size_t steps = 0;
  std::vector<double> beta, alpha, alpha_bar;
  std::vector<double> post_a, post_b, post_var;

  struct Coefficients {
    double a = 1.0;
    double b = 0.0;
    double var = 0.0;
  };
  /// Posterior of h_s given h_t and h_0 for s < t, treating t -> s as one
  /// step with α = ᾱ_t / ᾱ_s. between(t, t-1) equals the one-step table.
  Coefficients between(std::size_t t, std::size_t s) const;

  /// β_t in [0, 1) for t = 1..T; zero betas are allowed so identity cases
  /// can be built.
  static NoiseSchedule from_betas(std::vector<double> betas);
};

/// Linear β ramp from beta_start to beta_end. Throws DomainError unless
/// 0 < beta_start <= beta_end < 1 and steps >= 1.
NoiseSchedule make_schedule(std::size_t steps, double beta_start = 1e-4, double beta_end = 0.02);

/// Uniformly strided descending steps from T with `count` entries (the last
/// one > 0); sampling then jumps from the last entry to 0.
std::vector<std::size_t> strided_steps(std::size_t steps, std::size_t count);

/// Noised v-slots <- sqrt(ᾱ_t) h0 + sqrt(1-ᾱ_t) ε; every other entry copied.
/// `noise` is [B, 3d]; only entries of noised slots are read.
encoder::DiffusionState q_sample(const encoder::DiffusionState& h0, std::size_t t, const Tensor& noise,
                                 const NoiseSchedule& schedule);

/// One reverse step t -> s on the noised slots: a h_t + b ĥ0 + sqrt(var) noise.
/// `noise` may be empty (deterministic step). Other slots are left untouched.
encoder::DiffusionState posterior_step(const encoder::DiffusionState& ht, std::size_t s, const Tensor& h0_hat,
                                       const Tensor& noise, const NoiseSchedule& schedule);

/// (1-s) u + s c, so s = 0 and s = 1 reproduce the inputs exactly.
Tensor cfg_combine(const Tensor& unconditional, const Tensor& conditional, double s);

/// Codes whose logit <E_c, x> + bias_c is positive; the single argmax (lowest
/// index on ties) when none is.
std::vector<std::uint32_t> round_decode(std::span<const double> slot, const Tensor& table, const Tensor& bias);
/// All decode logits for a slot.
std::vector<double> decode_logits(std::span<const double> slot, const Tensor& table, const Tensor& bias);

struct DenoiserConfig {
  std::size_t dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_mult = 4;
};

inline constexpr std::array<const char*, kViewCount> kDecodeBias = {"dec.d", "dec.p", "dec.m"};

void add_denoiser_parameters(ParameterStore& store, const DenoiserConfig& config,
                             const std::array<std::size_t, kViewCount>& vocab_sizes, CounterRng& rng);

/// g_θ(h_t, t): [B, 12d] -> predicted clean v block [B, 3d]. `t` holds one
/// step per row.
Var denoise(ParamBinder& p, Var h, std::span<const std::size_t> t, const DenoiserConfig& config);

struct VlbParts {
  Var total;
  double mse_t = 0.0;
  double mse_emb = 0.0;
  double nll_round = 0.0;
};

/// Loss assembly from a prediction. Per row: mean squared error over the
/// noised slots, counted as mse_emb when t = 1 and mse_t otherwise; plus the
/// sum over views of the mean BCE of `logits[k]` against `targets[k]`. Every
/// term is averaged over the batch.
VlbParts vlb_combine(numerics::Graph& g, Var prediction, Var clean, std::span<const Flags> noised,
                     std::span<const std::size_t> t, std::span<const Var> logits, std::span<const Tensor> targets);

/// One training example: a complete visit, its history, the artificial
/// observed flags, the step, the condition-drop draw and the noise [1, 3d].
struct TrainingItem {
  const corpus::Visit* visit = nullptr;
  std::vector<const corpus::Visit*> history;
  Flags observed{true, true, true};
  std::size_t t = 1;
  bool drop_condition = false;
  Tensor noise;
};

/// Full VLB for a batch. Throws ValidationError for an incomplete visit.
VlbParts vlb_loss(ParamBinder& p, std::span<const TrainingItem> batch, const encoder::PrototypeSet& prototypes,
                  const NoiseSchedule& schedule, const DenoiserConfig& config);

struct DiffusionConfig {
  DenoiserConfig denoiser;
  std::size_t steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t prototypes = 10;
  std::size_t kmeans_iters = 50;
  double p_drop = 0.1;
  double guidance = 0.5;
  std::size_t sample_steps = 20;
  double lr = 1e-3;
  double weight_decay = 5e-4;
  std::size_t batch = 32;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static DiffusionConfig from_json(const nlohmann::json& j);
};

struct DiffusionModel {
  DiffusionConfig config;
  ParameterStore params;
  encoder::PrototypeSet prototypes;
  NoiseSchedule schedule;
  std::array<std::size_t, kViewCount> vocab_sizes{};
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double mse_t = 0.0;
  double mse_emb = 0.0;
  double nll_round = 0.0;
  std::size_t batches = 0;
};

using EpochCallback = std::function<void(const DiffusionModel&, const EpochStats&)>;

struct DiffusionTraining {
  DiffusionModel model;
  std::vector<EpochStats> history;
};

/// Stage-two training on the complete visits of `train`. Throws
/// TrainingError on a non-finite loss, DomainError when no visit is complete.
DiffusionTraining train_diffusion(const corpus::Cohort& train, const DiffusionConfig& config,
                                  const EpochCallback& on_epoch = {});

/// Saves parameters and prototypes; the config rides in the hyperparameters.
void save_model(const DiffusionModel& model, const std::filesystem::path& dir);
DiffusionModel load_model(const std::filesystem::path& dir);

struct ImputeOptions {
  double guidance = 0.5;
  std::size_t sample_steps = 20;
  std::uint64_t seed = 0;
};

/// Fills the missing views of `visit` given its raw history. A complete visit
/// is returned unchanged.
corpus::Visit impute_visit(const corpus::Visit& visit, std::span<const corpus::Visit* const> history,
                           const DiffusionModel& model, const ImputeOptions& options);

/// Reverse process over a batch of rows, starting the missing slots from
/// N(0, I) drawn from CounterRng(row_seeds[i]). Returns the final state (t = 0);
/// every intermediate state is appended to `states` when given.
encoder::DiffusionState sample(const DiffusionModel& model, std::span<const corpus::Visit* const> visits,
                               std::span<const std::vector<const corpus::Visit*>> histories,
                               std::span<const std::uint64_t> row_seeds, const ImputeOptions& options,
                               std::vector<encoder::DiffusionState>* states = nullptr);

/// Seed of the reverse-process noise for one visit.
std::uint64_t visit_seed(std::uint64_t seed, std::size_t patient, std::size_t visit) noexcept;

/// Imputes every incomplete visit; patients are spread over `jobs` threads.
/// The result is annotated with which views were imputed. Each visit's noise
/// depends only on (seed, patient index, visit index).
corpus::Cohort impute_cohort(const corpus::Cohort& cohort, const DiffusionModel& model, const ImputeOptions& options,
                             std::size_t jobs = 1);

}  // namespace mvdiff::diffusion
