#include "mvdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "mvdiff/checkpoint.hpp"
#include "mvdiff/error.hpp"
#include "mvdiff/optim.hpp"

namespace mvdiff::diffusion {

using encoder::Block;
using encoder::DiffusionState;
using numerics::Graph;

// ---------------------------------------------------------------- schedule

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw DomainError("schedule needs at least one step");
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) throw DomainError("beta must lie in [0, 1)");
  }
  NoiseSchedule s;
  s.steps = betas.size();
  const std::size_t n = s.steps + 1;
  s.beta.assign(n, 0.0);
  s.alpha.assign(n, 1.0);
  s.alpha_bar.assign(n, 1.0);
  s.post_a.assign(n, 1.0);
  s.post_b.assign(n, 0.0);
  s.post_var.assign(n, 0.0);
  for (std::size_t t = 1; t < n; ++t) {
    s.beta[t] = betas[t - 1];
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha[t] * s.alpha_bar[t - 1];
  }
  for (std::size_t t = 1; t < n; ++t) {
    auto c = s.between(t, t - 1);
    s.post_a[t] = c.a;
    s.post_b[t] = c.b;
    s.post_var[t] = c.var;
  }
  return s;
}

NoiseSchedule::Coefficients NoiseSchedule::between(std::size_t t, std::size_t s) const {
  if (t > steps || s >= t) throw DomainError("between: need s < t <= T");
  const double ab_t = alpha_bar[t];
  const double ab_s = alpha_bar[s];
  const double one_minus = 1.0 - ab_t;
  Coefficients c;
  // ᾱ_t = ᾱ_s means the jump adds no noise: the posterior is the identity.
  if (one_minus <= 0.0 || ab_t == ab_s) return c;
  const double step_alpha = ab_t / ab_s;
  const double step_beta = 1.0 - step_alpha;
  c.a = std::sqrt(step_alpha) * (1.0 - ab_s) / one_minus;
  c.b = std::sqrt(ab_s) * step_beta / one_minus;
  c.var = std::max(0.0, (1.0 - ab_s) * step_beta / one_minus);
  return c;
}

NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps == 0) throw DomainError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw DomainError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[i] = beta_start + (beta_end - beta_start) * frac;
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

std::vector<std::size_t> strided_steps(std::size_t steps, std::size_t count) {
  if (count == 0 || count > steps) throw DomainError("sample steps must lie in [1, T]");
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = steps * (count - i) / count;
  return out;
}

// ---------------------------------------------------------------- state ops

namespace {

void check_noise(const DiffusionState& s, const Tensor& noise, const char* op) {
  if (noise.rows() != s.batch() || noise.cols() != s.layout.block_width()) {
    throw ShapeError(std::string(op) + ": noise shape " + noise.shape_string() + " does not match the v block");
  }
}

}  // namespace

DiffusionState q_sample(const DiffusionState& h0, std::size_t t, const Tensor& noise, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps) throw DomainError("q_sample: t out of range");
  check_noise(h0, noise, "q_sample");
  DiffusionState out = h0;
  out.t = t;
  const double sa = std::sqrt(schedule.alpha_bar[t]);
  const double sn = std::sqrt(1.0 - schedule.alpha_bar[t]);
  const std::size_t d = h0.layout.dim;
  for (std::size_t i = 0; i < h0.batch(); ++i) {
    for (std::size_t k = 0; k < kViewCount; ++k) {
      if (!h0.noised[i][k]) continue;
      const std::size_t off = h0.layout.slot_offset(Block::v, k);
      for (std::size_t c = 0; c < d; ++c) out.h(i, off + c) = sa * h0.h(i, off + c) + sn * noise(i, k * d + c);
    }
  }
  return out;
}

DiffusionState posterior_step(const DiffusionState& ht, std::size_t s, const Tensor& h0_hat, const Tensor& noise,
                              const NoiseSchedule& schedule) {
  const auto coef = schedule.between(ht.t, s);
  check_noise(ht, h0_hat, "posterior_step");
  if (!noise.empty()) check_noise(ht, noise, "posterior_step");
  DiffusionState out = ht;
  out.t = s;
  const double sd = std::sqrt(coef.var);
  const std::size_t d = ht.layout.dim;
  for (std::size_t i = 0; i < ht.batch(); ++i) {
    for (std::size_t k = 0; k < kViewCount; ++k) {
      if (!ht.noised[i][k]) continue;
      const std::size_t off = ht.layout.slot_offset(Block::v, k);
      for (std::size_t c = 0; c < d; ++c) {
        double v = coef.a * ht.h(i, off + c) + coef.b * h0_hat(i, k * d + c);
        if (!noise.empty() && s > 0) v += sd * noise(i, k * d + c);
        out.h(i, off + c) = v;
      }
    }
  }
  return out;
}

Tensor cfg_combine(const Tensor& unconditional, const Tensor& conditional, double s) {
  if (!unconditional.same_shape(conditional)) throw ShapeError("cfg_combine: shape mismatch");
  Tensor out = unconditional;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - s) * unconditional[i] + s * conditional[i];
  return out;
}

std::vector<double> decode_logits(std::span<const double> slot, const Tensor& table, const Tensor& bias) {
  if (slot.size() != table.cols() || bias.size() != table.rows()) throw ShapeError("decode: shape mismatch");
  std::vector<double> logits(table.rows());
  for (std::size_t c = 0; c < table.rows(); ++c) logits[c] = numerics::dot(slot, table.row_span(c)) + bias[c];
  return logits;
}

std::vector<std::uint32_t> round_decode(std::span<const double> slot, const Tensor& table, const Tensor& bias) {
  const auto logits = decode_logits(slot, table, bias);
  std::vector<std::uint32_t> codes;
  std::size_t best = 0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (logits[c] > 0.0) codes.push_back(static_cast<std::uint32_t>(c));
    if (logits[c] > logits[best]) best = c;
  }
  if (codes.empty()) codes.push_back(static_cast<std::uint32_t>(best));
  return codes;
}

// ---------------------------------------------------------------- denoiser

namespace {

std::string layer_prefix(std::size_t l) { return "den.l" + std::to_string(l) + "."; }

void add_linear(ParameterStore& s, const std::string& name, std::size_t in, std::size_t out, CounterRng& rng,
                bool bias = true) {
  s.add(name + ".w", numerics::xavier(in, out, rng));
  if (bias) s.add(name + ".b", Tensor::zeros(1, out));
}

void add_norm(ParameterStore& s, const std::string& name, std::size_t width) {
  s.add(name + ".g", Tensor::filled(1, width, 1.0));
  s.add(name + ".b", Tensor::zeros(1, width));
}

}  // namespace

void add_denoiser_parameters(ParameterStore& store, const DenoiserConfig& config,
                             const std::array<std::size_t, kViewCount>& vocab_sizes, CounterRng& rng) {
  const std::size_t d = config.dim;
  if (d == 0 || config.heads == 0 || d % config.heads != 0) throw ConfigError("heads", "must divide dim");
  const encoder::SlotLayout layout{d};
  add_linear(store, "den.in", d, d, rng);
  store.add("den.slot", numerics::random_normal(layout.slot_count(), d, 1.0 / std::sqrt(double(d)), rng));
  add_linear(store, "den.time", d, d, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string pre = layer_prefix(l);
    add_norm(store, pre + "ln1", d);
    add_linear(store, pre + "q", d, d, rng);
    add_linear(store, pre + "k", d, d, rng, false);
    add_linear(store, pre + "v", d, d, rng);
    add_linear(store, pre + "o", d, d, rng);
    add_norm(store, pre + "ln2", d);
    add_linear(store, pre + "ff1", d, config.ffn_mult * d, rng);
    add_linear(store, pre + "ff2", config.ffn_mult * d, d, rng);
  }
  add_norm(store, "den.out_ln", d);
  add_linear(store, "den.out", d, d, rng);
  for (std::size_t k = 0; k < kViewCount; ++k) store.add(kDecodeBias[k], Tensor::zeros(1, vocab_sizes[k]));
}

Var denoise(ParamBinder& p, Var h, std::span<const std::size_t> t, const DenoiserConfig& config) {
  Graph& g = p.graph();
  const std::size_t d = config.dim;
  const encoder::SlotLayout layout{d};
  const std::size_t slots = layout.slot_count();
  const std::size_t batch = h.rows();
  if (h.cols() != layout.width()) {
    throw ShapeError("denoise: input width " + std::to_string(h.cols()) + ", expected " +
                     std::to_string(layout.width()));
  }
  if (t.size() != batch) throw ShapeError("denoise: one step per row required");

  Var x = numerics::linear(p, g.reshape(h, batch * slots, d), "den.in");
  x = x + g.tile_rows(p("den.slot"), batch);

  Tensor time = Tensor::zeros(batch, d);
  for (std::size_t i = 0; i < batch; ++i) {
    auto e = numerics::sinusoidal_embedding(static_cast<double>(t[i]), d);
    std::copy(e.begin(), e.end(), time.row_span(i).begin());
  }
  std::vector<std::size_t> owner(batch * slots);
  for (std::size_t r = 0; r < owner.size(); ++r) owner[r] = r / slots;
  x = x + g.gather_rows(numerics::linear(p, g.constant(std::move(time)), "den.time"), owner);

  numerics::AttentionOptions opt;
  opt.heads = config.heads;
  opt.segments.assign(batch, slots);
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string pre = layer_prefix(l);
    Var n = numerics::layer_norm_affine(p, x, pre + "ln1");
    Var a = g.attention(numerics::linear(p, n, pre + "q"), g.matmul(n, p(pre + "k.w")),
                        numerics::linear(p, n, pre + "v"), opt);
    x = x + numerics::linear(p, a, pre + "o");
    Var n2 = numerics::layer_norm_affine(p, x, pre + "ln2");
    x = x + numerics::linear(p, g.gelu(numerics::linear(p, n2, pre + "ff1")), pre + "ff2");
  }

  std::vector<std::size_t> v_rows;
  v_rows.reserve(batch * kViewCount);
  const std::size_t first_v = static_cast<std::size_t>(Block::v) * kViewCount;
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t k = 0; k < kViewCount; ++k) v_rows.push_back(i * slots + first_v + k);
  Var out = numerics::layer_norm_affine(p, g.gather_rows(x, std::move(v_rows)), "den.out_ln");
  out = numerics::linear(p, out, "den.out");
  return g.reshape(out, batch, kViewCount * d);
}

// ---------------------------------------------------------------- loss

VlbParts vlb_combine(Graph& g, Var prediction, Var clean, std::span<const Flags> noised,
                     std::span<const std::size_t> t, std::span<const Var> logits, std::span<const Tensor> targets) {
  const std::size_t batch = prediction.rows();
  const std::size_t width = prediction.cols();
  const std::size_t d = width / kViewCount;
  if (noised.size() != batch || t.size() != batch) throw ShapeError("vlb: per-row metadata does not match the batch");
  if (logits.size() != targets.size()) throw ShapeError("vlb: logits and targets differ in count");

  Tensor w_t = Tensor::zeros(batch, width);
  Tensor w_emb = Tensor::zeros(batch, width);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t views = static_cast<std::size_t>(std::count(noised[i].begin(), noised[i].end(), true));
    if (views == 0) continue;
    const double w = 1.0 / static_cast<double>(views * d * batch);
    Tensor& target = t[i] == 1 ? w_emb : w_t;
    for (std::size_t k = 0; k < kViewCount; ++k)
      if (noised[i][k])
        for (std::size_t c = 0; c < d; ++c) target(i, k * d + c) = w;
  }
  Var diff = g.sub(prediction, clean);
  Var sq = g.mul(diff, diff);
  Var mse_t = g.sum(g.mul(sq, g.constant(std::move(w_t))));
  Var mse_emb = g.sum(g.mul(sq, g.constant(std::move(w_emb))));

  VlbParts parts;
  parts.mse_t = mse_t.value().item();
  parts.mse_emb = mse_emb.value().item();
  Var total = g.add(mse_t, mse_emb);
  for (std::size_t k = 0; k < logits.size(); ++k) {
    Var nll = g.bce_with_logits(logits[k], targets[k]);
    parts.nll_round += nll.value().item();
    total = g.add(total, nll);
  }
  parts.total = total;
  return parts;
}

VlbParts vlb_loss(ParamBinder& p, std::span<const TrainingItem> batch, const encoder::PrototypeSet& prototypes,
                  const NoiseSchedule& schedule, const DenoiserConfig& config) {
  Graph& g = p.graph();
  const std::size_t n = batch.size();
  const std::size_t d = config.dim;
  const std::size_t width = kViewCount * d;
  if (n == 0) throw DomainError("vlb_loss: empty batch");

  std::vector<const corpus::Visit*> visits(n);
  std::vector<Flags> observed(n), noised(n), all(n, Flags{true, true, true});
  std::vector<std::vector<const corpus::Visit*>> histories(n);
  std::vector<std::size_t> ts(n);
  for (std::size_t i = 0; i < n; ++i) {
    const TrainingItem& item = batch[i];
    if (!item.visit->complete()) throw ValidationError("vlb_loss: training visit " + std::to_string(i) + " is incomplete");
    if (item.t < 1 || item.t > schedule.steps) throw DomainError("vlb_loss: t out of range");
    visits[i] = item.visit;
    observed[i] = item.observed;
    for (std::size_t k = 0; k < kViewCount; ++k) noised[i][k] = !item.observed[k];
    histories[i] = item.history;
    ts[i] = item.t;
  }

  encoder::EmbeddingTables tables;
  for (std::size_t k = 0; k < kViewCount; ++k) tables.codes[k] = p(encoder::kCodeTable[k]).value();
  tables.mask = p(encoder::kMaskTable).value();

  Var clean = encoder::encode_visits(p, visits, all);
  Var b = encoder::mask_vectors(p, observed);
  Var z = encoder::intra_conditions(p, histories, d);

  Tensor keep_rows = Tensor::filled(n, width, 1.0);
  Tensor c = Tensor::zeros(n, width);
  Tensor coef = Tensor::filled(n, width, 1.0);
  Tensor offset = Tensor::zeros(n, width);
  for (std::size_t i = 0; i < n; ++i) {
    const TrainingItem& item = batch[i];
    if (item.noise.rows() != 1 || item.noise.cols() != width) throw ShapeError("vlb_loss: noise must be [1, 3d]");
    if (item.drop_condition) {
      for (std::size_t col = 0; col < width; ++col) keep_rows(i, col) = 0.0;
    } else {
      Tensor ci = encoder::prototype_condition(encoder::encode_visit(*item.visit, tables, item.observed),
                                               item.observed, prototypes);
      std::copy(ci.values().begin(), ci.values().end(), c.row_span(i).begin());
    }
    const double sa = std::sqrt(schedule.alpha_bar[item.t]);
    const double sn = std::sqrt(1.0 - schedule.alpha_bar[item.t]);
    for (std::size_t k = 0; k < kViewCount; ++k) {
      if (!noised[i][k]) continue;
      for (std::size_t col = k * d; col < (k + 1) * d; ++col) {
        coef(i, col) = sa;
        offset(i, col) = sn * item.noise(0, col);
      }
    }
  }
  z = g.mul(z, g.constant(std::move(keep_rows)));
  Var v_t = g.add(g.mul(clean, g.constant(std::move(coef))), g.constant(std::move(offset)));
  Var blocks[] = {z, g.constant(std::move(c)), b, v_t};
  Var prediction = denoise(p, g.concat_cols(blocks), ts, config);

  // Rounding terms: every clean slice, and the prediction on the rows where
  // the view was noised.
  std::vector<Var> logits;
  std::vector<Tensor> targets;
  for (std::size_t k = 0; k < kViewCount; ++k) {
    Var table_t = g.transpose(p(encoder::kCodeTable[k]));
    Var bias = p(kDecodeBias[k]);
    const std::size_t vocab = table_t.cols();
    Var slice = g.slice_cols(clean, k * d, (k + 1) * d);
    logits.push_back(g.add_row(g.matmul(slice, table_t), bias));
    Tensor target = Tensor::zeros(n, vocab);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i) {
      for (auto code : visits[i]->codes[k]) target(i, code) = 1.0;
      if (noised[i][k]) rows.push_back(i);
    }
    if (!rows.empty()) {
      Tensor sub = Tensor::zeros(rows.size(), vocab);
      for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy(target.row_span(rows[r]).begin(), target.row_span(rows[r]).end(), sub.row_span(r).begin());
      Var pred_slice = g.gather_rows(g.slice_cols(prediction, k * d, (k + 1) * d), rows);
      logits.push_back(g.add_row(g.matmul(pred_slice, table_t), bias));
      targets.push_back(std::move(target));
      targets.push_back(std::move(sub));
    } else {
      targets.push_back(std::move(target));
    }
  }
  return vlb_combine(g, prediction, clean, noised, ts, logits, targets);
}

// ---------------------------------------------------------------- config

void DiffusionConfig::validate() const {
  if (denoiser.dim == 0) throw ConfigError("dim", "must be positive");
  if (denoiser.heads == 0 || denoiser.dim % denoiser.heads != 0) throw ConfigError("heads", "must divide dim");
  if (denoiser.ffn_mult == 0) throw ConfigError("ffn_mult", "must be positive");
  if (steps == 0) throw ConfigError("steps", "must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("beta_start", "need 0 < beta_start <= beta_end < 1");
  }
  if (prototypes == 0) throw ConfigError("prototypes", "must be positive");
  if (!(p_drop >= 0.0 && p_drop < 1.0)) throw ConfigError("p_drop", "must lie in [0, 1)");
  if (!(guidance >= 0.0)) throw ConfigError("guidance", "must be nonnegative");
  if (sample_steps == 0 || sample_steps > steps) throw ConfigError("sample_steps", "must lie in [1, steps]");
  if (!(lr > 0.0)) throw ConfigError("lr", "must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be nonnegative");
  if (batch == 0) throw ConfigError("batch", "must be positive");
}

nlohmann::json DiffusionConfig::to_json() const {
  return {{"dim", denoiser.dim},       {"layers", denoiser.layers}, {"heads", denoiser.heads},
          {"ffn_mult", denoiser.ffn_mult}, {"steps", steps},         {"beta_start", beta_start},
          {"beta_end", beta_end},      {"prototypes", prototypes}, {"kmeans_iters", kmeans_iters},
          {"p_drop", p_drop},          {"guidance", guidance},     {"sample_steps", sample_steps},
          {"lr", lr},                  {"weight_decay", weight_decay}, {"batch", batch},
          {"epochs", epochs},          {"seed", seed}};
}

DiffusionConfig DiffusionConfig::from_json(const nlohmann::json& j) {
  DiffusionConfig c;
  if (!j.is_object()) throw ConfigError("diffusion", "expected an object");
  auto read = [&](const std::string& key, auto& field) {
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(key, "wrong type");
    }
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "dim") read(key, c.denoiser.dim);
    else if (key == "layers") read(key, c.denoiser.layers);
    else if (key == "heads") read(key, c.denoiser.heads);
    else if (key == "ffn_mult") read(key, c.denoiser.ffn_mult);
    else if (key == "steps") read(key, c.steps);
    else if (key == "beta_start") read(key, c.beta_start);
    else if (key == "beta_end") read(key, c.beta_end);
    else if (key == "prototypes") read(key, c.prototypes);
    else if (key == "kmeans_iters") read(key, c.kmeans_iters);
    else if (key == "p_drop") read(key, c.p_drop);
    else if (key == "guidance") read(key, c.guidance);
    else if (key == "sample_steps") read(key, c.sample_steps);
    else if (key == "lr") read(key, c.lr);
    else if (key == "weight_decay") read(key, c.weight_decay);
    else if (key == "batch") read(key, c.batch);
    else if (key == "epochs") read(key, c.epochs);
    else if (key == "seed") read(key, c.seed);
    else throw ConfigError(key, "unknown diffusion field");
  }
  return c;
}

// ---------------------------------------------------------------- training

namespace {

enum : std::uint64_t { kInitStream = 11, kEpochStream = 12, kBatchStream = 13 };

// The six observed patterns with one or two views missing.
Flags proper_pattern(std::size_t index) {
  const std::size_t missing_bits = index + 1;  // 1..6
  Flags f{};
  for (std::size_t k = 0; k < kViewCount; ++k) f[k] = ((missing_bits >> k) & 1U) == 0;
  return f;
}

encoder::EmbeddingTables tables_of(const ParameterStore& store) { return encoder::EmbeddingTables::from_store(store); }

}  // namespace

DiffusionTraining train_diffusion(const corpus::Cohort& train, const DiffusionConfig& config,
                                  const EpochCallback& on_epoch) {
  config.validate();
  DiffusionTraining result;
  DiffusionModel& model = result.model;
  model.config = config;
  model.schedule = make_schedule(config.steps, config.beta_start, config.beta_end);
  for (std::size_t k = 0; k < kViewCount; ++k) model.vocab_sizes[k] = train.vocabs[k].size;

  CounterRng init(config.seed, kInitStream);
  encoder::add_encoder_parameters(model.params, model.vocab_sizes, config.denoiser.dim, init);
  add_denoiser_parameters(model.params, config.denoiser, model.vocab_sizes, init);

  struct Ref {
    std::size_t patient, visit;
  };
  std::vector<Ref> complete;
  for (std::size_t i = 0; i < train.records.size(); ++i)
    for (std::size_t j = 0; j < train.records[i].visits.size(); ++j)
      if (train.records[i].visits[j].complete() && train.records[i].visits[j].originally_missing_count() == 0)
        complete.push_back({i, j});
  if (complete.empty()) throw DomainError("train_diffusion: no complete visit in the training cohort");

  numerics::Adam adam({config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
  const std::size_t width = kViewCount * config.denoiser.dim;

  model.prototypes = encoder::fit_prototypes(train, tables_of(model.params), config.prototypes, config.seed,
                                             config.kmeans_iters);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (epoch > 0) {
      model.prototypes = encoder::fit_prototypes(train, tables_of(model.params), config.prototypes,
                                                 config.seed + epoch, config.kmeans_iters);
    }
    std::vector<Ref> order = complete;
    CounterRng(config.seed, kEpochStream).fork(epoch).shuffle(order);

    EpochStats stats;
    stats.epoch = epoch + 1;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t end = std::min(order.size(), start + config.batch);
      CounterRng rng = CounterRng(config.seed, kBatchStream).fork((epoch << 32) | stats.batches);
      std::vector<TrainingItem> items;
      items.reserve(end - start);
      for (std::size_t r = start; r < end; ++r) {
        const auto& rec = train.records[order[r].patient];
        TrainingItem item;
        item.visit = &rec.visits[order[r].visit];
        for (std::size_t h = 0; h < order[r].visit; ++h) item.history.push_back(&rec.visits[h]);
        item.observed = proper_pattern(rng.uniform_index(6));
        item.t = 1 + rng.uniform_index(config.steps);
        item.drop_condition = rng.bernoulli(config.p_drop);
        item.noise = numerics::random_normal(1, width, 1.0, rng);
        items.push_back(std::move(item));
      }

      model.params.zero_grad();
      Graph g;
      ParamBinder p(g, model.params);
      VlbParts parts = vlb_loss(p, items, model.prototypes, model.schedule, config.denoiser);
      const double loss = parts.total.value().item();
      if (!std::isfinite(loss)) {
        throw TrainingError("train_diffusion: non-finite loss at epoch " + std::to_string(epoch + 1) + " batch " +
                            std::to_string(stats.batches + 1) + " (mse_t=" + std::to_string(parts.mse_t) +
                            ", mse_emb=" + std::to_string(parts.mse_emb) +
                            ", nll_round=" + std::to_string(parts.nll_round) + ")");
      }
      g.backward(parts.total);
      adam.step(model.params);

      stats.loss += loss;
      stats.mse_t += parts.mse_t;
      stats.mse_emb += parts.mse_emb;
      stats.nll_round += parts.nll_round;
      ++stats.batches;
    }
    const double nb = static_cast<double>(stats.batches);
    stats.loss /= nb;
    stats.mse_t /= nb;
    stats.mse_emb /= nb;
    stats.nll_round /= nb;
    result.history.push_back(stats);
    if (on_epoch) on_epoch(model, stats);
  }
  model.prototypes = encoder::fit_prototypes(train, tables_of(model.params), config.prototypes,
                                             config.seed + config.epochs, config.kmeans_iters);
  return result;
}

// ---------------------------------------------------------------- persistence

namespace {
constexpr std::array<const char*, kViewCount> kPrototypeNames = {"proto.d", "proto.p", "proto.m"};
}

void save_model(const DiffusionModel& model, const std::filesystem::path& dir) {
  ParameterStore all = model.params;
  for (std::size_t k = 0; k < kViewCount; ++k) all.add(kPrototypeNames[k], model.prototypes.centroids[k], false);
  nlohmann::json hyper{{"kind", "diffusion"}, {"config", model.config.to_json()}, {"vocab_sizes", model.vocab_sizes}};
  numerics::save_checkpoint(dir, all, hyper);
}

DiffusionModel load_model(const std::filesystem::path& dir) {
  auto ck = numerics::load_checkpoint(dir);
  if (ck.hyperparameters.value("kind", "") != "diffusion") {
    throw ValidationError("checkpoint at " + dir.string() + " is not a diffusion model");
  }
  DiffusionModel model;
  model.config = DiffusionConfig::from_json(ck.hyperparameters.at("config"));
  model.config.validate();
  model.vocab_sizes = ck.hyperparameters.at("vocab_sizes").get<std::array<std::size_t, kViewCount>>();
  model.schedule = make_schedule(model.config.steps, model.config.beta_start, model.config.beta_end);
  for (auto& p : ck.params) {
    bool proto = false;
    for (std::size_t k = 0; k < kViewCount; ++k) {
      if (p.name == kPrototypeNames[k]) {
        model.prototypes.centroids[k] = p.value;
        proto = true;
      }
    }
    if (!proto) model.params.add(p.name, p.value, p.trainable);
  }
  return model;
}

// ---------------------------------------------------------------- sampling

std::uint64_t visit_seed(std::uint64_t seed, std::size_t patient, std::size_t visit) noexcept {
  return mix64(mix64(seed ^ 0x696d70757465ULL) + mix64(patient * 0x9e3779b97f4a7c15ULL + visit));
}

DiffusionState sample(const DiffusionModel& model, std::span<const corpus::Visit* const> visits,
                      std::span<const std::vector<const corpus::Visit*>> histories,
                      std::span<const std::uint64_t> row_seeds, const ImputeOptions& options,
                      std::vector<DiffusionState>* states) {
  const std::size_t n = visits.size();
  if (histories.size() != n || row_seeds.size() != n) throw ShapeError("sample: per-row inputs differ in length");
  if (n == 0) throw DomainError("sample: empty batch");
  const std::size_t d = model.config.denoiser.dim;
  const std::size_t width = kViewCount * d;
  const auto tables = encoder::EmbeddingTables::from_store(model.params);
  const auto intra = encoder::IntraParams::from_store(model.params);

  Tensor z = Tensor::zeros(n, width), c = z, b = z, v = z;
  std::vector<Flags> missing(n);
  for (std::size_t i = 0; i < n; ++i) {
    const corpus::Visit& visit = *visits[i];
    std::vector<Tensor> hist;
    for (const auto* h : histories[i]) hist.push_back(encoder::encode_visit(*h, tables));
    const Tensor zi = encoder::intra_condition(hist, intra, d);
    const Tensor vi = encoder::encode_visit(visit, tables);
    const Tensor ci = encoder::prototype_condition(vi, visit.observed, model.prototypes);
    const Tensor bi = encoder::mask_vector(visit.observed, tables);
    CounterRng rng(row_seeds[i], 0x73616d706c65ULL);
    for (std::size_t col = 0; col < width; ++col) {
      z(i, col) = zi[col];
      c(i, col) = ci[col];
      b(i, col) = bi[col];
      const std::size_t k = col / d;
      // Draw for every slot so a row's noise does not depend on which views are missing.
      const double eps = rng.normal();
      v(i, col) = visit.observed[k] ? vi[col] : eps;
    }
    for (std::size_t k = 0; k < kViewCount; ++k) missing[i][k] = !visit.observed[k];
  }
  DiffusionState state = encoder::assemble_h0(z, c, b, v);
  state.noised = missing;
  state.t = model.schedule.steps;
  if (states) states->push_back(state);

  const auto steps = strided_steps(model.schedule.steps, options.sample_steps);
  const std::size_t z_off = state.layout.block_offset(Block::z);
  const std::size_t b_off = state.layout.block_offset(Block::b);
  const ParameterStore& frozen = model.params;
  for (std::size_t idx = 0; idx < steps.size(); ++idx) {
    const std::size_t t = steps[idx];
    const std::size_t s = idx + 1 < steps.size() ? steps[idx + 1] : 0;
    // Conditional rows first, then the same rows with z and c zeroed.
    Tensor both = Tensor::zeros(2 * n, state.layout.width());
    for (std::size_t i = 0; i < n; ++i) {
      auto src = state.h.row_span(i);
      std::copy(src.begin(), src.end(), both.row_span(i).begin());
      auto dst = both.row_span(n + i);
      std::copy(src.begin(), src.end(), dst.begin());
      std::fill(dst.begin() + static_cast<std::ptrdiff_t>(z_off), dst.begin() + static_cast<std::ptrdiff_t>(b_off),
                0.0);
    }
    std::vector<std::size_t> ts(2 * n, t);
    Graph g;
    ParamBinder p(g, frozen);
    const Tensor& out = denoise(p, g.constant(std::move(both)), ts, model.config.denoiser).value();
    Tensor cond = Tensor::zeros(n, width), uncond = Tensor::zeros(n, width);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(out.row_span(i).begin(), out.row_span(i).end(), cond.row_span(i).begin());
      std::copy(out.row_span(n + i).begin(), out.row_span(n + i).end(), uncond.row_span(i).begin());
    }
    state.t = t;
    state = posterior_step(state, s, cfg_combine(uncond, cond, options.guidance), Tensor(), model.schedule);
    if (states) states->push_back(state);
  }
  return state;
}

namespace {

void decode_into(corpus::Visit& out, const DiffusionState& state, std::size_t row,
                 const encoder::EmbeddingTables& tables, const ParameterStore& params) {
  for (std::size_t k = 0; k < kViewCount; ++k) {
    if (!state.noised[row][k]) continue;
    const Tensor slot = state.slot(row, Block::v, k);
    out.codes[k] = round_decode(slot.values(), tables.codes[k], params.at(kDecodeBias[k]).value);
    out.observed[k] = true;
    out.imputed[k] = true;
  }
}

}  // namespace

corpus::Visit impute_visit(const corpus::Visit& visit, std::span<const corpus::Visit* const> history,
                           const DiffusionModel& model, const ImputeOptions& options) {
  if (visit.complete()) return visit;
  const corpus::Visit* rows[] = {&visit};
  std::vector<std::vector<const corpus::Visit*>> hist{{history.begin(), history.end()}};
  const std::uint64_t seeds[] = {options.seed};
  DiffusionState final_state = sample(model, rows, hist, seeds, options);
  corpus::Visit out = visit;
  decode_into(out, final_state, 0, encoder::EmbeddingTables::from_store(model.params), model.params);
  return out;
}

corpus::Cohort impute_cohort(const corpus::Cohort& cohort, const DiffusionModel& model, const ImputeOptions& options,
                             std::size_t jobs) {
  for (std::size_t k = 0; k < kViewCount; ++k) {
    if (cohort.vocabs[k].size != model.vocab_sizes[k]) {
      throw ValidationError("impute: cohort vocabulary does not match the model");
    }
  }
  corpus::Cohort out = cohort;
  out.imputation_annotated = true;
  const auto tables = encoder::EmbeddingTables::from_store(model.params);

  auto work = [&](std::size_t patient) {
    const auto& rec = cohort.records[patient];
    std::vector<const corpus::Visit*> rows;
    std::vector<std::vector<const corpus::Visit*>> histories;
    std::vector<std::uint64_t> seeds;
    std::vector<std::size_t> index;
    for (std::size_t j = 0; j < rec.visits.size(); ++j) {
      if (rec.visits[j].complete()) continue;
      rows.push_back(&rec.visits[j]);
      std::vector<const corpus::Visit*> hist;
      for (std::size_t h = 0; h < j; ++h) hist.push_back(&rec.visits[h]);
      histories.push_back(std::move(hist));
      seeds.push_back(visit_seed(options.seed, patient, j));
      index.push_back(j);
    }
    if (rows.empty()) return;
    DiffusionState final_state = sample(model, rows, histories, seeds, options);
    for (std::size_t r = 0; r < rows.size(); ++r) decode_into(out.records[patient].visits[index[r]], final_state, r, tables, model.params);
  };

  const std::size_t n = cohort.records.size();
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(jobs);
    for (std::size_t w = 0; w < jobs; ++w) {
      threads.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += jobs) work(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace mvdiff::diffusion
