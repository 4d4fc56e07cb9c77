#include "mvdiff/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include "mvdiff/checkpoint.hpp"
#include "mvdiff/error.hpp"
#include "mvdiff/optim.hpp"

namespace mvdiff::predictor {

std::string_view task_name(Task t) noexcept { return t == Task::phe ? "phe" : "los"; }

Task task_from_name(std::string_view name) {
  if (name == "phe") return Task::phe;
  if (name == "los") return Task::los;
  throw ConfigError("task", "expected phe or los, got '" + std::string(name) + "'");
}

std::size_t task_dim(Task t, const corpus::Cohort& cohort) {
  return t == Task::phe ? cohort.n_phenotypes : corpus::kLosClasses;
}

void PredictorConfig::validate() const {
  if (dim == 0) throw ConfigError("dim", "must be positive");
  if (heads == 0 || dim % heads != 0) throw ConfigError("heads", "must divide dim");
  if (ffn_mult == 0) throw ConfigError("ffn_mult", "must be positive");
  if (!(eta >= 0.0)) throw ConfigError("eta", "must be nonnegative");
  if (!(loss_guard > 0.0)) throw ConfigError("loss_guard", "must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr", "must be positive");
  if (!(rho_lr > 0.0)) throw ConfigError("rho_lr", "must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be nonnegative");
  if (batch == 0) throw ConfigError("batch", "must be positive");
}

nlohmann::json PredictorConfig::to_json() const {
  return {{"task", task_name(task)}, {"dim", dim},       {"layers", layers},
          {"heads", heads},          {"ffn_mult", ffn_mult}, {"eta", eta},
          {"loss_guard", loss_guard}, {"lr", lr},        {"rho_lr", rho_lr},
          {"weight_decay", weight_decay}, {"batch", batch}, {"epochs", epochs},
          {"seed", seed}};
}

PredictorConfig PredictorConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("predictor", "expected an object");
  PredictorConfig c;
  auto read = [&](const std::string& key, auto& field) {
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(key, "wrong type");
    }
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "task") {
      std::string name;
      read(key, name);
      c.task = task_from_name(name);
    } else if (key == "dim") read(key, c.dim);
    else if (key == "layers") read(key, c.layers);
    else if (key == "heads") read(key, c.heads);
    else if (key == "ffn_mult") read(key, c.ffn_mult);
    else if (key == "eta") read(key, c.eta);
    else if (key == "loss_guard") read(key, c.loss_guard);
    else if (key == "lr") read(key, c.lr);
    else if (key == "rho_lr") read(key, c.rho_lr);
    else if (key == "weight_decay") read(key, c.weight_decay);
    else if (key == "batch") read(key, c.batch);
    else if (key == "epochs") read(key, c.epochs);
    else if (key == "seed") read(key, c.seed);
    else throw ConfigError(key, "unknown predictor field");
  }
  return c;
}

std::string view_head(std::size_t view) { return std::string("head.") + kViewTags[view]; }

namespace {

std::string table_name(std::size_t k) { return std::string("pe.") + kViewTags[k]; }
std::string block_prefix(std::size_t k, std::size_t l) {
  return std::string("pl.") + kViewTags[k] + ".l" + std::to_string(l) + ".";
}
std::string final_norm(std::size_t k) { return std::string("pl.") + kViewTags[k] + ".ln"; }

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

void add_predictor_parameters(ParameterStore& store, const PredictorConfig& config,
                              const std::array<std::size_t, kViewCount>& vocab_sizes, std::size_t out_dim,
                              CounterRng& rng) {
  config.validate();
  if (out_dim == 0) throw ConfigError("task", "label space is empty");
  const std::size_t d = config.dim;
  for (std::size_t k = 0; k < kViewCount; ++k) {
    store.add(table_name(k), numerics::random_normal(vocab_sizes[k], d, 1.0 / std::sqrt(double(d)), rng));
    for (std::size_t l = 0; l < config.layers; ++l) {
      const std::string pre = block_prefix(k, l);
      add_norm(store, pre + "ln1", d);
      add_linear(store, pre + "q", d, d, rng);
      add_linear(store, pre + "k", d, d, rng, false);
      add_linear(store, pre + "v", d, d, rng);
      add_linear(store, pre + "o", d, d, rng);
      add_norm(store, pre + "ln2", d);
      add_linear(store, pre + "ff1", d, config.ffn_mult * d, rng);
      add_linear(store, pre + "ff2", config.ffn_mult * d, d, rng);
    }
    add_norm(store, final_norm(k), d);
  }
  add_linear(store, kFusedHead, kViewCount * d, out_dim, rng);
  for (std::size_t k = 0; k < kViewCount; ++k) add_linear(store, view_head(k), d, out_dim, rng);
  store.add(kRho, Tensor::zeros(1, kViewCount));
}

Longitudinal encode_longitudinal(ParamBinder& p, std::span<const corpus::PatientRecord* const> patients,
                                 const PredictorConfig& config) {
  Graph& g = p.graph();
  const std::size_t d = config.dim;
  if (patients.empty()) throw DomainError("encode_longitudinal: no patients");
  Longitudinal out;
  std::size_t rows = 0;
  for (const auto* rec : patients) {
    if (rec->visits.empty()) throw DomainError("encode_longitudinal: patient '" + rec->id + "' has no visits");
    out.lengths.push_back(rec->visits.size());
    rows += rec->visits.size();
  }
  Tensor pos = Tensor::zeros(rows, d);
  {
    std::size_t r = 0;
    for (const auto* rec : patients) {
      for (std::size_t j = 0; j < rec->visits.size(); ++j, ++r) {
        auto e = numerics::sinusoidal_embedding(static_cast<double>(j), d);
        std::copy(e.begin(), e.end(), pos.row_span(r).begin());
      }
    }
  }
  Var position = g.constant(std::move(pos));

  numerics::AttentionOptions opt;
  opt.heads = config.heads;
  opt.causal = true;
  opt.segments = out.lengths;
  for (std::size_t k = 0; k < kViewCount; ++k) {
    Var table = p(table_name(k));
    std::vector<std::vector<std::size_t>> bags;
    bags.reserve(rows);
    for (const auto* rec : patients) {
      for (const auto& v : rec->visits) {
        std::vector<std::size_t> bag;
        if (v.observed[k]) {
          for (auto c : v.codes[k]) {
            if (c >= table.rows()) {
              throw ValidationError("encode_longitudinal: view " + std::string(kViewTags[k]) + " code " +
                                    std::to_string(c) + " out of range");
            }
            bag.push_back(c);
          }
        }
        bags.push_back(std::move(bag));
      }
    }
    Var x = g.embedding_bag(table, std::move(bags)) + position;
    for (std::size_t l = 0; l < config.layers; ++l) {
      const std::string pre = block_prefix(k, l);
      Var n = numerics::layer_norm_affine(p, x, pre + "ln1");
      Var a = g.attention(numerics::linear(p, n, pre + "q"), g.matmul(n, p(pre + "k.w")),
                          numerics::linear(p, n, pre + "v"), opt);
      x = x + numerics::linear(p, a, pre + "o");
      Var n2 = numerics::layer_norm_affine(p, x, pre + "ln2");
      x = x + numerics::linear(p, g.gelu(numerics::linear(p, n2, pre + "ff1")), pre + "ff2");
    }
    out.u[k] = numerics::layer_norm_affine(p, x, final_norm(k));
  }
  return out;
}

HeadOutputs predict(ParamBinder& p, const std::array<Var, kViewCount>& u) {
  Graph& g = p.graph();
  const std::size_t d = p(view_head(0) + ".w").rows();
  for (std::size_t k = 0; k < kViewCount; ++k) {
    if (u[k].cols() != d || u[k].rows() != u[0].rows()) {
      throw ShapeError("predict: view " + std::string(kViewTags[k]) + " input " + u[k].value().shape_string() +
                       " does not match head width " + std::to_string(d));
    }
  }
  HeadOutputs out;
  out.fused = numerics::linear(p, g.concat_cols(u), kFusedHead);
  for (std::size_t k = 0; k < kViewCount; ++k) out.per_view[k] = numerics::linear(p, u[k], view_head(k));
  return out;
}

Targets make_targets(std::span<const corpus::PatientRecord* const> patients, Task task, std::size_t out_dim) {
  Targets t;
  std::vector<std::vector<std::uint32_t>> sets;
  std::size_t base = 0;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const auto& visits = patients[i]->visits;
    for (std::size_t j = 0; j < visits.size(); ++j) {
      if (task == Task::phe) {
        if (j + 1 >= visits.size()) continue;
        t.rows.push_back(base + j);
        t.source.emplace_back(i, j + 1);
        sets.push_back(visits[j + 1].phenotypes);
      } else {
        if (visits[j].los_class >= out_dim) throw ValidationError("los class out of range");
        t.rows.push_back(base + j);
        t.source.emplace_back(i, j);
        t.classes.push_back(visits[j].los_class);
      }
    }
    base += visits.size();
  }
  if (task == Task::phe && !sets.empty()) {
    t.multi = Tensor::zeros(sets.size(), out_dim);
    for (std::size_t r = 0; r < sets.size(); ++r) {
      for (auto c : sets[r]) {
        if (c >= out_dim) throw ValidationError("phenotype label out of range");
        t.multi(r, c) = 1.0;
      }
    }
  }
  return t;
}

Var task_loss(Graph& g, Var logits, const Targets& targets, Task task) {
  if (task == Task::phe) return g.bce_with_logits(logits, targets.multi);
  return g.cross_entropy(logits, targets.classes);
}

std::array<double, kViewCount> relative_advantage(double fused, const std::array<double, kViewCount>& views,
                                                  double guard) {
  if (!(fused > guard)) {
    throw DomainError("relative_advantage: fused loss " + std::to_string(fused) + " is at or below the guard");
  }
  std::array<double, kViewCount> r{};
  for (std::size_t k = 0; k < kViewCount; ++k) r[k] = (fused - views[k]) / fused;
  return r;
}

Var advantage_weights(ParamBinder& p) { return p.graph().softmax_rows(p(kRho)); }

Var inverse_advantage_loss(Graph& g, const std::array<double, kViewCount>& r, Var n) {
  if (n.rows() != 1 || n.cols() != kViewCount) throw ShapeError("inverse_advantage_loss: weights must be [1, 3]");
  return g.sum(g.mul(n, g.constant(Tensor::row({r[0], r[1], r[2]}))));
}

Var total_loss(Graph& g, const std::array<Var, kViewCount>& losses, const std::array<double, kViewCount>& r, Var n,
               double eta) {
  Var task = g.mul(g.slice_cols(n, 0, 1), losses[0]);
  for (std::size_t k = 1; k < kViewCount; ++k) task = g.add(task, g.mul(g.slice_cols(n, k, k + 1), losses[k]));
  if (eta == 0.0) return task;
  return g.add(task, g.scale(inverse_advantage_loss(g, r, n), eta));
}

namespace {

std::array<Var, kViewCount> gather_targets(Graph& g, const Longitudinal& enc, const Targets& targets) {
  std::array<Var, kViewCount> u;
  for (std::size_t k = 0; k < kViewCount; ++k) u[k] = g.gather_rows(enc.u[k], targets.rows);
  return u;
}

}  // namespace

BatchLosses batch_losses(ParamBinder& p, std::span<const corpus::PatientRecord* const> patients,
                         const PredictorConfig& config, std::size_t out_dim) {
  Graph& g = p.graph();
  const Targets targets = make_targets(patients, config.task, out_dim);
  if (targets.empty()) throw DomainError("batch_losses: batch has no targets");
  const Longitudinal enc = encode_longitudinal(p, patients, config);
  const HeadOutputs heads = predict(p, gather_targets(g, enc, targets));

  BatchLosses out;
  out.fused = task_loss(g, heads.fused, targets, config.task);
  std::array<double, kViewCount> view_values{};
  for (std::size_t k = 0; k < kViewCount; ++k) {
    out.views[k] = task_loss(g, heads.per_view[k], targets, config.task);
    view_values[k] = out.views[k].value().item();
  }
  out.r = relative_advantage(out.fused.value().item(), view_values, config.loss_guard);
  Var n = advantage_weights(p);
  for (std::size_t k = 0; k < kViewCount; ++k) out.n[k] = n.value()(0, k);
  Var frozen_n = g.constant(n.value());
  Var objective = g.add(out.fused, total_loss(g, out.views, out.r, frozen_n, 0.0));
  if (config.eta > 0.0) objective = g.add(objective, g.scale(inverse_advantage_loss(g, out.r, n), config.eta));
  out.objective = objective;
  return out;
}

std::array<double, kViewCount> PredictorModel::weights() const {
  const Tensor& rho = params.at(kRho).value;
  const double m = std::max({rho[0], rho[1], rho[2]});
  std::array<double, kViewCount> n{};
  double z = 0.0;
  for (std::size_t k = 0; k < kViewCount; ++k) z += n[k] = std::exp(rho[k] - m);
  for (double& v : n) v /= z;
  return n;
}

namespace {
enum : std::uint64_t { kInitStream = 21, kShuffleStream = 22 };
}

PredictorTraining train_predictor(const corpus::Cohort& train, const PredictorConfig& config,
                                  const PredictorCallback& on_epoch) {
  config.validate();
  PredictorTraining result;
  PredictorModel& model = result.model;
  model.config = config;
  model.out_dim = task_dim(config.task, train);
  for (std::size_t k = 0; k < kViewCount; ++k) model.vocab_sizes[k] = train.vocabs[k].size;
  CounterRng init(config.seed, kInitStream);
  add_predictor_parameters(model.params, config, model.vocab_sizes, model.out_dim, init);

  std::vector<const corpus::PatientRecord*> usable;
  for (const auto& rec : train.records) {
    const std::size_t need = config.task == Task::phe ? 2 : 1;
    if (rec.visits.size() >= need) usable.push_back(&rec);
  }
  if (usable.empty()) throw DomainError("train_predictor: no patient yields a " + std::string(task_name(config.task)) + " target");

  numerics::Adam adam({config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
  adam.set_override(kRho, config.rho_lr, 0.0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    auto order = usable;
    CounterRng(config.seed, kShuffleStream).fork(epoch).shuffle(order);
    PredictorEpoch stats;
    stats.epoch = epoch + 1;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t end = std::min(order.size(), start + config.batch);
      std::span<const corpus::PatientRecord* const> batch(order.data() + start, end - start);
      model.params.zero_grad();
      Graph g;
      ParamBinder p(g, model.params);
      BatchLosses losses = batch_losses(p, batch, config, model.out_dim);
      const double value = losses.objective.value().item();
      if (!std::isfinite(value)) {
        throw TrainingError("train_predictor: non-finite loss at epoch " + std::to_string(epoch + 1) + " batch " +
                            std::to_string(stats.batches + 1) +
                            " (fused=" + std::to_string(losses.fused.value().item()) + ")");
      }
      g.backward(losses.objective);
      adam.step(model.params);
      stats.loss += value;
      stats.fused += losses.fused.value().item();
      for (std::size_t k = 0; k < kViewCount; ++k) {
        stats.views[k] += losses.views[k].value().item();
        stats.r[k] += losses.r[k];
      }
      ++stats.batches;
    }
    const double nb = static_cast<double>(stats.batches);
    stats.loss /= nb;
    stats.fused /= nb;
    for (std::size_t k = 0; k < kViewCount; ++k) {
      stats.views[k] /= nb;
      stats.r[k] /= nb;
    }
    stats.n = model.weights();
    result.history.push_back(stats);
    if (on_epoch) on_epoch(model, stats);
  }
  return result;
}

void save_predictor(const PredictorModel& model, const std::filesystem::path& dir) {
  nlohmann::json hyper{{"kind", "predictor"},
                       {"config", model.config.to_json()},
                       {"vocab_sizes", model.vocab_sizes},
                       {"out_dim", model.out_dim}};
  numerics::save_checkpoint(dir, model.params, hyper);
}

PredictorModel load_predictor(const std::filesystem::path& dir) {
  auto ck = numerics::load_checkpoint(dir);
  if (ck.hyperparameters.value("kind", "") != "predictor") {
    throw ValidationError("checkpoint at " + dir.string() + " is not a predictor");
  }
  PredictorModel model;
  model.config = PredictorConfig::from_json(ck.hyperparameters.at("config"));
  model.config.validate();
  model.vocab_sizes = ck.hyperparameters.at("vocab_sizes").get<std::array<std::size_t, kViewCount>>();
  model.out_dim = ck.hyperparameters.at("out_dim").get<std::size_t>();
  model.params = std::move(ck.params);
  return model;
}

namespace {

std::vector<double> to_scores(std::span<const double> logits, Task task) {
  std::vector<double> s(logits.begin(), logits.end());
  if (task == Task::phe) {
    for (double& v : s) v = 1.0 / (1.0 + std::exp(-v));
  } else {
    const double m = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double& v : s) z += v = std::exp(v - m);
    for (double& v : s) v /= z;
  }
  return s;
}

}  // namespace

std::vector<Prediction> predict_cohort(const PredictorModel& model, const corpus::Cohort& cohort, std::size_t jobs) {
  if (task_dim(model.config.task, cohort) != model.out_dim) {
    throw ValidationError("predict: cohort label space does not match the model");
  }
  for (std::size_t k = 0; k < kViewCount; ++k) {
    if (cohort.vocabs[k].size != model.vocab_sizes[k]) throw ValidationError("predict: vocabulary mismatch");
  }
  const std::size_t n = cohort.records.size();
  std::vector<std::vector<Prediction>> per_patient(n);
  auto work = [&](std::size_t i) {
    const corpus::PatientRecord* rec[] = {&cohort.records[i]};
    if (rec[0]->visits.empty()) return;
    const Targets targets = make_targets(rec, model.config.task, model.out_dim);
    if (targets.empty()) return;
    Graph g;
    ParamBinder p(g, static_cast<const ParameterStore&>(model.params));
    const Longitudinal enc = encode_longitudinal(p, rec, model.config);
    const HeadOutputs heads = predict(p, gather_targets(g, enc, targets));
    const Tensor& logits = heads.fused.value();
    for (std::size_t r = 0; r < targets.rows.size(); ++r) {
      Prediction pr;
      pr.patient = i;
      pr.id = cohort.records[i].id;
      pr.visit = targets.source[r].second;
      pr.scores = to_scores(logits.row_span(r), model.config.task);
      if (model.config.task == Task::phe) {
        pr.label_set = cohort.records[i].visits[pr.visit].phenotypes;
      } else {
        pr.label_class = targets.classes[r];
      }
      per_patient[i].push_back(std::move(pr));
    }
  };
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
  std::vector<Prediction> out;
  for (auto& v : per_patient)
    for (auto& pr : v) out.push_back(std::move(pr));
  return out;
}

void write_predictions(const std::vector<Prediction>& predictions, Task task, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (const auto& p : predictions) {
    nlohmann::json j{{"patient", p.patient}, {"id", p.id}, {"visit", p.visit}, {"scores", p.scores}};
    if (task == Task::phe) j["label"] = p.label_set;
    else j["label"] = p.label_class;
    out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict) << '\n';
  }
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path, Task task) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::vector<Prediction> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Prediction p;
      p.patient = j.at("patient").get<std::size_t>();
      p.id = j.value("id", "");
      p.visit = j.at("visit").get<std::size_t>();
      p.scores = j.at("scores").get<std::vector<double>>();
      if (task == Task::phe) p.label_set = j.at("label").get<std::vector<std::uint32_t>>();
      else p.label_class = j.at("label").get<std::size_t>();
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(number, e.what());
    }
  }
  return out;
}

std::array<double, kViewCount> fused_input_gradient_norms(const PredictorModel& model,
                                                          std::span<const corpus::PatientRecord* const> patients) {
  ParameterStore store = model.params;
  store.zero_grad();
  Graph g;
  ParamBinder p(g, store);
  const Targets targets = make_targets(patients, model.config.task, model.out_dim);
  if (targets.empty()) throw DomainError("gradient contribution: batch has no targets");
  const Longitudinal enc = encode_longitudinal(p, patients, model.config);
  const auto u = gather_targets(g, enc, targets);
  const HeadOutputs heads = predict(p, u);
  Var loss = task_loss(g, heads.fused, targets, model.config.task);
  g.backward(loss);
  std::array<double, kViewCount> norms{};
  for (std::size_t k = 0; k < kViewCount; ++k) {
    double s = 0.0;
    for (double v : u[k].grad().values()) s += v * v;
    norms[k] = std::sqrt(s);
  }
  return norms;
}

}  // namespace mvdiff::predictor
