#include "mvdiff/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <variant>

#include "CLI11.hpp"
#include "mvdiff/corpus.hpp"
#include "mvdiff/diffusion.hpp"
#include "mvdiff/error.hpp"
#include "mvdiff/eval.hpp"
#include "mvdiff/hash.hpp"
#include "mvdiff/predictor.hpp"
#include "mvdiff/verify.hpp"

namespace mvdiff::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

json profile_config(std::string_view name) {
  corpus::CohortConfig cohort;
  diffusion::DiffusionConfig diff;
  predictor::PredictorConfig pred;
  if (name == "desk") {
    diff.epochs = 5;
  } else if (name == "full") {
    cohort.patients = 5000;
    diff.denoiser.dim = 128;
    pred.dim = 128;
    pred.epochs = 50;
  } else {
    throw ConfigError("profile", "unknown profile '" + std::string(name) + "' (desk, full)");
  }
  json cfg;
  cfg["cohort"] = cohort.to_json();
  cfg["data"] = {{"seed", 0}, {"missing_rate", 0.0}, {"missing_seed", 1}, {"split", false}, {"split_seed", 0}};
  cfg["diffusion"] = diff.to_json();
  // null guidance and sample_steps fall back to the trained model's values
  cfg["impute"] = {{"guidance", nullptr}, {"sample_steps", nullptr}, {"seed", 0}, {"jobs", 1}};
  cfg["predictor"] = pred.to_json();
  cfg["evaluate"] = {{"jobs", 1}, {"random_seed", 0}};
  return cfg;
}

void merge_config(json& base, const json& layer) {
  if (!layer.is_object()) throw ConfigError("config", "expected a JSON object");
  for (const auto& [section, values] : layer.items()) {
    if (!base.contains(section)) throw ConfigError(section, "unknown config section");
    if (!values.is_object()) throw ConfigError(section, "expected an object");
    for (const auto& [key, value] : values.items()) {
      if (!base[section].contains(key)) throw ConfigError(section + "." + key, "unknown config key");
      base[section][key] = value;
    }
  }
}

namespace {

using Clock = std::chrono::steady_clock;

// Thrown for bad combinations CLI11 cannot see; maps to exit 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename T>
T config_value(const json& cfg, const std::string& section, const std::string& key) {
  try {
    return cfg.at(section).at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key, "missing or wrong type");
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ParseError(1, path.string() + ": " + e.what());
  }
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

// Every flag that shadows a config key.
class Flags {
 public:
  using Value = std::variant<std::uint64_t, double, std::string, bool, std::vector<std::size_t>>;

  template <typename T>
  void add(CLI::App& app, const std::string& flag, std::string section, std::string key, const std::string& help) {
    auto& b = bindings_.emplace_back(Binding{std::move(section), std::move(key), T{}, nullptr});
    T& slot = std::get<T>(b.value);
    if constexpr (std::is_same_v<T, bool>) {
      b.option = app.add_flag(flag, slot, help);
    } else {
      b.option = app.add_option(flag, slot, help);
      if constexpr (std::is_same_v<T, std::vector<std::size_t>>) b.option->expected(3);
    }
  }

  void apply(json& cfg) const {
    for (const auto& b : bindings_) {
      if (b.option->count() == 0) continue;
      std::visit([&](const auto& v) { cfg[b.section][b.key] = v; }, b.value);
    }
  }

 private:
  struct Binding {
    std::string section, key;
    Value value;
    CLI::Option* option;
  };
  std::deque<Binding> bindings_;
};

std::vector<fs::path> files_under(const fs::path& p) {
  std::vector<fs::path> out;
  if (fs::is_directory(p)) {
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
  } else {
    out.push_back(p);
  }
  return out;
}

std::string absolute_string(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

class Manifest {
 public:
  Manifest(std::string command, std::vector<std::string> args, json config)
      : command_(std::move(command)), args_(std::move(args)), config_(std::move(config)) {}

  void input(const fs::path& p) { inputs_.push_back(p); }
  void output(const fs::path& p) { outputs_.push_back(p); }
  void checkpoint(const fs::path& p) { checkpoints_.push_back(p); }
  void metric(const fs::path& p) { metrics_.push_back(p); }
  void timing(const std::string& name, double seconds) { timings_[name] = seconds; }
  void set(const std::string& key, json value) { extra_[key] = std::move(value); }

  void write(const fs::path& path) const {
    auto hashed = [&](const std::vector<fs::path>& paths) {
      json list = json::array();
      for (const auto& root : paths)
        for (const auto& f : files_under(root)) {
          if (absolute_string(f) == absolute_string(path)) continue;
          list.push_back({{"path", absolute_string(f)}, {"sha1", git_blob_sha1_file(f)}});
        }
      return list;
    };
    auto plain = [](const std::vector<fs::path>& paths) {
      json list = json::array();
      for (const auto& p : paths) list.push_back(absolute_string(p));
      return list;
    };
    json j = {{"schema", 1},
              {"command", command_},
              {"args", args_},
              {"config", config_},
              {"inputs", hashed(inputs_)},
              {"outputs", hashed(outputs_)},
              {"checkpoints", plain(checkpoints_)},
              {"metrics", plain(metrics_)},
              {"timings", timings_}};
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    write_text(path, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> args_;
  json config_;
  std::vector<fs::path> inputs_, outputs_, checkpoints_, metrics_;
  json timings_ = json::object();
  json extra_ = json::object();
};

inline constexpr const char* kDirManifest = "run.manifest.json";

fs::path file_manifest(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

fs::path default_out(const std::string& given, const std::string& fallback) {
  if (!given.empty()) return given;
  const char* env = std::getenv(kOutDirEnv);
  return (env && *env ? fs::path(env) : fs::path(".")) / fallback;
}

// stem.jsonl -> stem<suffix>.jsonl
fs::path sibling(const fs::path& out, const std::string& suffix) {
  auto name = out.filename().string();
  const std::string ext = ".jsonl";
  if (name.size() > ext.size() && name.ends_with(ext)) name.resize(name.size() - ext.size());
  return out.parent_path() / (name + suffix + ext);
}

// report.csv -> report<suffix>.csv
fs::path csv_sibling(const fs::path& out, const std::string& suffix) {
  auto name = out.filename().string();
  if (name.ends_with(".csv")) name.resize(name.size() - 4);
  return out.parent_path() / (name + suffix + ".csv");
}

corpus::Cohort strip_imputation(const corpus::Cohort& cohort) {
  corpus::Cohort out = cohort;
  out.imputation_annotated = false;
  for (auto& r : out.records)
    for (auto& v : r.visits)
      for (std::size_t k = 0; k < corpus::kViewCount; ++k)
        if (v.imputed[k]) {
          v.codes[k].clear();
          v.observed[k] = false;
          v.imputed[k] = false;
        }
  return out;
}

std::size_t imputed_views(const corpus::Cohort& c) {
  std::size_t n = 0;
  for (const auto& r : c.records)
    for (const auto& v : r.visits)
      for (bool b : v.imputed) n += b;
  return n;
}

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::vector<std::string> args;
  json config;
  bool quiet = false;
};

// ---- subcommands

int gen_data(Context& ctx, const fs::path& out) {
  const auto start = Clock::now();
  const auto cc = corpus::CohortConfig::from_json(ctx.config["cohort"]);
  cc.validate();
  const auto seed = config_value<std::uint64_t>(ctx.config, "data", "seed");
  const auto rate = config_value<double>(ctx.config, "data", "missing_rate");
  const auto missing_seed = config_value<std::uint64_t>(ctx.config, "data", "missing_seed");
  const bool split = config_value<bool>(ctx.config, "data", "split");
  const auto split_seed = config_value<std::uint64_t>(ctx.config, "data", "split_seed");
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("data.missing_rate", "must lie in [0, 1)");

  Manifest m("gen-data", ctx.args, ctx.config);
  const auto full = corpus::generate_cohort(cc, seed);
  const bool masked = rate > 0.0;
  const auto cohort = masked ? corpus::apply_missingness(full, rate, missing_seed) : full;
  auto emit = [&](const corpus::Cohort& c, const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    corpus::persist_cohort(c, p);
    m.output(p);
  };
  emit(cohort, out);
  if (masked) emit(full, sibling(out, ".complete"));
  if (split) {
    const auto parts = corpus::split_cohort(cohort, split_seed);
    const std::pair<const char*, const corpus::Cohort*> named[] = {
        {"train", &parts.train}, {"val", &parts.val}, {"test", &parts.test}};
    for (const auto& [name, part] : named) emit(*part, sibling(out, std::string(".") + name));
    if (masked) {
      const auto truth = corpus::split_cohort(full, split_seed);
      const std::pair<const char*, const corpus::Cohort*> tnamed[] = {
          {"train", &truth.train}, {"val", &truth.val}, {"test", &truth.test}};
      for (std::size_t i = 0; i < 3; ++i) {
        const auto& a = named[i].second->records;
        const auto& b = tnamed[i].second->records;
        if (a.size() != b.size() || !std::equal(a.begin(), a.end(), b.begin(),
                                                [](const auto& x, const auto& y) { return x.id == y.id; }))
          throw ValidationError("masked and complete splits disagree");
        emit(*tnamed[i].second, sibling(out, std::string(".") + tnamed[i].first + ".complete"));
      }
    }
  }
  m.timing("total", seconds_since(start));
  m.write(file_manifest(out));
  ctx.out << "wrote " << cohort.records.size() << " patients, " << cohort.visit_count() << " visits to " << out.string()
          << "\n";
  return kExitOk;
}

int train_diffusion_cmd(Context& ctx, const fs::path& train_path, const fs::path& dir) {
  const auto start = Clock::now();
  const auto cohort = corpus::load_cohort(train_path);
  const auto dc = diffusion::DiffusionConfig::from_json(ctx.config["diffusion"]);
  std::ostringstream history;
  history << "epoch,loss,mse_t,mse_emb,nll_round,batches\n";
  auto result = diffusion::train_diffusion(cohort, dc, [&](const diffusion::DiffusionModel&, const diffusion::EpochStats& s) {
    history << s.epoch << ',' << fmt(s.loss) << ',' << fmt(s.mse_t) << ',' << fmt(s.mse_emb) << ','
            << fmt(s.nll_round) << ',' << s.batches << '\n';
    if (!ctx.quiet) ctx.out << "epoch " << s.epoch << " loss " << s.loss << "\n";
  });
  const double train_seconds = seconds_since(start);
  diffusion::save_model(result.model, dir);
  const auto hist = dir / "history.csv";
  write_text(hist, history.str());

  Manifest m("train-diffusion", ctx.args, ctx.config);
  m.input(train_path);
  m.output(dir);
  m.checkpoint(dir);
  m.metric(hist);
  m.timing("train", train_seconds);
  m.timing("total", seconds_since(start));
  m.write(dir / kDirManifest);
  ctx.out << "saved diffusion model to " << dir.string() << "\n";
  return kExitOk;
}

int impute_cmd(Context& ctx, const fs::path& cohort_path, const fs::path& model_dir, const fs::path& out) {
  const auto start = Clock::now();
  const auto cohort = corpus::load_cohort(cohort_path);
  const auto model = diffusion::load_model(model_dir);
  diffusion::ImputeOptions opt;
  const auto& sec = ctx.config["impute"];
  opt.guidance = sec["guidance"].is_null() ? model.config.guidance : config_value<double>(ctx.config, "impute", "guidance");
  opt.sample_steps = sec["sample_steps"].is_null() ? model.config.sample_steps
                                                   : config_value<std::size_t>(ctx.config, "impute", "sample_steps");
  opt.seed = config_value<std::uint64_t>(ctx.config, "impute", "seed");
  const auto jobs = config_value<std::size_t>(ctx.config, "impute", "jobs");
  if (jobs == 0) throw ConfigError("impute.jobs", "must be at least 1");
  const auto imputed = diffusion::impute_cohort(cohort, model, opt, jobs);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  corpus::persist_cohort(imputed, out);

  Manifest m("impute", ctx.args, ctx.config);
  m.input(cohort_path);
  m.input(model_dir);
  m.output(out);
  m.checkpoint(model_dir);
  m.set("resolved", {{"guidance", opt.guidance}, {"sample_steps", opt.sample_steps}, {"seed", opt.seed}});
  m.timing("total", seconds_since(start));
  m.write(file_manifest(out));
  ctx.out << "imputed " << imputed_views(imputed) << " views, wrote " << out.string() << "\n";
  return kExitOk;
}

int train_predictor_cmd(Context& ctx, const fs::path& train_path, const fs::path& dir) {
  const auto start = Clock::now();
  const auto cohort = corpus::load_cohort(train_path);
  const auto pc = predictor::PredictorConfig::from_json(ctx.config["predictor"]);
  std::ostringstream history;
  history << "epoch,loss,fused,loss_d,loss_p,loss_m,r_d,r_p,r_m,n_d,n_p,n_m,batches\n";
  auto result = predictor::train_predictor(cohort, pc, [&](const predictor::PredictorModel&, const predictor::PredictorEpoch& e) {
    history << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.fused);
    for (double v : e.views) history << ',' << fmt(v);
    for (double v : e.r) history << ',' << fmt(v);
    for (double v : e.n) history << ',' << fmt(v);
    history << ',' << e.batches << '\n';
    if (!ctx.quiet) ctx.out << "epoch " << e.epoch << " loss " << e.loss << " fused " << e.fused << "\n";
  });
  const double train_seconds = seconds_since(start);
  predictor::save_predictor(result.model, dir);
  const auto hist = dir / "history.csv";
  write_text(hist, history.str());

  Manifest m("train-predictor", ctx.args, ctx.config);
  m.input(train_path);
  m.output(dir);
  m.checkpoint(dir);
  m.metric(hist);
  m.timing("train", train_seconds);
  m.timing("total", seconds_since(start));
  m.write(dir / kDirManifest);
  ctx.out << "saved predictor to " << dir.string() << "\n";
  return kExitOk;
}

json view_object(const std::array<double, corpus::kViewCount>& v) {
  json j;
  for (std::size_t k = 0; k < corpus::kViewCount; ++k) j[std::string(corpus::view_key(corpus::kViews[k]))] = v[k];
  return j;
}

int evaluate_cmd(Context& ctx, const fs::path& model_dir, const fs::path& cohort_path, const fs::path& dir,
                 const std::string& truth_path, std::string label) {
  const auto start = Clock::now();
  const auto model = predictor::load_predictor(model_dir);
  const auto cohort = corpus::load_cohort(cohort_path);
  const auto jobs = config_value<std::size_t>(ctx.config, "evaluate", "jobs");
  if (jobs == 0) throw ConfigError("evaluate.jobs", "must be at least 1");
  const auto task = model.config.task;
  // Checked before anything is written.
  std::optional<eval::ImputationQuality> quality, baseline;
  if (!truth_path.empty()) {
    const auto truth = corpus::load_cohort(truth_path);
    quality = eval::imputation_quality(cohort, truth);
    const auto seed = config_value<std::uint64_t>(ctx.config, "evaluate", "random_seed");
    baseline = eval::imputation_quality(eval::random_imputation(strip_imputation(cohort), truth, seed), truth);
  }
  fs::create_directories(dir);
  if (label.empty()) label = fs::absolute(dir).lexically_normal().filename().string();

  Manifest m("evaluate", ctx.args, ctx.config);
  m.input(model_dir);
  m.input(cohort_path);
  m.checkpoint(model_dir);
  m.set("label", label);
  m.set("task", std::string(predictor::task_name(task)));
  auto emit = [&](const std::string& name, const std::string& text, bool metric) {
    const auto p = dir / name;
    write_text(p, text);
    m.output(p);
    if (metric) m.metric(p);
  };

  const auto predictions = predictor::predict_cohort(model, cohort, jobs);
  const auto pred_path = dir / "predictions.jsonl";
  predictor::write_predictions(predictions, task, pred_path);
  m.output(pred_path);

  json metrics = {{"task", predictor::task_name(task)},
                  {"samples", predictions.size()},
                  {"metrics", eval::task_metrics(predictions, task, model.out_dim)},
                  {"weights", view_object(model.weights())}};
  emit("metrics.json", metrics.dump(2) + "\n", true);

  const auto groups = eval::group_report(cohort, predictions, task, model.out_dim);
  emit("groups.csv", eval::group_report_csv(groups), true);
  emit("groups.json", eval::group_report_json(groups).dump(2) + "\n", true);

  std::vector<const corpus::PatientRecord*> ptrs;
  for (const auto& r : cohort.records) ptrs.push_back(&r);
  const auto contribution = eval::gradient_contribution(model, ptrs);
  json contrib = {{"shares", view_object(contribution.share)}, {"spread", eval::contribution_spread(contribution)}};
  emit("contribution.json", contrib.dump(2) + "\n", true);

  json summary = {{"label", label}, {"samples", predictions.size()}, {"metrics", metrics["metrics"]}};
  if (quality) {
    m.input(truth_path);
    json imp = {{"diffusion", eval::imputation_json(*quality)}, {"random", eval::imputation_json(*baseline)}};
    emit("imputation.json", imp.dump(2) + "\n", true);
    for (std::size_t k = 0; k < corpus::kViewCount; ++k) {
      const auto& v = quality->views[k];
      emit("frequencies." + std::string(corpus::view_key(corpus::kViews[k])) + ".csv",
           eval::frequency_csv(v.imputed_frequencies, v.true_frequencies), false);
    }
  }
  m.timing("total", seconds_since(start));
  m.write(dir / kDirManifest);
  ctx.out << summary.dump() << "\n";
  return kExitOk;
}

// Values of one section, flattened to dotted keys, in first-seen order.
void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out.emplace_back(prefix, j);
  }
}

std::string table_csv(const std::vector<std::string>& labels, const std::vector<json>& sources,
                      const std::string& first) {
  std::vector<std::string> keys;
  std::vector<std::map<std::string, json>> rows(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    std::vector<std::pair<std::string, json>> flat;
    flatten(sources[i], "", flat);
    for (auto& [k, v] : flat) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
      rows[i][k] = v;
    }
  }
  std::ostringstream s;
  s << first;
  for (const auto& l : labels) s << ',' << l;
  s << '\n';
  for (const auto& k : keys) {
    s << k;
    for (const auto& r : rows) {
      s << ',';
      auto it = r.find(k);
      if (it == r.end() || it->second.is_null()) continue;
      if (it->second.is_number_float()) s << fmt(it->second.get<double>());
      else if (it->second.is_string()) s << it->second.get<std::string>();
      else s << it->second.dump();
    }
    s << '\n';
  }
  return s.str();
}

fs::path manifest_file(const json& manifest, const std::string& name) {
  for (const auto& p : manifest.at("metrics"))
    if (fs::path(p.get<std::string>()).filename() == name) return p.get<std::string>();
  return {};
}

int report_cmd(Context& ctx, const std::vector<std::string>& manifests, const fs::path& out) {
  const auto start = Clock::now();
  std::vector<std::string> labels;
  std::vector<json> metrics, contributions, imputations;
  std::string task;
  Manifest m("report", ctx.args, ctx.config);
  for (const auto& path : manifests) {
    const auto man = read_json(path);
    m.input(path);
    if (man.value("command", "") != "evaluate") throw ValidationError(path + ": not an evaluate manifest");
    const auto metric_path = manifest_file(man, "metrics.json");
    if (metric_path.empty()) throw ValidationError(path + ": lists no metrics.json");
    const auto mj = read_json(metric_path);
    const auto t = mj.at("task").get<std::string>();
    if (task.empty()) task = t;
    if (t != task) throw ValidationError("report: task mismatch, " + task + " vs " + t + " in " + path);
    std::string label = man.value("label", fs::path(path).parent_path().filename().string());
    while (std::find(labels.begin(), labels.end(), label) != labels.end()) label += "'";
    labels.push_back(label);
    metrics.push_back(json{{"samples", mj.at("samples")}, {"metrics", mj.at("metrics")}, {"weights", mj.at("weights")}});
    const auto cp = manifest_file(man, "contribution.json");
    contributions.push_back(cp.empty() ? json::object() : read_json(cp));
    const auto ip = manifest_file(man, "imputation.json");
    imputations.push_back(ip.empty() ? json::object() : read_json(ip));
  }
  const std::string table = table_csv(labels, metrics, "metric");
  write_text(out, table);
  m.output(out);
  m.metric(out);
  const auto contrib_path = csv_sibling(out, ".contribution");
  write_text(contrib_path, table_csv(labels, contributions, "metric"));
  m.output(contrib_path);
  if (std::any_of(imputations.begin(), imputations.end(), [](const json& j) { return !j.empty(); })) {
    const auto imp_path = csv_sibling(out, ".imputation");
    write_text(imp_path, table_csv(labels, imputations, "metric"));
    m.output(imp_path);
  }
  m.set("task", task);
  m.timing("total", seconds_since(start));
  m.write(file_manifest(out));
  ctx.out << table;
  return kExitOk;
}

int grad_check_cmd(Context& ctx, double tolerance, const std::string& out) {
  const auto result = verify::run_gradcheck_suite(tolerance);
  json entries = json::array();
  for (const auto& e : result.entries) {
    if (!ctx.quiet)
      ctx.out << (e.report.passed && e.report.max_rel_err < tolerance ? "ok   " : "FAIL ") << e.name << " "
              << e.report.max_rel_err << "\n";
    entries.push_back({{"name", e.name}, {"max_rel_err", e.report.max_rel_err}, {"worst_param", e.report.worst_param}});
  }
  ctx.out << "grad-check: " << result.entries.size() << " checks, max rel err " << result.max_rel_err << " ("
          << result.worst << "), " << result.seconds << " s, " << (result.passed ? "passed" : "FAILED") << "\n";
  if (!out.empty()) {
    json j = {{"tolerance", tolerance}, {"max_rel_err", result.max_rel_err}, {"worst", result.worst},
              {"passed", result.passed}, {"seconds", result.seconds}, {"entries", entries}};
    write_text(out, j.dump(2) + "\n");
    Manifest m("grad-check", ctx.args, ctx.config);
    m.output(out);
    m.metric(out);
    m.timing("total", result.seconds);
    m.write(file_manifest(out));
  }
  return result.passed ? kExitOk : kExitFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-view diffusion imputation and longitudinal prediction", "mvdiff"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string profile = "desk";
  std::string config_path;
  bool quiet = false;
  app.add_option("--profile", profile, "Named defaults: desk or full");
  app.add_option("--config", config_path, "JSON config with sections cohort, data, diffusion, impute, predictor, evaluate");
  app.add_flag("-q,--quiet", quiet, "No per-epoch output");
  Flags flags;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic cohort");
  std::string gen_out;
  gen->add_option("--out", gen_out, "Cohort JSONL path");
  flags.add<std::uint64_t>(*gen, "--patients", "cohort", "patients", "Patients");
  flags.add<std::uint64_t>(*gen, "--min-visits", "cohort", "min_visits", "Fewest visits per patient");
  flags.add<std::uint64_t>(*gen, "--max-visits", "cohort", "max_visits", "Most visits per patient");
  flags.add<std::vector<std::size_t>>(*gen, "--vocab-sizes", "cohort", "vocab_sizes", "Diagnosis, procedure, medication");
  flags.add<std::uint64_t>(*gen, "--phenotypes", "cohort", "phenotypes", "Phenotype labels");
  flags.add<std::uint64_t>(*gen, "--latent-classes", "cohort", "latent_classes", "Latent visit classes");
  flags.add<std::uint64_t>(*gen, "--template-size", "cohort", "template_size", "Diagnosis template size");
  flags.add<std::uint64_t>(*gen, "--min-codes", "cohort", "min_codes", "Fewest codes per view");
  flags.add<std::uint64_t>(*gen, "--max-codes", "cohort", "max_codes", "Most codes per view");
  flags.add<double>(*gen, "--fidelity", "cohort", "template_fidelity", "Template fidelity");
  flags.add<double>(*gen, "--coupling", "cohort", "coupling", "Cross-view coupling");
  flags.add<double>(*gen, "--persistence", "cohort", "class_persistence", "Class persistence across visits");
  flags.add<double>(*gen, "--label-noise", "cohort", "label_noise", "Label noise");
  flags.add<std::uint64_t>(*gen, "--seed", "data", "seed", "Generator seed");
  flags.add<double>(*gen, "--missing-rate", "data", "missing_rate", "Per-view missing probability");
  flags.add<std::uint64_t>(*gen, "--missing-seed", "data", "missing_seed", "Missingness seed");
  flags.add<bool>(*gen, "--split", "data", "split", "Also write train/val/test parts");
  flags.add<std::uint64_t>(*gen, "--split-seed", "data", "split_seed", "Split seed");

  auto* td = app.add_subcommand("train-diffusion", "Train the imputation model");
  std::string td_train, td_out;
  td->add_option("--train", td_train, "Training cohort")->required();
  td->add_option("--out", td_out, "Model directory");
  flags.add<std::uint64_t>(*td, "--dim", "diffusion", "dim", "Embedding width");
  flags.add<std::uint64_t>(*td, "--layers", "diffusion", "layers", "Denoiser layers");
  flags.add<std::uint64_t>(*td, "--heads", "diffusion", "heads", "Attention heads");
  flags.add<std::uint64_t>(*td, "--ffn-mult", "diffusion", "ffn_mult", "Feed-forward width multiplier");
  flags.add<std::uint64_t>(*td, "--steps", "diffusion", "steps", "Diffusion steps T");
  flags.add<double>(*td, "--beta-start", "diffusion", "beta_start", "First beta");
  flags.add<double>(*td, "--beta-end", "diffusion", "beta_end", "Last beta");
  flags.add<std::uint64_t>(*td, "--prototypes", "diffusion", "prototypes", "Prototypes per view");
  flags.add<std::uint64_t>(*td, "--kmeans-iters", "diffusion", "kmeans_iters", "Lloyd iterations");
  flags.add<double>(*td, "--p-drop", "diffusion", "p_drop", "Condition drop probability");
  flags.add<double>(*td, "--guidance", "diffusion", "guidance", "Default guidance scale");
  flags.add<std::uint64_t>(*td, "--sample-steps", "diffusion", "sample_steps", "Default sampling steps");
  flags.add<double>(*td, "--lr", "diffusion", "lr", "Learning rate");
  flags.add<double>(*td, "--weight-decay", "diffusion", "weight_decay", "Weight decay");
  flags.add<std::uint64_t>(*td, "--batch", "diffusion", "batch", "Visits per batch");
  flags.add<std::uint64_t>(*td, "--epochs", "diffusion", "epochs", "Epochs");
  flags.add<std::uint64_t>(*td, "--seed", "diffusion", "seed", "Training seed");

  auto* im = app.add_subcommand("impute", "Fill missing views with a trained model");
  std::string im_cohort, im_model, im_out;
  im->add_option("--cohort", im_cohort, "Cohort with missing views")->required();
  im->add_option("--model", im_model, "Diffusion model directory")->required();
  im->add_option("--out", im_out, "Imputed cohort path");
  flags.add<double>(*im, "--guidance", "impute", "guidance", "Guidance scale");
  flags.add<std::uint64_t>(*im, "--sample-steps", "impute", "sample_steps", "Sampling steps");
  flags.add<std::uint64_t>(*im, "--seed", "impute", "seed", "Sampling seed");
  flags.add<std::uint64_t>(*im, "--jobs", "impute", "jobs", "Worker threads");

  auto* tp = app.add_subcommand("train-predictor", "Train the longitudinal predictor");
  std::string tp_train, tp_out;
  tp->add_option("--train", tp_train, "Training cohort")->required();
  tp->add_option("--out", tp_out, "Model directory");
  flags.add<std::string>(*tp, "--task", "predictor", "task", "phe or los");
  flags.add<std::uint64_t>(*tp, "--dim", "predictor", "dim", "Embedding width");
  flags.add<std::uint64_t>(*tp, "--layers", "predictor", "layers", "Transformer layers");
  flags.add<std::uint64_t>(*tp, "--heads", "predictor", "heads", "Attention heads");
  flags.add<std::uint64_t>(*tp, "--ffn-mult", "predictor", "ffn_mult", "Feed-forward width multiplier");
  flags.add<double>(*tp, "--eta", "predictor", "eta", "Inverse advantage weight");
  flags.add<double>(*tp, "--loss-guard", "predictor", "loss_guard", "Smallest fused loss allowed");
  flags.add<double>(*tp, "--lr", "predictor", "lr", "Learning rate");
  flags.add<double>(*tp, "--rho-lr", "predictor", "rho_lr", "Learning rate of the view weights");
  flags.add<double>(*tp, "--weight-decay", "predictor", "weight_decay", "Weight decay");
  flags.add<std::uint64_t>(*tp, "--batch", "predictor", "batch", "Patients per batch");
  flags.add<std::uint64_t>(*tp, "--epochs", "predictor", "epochs", "Epochs");
  flags.add<std::uint64_t>(*tp, "--seed", "predictor", "seed", "Training seed");

  auto* ev = app.add_subcommand("evaluate", "Score a cohort and write metric reports");
  std::string ev_model, ev_cohort, ev_out, ev_truth, ev_label;
  ev->add_option("--model", ev_model, "Predictor directory")->required();
  ev->add_option("--cohort", ev_cohort, "Cohort to score")->required();
  ev->add_option("--out", ev_out, "Report directory");
  ev->add_option("--truth", ev_truth, "Complete cohort aligned with --cohort, for imputation quality");
  ev->add_option("--label", ev_label, "Column name in reports (default: directory name)");
  flags.add<std::uint64_t>(*ev, "--jobs", "evaluate", "jobs", "Worker threads");
  flags.add<std::uint64_t>(*ev, "--random-seed", "evaluate", "random_seed", "Seed of the random imputation baseline");

  auto* rp = app.add_subcommand("report", "Side-by-side tables from evaluate manifests");
  std::vector<std::string> rp_manifests;
  std::string rp_out;
  rp->add_option("--manifest", rp_manifests, "Evaluate run manifest (repeatable)")->required();
  rp->add_option("--out", rp_out, "CSV path");

  auto* gc = app.add_subcommand("grad-check", "Run the gradient verification suite");
  double gc_tol = 1e-4;
  std::string gc_out;
  gc->add_option("--tolerance", gc_tol, "Largest relative error allowed");
  gc->add_option("--out", gc_out, "JSON report path");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    if (!app.get_subcommands().empty()) err << app.get_subcommands().front()->help();
    else err << app.help();
    return kExitUsage;
  }

  try {
    Context ctx{out, err, args, profile_config(profile), quiet};
    if (!config_path.empty()) merge_config(ctx.config, read_json(config_path));
    flags.apply(ctx.config);
    ctx.config["profile"] = profile;

    if (gen->parsed()) return gen_data(ctx, default_out(gen_out, "cohort.jsonl"));
    if (td->parsed()) return train_diffusion_cmd(ctx, td_train, default_out(td_out, "diffusion"));
    if (im->parsed()) return impute_cmd(ctx, im_cohort, im_model, default_out(im_out, "imputed.jsonl"));
    if (tp->parsed()) return train_predictor_cmd(ctx, tp_train, default_out(tp_out, "predictor"));
    if (ev->parsed()) return evaluate_cmd(ctx, ev_model, ev_cohort, default_out(ev_out, "eval"), ev_truth, ev_label);
    if (rp->parsed()) return report_cmd(ctx, rp_manifests, default_out(rp_out, "report.csv"));
    if (gc->parsed()) return grad_check_cmd(ctx, gc_tol, gc_out);
    throw UsageError("no subcommand");
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace mvdiff::cli
