#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "oplab/bandit.hpp"
#include "oplab/clicksim.hpp"
#include "oplab/common.hpp"
#include "oplab/dataset.hpp"
#include "oplab/policy.hpp"
#include "oplab/rlloop.hpp"
#include "oplab/safeltr.hpp"

namespace oplab {

constexpr const char* kVersion = "oplab 0.1.0";
constexpr const char* kOutputRootEnv = "OPLAB_OUTPUT_ROOT";
constexpr std::size_t kDeskCap = 1000000;  // largest simulated log size

// ---------------------------------------------------------------------------
// Config file: [section] headers with key = value pairs, lists comma-split
// ---------------------------------------------------------------------------

class IniFile {
 public:
  static IniFile parse(std::istream& in) {
    IniFile ini;
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw config_error("config line " + std::to_string(line_no) +
                             ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw config_error("config line " + std::to_string(line_no) +
                           ": expected key = value");
      ini.values_[section][trim(line.substr(0, eq))] =
          trim(line.substr(eq + 1));
    }
    return ini;
  }

  static IniFile parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file: " + path);
    return parse(in);
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = values_.find(section);
    return s != values_.end() && s->second.count(key) > 0;
  }

  std::string get_string(const std::string& section, const std::string& key) const {
    auto s = values_.find(section);
    if (s == values_.end() || !s->second.count(key))
      throw config_error("missing config key [" + section + "] " + key);
    return s->second.at(key);
  }

  std::string get_string_or(const std::string& section, const std::string& key,
                            const std::string& fallback) const {
    return has(section, key) ? get_string(section, key) : fallback;
  }

  double get_double(const std::string& section, const std::string& key) const {
    return to_double(get_string(section, key), section, key);
  }
  double get_double_or(const std::string& section, const std::string& key,
                       double fallback) const {
    return has(section, key) ? get_double(section, key) : fallback;
  }
  long long get_int(const std::string& section, const std::string& key) const {
    return static_cast<long long>(get_double(section, key));
  }
  long long get_int_or(const std::string& section, const std::string& key,
                       long long fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
  }

  std::vector<std::string> get_list(const std::string& section,
                                    const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream ss(get_string(section, key));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = trim(tok);
      if (!tok.empty()) out.push_back(tok);
    }
    if (out.empty())
      throw config_error("config key [" + section + "] " + key +
                         " must list at least one value");
    return out;
  }

  // Canonical text used for the manifest hash.
  std::string canonical() const {
    std::ostringstream os;
    for (const auto& [section, kv] : values_) {
      os << '[' << section << "]\n";
      for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
    }
    return os.str();
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }
  static double to_double(const std::string& v, const std::string& section,
                          const std::string& key) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw config_error("config key [" + section + "] " + key +
                         ": not a number: '" + v + "'");
    }
  }

  std::map<std::string, std::map<std::string, std::string>> values_;
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

enum class Family {
  safeltr_sweep,
  prpo_robustness,
  opl_bandit,
  ope_bandit,
  rl_chain,
};

inline const char* family_name(Family f) {
  switch (f) {
    case Family::safeltr_sweep: return "safeltr_sweep";
    case Family::prpo_robustness: return "prpo_robustness";
    case Family::opl_bandit: return "opl_bandit";
    case Family::ope_bandit: return "ope_bandit";
    case Family::rl_chain: return "rl_chain";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  for (Family f : {Family::safeltr_sweep, Family::prpo_robustness,
                   Family::opl_bandit, Family::ope_bandit, Family::rl_chain})
    if (s == family_name(f)) return f;
  throw config_error("unknown experiment family: " + s);
}

inline const std::set<std::string>& methods_for(Family f) {
  static const std::set<std::string> cltr{
      "naive", "ips", "action_ips", "action_crm", "dr",
      "crm",   "safe_dr", "prpo"};
  static const std::set<std::string> opl{"ips", "snips", "banditnet",
                                         "beta_ips_grad", "beta_ips_value"};
  static const std::set<std::string> ope{"ips", "snips", "dr", "beta_ips"};
  static const std::set<std::string> rl{"reinforce", "reinforce_bc", "rloo",
                                        "ppo", "loop"};
  switch (f) {
    case Family::safeltr_sweep:
    case Family::prpo_robustness: return cltr;
    case Family::opl_bandit: return opl;
    case Family::ope_bandit: return ope;
    case Family::rl_chain: return rl;
  }
  return cltr;
}

struct ExperimentConfig {
  Family family = Family::safeltr_sweep;
  std::string output_dir;
  std::vector<std::string> methods;
  std::vector<std::size_t> n_grid;
  std::vector<std::uint64_t> seeds;
  double ci_level = 0.8;
  IniFile raw;

  void validate() const {
    if (methods.empty()) throw config_error("method list is empty");
    if (n_grid.empty()) throw config_error("N grid is empty");
    if (seeds.empty()) throw config_error("seed list is empty");
    if (ci_level <= 0.0 || ci_level >= 1.0)
      throw config_error("ci level must lie in (0,1)");
    if (output_dir.empty()) throw config_error("output_dir is required");
    const auto& known = methods_for(family);
    for (const auto& m : methods)
      if (!known.count(m))
        throw config_error("unknown method '" + m + "' for family " +
                           family_name(family));
    for (std::size_t n : n_grid) {
      if (n < 1) throw config_error("N grid entries must be >= 1");
      if (n > kDeskCap)
        throw config_error("N grid entry exceeds the desk cap of " +
                           std::to_string(kDeskCap));
    }
  }
};

inline ExperimentConfig load_experiment_config(const std::string& path) {
  IniFile ini = IniFile::parse_file(path);
  ExperimentConfig cfg;
  cfg.raw = ini;
  cfg.family = family_from_string(ini.get_string("experiment", "family"));
  cfg.output_dir = ini.get_string("experiment", "output_dir");
  cfg.methods = ini.get_list("experiment", "methods");
  for (const auto& tok : ini.get_list("experiment", "n_grid"))
    cfg.n_grid.push_back(static_cast<std::size_t>(std::stoull(tok)));
  for (const auto& tok : ini.get_list("experiment", "seeds"))
    cfg.seeds.push_back(std::stoull(tok));
  cfg.ci_level = ini.get_double_or("experiment", "ci_level", 0.8);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Run records and summaries
// ---------------------------------------------------------------------------

struct RunRecord {
  std::string method;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double value = 0.0;       // family's primary metric
  double reference = 0.0;   // family-specific baseline (e.g. logging NDCG)
  double extra = 0.0;       // family-specific diagnostic
};

struct SummaryCell {
  std::string method;
  std::size_t n = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_runs = 0;
  bool degenerate_ci = false;  // single run: interval collapses to a point
};

struct RunSummary {
  std::vector<SummaryCell> cells;
  double ci_level = 0.8;
};

inline RunSummary summarize_records(const std::vector<RunRecord>& records,
                                    double ci_level) {
  if (ci_level <= 0.0 || ci_level >= 1.0)
    throw config_error("ci level must lie in (0,1)");
  std::map<std::pair<std::string, std::size_t>, Vec> groups;
  for (const auto& r : records) groups[{r.method, r.n}].push_back(r.value);
  RunSummary summary;
  summary.ci_level = ci_level;
  for (const auto& [key, values] : groups) {
    SummaryCell cell;
    cell.method = key.first;
    cell.n = key.second;
    cell.n_runs = static_cast<int>(values.size());
    const ConfidenceInterval ci = t_interval(values, ci_level);
    cell.mean = ci.mean;
    cell.stddev = values.size() > 1 ? sample_std(values) : 0.0;
    cell.ci_low = ci.lo;
    cell.ci_high = ci.hi;
    cell.degenerate_ci = values.size() < 2;
    summary.cells.push_back(std::move(cell));
  }
  return summary;
}

inline void write_summary_csv(const RunSummary& summary, std::ostream& out) {
  out << "method,N,mean,std,ci_low,ci_high,n_runs,degenerate_ci\n";
  for (const auto& c : summary.cells)
    out << c.method << ',' << c.n << ',' << fmt_double(c.mean) << ','
        << fmt_double(c.stddev) << ',' << fmt_double(c.ci_low) << ','
        << fmt_double(c.ci_high) << ',' << c.n_runs << ','
        << (c.degenerate_ci ? 1 : 0) << '\n';
}

// ---------------------------------------------------------------------------
// Family runners
// ---------------------------------------------------------------------------

namespace detail {

struct CltrSetup {
  DatasetBundle data;
  StochasticRankingPolicy logging;
  ClickModel model;
};

inline CltrSetup build_cltr_setup(const IniFile& ini, std::uint64_t seed,
                                  bool adversarial_default) {
  const int n_queries =
      static_cast<int>(ini.get_int_or("environment", "n_queries", 200));
  const int docs = static_cast<int>(
      ini.get_int_or("environment", "docs_per_query", 6));
  const int dim =
      static_cast<int>(ini.get_int_or("environment", "feature_dim", 30));
  SyntheticConfig synth;
  synth.signal_strength =
      ini.get_double_or("environment", "signal_strength", 1.0);
  synth.noise_std = ini.get_double_or("environment", "noise_std", 1.0);
  CltrSetup setup;
  // Dataset and logging policy are tied to the seed so every run is a full
  // independent replicate.
  setup.data = generate_synthetic(n_queries, docs, dim, seed, synth);
  const double fraction =
      ini.get_double_or("environment", "logging_fraction", 0.3);
  setup.logging =
      train_logging_policy(setup.data.train, fraction, mix64(seed) + 1);
  setup.logging.temperature =
      ini.get_double_or("environment", "logging_temperature", 1.0);

  const std::string click_kind =
      ini.get_string_or("environment", "click_model",
                        adversarial_default ? "adversarial" : "trust");
  if (click_kind == "pbm") {
    setup.model = {examination_defaults(ExamKind::pbm),
                   RelevanceTransform::pbm_sparse(), false};
  } else if (click_kind == "trust") {
    setup.model = {examination_defaults(ExamKind::trust_bias),
                   RelevanceTransform::trust_bias(), false};
  } else if (click_kind == "adversarial") {
    setup.model = {examination_defaults(ExamKind::trust_bias),
                   RelevanceTransform::trust_bias(), true};
  } else {
    throw config_error("unknown click_model: " + click_kind);
  }
  return setup;
}

inline TrainConfig cltr_train_config(const IniFile& ini,
                                     const std::string& method,
                                     const ExaminationModel& exam,
                                     std::size_t n) {
  TrainConfig cfg;
  cfg.epochs = static_cast<int>(ini.get_int_or("training", "epochs", 40));
  cfg.learning_rate = ini.get_double_or("training", "learning_rate", 0.1);
  if (method == "prpo")
    cfg.learning_rate =
        ini.get_double_or("training", "prpo_learning_rate", 0.05);
  cfg.decay = ini.get_double_or("training", "decay", 0.02);
  cfg.patience = static_cast<int>(ini.get_int_or("training", "patience", 0));
  const double delta = ini.get_double_or("safety", "delta", 0.05);
  if (method == "naive") {
    cfg.objective = ObjectiveKind::naive;
  } else if (method == "ips") {
    cfg.objective = ObjectiveKind::exposure_ips;
  } else if (method == "action_ips") {
    cfg.objective = ObjectiveKind::action_ips;
  } else if (method == "action_crm") {
    cfg.objective = ObjectiveKind::action_crm;
    cfg.safety = make_safety(SafetyMode::crm_action, delta, exam);
  } else if (method == "dr") {
    cfg.objective = ObjectiveKind::dr;
  } else if (method == "crm") {
    cfg.objective = ObjectiveKind::crm_exposure;
    cfg.safety = make_safety(SafetyMode::crm_exposure, delta, exam);
  } else if (method == "safe_dr") {
    cfg.objective = ObjectiveKind::safe_dr;
    cfg.safety = make_safety(SafetyMode::safe_dr, delta, exam);
  } else if (method == "prpo") {
    cfg.objective = ObjectiveKind::prpo;
    const std::string sched =
        ini.get_string_or("prpo", "schedule", "linear_in_N");
    if (sched == "constant") {
      cfg.prpo.schedule = PrpoSchedule::constant;
      cfg.prpo.schedule_param = ini.get_double_or("prpo", "delta", 1.0);
    } else if (sched == "linear_in_N") {
      cfg.prpo.schedule = PrpoSchedule::linear_in_N;
      cfg.prpo.schedule_param = ini.get_double_or("prpo", "numerator", 100.0);
    } else if (sched == "log_in_N") {
      cfg.prpo.schedule = PrpoSchedule::log_in_N;
    } else {
      throw config_error("unknown prpo schedule: " + sched);
    }
  } else {
    throw config_error("unknown cltr method: " + method);
  }
  (void)n;
  return cfg;
}

inline RunRecord run_cltr_cell(const IniFile& ini, const std::string& method,
                               std::size_t n, std::uint64_t seed,
                               bool adversarial_default) {
  CltrSetup setup = build_cltr_setup(ini, seed, adversarial_default);
  Rng sim_rng = make_rng(seed, 101);
  const InteractionLog train_log =
      simulate(n, setup.logging, setup.data.train, setup.model, sim_rng);
  const std::size_t n_val = std::max<std::size_t>(n / 4, 50);
  const InteractionLog val_log = simulate(
      n_val, setup.logging, setup.data.validation, setup.model, sim_rng);
  const TrainConfig cfg =
      cltr_train_config(ini, method, setup.model.examination, n);
  const TrainResult result =
      train_cltr(setup.data, train_log, val_log, setup.logging,
                 setup.model.examination, cfg, mix64(seed) + 7);
  RunRecord rec;
  rec.method = method;
  rec.n = n;
  rec.seed = seed;
  Rng eval_rng = make_rng(seed, 103);
  rec.value = mean_expected_ndcg(
      result.policy, setup.data.test, cfg.cutoff_k, eval_rng, 200,
      setup.data.test.queries.front().n_docs() <= kEnumDocLimit);
  rec.reference = result.logging_ndcg;
  rec.extra = result.trace.empty() ? 0.0 : result.trace.back().divergence;
  return rec;
}

inline RunRecord run_opl_cell(const IniFile& ini, const std::string& method,
                              std::size_t n, std::uint64_t seed) {
  const int n_actions =
      static_cast<int>(ini.get_int_or("environment", "n_actions", 10));
  const int dim =
      static_cast<int>(ini.get_int_or("environment", "context_dim", 5));
  const int n_contexts =
      static_cast<int>(ini.get_int_or("environment", "n_contexts", 30));
  const double inv_temp =
      ini.get_double_or("environment", "inv_temperature", -1.0);
  const BanditEnvironment env = make_bandit_environment(
      n_actions, dim, n_contexts, inv_temp,
      ini.get_int_or("environment", "env_seed", 7));
  Rng rng = make_rng(seed, 107);
  const BanditLog log = sample_bandit_log(env, n, rng);
  OplConfig cfg;
  cfg.epochs = static_cast<int>(ini.get_int_or("training", "epochs", 40));
  cfg.learning_rate = ini.get_double_or("training", "learning_rate", 2.0);
  cfg.decay = ini.get_double_or("training", "decay", 0.05);
  cfg.schedule.full_batch =
      ini.get_string_or("training", "schedule", "mini_batch") == "full_batch";
  cfg.schedule.batch_size =
      static_cast<int>(ini.get_int_or("training", "batch_size", 1024));
  cfg.banditnet_lambda = ini.get_double_or("training", "banditnet_lambda", 0.5);
  if (method == "ips") {
    cfg.method = OplMethod::ips;
  } else if (method == "snips") {
    cfg.method = OplMethod::snips;
    cfg.schedule.full_batch = true;
  } else if (method == "banditnet") {
    cfg.method = OplMethod::banditnet;
  } else if (method == "beta_ips_grad") {
    cfg.method = OplMethod::beta_ips_grad;
  } else if (method == "beta_ips_value") {
    cfg.method = OplMethod::beta_ips_value;
    cfg.schedule.full_batch = true;
  } else {
    throw config_error("unknown opl method: " + method);
  }
  const OplResult res = train_opl(env, log, cfg, mix64(seed) + 11);
  RunRecord rec;
  rec.method = method;
  rec.n = n;
  rec.seed = seed;
  rec.value = res.final_value;
  rec.reference = evaluate_true_value(make_softmax_policy(n_actions, dim), env);
  rec.extra = res.mean_gradient_variance;
  return rec;
}

inline RunRecord run_ope_cell(const IniFile& ini, const std::string& method,
                              std::size_t n, std::uint64_t seed) {
  const int n_actions =
      static_cast<int>(ini.get_int_or("environment", "n_actions", 10));
  const int dim =
      static_cast<int>(ini.get_int_or("environment", "context_dim", 5));
  const int n_contexts =
      static_cast<int>(ini.get_int_or("environment", "n_contexts", 30));
  const double inv_temp =
      ini.get_double_or("environment", "inv_temperature", 1.0);
  BanditEnvironment env = make_bandit_environment(
      n_actions, dim, n_contexts, inv_temp,
      ini.get_int_or("environment", "env_seed", 7));

  // Target policy: a short IPS-trained policy on a pilot log, fixed per
  // config so all repetitions evaluate the same target.
  Rng pilot_rng = make_rng(ini.get_int_or("target", "pilot_seed", 1), 109);
  const BanditLog pilot = sample_bandit_log(
      env, static_cast<std::size_t>(ini.get_int_or("target", "pilot_n", 2000)),
      pilot_rng);
  OplConfig tcfg;
  tcfg.method = OplMethod::ips;
  tcfg.epochs = static_cast<int>(ini.get_int_or("target", "epochs", 10));
  tcfg.schedule.batch_size = 256;
  const SoftmaxPolicy target = train_opl(env, pilot, tcfg, 3).policy;
  const auto table = policy_prob_table(target, env);
  const double truth = evaluate_true_value(target, env);

  Rng rng = make_rng(seed, 113);
  const BanditLog log = sample_bandit_log(env, n, rng);
  double estimate = 0.0;
  if (method == "ips") {
    estimate = ips_value(log, table);
  } else if (method == "snips") {
    estimate = snips_value(log, table);
  } else if (method == "dr") {
    const RidgeRewardModel model = fit_ridge_reward_model(log, env);
    estimate = dr_value(
        log, table,
        [&](int x, int a) { return model.predict(env.contexts[x], a); },
        n_actions);
  } else if (method == "beta_ips") {
    estimate = beta_ips_value(log, table,
                              optimal_beta_value_or_mean(log, table));
  } else {
    throw config_error("unknown ope estimator: " + method);
  }
  RunRecord rec;
  rec.method = method;
  rec.n = n;
  rec.seed = seed;
  rec.value = (estimate - truth) * (estimate - truth);  // squared error
  rec.reference = truth;
  rec.extra = estimate;
  return rec;
}

inline RunRecord run_rl_cell(const IniFile& ini, const std::string& method,
                             std::size_t epochs, std::uint64_t seed) {
  const int horizon =
      static_cast<int>(ini.get_int_or("environment", "horizon", 10));
  const int state_dim =
      static_cast<int>(ini.get_int_or("environment", "state_dim", 2));
  const int n_prompts =
      static_cast<int>(ini.get_int_or("environment", "n_prompts", 8));
  const ChainMdp mdp = make_chain_mdp(
      horizon, state_dim, n_prompts, ini.get_int_or("environment", "env_seed", 5),
      ini.get_double_or("environment", "reward_scale", 0.5));
  RlConfig cfg;
  cfg.epochs = static_cast<int>(epochs);
  cfg.k = static_cast<int>(ini.get_int_or("training", "k", 4));
  cfg.inner_epochs =
      static_cast<int>(ini.get_int_or("training", "inner_epochs", 1));
  cfg.clip_eps = ini.get_double_or("training", "clip_eps", 1e-4);
  cfg.learning_rate = ini.get_double_or("training", "learning_rate", 0.05);
  cfg.sigma = ini.get_double_or("training", "sigma", 0.3);
  // inner_epochs means sample-reuse passes and only applies to the
  // clipped objectives; k is taken as configured for the K-sample methods.
  if (method == "reinforce") {
    cfg.method = RlMethod::reinforce;
    cfg.k = 1;
    cfg.inner_epochs = 1;
  } else if (method == "reinforce_bc") {
    cfg.method = RlMethod::reinforce_bc;
    cfg.k = 1;
    cfg.inner_epochs = 1;
  } else if (method == "rloo") {
    cfg.method = RlMethod::rloo;
    cfg.inner_epochs = 1;
  } else if (method == "ppo") {
    cfg.method = RlMethod::ppo;
    cfg.k = 1;
  } else if (method == "loop") {
    cfg.method = RlMethod::loop;
  } else {
    throw config_error("unknown rl method: " + method);
  }
  Rng rng = make_rng(seed, 127);
  const RlResult res = train_rl(mdp, cfg, rng);
  RunRecord rec;
  rec.method = method;
  rec.n = epochs;
  rec.seed = seed;
  rec.value = res.final_reward;
  rec.reference = res.trace.empty() ? 0.0 : res.trace.front().mean_reward;
  double var_sum = 0.0;
  for (const auto& row : res.trace) var_sum += row.reward_variance;
  rec.extra = res.trace.empty() ? 0.0 : var_sum / res.trace.size();
  return rec;
}

inline RunRecord run_one(const ExperimentConfig& cfg, const std::string& method,
                         std::size_t n, std::uint64_t seed) {
  switch (cfg.family) {
    case Family::safeltr_sweep:
      return run_cltr_cell(cfg.raw, method, n, seed, false);
    case Family::prpo_robustness:
      return run_cltr_cell(cfg.raw, method, n, seed, true);
    case Family::opl_bandit:
      return run_opl_cell(cfg.raw, method, n, seed);
    case Family::ope_bandit:
      return run_ope_cell(cfg.raw, method, n, seed);
    case Family::rl_chain:
      return run_rl_cell(cfg.raw, method, n, seed);
  }
  throw config_error("unhandled family");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Orchestration: cells execute concurrently, files land atomically
// ---------------------------------------------------------------------------

struct ExperimentOutcome {
  RunSummary summary;
  std::vector<RunRecord> records;
  std::vector<std::string> failed_cells;
  std::filesystem::path output_dir;

  bool ok() const { return failed_cells.empty(); }
};

inline std::filesystem::path resolve_output_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv))
    return std::filesystem::path(root) / p;
  return p;
}

inline std::string cell_file_name(const std::string& method, std::size_t n) {
  return method + "_" + std::to_string(n) + ".csv";
}

inline void write_cell_csv(const std::filesystem::path& dir,
                           const std::string& method, std::size_t n,
                           const std::vector<RunRecord>& rows, Family family) {
  const std::filesystem::path target = dir / cell_file_name(method, n);
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << "family,method,N,seed,value,reference,extra\n";
    for (const auto& r : rows)
      out << family_name(family) << ',' << r.method << ',' << r.n << ','
          << r.seed << ',' << fmt_double(r.value) << ','
          << fmt_double(r.reference) << ',' << fmt_double(r.extra) << '\n';
  }
  std::filesystem::rename(tmp, target);
}

inline std::vector<RunRecord> load_run_csvs(const std::filesystem::path& dir) {
  std::vector<RunRecord> records;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().extension() == ".csv") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> fields;
      std::istringstream ls(line);
      std::string tok;
      while (std::getline(ls, tok, ',')) fields.push_back(tok);
      if (fields.size() != 7)
        throw parse_error("bad run row in " + f.string());
      RunRecord r;
      r.method = fields[1];
      r.n = std::stoull(fields[2]);
      r.seed = std::stoull(fields[3]);
      r.value = std::stod(fields[4]);
      r.reference = std::stod(fields[5]);
      r.extra = std::stod(fields[6]);
      records.push_back(std::move(r));
    }
  }
  if (records.empty())
    throw data_error("no run CSVs found under " + dir.string());
  return records;
}

inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg,
                                        int workers = 1,
                                        std::uint64_t seed_offset = 0) {
  cfg.validate();
  ExperimentOutcome outcome;
  outcome.output_dir = resolve_output_dir(cfg.output_dir);
  const std::filesystem::path runs_dir = outcome.output_dir / "runs";
  std::filesystem::create_directories(runs_dir);

  struct Cell {
    std::string method;
    std::size_t n;
  };
  std::vector<Cell> cells;
  for (const auto& m : cfg.methods)
    for (std::size_t n : cfg.n_grid) cells.push_back({m, n});

  std::vector<std::vector<RunRecord>> cell_rows(cells.size());
  std::vector<std::string> cell_errors(cells.size());
  std::atomic<std::size_t> next{0};
  const int n_workers =
      std::max(1, std::min<int>(workers, static_cast<int>(cells.size())));

  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        std::vector<RunRecord> rows;
        for (std::uint64_t seed : cfg.seeds)
          rows.push_back(detail::run_one(cfg, cells[i].method, cells[i].n,
                                         seed + seed_offset));
        cell_rows[i] = std::move(rows);
      } catch (const std::exception& e) {
        cell_errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  // Barrier passed: write per-cell files, then the aggregate summary.
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!cell_errors[i].empty()) {
      outcome.failed_cells.push_back(cell_file_name(cells[i].method,
                                                    cells[i].n) + ": " +
                                     cell_errors[i]);
      continue;
    }
    write_cell_csv(runs_dir, cells[i].method, cells[i].n, cell_rows[i],
                   cfg.family);
    for (const auto& r : cell_rows[i]) outcome.records.push_back(r);
  }
  outcome.summary = summarize_records(outcome.records, cfg.ci_level);
  {
    const std::filesystem::path tmp = outcome.output_dir / "summary.csv.tmp";
    std::ofstream out(tmp);
    write_summary_csv(outcome.summary, out);
    out.close();
    std::filesystem::rename(tmp, outcome.output_dir / "summary.csv");
  }

  nlohmann::json manifest;
  manifest["version"] = kVersion;
  manifest["family"] = family_name(cfg.family);
  manifest["config_hash"] =
      std::to_string(mix64(std::hash<std::string>{}(cfg.raw.canonical())));
  manifest["seeds"] = cfg.seeds;
  manifest["seed_offset"] = seed_offset;
  manifest["ci_level"] = cfg.ci_level;
  nlohmann::json jcells = nlohmann::json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    nlohmann::json jc;
    jc["method"] = cells[i].method;
    jc["N"] = cells[i].n;
    jc["status"] = cell_errors[i].empty() ? "ok" : "failed";
    if (!cell_errors[i].empty()) jc["error"] = cell_errors[i];
    jcells.push_back(jc);
  }
  manifest["cells"] = jcells;
  {
    const std::filesystem::path tmp = outcome.output_dir / "manifest.json.tmp";
    std::ofstream out(tmp);
    out << manifest.dump(2) << '\n';
    out.close();
    std::filesystem::rename(tmp, outcome.output_dir / "manifest.json");
  }
  return outcome;
}

inline RunSummary summarize_directory(const std::string& dir,
                                      double ci_level) {
  const std::filesystem::path root = resolve_output_dir(dir);
  const std::filesystem::path runs = root / "runs";
  const auto records =
      load_run_csvs(std::filesystem::exists(runs) ? runs : root);
  return summarize_records(records, ci_level);
}

}  // namespace oplab
