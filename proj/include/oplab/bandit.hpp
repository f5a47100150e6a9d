#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "oplab/common.hpp"

namespace oplab {

// ---------------------------------------------------------------------------
// Synthetic single-action environment with a finite context set
// ---------------------------------------------------------------------------

struct BanditEnvironment {
  int n_actions = 0;
  int context_dim = 0;
  std::vector<Vec> contexts;         // finite, uniformly distributed
  std::vector<Vec> expected_reward;  // [context][action], in [0,1]
  double logging_inv_temperature = 1.0;
  std::vector<Vec> logging_probs;    // softmax(inv_temp * expected_reward)

  int n_contexts() const { return static_cast<int>(contexts.size()); }

  void rebuild_logging_policy(double inv_temperature) {
    logging_inv_temperature = inv_temperature;
    logging_probs.assign(contexts.size(), Vec(n_actions, 0.0));
    for (int x = 0; x < n_contexts(); ++x) {
      double m = -1e300;
      for (int a = 0; a < n_actions; ++a)
        m = std::max(m, inv_temperature * expected_reward[x][a]);
      double z = 0.0;
      for (int a = 0; a < n_actions; ++a) {
        logging_probs[x][a] =
            std::exp(inv_temperature * expected_reward[x][a] - m);
        z += logging_probs[x][a];
      }
      for (int a = 0; a < n_actions; ++a) logging_probs[x][a] /= z;
    }
  }
};

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline BanditEnvironment make_bandit_environment(int n_actions, int context_dim,
                                                 int n_contexts,
                                                 double inv_temperature,
                                                 std::uint64_t seed) {
  if (n_actions < 2 || context_dim < 1 || n_contexts < 1)
    throw config_error("bad environment sizes");
  BanditEnvironment env;
  env.n_actions = n_actions;
  env.context_dim = context_dim;
  Rng rng = make_rng(seed, 41);
  std::normal_distribution<double> gauss(0.0, 1.0);
  env.contexts.assign(n_contexts, Vec(context_dim));
  for (auto& x : env.contexts)
    for (auto& v : x) v = gauss(rng);
  std::vector<Vec> w(n_actions, Vec(context_dim));
  Vec b(n_actions);
  for (auto& wa : w)
    for (auto& v : wa) v = gauss(rng);
  for (auto& v : b) v = 0.5 * gauss(rng);
  env.expected_reward.assign(n_contexts, Vec(n_actions));
  for (int x = 0; x < n_contexts; ++x)
    for (int a = 0; a < n_actions; ++a)
      env.expected_reward[x][a] = sigmoid(dot(w[a], env.contexts[x]) + b[a]);
  env.rebuild_logging_policy(inv_temperature);
  return env;
}

// ---------------------------------------------------------------------------
// Logged bandit feedback
// ---------------------------------------------------------------------------

struct BanditRow {
  int context_id = -1;
  int action = 0;
  double propensity = 0.0;  // logging probability of the logged action
  double reward = 0.0;
};

struct BanditLog {
  std::vector<BanditRow> rows;
  std::size_t size() const { return rows.size(); }
};

inline BanditLog sample_bandit_log(const BanditEnvironment& env, std::size_t n,
                                   Rng& rng, bool binary_rewards = true) {
  BanditLog log;
  log.rows.reserve(n);
  std::uniform_int_distribution<int> xdist(0, env.n_contexts() - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    BanditRow row;
    row.context_id = xdist(rng);
    const Vec& probs = env.logging_probs[row.context_id];
    double u = unif(rng);
    row.action = env.n_actions - 1;
    for (int a = 0; a < env.n_actions; ++a) {
      u -= probs[a];
      if (u <= 0.0) {
        row.action = a;
        break;
      }
    }
    row.propensity = probs[row.action];
    const double er = env.expected_reward[row.context_id][row.action];
    row.reward = binary_rewards ? (unif(rng) < er ? 1.0 : 0.0) : er;
    log.rows.push_back(row);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Linear softmax policy (no bias term)
// ---------------------------------------------------------------------------

struct SoftmaxPolicy {
  std::vector<Vec> weights;  // [action][context_dim]

  int n_actions() const { return static_cast<int>(weights.size()); }
  int context_dim() const {
    return weights.empty() ? 0 : static_cast<int>(weights[0].size());
  }

  Vec action_probs(const Vec& x) const {
    Vec p(weights.size());
    double m = -1e300;
    for (std::size_t a = 0; a < weights.size(); ++a) {
      p[a] = dot(weights[a], x);
      m = std::max(m, p[a]);
    }
    double z = 0.0;
    for (auto& v : p) {
      v = std::exp(v - m);
      z += v;
    }
    for (auto& v : p) v /= z;
    return p;
  }
};

inline SoftmaxPolicy make_softmax_policy(int n_actions, int context_dim,
                                         double init_scale = 0.0,
                                         std::uint64_t seed = 0) {
  SoftmaxPolicy p;
  p.weights.assign(n_actions, Vec(context_dim, 0.0));
  if (init_scale > 0.0) {
    Rng rng = make_rng(seed, 43);
    std::normal_distribution<double> gauss(0.0, init_scale);
    for (auto& row : p.weights)
      for (auto& v : row) v = gauss(rng);
  }
  return p;
}

// Cached target probabilities over the finite context set.
inline std::vector<Vec> policy_prob_table(const SoftmaxPolicy& policy,
                                          const BanditEnvironment& env) {
  std::vector<Vec> table(env.n_contexts());
  for (int x = 0; x < env.n_contexts(); ++x)
    table[x] = policy.action_probs(env.contexts[x]);
  return table;
}

// Exact policy value over the enumerable context set.
inline double evaluate_true_value(const SoftmaxPolicy& policy,
                                  const BanditEnvironment& env) {
  const auto table = policy_prob_table(policy, env);
  double v = 0.0;
  for (int x = 0; x < env.n_contexts(); ++x)
    for (int a = 0; a < env.n_actions; ++a)
      v += table[x][a] * env.expected_reward[x][a];
  return v / env.n_contexts();
}

// ---------------------------------------------------------------------------
// Off-policy value estimators
// ---------------------------------------------------------------------------

inline void check_log(const BanditLog& log) {
  if (log.rows.empty()) throw data_error("empty bandit log");
  for (const auto& row : log.rows)
    if (row.propensity <= 0.0)
      throw data_error("logged propensity must be positive");
}

inline double ips_value(const BanditLog& log,
                        const std::vector<Vec>& target_probs) {
  check_log(log);
  double v = 0.0;
  for (const auto& row : log.rows)
    v += target_probs[row.context_id][row.action] / row.propensity * row.reward;
  return v / static_cast<double>(log.size());
}

inline double snips_value(const BanditLog& log,
                          const std::vector<Vec>& target_probs) {
  check_log(log);
  double num = 0.0, den = 0.0;
  for (const auto& row : log.rows) {
    const double w = target_probs[row.context_id][row.action] / row.propensity;
    num += w * row.reward;
    den += w;
  }
  if (den <= 0.0) throw data_error("degenerate log: zero weight sum");
  return num / den;
}

inline double beta_ips_value(const BanditLog& log,
                             const std::vector<Vec>& target_probs,
                             double beta) {
  check_log(log);
  double v = 0.0;
  for (const auto& row : log.rows) {
    const double w = target_probs[row.context_id][row.action] / row.propensity;
    v += w * (row.reward - beta);
  }
  return beta + v / static_cast<double>(log.size());
}

// DR with an arbitrary reward model r_hat(context_id, action).
inline double dr_value(const BanditLog& log,
                       const std::vector<Vec>& target_probs,
                       const std::function<double(int, int)>& reward_model,
                       int n_actions) {
  check_log(log);
  double v = 0.0;
  for (const auto& row : log.rows) {
    const double w = target_probs[row.context_id][row.action] / row.propensity;
    v += w * (row.reward - reward_model(row.context_id, row.action));
    for (int a = 0; a < n_actions; ++a)
      v += target_probs[row.context_id][a] * reward_model(row.context_id, a);
  }
  return v / static_cast<double>(log.size());
}

// Estimator-variance-optimal baseline: sum[(w^2-w) r] / sum[w^2-w].
// Returns nullopt when the denominator degenerates (pi == pi0), in which
// case callers fall back to the mean reward.
inline std::optional<double> optimal_beta_value(
    const BanditLog& log, const std::vector<Vec>& target_probs) {
  check_log(log);
  double num = 0.0, den = 0.0, w2sum = 0.0;
  for (const auto& row : log.rows) {
    const double w = target_probs[row.context_id][row.action] / row.propensity;
    num += (w * w - w) * row.reward;
    den += w * w - w;
    w2sum += w * w;
  }
  if (std::fabs(den) < 1e-9 * std::max(w2sum, 1.0)) return std::nullopt;
  return num / den;
}

inline double mean_reward(const BanditLog& log) {
  double v = 0.0;
  for (const auto& row : log.rows) v += row.reward;
  return v / static_cast<double>(log.size());
}

inline double optimal_beta_value_or_mean(const BanditLog& log,
                                         const std::vector<Vec>& target_probs) {
  const auto beta = optimal_beta_value(log, target_probs);
  return beta ? *beta : mean_reward(log);
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

enum class BaselineKind {
  none,
  fixed,             // BanditNet translation lambda
  optimal_gradient,  // gradient-variance-optimal, estimated per batch
  optimal_value,     // estimator-variance-optimal (full batch)
  mean_reward,
};

// ||grad pi(a|x)||_2^2 over the full weight matrix, closed form for
// linear softmax: pi(a)^2 ||x||^2 ((1-pi_a)^2 + sum_{b != a} pi_b^2).
inline double grad_pi_norm_sq(const Vec& probs, int action, double x_norm_sq) {
  double s = 0.0;
  for (std::size_t b = 0; b < probs.size(); ++b) {
    const double d = (static_cast<int>(b) == action ? 1.0 : 0.0) - probs[b];
    s += d * d;
  }
  return probs[action] * probs[action] * x_norm_sq * s;
}

// Gradient-variance-optimal baseline over a batch:
//   beta* = sum[(||grad pi||^2/pi0^2) r] / sum[||grad pi||^2/pi0^2].
inline double optimal_gradient_beta(const BanditLog& batch,
                                    const BanditEnvironment& env,
                                    const std::vector<Vec>& target_probs) {
  double num = 0.0, den = 0.0;
  for (const auto& row : batch.rows) {
    const double g =
        grad_pi_norm_sq(target_probs[row.context_id], row.action,
                        norm2_sq(env.contexts[row.context_id])) /
        (row.propensity * row.propensity);
    num += g * row.reward;
    den += g;
  }
  if (den <= 0.0) return 0.0;
  return num / den;
}

struct BanditGradient {
  std::vector<Vec> grad;   // same shape as policy weights
  double beta_used = 0.0;
  double variance = 0.0;   // per-row gradient variance (sum over components)
};

// Monte Carlo gradient of beta-IPS on a batch:
//   (1/B) sum (grad pi(a|x)/pi0) (r - beta).
inline BanditGradient policy_gradient(const BanditLog& batch,
                                      const SoftmaxPolicy& policy,
                                      const BanditEnvironment& env,
                                      BaselineKind baseline,
                                      double fixed_lambda = 0.0) {
  if (batch.rows.empty()) throw data_error("empty batch");
  const int n_actions = policy.n_actions();
  const int dim = policy.context_dim();

  std::vector<Vec> probs(batch.rows.size());
  for (std::size_t i = 0; i < batch.rows.size(); ++i)
    probs[i] = policy.action_probs(env.contexts[batch.rows[i].context_id]);

  BanditGradient out;
  switch (baseline) {
    case BaselineKind::none: out.beta_used = 0.0; break;
    case BaselineKind::fixed: out.beta_used = fixed_lambda; break;
    case BaselineKind::mean_reward: out.beta_used = mean_reward(batch); break;
    case BaselineKind::optimal_gradient: {
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < batch.rows.size(); ++i) {
        const auto& row = batch.rows[i];
        const double g =
            grad_pi_norm_sq(probs[i], row.action,
                            norm2_sq(env.contexts[row.context_id])) /
            (row.propensity * row.propensity);
        num += g * row.reward;
        den += g;
      }
      out.beta_used = den > 0.0 ? num / den : 0.0;
      break;
    }
    case BaselineKind::optimal_value: {
      double num = 0.0, den = 0.0, w2 = 0.0;
      for (std::size_t i = 0; i < batch.rows.size(); ++i) {
        const auto& row = batch.rows[i];
        const double w = probs[i][row.action] / row.propensity;
        num += (w * w - w) * row.reward;
        den += w * w - w;
        w2 += w * w;
      }
      out.beta_used = std::fabs(den) < 1e-9 * std::max(w2, 1.0)
                          ? mean_reward(batch)
                          : num / den;
      break;
    }
  }

  out.grad.assign(n_actions, Vec(dim, 0.0));
  const double inv_b = 1.0 / static_cast<double>(batch.rows.size());
  double sum_norm_sq = 0.0;
  for (std::size_t i = 0; i < batch.rows.size(); ++i) {
    const auto& row = batch.rows[i];
    const Vec& x = env.contexts[row.context_id];
    const double scale_r = (row.reward - out.beta_used) / row.propensity;
    const double pa = probs[i][row.action];
    // grad_{w_b} pi(a|x) = pi(a) (1[a=b] - pi(b)) x
    double row_norm_sq = 0.0;
    for (int b = 0; b < n_actions; ++b) {
      const double coef =
          pa * ((b == row.action ? 1.0 : 0.0) - probs[i][b]) * scale_r;
      axpy(coef * inv_b, x, out.grad[b]);
      row_norm_sq += coef * coef * norm2_sq(x);
    }
    sum_norm_sq += row_norm_sq;
  }
  double grad_norm_sq = 0.0;
  for (const auto& g : out.grad) grad_norm_sq += norm2_sq(g);
  // Var over rows, summed over components: E||g_i||^2 - ||mean g||^2.
  out.variance = sum_norm_sq * inv_b - grad_norm_sq;
  return out;
}

// Full-batch SNIPS gradient via the quotient rule (identical to the
// double-sum form after rearrangement); invariant to reward translation.
inline std::vector<Vec> snips_fullbatch_gradient(const BanditLog& log,
                                                 const SoftmaxPolicy& policy,
                                                 const BanditEnvironment& env) {
  check_log(log);
  const int n_actions = policy.n_actions();
  const int dim = policy.context_dim();
  double s_w = 0.0, s_wr = 0.0;
  std::vector<Vec> g_w(n_actions, Vec(dim, 0.0));
  std::vector<Vec> g_wr(n_actions, Vec(dim, 0.0));
  for (const auto& row : log.rows) {
    const Vec probs = policy.action_probs(env.contexts[row.context_id]);
    const Vec& x = env.contexts[row.context_id];
    const double w = probs[row.action] / row.propensity;
    s_w += w;
    s_wr += w * row.reward;
    for (int b = 0; b < n_actions; ++b) {
      const double coef =
          probs[row.action] * ((b == row.action ? 1.0 : 0.0) - probs[b]) /
          row.propensity;
      axpy(coef, x, g_w[b]);
      axpy(coef * row.reward, x, g_wr[b]);
    }
  }
  if (s_w <= 0.0) throw data_error("degenerate log: zero weight sum");
  std::vector<Vec> out(n_actions, Vec(dim, 0.0));
  for (int b = 0; b < n_actions; ++b)
    for (int j = 0; j < dim; ++j)
      out[b][j] = (g_wr[b][j] * s_w - s_wr * g_w[b][j]) / (s_w * s_w);
  return out;
}

// ---------------------------------------------------------------------------
// Ridge regression reward model (per action) for DR
// ---------------------------------------------------------------------------

struct RidgeRewardModel {
  std::vector<Vec> weights;  // [action][dim]
  std::vector<double> intercept_fallback;  // mean reward per action
  double global_mean = 0.0;

  double predict(const Vec& x, int action) const {
    if (weights[action].empty()) return intercept_fallback[action];
    return std::clamp(dot(weights[action], x), 0.0, 1.0);
  }
};

inline RidgeRewardModel fit_ridge_reward_model(const BanditLog& log,
                                               const BanditEnvironment& env,
                                               double ridge = 1.0) {
  check_log(log);
  const int d = env.context_dim;
  RidgeRewardModel model;
  model.weights.assign(env.n_actions, Vec{});
  model.intercept_fallback.assign(env.n_actions, 0.0);
  model.global_mean = mean_reward(log);
  for (int a = 0; a < env.n_actions; ++a) {
    std::vector<double> xtx(d * d, 0.0);
    Vec xty(d, 0.0);
    int count = 0;
    double ysum = 0.0;
    for (const auto& row : log.rows) {
      if (row.action != a) continue;
      const Vec& x = env.contexts[row.context_id];
      for (int i = 0; i < d; ++i) {
        xty[i] += x[i] * row.reward;
        for (int j = 0; j < d; ++j) xtx[i * d + j] += x[i] * x[j];
      }
      ++count;
      ysum += row.reward;
    }
    model.intercept_fallback[a] = count > 0 ? ysum / count : model.global_mean;
    if (count == 0) continue;
    for (int i = 0; i < d; ++i) xtx[i * d + i] += ridge;
    model.weights[a] = solve_spd(std::move(xtx), std::move(xty));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Off-policy learning
// ---------------------------------------------------------------------------

enum class OplMethod { ips, snips, banditnet, beta_ips_grad, beta_ips_value };

inline const char* opl_method_name(OplMethod m) {
  switch (m) {
    case OplMethod::ips: return "ips";
    case OplMethod::snips: return "snips";
    case OplMethod::banditnet: return "banditnet";
    case OplMethod::beta_ips_grad: return "beta_ips_grad";
    case OplMethod::beta_ips_value: return "beta_ips_value";
  }
  return "?";
}

struct OplSchedule {
  bool full_batch = false;
  int batch_size = 1024;
};

struct OplConfig {
  OplMethod method = OplMethod::ips;
  OplSchedule schedule;
  double banditnet_lambda = 0.0;
  int epochs = 50;
  double learning_rate = 1.0;
  double decay = 0.05;
};

struct OplTraceRow {
  int epoch = 0;
  double true_value = 0.0;
  double gradient_variance = 0.0;
};

struct OplResult {
  SoftmaxPolicy policy;
  std::vector<OplTraceRow> trace;
  double final_value = 0.0;
  double mean_gradient_variance = 0.0;
};

inline OplResult train_opl(const BanditEnvironment& env, const BanditLog& log,
                           const OplConfig& cfg, std::uint64_t seed) {
  check_log(log);
  const bool needs_full_batch = cfg.method == OplMethod::snips ||
                                cfg.method == OplMethod::beta_ips_value;
  if (needs_full_batch && !cfg.schedule.full_batch)
    throw usage_error(std::string(opl_method_name(cfg.method)) +
                      " does not decompose into mini-batches");

  OplResult result;
  result.policy = make_softmax_policy(env.n_actions, env.context_dim);
  Rng rng = make_rng(seed, 47);
  std::vector<std::size_t> order(log.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  double var_accum = 0.0;
  int var_count = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate / (1.0 + cfg.decay * epoch);
    if (cfg.schedule.full_batch) {
      std::vector<Vec> grad;
      double variance = 0.0;
      if (cfg.method == OplMethod::snips) {
        grad = snips_fullbatch_gradient(log, result.policy, env);
      } else {
        BaselineKind baseline = BaselineKind::none;
        double lambda = 0.0;
        if (cfg.method == OplMethod::banditnet) {
          baseline = BaselineKind::fixed;
          lambda = cfg.banditnet_lambda;
        } else if (cfg.method == OplMethod::beta_ips_grad) {
          baseline = BaselineKind::optimal_gradient;
        } else if (cfg.method == OplMethod::beta_ips_value) {
          baseline = BaselineKind::optimal_value;
        }
        BanditGradient g =
            policy_gradient(log, result.policy, env, baseline, lambda);
        grad = std::move(g.grad);
        variance = g.variance;
      }
      for (int a = 0; a < env.n_actions; ++a)
        axpy(lr, grad[a], result.policy.weights[a]);
      var_accum += variance;
      var_count += 1;
      OplTraceRow row{epoch, evaluate_true_value(result.policy, env), variance};
      result.trace.push_back(row);
    } else {
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_var = 0.0;
      int n_batches = 0;
      for (std::size_t start = 0; start < order.size();
           start += cfg.schedule.batch_size) {
        BanditLog batch;
        const std::size_t stop =
            std::min(order.size(), start + cfg.schedule.batch_size);
        batch.rows.reserve(stop - start);
        for (std::size_t i = start; i < stop; ++i)
          batch.rows.push_back(log.rows[order[i]]);
        BaselineKind baseline = BaselineKind::none;
        double lambda = 0.0;
        if (cfg.method == OplMethod::banditnet) {
          baseline = BaselineKind::fixed;
          lambda = cfg.banditnet_lambda;
        } else if (cfg.method == OplMethod::beta_ips_grad) {
          baseline = BaselineKind::optimal_gradient;
        }
        BanditGradient g =
            policy_gradient(batch, result.policy, env, baseline, lambda);
        for (int a = 0; a < env.n_actions; ++a)
          axpy(lr, g.grad[a], result.policy.weights[a]);
        epoch_var += g.variance;
        ++n_batches;
      }
      epoch_var /= std::max(n_batches, 1);
      var_accum += epoch_var;
      var_count += 1;
      OplTraceRow row{epoch, evaluate_true_value(result.policy, env),
                      epoch_var};
      result.trace.push_back(row);
    }
  }
  result.final_value = evaluate_true_value(result.policy, env);
  result.mean_gradient_variance = var_count ? var_accum / var_count : 0.0;
  return result;
}

// ---------------------------------------------------------------------------
// Off-policy evaluation experiment (MSE against the exact value)
// ---------------------------------------------------------------------------

struct OpeCell {
  std::string estimator;
  int n_actions = 0;
  double inv_temperature = 0.0;
  std::size_t n = 0;
  double mse = 0.0;
  double variance = 0.0;  // variance of the estimates over repetitions
  double bias = 0.0;
  double ci_low = 0.0;   // 95% t-interval on the MSE
  double ci_high = 0.0;
};

inline void write_ope_csv(const std::vector<OpeCell>& cells,
                          std::ostream& out) {
  out << "estimator,n_actions,inv_temp,N,mse,variance,bias,ci_low,ci_high\n";
  for (const auto& c : cells) {
    out << c.estimator << ',' << c.n_actions << ',' << fmt_double(c.inv_temperature)
        << ',' << c.n << ',' << fmt_double(c.mse) << ',' << fmt_double(c.variance)
        << ',' << fmt_double(c.bias) << ',' << fmt_double(c.ci_low) << ','
        << fmt_double(c.ci_high) << '\n';
  }
}

inline std::vector<OpeCell> ope_experiment(
    BanditEnvironment env, const SoftmaxPolicy& target_policy,
    const std::vector<std::size_t>& n_grid, const std::vector<double>& temp_grid,
    int repetitions, std::uint64_t seed) {
  if (repetitions < 2) throw config_error("repetitions must be >= 2");
  const auto target_probs = policy_prob_table(target_policy, env);
  std::vector<OpeCell> cells;
  static const char* names[] = {"ips", "snips", "dr", "beta_ips"};
  for (double temp : temp_grid) {
    env.rebuild_logging_policy(temp);
    const double true_value = evaluate_true_value(target_policy, env);
    for (std::size_t n : n_grid) {
      std::vector<Vec> estimates(4, Vec(repetitions, 0.0));
      for (int rep = 0; rep < repetitions; ++rep) {
        Rng rng = make_rng(seed, mix64((static_cast<std::uint64_t>(n) << 20) ^
                                       std::hash<double>{}(temp)) +
                                     rep);
        const BanditLog log = sample_bandit_log(env, n, rng);
        const RidgeRewardModel model = fit_ridge_reward_model(log, env);
        estimates[0][rep] = ips_value(log, target_probs);
        estimates[1][rep] = snips_value(log, target_probs);
        estimates[2][rep] = dr_value(
            log, target_probs,
            [&](int x, int a) { return model.predict(env.contexts[x], a); },
            env.n_actions);
        estimates[3][rep] = beta_ips_value(
            log, target_probs, optimal_beta_value_or_mean(log, target_probs));
      }
      for (int e = 0; e < 4; ++e) {
        OpeCell cell;
        cell.estimator = names[e];
        cell.n_actions = env.n_actions;
        cell.inv_temperature = temp;
        cell.n = n;
        Vec sq(repetitions);
        for (int rep = 0; rep < repetitions; ++rep) {
          const double err = estimates[e][rep] - true_value;
          sq[rep] = err * err;
        }
        cell.mse = mean(sq);
        cell.variance = sample_variance(estimates[e]);
        cell.bias = mean(estimates[e]) - true_value;
        const ConfidenceInterval ci = t_interval(sq, 0.95);
        cell.ci_low = ci.lo;
        cell.ci_high = ci.hi;
        cells.push_back(std::move(cell));
      }
    }
  }
  return cells;
}

}  // namespace oplab
