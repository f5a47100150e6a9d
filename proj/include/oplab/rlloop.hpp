#pragma once

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "oplab/common.hpp"

namespace oplab {

// ---------------------------------------------------------------------------
// Gaussian-chain MDP: a T-step denoising-style chain with terminal reward
// ---------------------------------------------------------------------------

struct ChainMdp {
  int horizon = 10;  // T
  int state_dim = 2;
  std::vector<Vec> prompts;     // context vectors, one per prompt
  std::vector<Vec> target_map;  // rows of G; terminal target is G * c
  double reward_scale = 0.5;

  Vec target_for(const Vec& c) const {
    Vec t(state_dim, 0.0);
    for (int i = 0; i < state_dim; ++i) t[i] = dot(target_map[i], c);
    return t;
  }

  // Terminal reward in (0, 1]: squared distance to the prompt target,
  // passed through a decaying exponential.
  double reward(const Vec& x0, const Vec& c) const {
    const Vec t = target_for(c);
    double d2 = 0.0;
    for (int i = 0; i < state_dim; ++i)
      d2 += (x0[i] - t[i]) * (x0[i] - t[i]);
    return std::exp(-reward_scale * d2);
  }
};

inline ChainMdp make_chain_mdp(int horizon, int state_dim, int n_prompts,
                               std::uint64_t seed, double reward_scale = 0.5) {
  ChainMdp mdp;
  mdp.horizon = horizon;
  mdp.state_dim = state_dim;
  mdp.reward_scale = reward_scale;
  Rng rng = make_rng(seed, 53);
  std::normal_distribution<double> gauss(0.0, 1.0);
  mdp.prompts.assign(n_prompts, Vec(state_dim));
  for (auto& p : mdp.prompts)
    for (auto& v : p) v = gauss(rng);
  mdp.target_map.assign(state_dim, Vec(state_dim));
  for (auto& row : mdp.target_map)
    for (auto& v : row) v = 0.5 * gauss(rng);
  return mdp;
}

// ---------------------------------------------------------------------------
// Policy: per-step Gaussian with linear mean and fixed std
// ---------------------------------------------------------------------------

struct GaussianChainPolicy {
  std::vector<Vec> a;  // state map, state_dim x state_dim
  std::vector<Vec> b;  // context map, state_dim x state_dim
  Vec v;               // timestep-encoding coefficients, state_dim
  double sigma = 0.3;  // fixed per-step std
  int horizon = 10;

  int dim() const { return static_cast<int>(v.size()); }

  Vec mean(const Vec& state, const Vec& context, int t) const {
    const double tau = static_cast<double>(t) / horizon;
    Vec m(dim());
    for (int i = 0; i < dim(); ++i)
      m[i] = dot(a[i], state) + dot(b[i], context) + v[i] * tau;
    return m;
  }
};

// Flat parameter view: gradients share this layout.
struct ChainPolicyGrad {
  std::vector<Vec> a, b;
  Vec v;

  static ChainPolicyGrad zeros(int dim) {
    ChainPolicyGrad g;
    g.a.assign(dim, Vec(dim, 0.0));
    g.b.assign(dim, Vec(dim, 0.0));
    g.v.assign(dim, 0.0);
    return g;
  }
  void add_scaled(const ChainPolicyGrad& o, double s) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      axpy(s, o.a[i], a[i]);
      axpy(s, o.b[i], b[i]);
    }
    axpy(s, o.v, v);
  }
  double norm() const {
    double s = norm2_sq(v);
    for (const auto& r : a) s += norm2_sq(r);
    for (const auto& r : b) s += norm2_sq(r);
    return std::sqrt(s);
  }
};

inline void apply_gradient(GaussianChainPolicy& p, const ChainPolicyGrad& g,
                           double lr) {
  for (int i = 0; i < p.dim(); ++i) {
    axpy(lr, g.a[i], p.a[i]);
    axpy(lr, g.b[i], p.b[i]);
  }
  axpy(lr, g.v, p.v);
}

inline GaussianChainPolicy make_chain_policy(const ChainMdp& mdp, double sigma,
                                             std::uint64_t seed = 0,
                                             double init_scale = 0.0) {
  GaussianChainPolicy p;
  p.sigma = sigma;
  p.horizon = mdp.horizon;
  p.a.assign(mdp.state_dim, Vec(mdp.state_dim, 0.0));
  p.b.assign(mdp.state_dim, Vec(mdp.state_dim, 0.0));
  p.v.assign(mdp.state_dim, 0.0);
  // Mild shrink toward the origin keeps the chain stable at init.
  for (int i = 0; i < mdp.state_dim; ++i) p.a[i][i] = 0.5;
  if (init_scale > 0.0) {
    Rng rng = make_rng(seed, 59);
    std::normal_distribution<double> gauss(0.0, init_scale);
    for (auto& row : p.b)
      for (auto& x : row) x += gauss(rng);
  }
  return p;
}

inline double step_log_prob(const GaussianChainPolicy& p, const Vec& state,
                            const Vec& context, int t, const Vec& next) {
  const Vec m = p.mean(state, context, t);
  const double var = p.sigma * p.sigma;
  double lp = 0.0;
  for (int i = 0; i < p.dim(); ++i) {
    const double d = next[i] - m[i];
    lp += -0.5 * std::log(2.0 * M_PI * var) - d * d / (2.0 * var);
  }
  return lp;
}

// d log p / d theta for one step, accumulated into g with weight w.
inline void accumulate_step_score(const GaussianChainPolicy& p,
                                  const Vec& state, const Vec& context, int t,
                                  const Vec& next, double w,
                                  ChainPolicyGrad& g) {
  const Vec m = p.mean(state, context, t);
  const double inv_var = 1.0 / (p.sigma * p.sigma);
  const double tau = static_cast<double>(t) / p.horizon;
  for (int i = 0; i < p.dim(); ++i) {
    const double eps = (next[i] - m[i]) * inv_var * w;
    axpy(eps, state, g.a[i]);
    axpy(eps, context, g.b[i]);
    g.v[i] += eps * tau;
  }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

struct ChainStep {
  Vec state;           // x_t
  Vec next;            // x_{t-1}
  int t = 0;           // time index of `state`, runs T..1
  double old_logprob = 0.0;  // log-prob under the sampling policy
};

struct Trajectory {
  std::vector<ChainStep> steps;
  double reward = 0.0;

  double old_logprob_total() const {
    double s = 0.0;
    for (const auto& st : steps) s += st.old_logprob;
    return s;
  }
};

struct PromptTrajectories {
  int prompt_id = 0;
  std::vector<Trajectory> trajectories;
};

struct TrajectoryBatch {
  std::vector<PromptTrajectories> prompts;
  int k = 1;

  std::size_t total_trajectories() const {
    std::size_t n = 0;
    for (const auto& p : prompts) n += p.trajectories.size();
    return n;
  }
  Vec all_rewards() const {
    Vec r;
    for (const auto& p : prompts)
      for (const auto& t : p.trajectories) r.push_back(t.reward);
    return r;
  }
};

inline Trajectory rollout_one(const GaussianChainPolicy& policy,
                              const ChainMdp& mdp, const Vec& context,
                              Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Trajectory traj;
  Vec state(mdp.state_dim);
  for (auto& s : state) s = gauss(rng);  // x_T ~ N(0, I)
  for (int t = mdp.horizon; t >= 1; --t) {
    ChainStep step;
    step.state = state;
    step.t = t;
    const Vec m = policy.mean(state, context, t);
    step.next.resize(mdp.state_dim);
    for (int i = 0; i < mdp.state_dim; ++i)
      step.next[i] = m[i] + policy.sigma * gauss(rng);
    step.old_logprob = step_log_prob(policy, state, context, t, step.next);
    state = step.next;
    traj.steps.push_back(std::move(step));
  }
  traj.reward = mdp.reward(state, context);
  return traj;
}

inline TrajectoryBatch rollout(const GaussianChainPolicy& policy,
                               const ChainMdp& mdp, int k, Rng& rng) {
  if (k < 1) throw config_error("K must be >= 1");
  TrajectoryBatch batch;
  batch.k = k;
  for (std::size_t p = 0; p < mdp.prompts.size(); ++p) {
    PromptTrajectories pt;
    pt.prompt_id = static_cast<int>(p);
    for (int i = 0; i < k; ++i)
      pt.trajectories.push_back(rollout_one(policy, mdp, mdp.prompts[p], rng));
    batch.prompts.push_back(std::move(pt));
  }
  return batch;
}

// Deterministic rollout from a fixed noise sequence (common random numbers).
// noise layout: [0..state_dim) seeds x_T, then state_dim entries per step.
inline Trajectory rollout_with_noise(const GaussianChainPolicy& policy,
                                     const ChainMdp& mdp, const Vec& context,
                                     const Vec& noise) {
  const std::size_t need =
      static_cast<std::size_t>(mdp.state_dim) * (mdp.horizon + 1);
  if (noise.size() != need)
    throw config_error("noise vector has the wrong length");
  Trajectory traj;
  Vec state(mdp.state_dim);
  for (int i = 0; i < mdp.state_dim; ++i) state[i] = noise[i];
  std::size_t off = mdp.state_dim;
  for (int t = mdp.horizon; t >= 1; --t) {
    ChainStep step;
    step.state = state;
    step.t = t;
    const Vec m = policy.mean(state, context, t);
    step.next.resize(mdp.state_dim);
    for (int i = 0; i < mdp.state_dim; ++i)
      step.next[i] = m[i] + policy.sigma * noise[off + i];
    step.old_logprob = step_log_prob(policy, state, context, t, step.next);
    off += mdp.state_dim;
    state = step.next;
    traj.steps.push_back(std::move(step));
  }
  traj.reward = mdp.reward(state, context);
  return traj;
}

// ---------------------------------------------------------------------------
// Gradient estimators
// ---------------------------------------------------------------------------

inline void check_on_policy(const TrajectoryBatch& batch, const ChainMdp& mdp,
                            const GaussianChainPolicy& policy,
                            double tol = 1e-8) {
  for (const auto& p : batch.prompts) {
    const Vec& c = mdp.prompts[p.prompt_id];
    for (const auto& traj : p.trajectories)
      for (const auto& st : traj.steps) {
        const double lp = step_log_prob(policy, st.state, c, st.t, st.next);
        if (std::fabs(lp - st.old_logprob) > tol)
          throw usage_error(
              "batch is off-policy: stored log-probs do not match the "
              "current policy");
      }
  }
}

enum class ReinforceBaseline { none, mean_reward };

inline ChainPolicyGrad reinforce_gradient(const TrajectoryBatch& batch,
                                          const GaussianChainPolicy& policy,
                                          const ChainMdp& mdp,
                                          ReinforceBaseline baseline) {
  check_on_policy(batch, mdp, policy);
  const std::size_t n = batch.total_trajectories();
  if (n == 0) throw data_error("empty batch");
  double b = 0.0;
  if (baseline == ReinforceBaseline::mean_reward) b = mean(batch.all_rewards());
  ChainPolicyGrad g = ChainPolicyGrad::zeros(policy.dim());
  for (const auto& p : batch.prompts) {
    const Vec& c = mdp.prompts[p.prompt_id];
    for (const auto& traj : p.trajectories) {
      const double w = (traj.reward - b) / static_cast<double>(n);
      for (const auto& st : traj.steps)
        accumulate_step_score(policy, st.state, c, st.t, st.next, w, g);
    }
  }
  return g;
}

inline ChainPolicyGrad rloo_gradient(const TrajectoryBatch& batch,
                                     const GaussianChainPolicy& policy,
                                     const ChainMdp& mdp) {
  if (batch.k < 2) throw usage_error("RLOO requires K >= 2");
  check_on_policy(batch, mdp, policy);
  ChainPolicyGrad g = ChainPolicyGrad::zeros(policy.dim());
  const double n_prompts = static_cast<double>(batch.prompts.size());
  for (const auto& p : batch.prompts) {
    const Vec& c = mdp.prompts[p.prompt_id];
    const int k = static_cast<int>(p.trajectories.size());
    double sum = 0.0;
    for (const auto& traj : p.trajectories) sum += traj.reward;
    for (const auto& traj : p.trajectories) {
      const double loo = (sum - traj.reward) / (k - 1);
      const double w = (traj.reward - loo) / (k * n_prompts);
      for (const auto& st : traj.steps)
        accumulate_step_score(policy, st.state, c, st.t, st.next, w, g);
    }
  }
  return g;
}

struct ClippedObjective {
  double value = 0.0;
  ChainPolicyGrad grad;
};

namespace detail {

// Shared core of PPO/LOOP: sum_t clip(ratio_t, 1-eps, 1+eps) * advantage,
// with the gradient flowing only through unclipped steps.
inline void add_clipped_trajectory(const GaussianChainPolicy& policy,
                                   const Vec& context, const Trajectory& traj,
                                   double advantage, double eps, double weight,
                                   double& value, ChainPolicyGrad& grad) {
  for (const auto& st : traj.steps) {
    const double lp = step_log_prob(policy, st.state, context, st.t, st.next);
    const double ratio = std::exp(lp - st.old_logprob);
    const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
    value += weight * clipped * advantage;
    if (ratio >= 1.0 - eps && ratio <= 1.0 + eps)
      accumulate_step_score(policy, st.state, context, st.t, st.next,
                            weight * ratio * advantage, grad);
  }
}

}  // namespace detail

// PPO objective per Ch.-style clipped form; batches may be off-policy.
inline ClippedObjective ppo_objective(const TrajectoryBatch& batch,
                                      const GaussianChainPolicy& policy,
                                      const ChainMdp& mdp, double eps) {
  if (eps <= 0.0) throw config_error("clip epsilon must be positive");
  const std::size_t n = batch.total_trajectories();
  if (n == 0) throw data_error("empty batch");
  ClippedObjective out;
  out.grad = ChainPolicyGrad::zeros(policy.dim());
  const double w = 1.0 / static_cast<double>(n);
  for (const auto& p : batch.prompts) {
    const Vec& c = mdp.prompts[p.prompt_id];
    for (const auto& traj : p.trajectories)
      detail::add_clipped_trajectory(policy, c, traj, traj.reward, eps, w,
                                     out.value, out.grad);
  }
  return out;
}

// LOOP: K trajectories per prompt, leave-one-out baselines inside the
// clipped importance-sampling objective.
inline ClippedObjective loop_objective(const TrajectoryBatch& batch,
                                       const GaussianChainPolicy& policy,
                                       const ChainMdp& mdp, double eps) {
  if (eps <= 0.0) throw config_error("clip epsilon must be positive");
  if (batch.k < 2) throw usage_error("LOOP requires K >= 2");
  ClippedObjective out;
  out.grad = ChainPolicyGrad::zeros(policy.dim());
  const double n_prompts = static_cast<double>(batch.prompts.size());
  for (const auto& p : batch.prompts) {
    const Vec& c = mdp.prompts[p.prompt_id];
    const int k = static_cast<int>(p.trajectories.size());
    if (k < 2) throw usage_error("LOOP requires K >= 2");
    double sum = 0.0;
    for (const auto& traj : p.trajectories) sum += traj.reward;
    for (const auto& traj : p.trajectories) {
      const double loo = (sum - traj.reward) / (k - 1);
      detail::add_clipped_trajectory(policy, c, traj, traj.reward - loo, eps,
                                     1.0 / (k * n_prompts), out.value,
                                     out.grad);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class RlMethod { reinforce, reinforce_bc, rloo, ppo, loop };

inline const char* rl_method_name(RlMethod m) {
  switch (m) {
    case RlMethod::reinforce: return "reinforce";
    case RlMethod::reinforce_bc: return "reinforce_bc";
    case RlMethod::rloo: return "rloo";
    case RlMethod::ppo: return "ppo";
    case RlMethod::loop: return "loop";
  }
  return "?";
}

struct RlConfig {
  RlMethod method = RlMethod::reinforce;
  int k = 1;              // trajectories per prompt (>= 2 for rloo/loop)
  int epochs = 40;
  int inner_epochs = 1;   // sample-reuse passes; 1 for on-policy methods
  double clip_eps = 1e-4;
  double learning_rate = 0.05;
  double decay = 0.0;          // per-epoch step decay
  double grad_clip_norm = 1.0; // gradient norm cap; <= 0 disables
  double sigma = 0.3;
};

struct RlTraceRow {
  int epoch = 0;
  double mean_reward = 0.0;
  double reward_variance = 0.0;
  double grad_norm = 0.0;
};

struct RlResult {
  GaussianChainPolicy policy;
  std::vector<RlTraceRow> trace;
  double final_reward = 0.0;
};

inline void write_rl_trace_csv(RlMethod method, int k,
                               const std::vector<RlTraceRow>& trace,
                               std::ostream& out) {
  out << "epoch,method,K,mean_reward,reward_variance,grad_norm\n";
  for (const auto& r : trace)
    out << r.epoch << ',' << rl_method_name(method) << ',' << k << ','
        << fmt_double(r.mean_reward) << ',' << fmt_double(r.reward_variance)
        << ',' << fmt_double(r.grad_norm) << '\n';
}

inline RlResult train_rl(const ChainMdp& mdp, const RlConfig& cfg, Rng& rng) {
  const bool on_policy_method = cfg.method == RlMethod::reinforce ||
                                cfg.method == RlMethod::reinforce_bc ||
                                cfg.method == RlMethod::rloo;
  if (on_policy_method && cfg.inner_epochs > 1)
    throw usage_error(
        "REINFORCE-family estimators cannot reuse samples across updates; "
        "inner_epochs must be 1");
  const bool needs_k2 = cfg.method == RlMethod::rloo ||
                        cfg.method == RlMethod::loop;
  if (needs_k2 && cfg.k < 2) throw usage_error("method requires K >= 2");

  RlResult result;
  result.policy = make_chain_policy(mdp, cfg.sigma);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const TrajectoryBatch batch = rollout(result.policy, mdp, cfg.k, rng);
    const Vec rewards = batch.all_rewards();
    const double lr = cfg.learning_rate / (1.0 + cfg.decay * epoch);

    double gn = 0.0;
    for (int inner = 0; inner < cfg.inner_epochs; ++inner) {
      ChainPolicyGrad grad = ChainPolicyGrad::zeros(result.policy.dim());
      switch (cfg.method) {
        case RlMethod::reinforce:
          grad = reinforce_gradient(batch, result.policy, mdp,
                                    ReinforceBaseline::none);
          break;
        case RlMethod::reinforce_bc:
          grad = reinforce_gradient(batch, result.policy, mdp,
                                    ReinforceBaseline::mean_reward);
          break;
        case RlMethod::rloo:
          grad = rloo_gradient(batch, result.policy, mdp);
          break;
        case RlMethod::ppo:
          grad = ppo_objective(batch, result.policy, mdp, cfg.clip_eps).grad;
          break;
        case RlMethod::loop:
          grad = loop_objective(batch, result.policy, mdp, cfg.clip_eps).grad;
          break;
      }
      gn = grad.norm();
      if (cfg.grad_clip_norm > 0.0 && gn > cfg.grad_clip_norm) {
        const double shrink = cfg.grad_clip_norm / gn;
        apply_gradient(result.policy, grad, lr * shrink);
      } else {
        apply_gradient(result.policy, grad, lr);
      }
    }

    RlTraceRow row;
    row.epoch = epoch;
    row.mean_reward = mean(rewards);
    row.reward_variance = sample_variance(rewards);
    row.grad_norm = gn;
    result.trace.push_back(row);
  }
  // Final reward from a fresh evaluation rollout.
  const TrajectoryBatch eval = rollout(result.policy, mdp, 8, rng);
  result.final_reward = mean(eval.all_rewards());
  return result;
}

}  // namespace oplab
