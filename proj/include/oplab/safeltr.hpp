#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "oplab/clicksim.hpp"
#include "oplab/common.hpp"
#include "oplab/dataset.hpp"
#include "oplab/policy.hpp"

namespace oplab {

// ---------------------------------------------------------------------------
// Estimate and safety types
// ---------------------------------------------------------------------------

enum class EstimatorKind { exposure_ips, action_ips, dr, naive };

struct CltrEstimate {
  double utility = 0.0;
  double risk_term = 0.0;      // policy-dependent risk (0 for non-safe)
  double lower_bound = 0.0;    // utility - risk_term
  double divergence = 0.0;
  EstimatorKind kind = EstimatorKind::exposure_ips;
  // Constant bound term sqrt((1/N)(1-delta)/delta); reported for bound
  // checks but excluded from optimization.
  double constant_term = 0.0;

  double full_bound() const { return lower_bound - constant_term; }
};

enum class SafetyMode { crm_exposure, crm_action, safe_dr, prpo, none };

struct SafetyConfig {
  double delta = 0.5;          // confidence parameter, strictly in (0,1)
  double z = 0.0;              // exposure normalizer (sum of alphas)
  double beta_alpha_max = 0.0; // max_k beta_k / alpha_k; 0 in pure PBM mode
  SafetyMode mode = SafetyMode::none;

  void validate() const {
    if (mode == SafetyMode::none) return;
    if (delta <= 0.0 || delta >= 1.0)
      throw config_error("delta must lie strictly inside (0,1)");
    if (z <= 0.0) throw config_error("normalizer Z must be positive");
  }

  double delta_factor() const { return (1.0 - delta) / delta; }
};

inline SafetyConfig make_safety(SafetyMode mode, double delta,
                                const ExaminationModel& exam) {
  SafetyConfig cfg;
  cfg.mode = mode;
  cfg.delta = delta;
  cfg.z = examination_z(exam);
  cfg.beta_alpha_max = exam.max_beta_alpha_ratio();
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Relevance regression models (for DR / PRPO)
// ---------------------------------------------------------------------------

enum class RegressionSource { oracle, noisy_oracle, constant, learned };

struct RegressionModel {
  RegressionSource source = RegressionSource::constant;
  double param = 0.0;  // noise level or the constant
  std::map<int, Vec> predictions;  // per query_id, one value per document

  double predict(int qid, int d) const {
    auto it = predictions.find(qid);
    if (it == predictions.end())
      throw estimator_error("regression model has no predictions for query " +
                            std::to_string(qid));
    return it->second[d];
  }
};

inline RegressionModel make_regression_constant(const RankingDataset& data,
                                                double c) {
  if (c < 0.0 || c > 1.0) throw config_error("constant prediction outside [0,1]");
  RegressionModel m;
  m.source = RegressionSource::constant;
  m.param = c;
  for (const auto& q : data.queries)
    m.predictions[q.query_id] = Vec(q.documents.size(), c);
  return m;
}

inline RegressionModel make_regression_oracle(const RankingDataset& data,
                                              const RelevanceTransform& t,
                                              double noise = 0.0,
                                              std::uint64_t seed = 0) {
  RegressionModel m;
  m.source = noise > 0.0 ? RegressionSource::noisy_oracle
                         : RegressionSource::oracle;
  m.param = noise;
  Rng rng = make_rng(seed, 29);
  std::uniform_real_distribution<double> u(-noise, noise);
  for (const auto& q : data.queries) {
    Vec pred(q.documents.size());
    for (std::size_t d = 0; d < pred.size(); ++d) {
      double v = relevance_probability(t, q.documents[d].grade);
      if (noise > 0.0) v = std::clamp(v + u(rng), 0.0, 1.0);
      pred[d] = v;
    }
    m.predictions[q.query_id] = std::move(pred);
  }
  return m;
}

// Relevance regression learned from the log: ridge over document features
// against the affine-corrected click rate (clicks - sum beta) / sum alpha,
// weighted by the examination mass the document received. A feature-based
// model generalizes beyond clicked documents, which tabular click rates
// cannot.
inline RegressionModel learn_regression(const LogAggregate& agg,
                                        const RankingDataset& data,
                                        double ridge = 1.0) {
  RegressionModel m;
  m.source = RegressionSource::learned;
  const int dim = data.feature_dim + 1;  // intercept
  std::vector<double> xtx(dim * dim, 0.0);
  Vec xty(dim, 0.0);
  std::map<int, const QueryRecord*> by_qid;
  for (const auto& q : data.queries) by_qid[q.query_id] = &q;
  for (const auto& qa : agg.queries) {
    const QueryRecord& q = *by_qid.at(qa.query_id);
    for (std::size_t d = 0; d < qa.clicks.size(); ++d) {
      const double w = qa.alpha_sum[d];
      if (w <= 0.0) continue;
      const double y = std::clamp(
          (qa.clicks[d] - qa.beta_sum(static_cast<int>(d))) / w, 0.0, 1.0);
      Vec x(dim, 1.0);
      for (int j = 0; j < data.feature_dim; ++j)
        x[j + 1] = q.documents[d].features[j];
      for (int i = 0; i < dim; ++i) {
        xty[i] += w * x[i] * y;
        for (int j = 0; j < dim; ++j) xtx[i * dim + j] += w * x[i] * x[j];
      }
    }
  }
  for (int i = 0; i < dim; ++i) xtx[i * dim + i] += ridge;
  const Vec weights = solve_spd(std::move(xtx), std::move(xty));
  for (const auto& q : data.queries) {
    Vec pred(q.documents.size());
    for (std::size_t d = 0; d < pred.size(); ++d) {
      double v = weights[0];
      for (int j = 0; j < data.feature_dim; ++j)
        v += weights[j + 1] * q.documents[d].features[j];
      pred[d] = std::clamp(v, 0.0, 1.0);
    }
    m.predictions[q.query_id] = std::move(pred);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Target-policy exposure per query
// ---------------------------------------------------------------------------

using ExposureMap = std::map<int, ExposureProfile>;  // by query_id

inline ExposureMap exposure_map(const StochasticRankingPolicy& policy,
                                const RankingDataset& data,
                                const ExaminationModel& model, Rng& rng,
                                bool exact = true, int n_samples = 512) {
  ExposureMap out;
  for (const auto& q : data.queries)
    out[q.query_id] = estimate_exposure(policy, q, model, n_samples, rng, exact);
  return out;
}

// ---------------------------------------------------------------------------
// Point estimators
// ---------------------------------------------------------------------------

// Exposure-based IPS. Under PBM this is (1/N) sum_i sum_d rho(d)/rho0_hat(d)
// c_i(d); under trust bias the numerator is omega and the clicks carry the
// affine correction c_i(d) - beta_k, which keeps the estimator unbiased and
// makes DR with R_hat = 0 collapse onto it exactly.
inline CltrEstimate ips_exposure(const LogAggregate& agg,
                                 const PropensityEstimate& prop,
                                 const ExposureMap& target, bool use_omega) {
  CltrEstimate est;
  est.kind = EstimatorKind::exposure_ips;
  const double n = static_cast<double>(agg.total_interactions);
  if (n == 0) return est;
  double u = 0.0;
  for (const auto& qa : agg.queries) {
    const ExposureProfile& prof = target.at(qa.query_id);
    for (std::size_t di = 0; di < qa.clicks.size(); ++di) {
      const int d = static_cast<int>(di);
      const double residual =
          use_omega ? qa.clicks[di] - qa.beta_sum(d) : qa.clicks[di];
      if (residual == 0.0) continue;
      const double numer = use_omega ? prof.omega[di] : prof.rho[di];
      u += numer / prop.rho(qa.query_id, d) * residual;
    }
  }
  est.utility = u / n;
  est.lower_bound = est.utility;
  return est;
}

// Naive estimator: clicks taken at face value (all propensities 1).
inline CltrEstimate naive_estimate(const LogAggregate& agg,
                                   const ExposureMap& target, bool use_omega) {
  CltrEstimate est;
  est.kind = EstimatorKind::naive;
  const double n = static_cast<double>(agg.total_interactions);
  if (n == 0) return est;
  double u = 0.0;
  for (const auto& qa : agg.queries) {
    const ExposureProfile& prof = target.at(qa.query_id);
    for (std::size_t d = 0; d < qa.clicks.size(); ++d) {
      const double numer = use_omega ? prof.omega[d] : prof.rho[d];
      u += numer * qa.clicks[d];
    }
  }
  est.utility = u / n;
  est.lower_bound = est.utility;
  return est;
}

// Action-based IPS (Ch. 2 baseline): full-ranking importance ratios.
inline CltrEstimate ips_action(const InteractionLog& log,
                               const PropensityEstimate& prop,
                               const StochasticRankingPolicy& target,
                               const RankingDataset& data) {
  CltrEstimate est;
  est.kind = EstimatorKind::action_ips;
  if (log.entries.empty()) return est;
  std::map<int, const QueryRecord*> by_qid;
  for (const auto& q : data.queries) by_qid[q.query_id] = &q;
  double u = 0.0;
  for (const auto& it : log.entries) {
    double clicks = 0.0;
    for (uint8_t c : it.clicks) clicks += c;
    if (clicks == 0.0) continue;
    const double p0 = prop.action_propensity(it.query_id, it.displayed);
    if (p0 <= 0.0)
      throw estimator_error("zero action propensity for a clicked ranking of query " +
                            std::to_string(it.query_id));
    const double pi = std::exp(log_prob(target, *by_qid.at(it.query_id),
                                        it.displayed));
    u += pi / p0 * clicks;
  }
  est.utility = u / static_cast<double>(log.size());
  est.lower_bound = est.utility;
  return est;
}

// Doubly robust estimator: direct-method term plus IPS correction.
inline CltrEstimate dr_estimate(const LogAggregate& agg,
                                const PropensityEstimate& prop,
                                const ExposureMap& target,
                                const RegressionModel& regression) {
  CltrEstimate est;
  est.kind = EstimatorKind::dr;
  const double n = static_cast<double>(agg.total_interactions);
  if (n == 0) return est;
  double u = 0.0;
  for (const auto& qa : agg.queries) {
    const ExposureProfile& prof = target.at(qa.query_id);
    for (std::size_t di = 0; di < qa.clicks.size(); ++di) {
      const int d = static_cast<int>(di);
      const double rhat = regression.predict(qa.query_id, d);
      u += qa.n_impressions * prof.omega[di] * rhat;
      const double residual =
          qa.clicks[di] - qa.alpha_sum[di] * rhat - qa.beta_sum(d);
      if (residual != 0.0)
        u += prof.omega[di] / prop.rho(qa.query_id, d) * residual;
    }
  }
  est.utility = u / n;
  est.lower_bound = est.utility;
  return est;
}

// ---------------------------------------------------------------------------
// Empirical exposure divergence
// ---------------------------------------------------------------------------

// Divergence denominators for never-displayed documents are floored by this
// guard during training: the penalty for exposing them stays enormous but
// finite, which preserves the pull toward the observed exposure profile.
// The 10/sqrt(N) IPS clip floor must NOT be used here: at small N it levels
// the whole logging profile and erases the imitation signal.
constexpr double kDivergenceGuardFloor = 1e-3;

// (1/N) sum_i sum_d l'(d) (t'(d)/l'(d))^2 over logged queries, with both
// profiles normalized to sum 1 per query. `floor` keeps the logging profile
// away from zero for never-displayed documents (training finite-guard);
// with floor = 0 a zero logging exposure opposite nonzero target exposure
// raises an error.
inline double empirical_divergence(const LogAggregate& agg,
                                   const ExposureMap& target,
                                   const PropensityEstimate& logging,
                                   bool use_omega, double floor = 0.0) {
  const double n = static_cast<double>(agg.total_interactions);
  if (n == 0) throw data_error("empty log in divergence");
  double total = 0.0;
  for (const auto& qa : agg.queries) {
    const ExposureProfile& prof = target.at(qa.query_id);
    const auto& qp = logging.at_qid(qa.query_id);
    const std::size_t n_docs = qa.clicks.size();
    double t_sum = 0.0, l_sum = 0.0;
    for (std::size_t d = 0; d < n_docs; ++d) {
      const double t = use_omega ? prof.omega[d] : prof.rho[d];
      const double l0 = use_omega ? qp.omega_hat[d] : qp.rho_hat_raw[d];
      t_sum += t;
      l_sum += std::max(l0, floor);
    }
    double dq = 0.0;
    for (std::size_t d = 0; d < n_docs; ++d) {
      const double t = (use_omega ? prof.omega[d] : prof.rho[d]) / t_sum;
      const double l0 =
          std::max(use_omega ? qp.omega_hat[d] : qp.rho_hat_raw[d], floor) /
          l_sum;
      if (l0 <= 0.0) {
        if (t > 0.0)
          throw estimator_error(
              "divergence is infinite: zero logging exposure for doc " +
              std::to_string(d) + " of query " + std::to_string(qa.query_id));
        continue;
      }
      dq += t * t / l0;
    }
    total += qa.n_impressions * dq;
  }
  return total / n;
}

// ---------------------------------------------------------------------------
// CRM generalization bounds
// ---------------------------------------------------------------------------

inline CltrEstimate crm_lower_bound(CltrEstimate estimate, double divergence,
                                    std::size_t n, const SafetyConfig& cfg) {
  cfg.validate();
  if (n == 0) throw data_error("bound needs N >= 1");
  const double nn = static_cast<double>(n);
  const double factor = cfg.delta_factor();
  estimate.divergence = divergence;
  switch (cfg.mode) {
    case SafetyMode::crm_exposure:
      estimate.risk_term = std::sqrt(cfg.z / nn * factor * divergence);
      estimate.constant_term = std::sqrt(factor / nn);
      break;
    case SafetyMode::safe_dr: {
      const double mult = 1.0 + cfg.beta_alpha_max;
      estimate.risk_term =
          mult * std::sqrt(2.0 * cfg.z / nn * factor * divergence);
      estimate.constant_term = mult * std::sqrt(factor / nn);
      break;
    }
    case SafetyMode::crm_action:
      // Sample-variance risk; `divergence` carries the sample variance and
      // sqrt(factor) plays the role of the lambda weight.
      estimate.risk_term = std::sqrt(factor * divergence / nn);
      estimate.constant_term = 0.0;
      break;
    case SafetyMode::prpo:
    case SafetyMode::none:
      estimate.risk_term = 0.0;
      estimate.constant_term = 0.0;
      break;
  }
  estimate.lower_bound = estimate.utility - estimate.risk_term;
  return estimate;
}

// ---------------------------------------------------------------------------
// PRPO: clipping function, schedule, objective, gradient
// ---------------------------------------------------------------------------

enum class PrpoSchedule { constant, linear_in_N, log_in_N };

struct PrpoConfig {
  double eps_minus = 1.0;
  double eps_plus = 1.0;
  PrpoSchedule schedule = PrpoSchedule::constant;
  double schedule_param = 1.0;  // delta for constant, numerator for linear

  void validate() const {
    if (eps_minus <= 0.0) throw config_error("eps_minus must be positive");
    if (eps_minus > eps_plus)
      throw config_error("eps_minus must not exceed eps_plus");
  }
};

inline double prpo_clip(double x, double eps_minus, double eps_plus,
                        double reward) {
  return reward >= 0.0 ? std::min(x, eps_plus) * reward
                       : std::max(x, eps_minus) * reward;
}

inline bool prpo_active(double x, double eps_minus, double eps_plus,
                        double reward) {
  return (reward > 0.0 && x <= eps_plus) || (reward < 0.0 && x >= eps_minus);
}

inline std::pair<double, double> prpo_schedule(std::size_t n,
                                               PrpoSchedule schedule,
                                               double param) {
  if (n < 1) throw config_error("schedule needs N >= 1");
  double delta = 1.0;
  switch (schedule) {
    case PrpoSchedule::constant: delta = param; break;
    case PrpoSchedule::linear_in_N: delta = param / static_cast<double>(n); break;
    case PrpoSchedule::log_in_N: {
      const double ln = std::log(static_cast<double>(n));
      delta = ln > 0.0 ? 1.0 / ln : 1.0;
      break;
    }
  }
  const double eps_minus = std::min(std::max(delta, 1e-12), 1.0);
  return {eps_minus, 1.0 / eps_minus};
}

// Per-document DR relevance rewards r(d|q), weighted by the logging metric
// weights, aggregated once from the frozen log.
using PrpoRewards = std::map<int, Vec>;  // by query_id

inline PrpoRewards compute_prpo_rewards(const LogAggregate& agg,
                                        const PropensityEstimate& prop,
                                        const RegressionModel& regression) {
  PrpoRewards rewards;
  const double n = static_cast<double>(agg.total_interactions);
  if (n == 0) throw data_error("empty log for PRPO rewards");
  for (const auto& qa : agg.queries) {
    Vec r(qa.clicks.size(), 0.0);
    for (std::size_t di = 0; di < r.size(); ++di) {
      const int d = static_cast<int>(di);
      const double w0 = prop.omega0(qa.query_id, d);
      if (w0 <= 0.0) continue;  // never displayed: no weight, no incentive
      const double rhat = regression.predict(qa.query_id, d);
      const double residual =
          qa.clicks[di] - qa.alpha_sum[di] * rhat - qa.beta_sum(d);
      r[di] = (qa.n_impressions * w0 * rhat +
               w0 / prop.rho(qa.query_id, d) * residual) /
              n;
    }
    rewards[qa.query_id] = std::move(r);
  }
  return rewards;
}

// PRPO objective: sum over logged (q,d) of f(omega/omega0, eps-, eps+, r).
inline double prpo_objective(const LogAggregate& agg, const ExposureMap& target,
                             const PropensityEstimate& prop,
                             const PrpoRewards& rewards,
                             const PrpoConfig& cfg) {
  cfg.validate();
  double total = 0.0;
  for (const auto& qa : agg.queries) {
    const ExposureProfile& prof = target.at(qa.query_id);
    const Vec& r = rewards.at(qa.query_id);
    for (std::size_t di = 0; di < r.size(); ++di) {
      if (r[di] == 0.0) continue;
      const double w0 = prop.omega0(qa.query_id, static_cast<int>(di));
      if (w0 <= 0.0) continue;
      total += prpo_clip(prof.omega[di] / w0, cfg.eps_minus, cfg.eps_plus,
                         r[di]);
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Training-time gradients
// ---------------------------------------------------------------------------

enum class ObjectiveKind {
  naive,
  exposure_ips,
  action_ips,
  action_crm,
  dr,
  crm_exposure,
  safe_dr,
  prpo,
};

inline bool objective_uses_omega(ObjectiveKind k, ExamKind exam) {
  if (k == ObjectiveKind::dr || k == ObjectiveKind::safe_dr ||
      k == ObjectiveKind::prpo)
    return true;
  return exam == ExamKind::trust_bias;
}

struct GradientSettings {
  bool exact = true;       // enumeration when docs allow it, else sampling
  int n_samples = 32;      // REINFORCE samples per query when sampling
};

struct ObjectiveValueGrad {
  double objective = 0.0;  // estimate minus risk (what the optimizer climbs)
  double estimate = 0.0;
  double risk = 0.0;
  double divergence = 0.0;
  Vec grad;
};

namespace detail {

// Value and policy gradient of sum_q coef-weighted expected gains, where
// gain(d, k) = rank_gain(k) * coef(q, d). Exact enumeration or REINFORCE.
inline void accumulate_linear_term(
    const StochasticRankingPolicy& policy, const QueryRecord& query,
    const ExaminationModel& exam, bool use_omega, const Vec& coef,
    const GradientSettings& gs, Rng& rng, double& value, Vec& grad) {
  const auto gain = [&](int d, int rank) {
    const double g =
        use_omega ? exam.omega_at(rank) : exam.alpha_at(rank);
    return g * coef[d];
  };
  ExpectationResult res;
  if (gs.exact && query.n_docs() <= kEnumDocLimit) {
    res = exact_linear_expectation(policy, query, gain);
  } else {
    res = mc_linear_expectation(policy, query, gain, gs.n_samples, rng);
  }
  value += res.value;
  axpy(1.0, res.grad, grad);
}

}  // namespace detail

// REINFORCE gradient of the CRM objective (utility minus divergence risk).
// Also serves the plain estimators (mode none -> no risk term).
inline ObjectiveValueGrad crm_objective_gradient(
    const StochasticRankingPolicy& policy, const RankingDataset& data,
    const LogAggregate& agg, const PropensityEstimate& prop,
    const ExaminationModel& exam, ObjectiveKind kind,
    const SafetyConfig& safety, const RegressionModel* regression,
    const GradientSettings& gs, Rng& rng, double divergence_floor = 0.0) {
  const double n = static_cast<double>(agg.total_interactions);
  if (n == 0) throw data_error("empty log");
  const bool use_omega = objective_uses_omega(kind, exam.kind);
  const int dim = static_cast<int>(policy.weights.size());

  std::map<int, const QueryRecord*> by_qid;
  for (const auto& q : data.queries) by_qid[q.query_id] = &q;

  ObjectiveValueGrad out;
  out.grad.assign(dim, 0.0);

  // --- utility term ---
  for (const auto& qa : agg.queries) {
    const QueryRecord& q = *by_qid.at(qa.query_id);
    Vec coef(qa.clicks.size(), 0.0);
    for (std::size_t di = 0; di < coef.size(); ++di) {
      const int d = static_cast<int>(di);
      switch (kind) {
        case ObjectiveKind::naive:
          coef[di] = qa.clicks[di] / n;
          break;
        case ObjectiveKind::exposure_ips:
        case ObjectiveKind::crm_exposure: {
          const double residual = use_omega
                                      ? qa.clicks[di] - qa.beta_sum(d)
                                      : qa.clicks[di];
          coef[di] =
              residual == 0.0 ? 0.0 : residual / prop.rho(qa.query_id, d) / n;
          break;
        }
        case ObjectiveKind::dr:
        case ObjectiveKind::safe_dr: {
          const double rhat = regression->predict(qa.query_id, d);
          const double residual =
              qa.clicks[di] - qa.alpha_sum[di] * rhat - qa.beta_sum(d);
          coef[di] = (qa.n_impressions * rhat +
                      (residual != 0.0
                           ? residual / prop.rho(qa.query_id, d)
                           : 0.0)) /
                     n;
          break;
        }
        default:
          throw usage_error("objective kind not handled by crm gradient");
      }
    }
    detail::accumulate_linear_term(policy, q, exam, use_omega, coef, gs, rng,
                                   out.estimate, out.grad);
  }
  out.objective = out.estimate;

  // --- divergence risk term ---
  if (kind == ObjectiveKind::crm_exposure || kind == ObjectiveKind::safe_dr) {
    safety.validate();
    // Current target exposure per logged query (frozen for the chain rule).
    ExposureMap target;
    for (const auto& qa : agg.queries) {
      const QueryRecord& q = *by_qid.at(qa.query_id);
      target[qa.query_id] = estimate_exposure(
          policy, q, exam, gs.n_samples, rng,
          gs.exact && q.n_docs() <= kEnumDocLimit);
    }
    out.divergence = empirical_divergence(agg, target, prop, use_omega,
                                          divergence_floor);

    const double factor = safety.delta_factor();
    const double risk_scale =
        kind == ObjectiveKind::safe_dr
            ? (1.0 + safety.beta_alpha_max) *
                  std::sqrt(2.0 * safety.z / n * factor)
            : std::sqrt(safety.z / n * factor);
    out.risk = risk_scale * std::sqrt(out.divergence);
    out.objective = out.estimate - out.risk;

    if (out.divergence > 1e-14) {
      // d risk / d d2 = risk_scale / (2 sqrt(d2)); d2 gradient flows through
      // the squared exposure ratios with frozen normalizers.
      const double outer = risk_scale / (2.0 * std::sqrt(out.divergence));
      Vec div_grad(dim, 0.0);
      double div_value_unused = 0.0;
      for (const auto& qa : agg.queries) {
        const QueryRecord& q = *by_qid.at(qa.query_id);
        const ExposureProfile& prof = target.at(qa.query_id);
        const auto& qp = prop.at_qid(qa.query_id);
        const std::size_t n_docs = qa.clicks.size();
        double t_sum = 0.0, l_sum = 0.0;
        for (std::size_t d = 0; d < n_docs; ++d) {
          t_sum += use_omega ? prof.omega[d] : prof.rho[d];
          l_sum += std::max(use_omega ? qp.omega_hat[d] : qp.rho_hat_raw[d],
                            divergence_floor);
        }
        Vec coef(n_docs, 0.0);
        for (std::size_t d = 0; d < n_docs; ++d) {
          const double t = use_omega ? prof.omega[d] : prof.rho[d];
          const double l0 = std::max(
              use_omega ? qp.omega_hat[d] : qp.rho_hat_raw[d],
              divergence_floor);
          if (l0 <= 0.0) continue;
          // d/d t(d) of (n_q/N) * (t/t_sum)^2 / (l0/l_sum), t_sum frozen.
          coef[d] = qa.n_impressions / n * 2.0 * t * l_sum /
                    (t_sum * t_sum * l0);
        }
        detail::accumulate_linear_term(policy, q, exam, use_omega, coef, gs,
                                       rng, div_value_unused, div_grad);
      }
      axpy(-outer, div_grad, out.grad);
    }
    // divergence == 0: the sqrt risk gradient is defined as 0 (limit case).
  }
  return out;
}

// Action-based IPS / CRM objective and REINFORCE gradient (Ch. 2 baseline).
inline ObjectiveValueGrad action_objective_gradient(
    const StochasticRankingPolicy& policy, const RankingDataset& data,
    const InteractionLog& log, const PropensityEstimate& prop,
    ObjectiveKind kind, const SafetyConfig& safety) {
  if (log.entries.empty()) throw data_error("empty log");
  const double n = static_cast<double>(log.size());
  const int dim = static_cast<int>(policy.weights.size());
  std::map<int, const QueryRecord*> by_qid;
  for (const auto& q : data.queries) by_qid[q.query_id] = &q;

  ObjectiveValueGrad out;
  out.grad.assign(dim, 0.0);
  Vec terms;
  std::vector<Vec> term_grads;
  terms.reserve(log.size());
  for (const auto& it : log.entries) {
    double clicks = 0.0;
    for (uint8_t c : it.clicks) clicks += c;
    const QueryRecord& q = *by_qid.at(it.query_id);
    const double p0 = prop.action_propensity(it.query_id, it.displayed);
    if (p0 <= 0.0) {
      if (clicks > 0.0)
        throw estimator_error("zero action propensity for query " +
                              std::to_string(it.query_id));
      terms.push_back(0.0);
      term_grads.emplace_back(dim, 0.0);
      continue;
    }
    const double ratio = std::exp(log_prob(policy, q, it.displayed)) / p0;
    const double term = ratio * clicks;
    Vec g = grad_log_prob(policy, q, it.displayed);
    scale(g, term);
    terms.push_back(term);
    term_grads.push_back(std::move(g));
  }
  out.estimate = mean(terms);
  for (const auto& g : term_grads) axpy(1.0 / n, g, out.grad);
  out.objective = out.estimate;

  if (kind == ObjectiveKind::action_crm) {
    safety.validate();
    const double var = sample_variance(terms);
    out.divergence = var;  // sample variance plays the divergence role here
    const double lambda = std::sqrt(safety.delta_factor());
    out.risk = lambda * std::sqrt(var / n);
    out.objective = out.estimate - out.risk;
    if (var > 1e-14) {
      const double tbar = out.estimate;
      Vec grad_var(dim, 0.0);
      Vec grad_mean(dim, 0.0);
      for (const auto& g : term_grads) axpy(1.0 / n, g, grad_mean);
      for (std::size_t i = 0; i < terms.size(); ++i) {
        Vec gi = term_grads[i];
        axpy(-1.0, grad_mean, gi);
        axpy(2.0 * (terms[i] - tbar) / (n - 1.0), gi, grad_var);
      }
      axpy(-lambda / (2.0 * std::sqrt(var * n)), grad_var, out.grad);
    }
  }
  return out;
}

// Behavior cloning against the estimated logging exposure: gradient descent
// on the empirical divergence. Used to warm-start PRPO, whose clipped
// objective is flat outside the trust band and gives a cold-started policy
// no restoring force back toward the logging policy.
inline void imitate_logging_exposure(StochasticRankingPolicy& policy,
                                     const RankingDataset& data,
                                     const LogAggregate& agg,
                                     const PropensityEstimate& prop,
                                     const ExaminationModel& exam,
                                     bool use_omega, int epochs, double lr,
                                     const GradientSettings& gs, Rng& rng) {
  const int dim = static_cast<int>(policy.weights.size());
  std::map<int, const QueryRecord*> by_qid;
  for (const auto& q : data.queries) by_qid[q.query_id] = &q;
  const double n = static_cast<double>(agg.total_interactions);
  Vec adam_m(dim, 0.0), adam_v(dim, 0.0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Vec grad(dim, 0.0);
    for (const auto& qa : agg.queries) {
      const QueryRecord& q = *by_qid.at(qa.query_id);
      const ExposureProfile prof = estimate_exposure(
          policy, q, exam, gs.n_samples, rng,
          gs.exact && q.n_docs() <= kEnumDocLimit);
      const auto& qp = prop.at_qid(qa.query_id);
      const std::size_t n_docs = qa.clicks.size();
      double t_sum = 0.0, l_sum = 0.0;
      for (std::size_t d = 0; d < n_docs; ++d) {
        t_sum += use_omega ? prof.omega[d] : prof.rho[d];
        l_sum += std::max(use_omega ? qp.omega_hat[d] : qp.rho_hat_raw[d],
                          kDivergenceGuardFloor);
      }
      Vec coef(n_docs, 0.0);
      for (std::size_t d = 0; d < n_docs; ++d) {
        const double t = use_omega ? prof.omega[d] : prof.rho[d];
        const double l0 = std::max(
            use_omega ? qp.omega_hat[d] : qp.rho_hat_raw[d],
            kDivergenceGuardFloor);
        coef[d] = -qa.n_impressions / n * 2.0 * t * l_sum /
                  (t_sum * t_sum * l0);
      }
      double unused = 0.0;
      detail::accumulate_linear_term(policy, q, exam, use_omega, coef, gs, rng,
                                     unused, grad);
    }
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int j = 0; j < dim; ++j) {
      adam_m[j] = b1 * adam_m[j] + (1.0 - b1) * grad[j];
      adam_v[j] = b2 * adam_v[j] + (1.0 - b2) * grad[j] * grad[j];
      const double mhat = adam_m[j] / (1.0 - std::pow(b1, epoch + 1));
      const double vhat = adam_v[j] / (1.0 - std::pow(b2, epoch + 1));
      policy.weights[j] += lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// PRPO objective and gradient: importance-weighted metric gradient per
// document, masked by the clipping indicator and scaled by the reward.
inline ObjectiveValueGrad prpo_objective_gradient(
    const StochasticRankingPolicy& policy, const RankingDataset& data,
    const LogAggregate& agg, const PropensityEstimate& prop,
    const ExaminationModel& exam, const PrpoRewards& rewards,
    const PrpoConfig& cfg, const GradientSettings& gs, Rng& rng) {
  cfg.validate();
  const int dim = static_cast<int>(policy.weights.size());
  std::map<int, const QueryRecord*> by_qid;
  for (const auto& q : data.queries) by_qid[q.query_id] = &q;

  ObjectiveValueGrad out;
  out.grad.assign(dim, 0.0);
  for (const auto& qa : agg.queries) {
    const QueryRecord& q = *by_qid.at(qa.query_id);
    const ExposureProfile prof = estimate_exposure(
        policy, q, exam, gs.n_samples, rng,
        gs.exact && q.n_docs() <= kEnumDocLimit);
    const Vec& r = rewards.at(qa.query_id);
    Vec coef(r.size(), 0.0);
    for (std::size_t di = 0; di < r.size(); ++di) {
      if (r[di] == 0.0) continue;
      const double w0 = prop.omega0(qa.query_id, static_cast<int>(di));
      if (w0 <= 0.0) continue;
      const double x = prof.omega[di] / w0;
      out.estimate += prpo_clip(x, cfg.eps_minus, cfg.eps_plus, r[di]);
      if (prpo_active(x, cfg.eps_minus, cfg.eps_plus, r[di]))
        coef[di] = r[di] / w0;
    }
    double unused = 0.0;
    detail::accumulate_linear_term(policy, q, exam, /*use_omega=*/true, coef,
                                   gs, rng, unused, out.grad);
  }
  out.objective = out.estimate;
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

enum class Optimizer { adam, sgd };

struct TrainConfig {
  ObjectiveKind objective = ObjectiveKind::exposure_ips;
  SafetyConfig safety;
  PrpoConfig prpo;
  RegressionSource regression = RegressionSource::learned;
  double regression_param = 0.0;
  int epochs = 60;
  // Adam escapes the flat regions that clipped objectives produce, where
  // plain gradient steps stall far from the optimum.
  Optimizer optimizer = Optimizer::adam;
  double learning_rate = 0.1;
  double decay = 0.02;
  int patience = 0;  // 0: no early stopping, keep best-validation weights
  GradientSettings gradients;
  int cutoff_k = kDefaultCutoff;
  int eval_samples = 100;  // NDCG sampling when enumeration is unavailable
  bool trace_ndcg = true;  // per-epoch test NDCG in the trace
  // PRPO starts from a clone of the estimated logging behavior; see
  // imitate_logging_exposure.
  bool prpo_warm_start = true;
  int warm_start_epochs = 30;
};

struct TrainTraceRow {
  int epoch = 0;
  std::size_t n = 0;
  double objective = 0.0;
  double estimate = 0.0;
  double risk = 0.0;
  double divergence = 0.0;
  double ndcg_test = 0.0;
  double ndcg_logging = 0.0;
};

struct TrainResult {
  StochasticRankingPolicy policy;
  std::vector<TrainTraceRow> trace;
  int best_epoch = -1;
  double logging_ndcg = 0.0;
};

inline void write_trace_csv(const std::vector<TrainTraceRow>& trace,
                            std::ostream& out) {
  out << "epoch,N,objective,estimate,risk,divergence,ndcg_test,ndcg_logging\n";
  for (const auto& r : trace) {
    out << r.epoch << ',' << r.n << ',' << fmt_double(r.objective) << ','
        << fmt_double(r.estimate) << ',' << fmt_double(r.risk) << ','
        << fmt_double(r.divergence) << ',' << fmt_double(r.ndcg_test) << ','
        << fmt_double(r.ndcg_logging) << '\n';
  }
}

inline TrainResult train_cltr(const DatasetBundle& data,
                              const InteractionLog& train_log,
                              const InteractionLog& validation_log,
                              const StochasticRankingPolicy& logging_policy,
                              const ExaminationModel& exam,
                              const TrainConfig& cfg, std::uint64_t seed) {
  if (train_log.entries.empty()) throw data_error("empty training log");
  Rng rng = make_rng(seed, 31);

  const LogAggregate train_agg = aggregate_log(train_log, data.train, exam);
  const PropensityEstimate train_prop =
      estimate_propensities(train_log, exam, data.train, /*clip=*/true);
  const double train_floor = kDivergenceGuardFloor;

  const bool has_validation = !validation_log.entries.empty();
  LogAggregate val_agg;
  PropensityEstimate val_prop;
  const double val_floor = kDivergenceGuardFloor;
  if (has_validation) {
    val_agg = aggregate_log(validation_log, data.validation, exam);
    val_prop = estimate_propensities(validation_log, exam, data.validation,
                                     /*clip=*/false);
  }

  RegressionModel train_reg, val_reg;
  const bool needs_regression = cfg.objective == ObjectiveKind::dr ||
                                cfg.objective == ObjectiveKind::safe_dr ||
                                cfg.objective == ObjectiveKind::prpo;
  if (needs_regression) {
    const RelevanceTransform t = exam.kind == ExamKind::trust_bias
                                     ? RelevanceTransform::trust_bias()
                                     : RelevanceTransform::pbm_sparse();
    switch (cfg.regression) {
      case RegressionSource::oracle:
        train_reg = make_regression_oracle(data.train, t);
        if (has_validation)
          val_reg = make_regression_oracle(data.validation, t);
        break;
      case RegressionSource::noisy_oracle:
        train_reg = make_regression_oracle(data.train, t, cfg.regression_param,
                                           seed);
        if (has_validation)
          val_reg = make_regression_oracle(data.validation, t,
                                           cfg.regression_param, seed + 1);
        break;
      case RegressionSource::constant:
        train_reg = make_regression_constant(data.train, cfg.regression_param);
        if (has_validation)
          val_reg = make_regression_constant(data.validation,
                                             cfg.regression_param);
        break;
      case RegressionSource::learned:
        train_reg = learn_regression(train_agg, data.train);
        if (has_validation) val_reg = learn_regression(val_agg, data.validation);
        break;
    }
  }

  PrpoConfig prpo_cfg = cfg.prpo;
  PrpoRewards train_rewards, val_rewards;
  if (cfg.objective == ObjectiveKind::prpo) {
    auto [em, ep] = prpo_schedule(train_log.size(), prpo_cfg.schedule,
                                  prpo_cfg.schedule_param);
    prpo_cfg.eps_minus = em;
    prpo_cfg.eps_plus = ep;
    // r(d|q) is a per-log aggregate; computed once from the frozen log.
    train_rewards = compute_prpo_rewards(train_agg, train_prop, train_reg);
    if (has_validation)
      val_rewards = compute_prpo_rewards(val_agg, val_prop, val_reg);
  }

  TrainResult result;
  result.policy = uniform_policy(data.feature_dim, cfg.cutoff_k);
  if (cfg.objective == ObjectiveKind::prpo && cfg.prpo_warm_start) {
    Rng wrng = make_rng(seed, 41);
    imitate_logging_exposure(result.policy, data.train, train_agg, train_prop,
                             exam, /*use_omega=*/true, cfg.warm_start_epochs,
                             cfg.learning_rate, cfg.gradients, wrng);
  }
  const double logging_ndcg = mean_expected_ndcg(
      logging_policy, data.test, cfg.cutoff_k, rng, cfg.eval_samples,
      data.test.queries.front().n_docs() <= kEnumDocLimit);
  result.logging_ndcg = logging_ndcg;

  StochasticRankingPolicy best = result.policy;
  double best_val = -1e300;
  int since_best = 0;
  Vec adam_m(result.policy.weights.size(), 0.0);
  Vec adam_v(result.policy.weights.size(), 0.0);

  const auto validation_objective =
      [&](const StochasticRankingPolicy& pol) -> double {
    if (!has_validation) return 0.0;
    Rng vrng = make_rng(seed, 37);
    switch (cfg.objective) {
      case ObjectiveKind::action_ips:
      case ObjectiveKind::action_crm:
        return action_objective_gradient(pol, data.validation, validation_log,
                                         val_prop, cfg.objective, cfg.safety)
            .objective;
      case ObjectiveKind::prpo:
        return prpo_objective_gradient(pol, data.validation, val_agg, val_prop,
                                       exam, val_rewards, prpo_cfg,
                                       cfg.gradients, vrng)
            .objective;
      default:
        return crm_objective_gradient(pol, data.validation, val_agg, val_prop,
                                      exam, cfg.objective, cfg.safety,
                                      needs_regression ? &val_reg : nullptr,
                                      cfg.gradients, vrng, val_floor)
            .objective;
    }
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    ObjectiveValueGrad step;
    switch (cfg.objective) {
      case ObjectiveKind::action_ips:
      case ObjectiveKind::action_crm:
        step = action_objective_gradient(result.policy, data.train, train_log,
                                         train_prop, cfg.objective, cfg.safety);
        break;
      case ObjectiveKind::prpo:
        step = prpo_objective_gradient(result.policy, data.train, train_agg,
                                       train_prop, exam, train_rewards,
                                       prpo_cfg, cfg.gradients, rng);
        break;
      default:
        step = crm_objective_gradient(result.policy, data.train, train_agg,
                                      train_prop, exam, cfg.objective,
                                      cfg.safety,
                                      needs_regression ? &train_reg : nullptr,
                                      cfg.gradients, rng, train_floor);
        break;
    }
    const double lr = cfg.learning_rate / (1.0 + cfg.decay * epoch);
    if (cfg.optimizer == Optimizer::adam) {
      const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      for (std::size_t j = 0; j < result.policy.weights.size(); ++j) {
        adam_m[j] = b1 * adam_m[j] + (1.0 - b1) * step.grad[j];
        adam_v[j] = b2 * adam_v[j] + (1.0 - b2) * step.grad[j] * step.grad[j];
        const double mhat = adam_m[j] / (1.0 - std::pow(b1, epoch + 1));
        const double vhat = adam_v[j] / (1.0 - std::pow(b2, epoch + 1));
        result.policy.weights[j] += lr * mhat / (std::sqrt(vhat) + eps);
      }
    } else {
      axpy(lr, step.grad, result.policy.weights);
    }
    if (!all_finite(result.policy.weights))
      throw estimator_error("training diverged to non-finite parameters at epoch " +
                            std::to_string(epoch));

    TrainTraceRow row;
    row.epoch = epoch;
    row.n = train_log.size();
    row.objective = step.objective;
    row.estimate = step.estimate;
    row.risk = step.risk;
    row.divergence = step.divergence;
    row.ndcg_test =
        cfg.trace_ndcg
            ? mean_expected_ndcg(
                  result.policy, data.test, cfg.cutoff_k, rng,
                  cfg.eval_samples,
                  data.test.queries.front().n_docs() <= kEnumDocLimit)
            : 0.0;
    row.ndcg_logging = logging_ndcg;
    result.trace.push_back(row);

    if (has_validation) {
      const double v = validation_objective(result.policy);
      if (v > best_val) {
        best_val = v;
        best = result.policy;
        result.best_epoch = epoch;
        since_best = 0;
      } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
        break;
      }
    } else {
      best = result.policy;
      result.best_epoch = epoch;
    }
  }
  result.policy = best;
  return result;
}

}  // namespace oplab
