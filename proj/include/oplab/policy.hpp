#pragma once

#include <cmath>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "oplab/common.hpp"
#include "oplab/dataset.hpp"

namespace oplab {

// Enumeration over K-prefixes grows as n!/(n-K)!; guarded to small instances.
constexpr int kEnumDocLimit = 8;

// ---------------------------------------------------------------------------
// Examination models
// ---------------------------------------------------------------------------

enum class ExamKind { pbm, trust_bias };

struct ExaminationModel {
  ExamKind kind = ExamKind::pbm;
  Vec alpha;  // examination probability per rank, 1-based ranks 1..K
  Vec beta;   // additive click probability per rank (trust bias)

  int cutoff() const { return static_cast<int>(alpha.size()); }

  // Documents below the cutoff receive zero examination.
  double alpha_at(int rank) const {
    return (rank >= 1 && rank <= cutoff()) ? alpha[rank - 1] : 0.0;
  }
  double beta_at(int rank) const {
    return (rank >= 1 && rank <= cutoff()) ? beta[rank - 1] : 0.0;
  }
  double omega_at(int rank) const { return alpha_at(rank) + beta_at(rank); }

  void validate() const {
    if (alpha.size() != beta.size())
      throw validation_error("alpha/beta length mismatch");
    for (std::size_t k = 0; k < alpha.size(); ++k) {
      if (alpha[k] < 0.0 || alpha[k] > 1.0 || beta[k] < 0.0 || beta[k] > 1.0)
        throw validation_error("examination parameters outside [0,1]");
      if (alpha[k] + beta[k] > 1.0 + 1e-12)
        throw validation_error("alpha_k + beta_k exceeds 1");
      if (kind == ExamKind::pbm && beta[k] != 0.0)
        throw validation_error("pbm model requires beta = 0");
    }
  }

  // Max_k beta_k / alpha_k, the trust-bias risk multiplier input.
  double max_beta_alpha_ratio() const {
    double m = 0.0;
    for (std::size_t k = 0; k < alpha.size(); ++k) {
      if (alpha[k] <= 0.0) {
        if (beta[k] > 0.0)
          throw validation_error("beta_k > 0 with alpha_k = 0");
        continue;
      }
      m = std::max(m, beta[k] / alpha[k]);
    }
    return m;
  }
};

inline ExaminationModel examination_defaults(ExamKind kind,
                                             int cutoff_k = kDefaultCutoff) {
  ExaminationModel m;
  m.kind = kind;
  if (kind == ExamKind::pbm) {
    m.alpha.resize(cutoff_k);
    m.beta.assign(cutoff_k, 0.0);
    for (int k = 1; k <= cutoff_k; ++k)
      m.alpha[k - 1] = 1.0 / (static_cast<double>(k) * k);
  } else {
    if (cutoff_k != kDefaultCutoff)
      throw config_error("trust-bias defaults are defined for K = 5");
    m.alpha = {0.35, 0.53, 0.55, 0.54, 0.52};
    m.beta = {0.65, 0.26, 0.15, 0.11, 0.08};
  }
  m.validate();
  return m;
}

// Total expected examination per ranking: Z = sum_k alpha_k.
inline double examination_z(const ExaminationModel& m) {
  return std::accumulate(m.alpha.begin(), m.alpha.end(), 0.0);
}

// ---------------------------------------------------------------------------
// Plackett-Luce ranking policy (linear scores, sequential softmax sampling)
// ---------------------------------------------------------------------------

using Ranking = std::vector<int>;  // document positions within the query

struct StochasticRankingPolicy {
  Vec weights;
  int cutoff_k = kDefaultCutoff;
  double temperature = 1.0;

  double score(const Document& d) const { return dot(weights, d.features); }

  Vec scores(const QueryRecord& q) const {
    Vec s(q.documents.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = score(q.documents[i]);
    return s;
  }
};

inline StochasticRankingPolicy uniform_policy(int feature_dim,
                                              int cutoff_k = kDefaultCutoff) {
  StochasticRankingPolicy p;
  p.weights.assign(feature_dim, 0.0);
  p.cutoff_k = cutoff_k;
  return p;
}

inline void check_query_size(const StochasticRankingPolicy& p,
                             const QueryRecord& q) {
  if (q.n_docs() < p.cutoff_k)
    throw validation_error("query has fewer documents than the cutoff K");
}

inline Ranking sample_ranking(const StochasticRankingPolicy& policy,
                              const QueryRecord& query, Rng& rng) {
  check_query_size(policy, query);
  const Vec s = policy.scores(query);
  const int n = query.n_docs();
  std::vector<int> remaining(n);
  std::iota(remaining.begin(), remaining.end(), 0);
  Ranking out;
  out.reserve(policy.cutoff_k);
  Vec probs;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int k = 0; k < policy.cutoff_k; ++k) {
    double smax = -1e300;
    for (int d : remaining) smax = std::max(smax, s[d]);
    probs.clear();
    double denom = 0.0;
    for (int d : remaining) {
      const double e = std::exp((s[d] - smax) / policy.temperature);
      probs.push_back(e);
      denom += e;
    }
    double u = unif(rng) * denom;
    std::size_t pick = remaining.size() - 1;
    for (std::size_t i = 0; i < remaining.size(); ++i) {
      u -= probs[i];
      if (u <= 0.0) {
        pick = i;
        break;
      }
    }
    out.push_back(remaining[pick]);
    remaining.erase(remaining.begin() + pick);
  }
  return out;
}

inline void check_ranking(const StochasticRankingPolicy& policy,
                          const QueryRecord& query, const Ranking& ranking) {
  if (static_cast<int>(ranking.size()) != policy.cutoff_k)
    throw validation_error("ranking length != cutoff K");
  std::vector<char> seen(query.documents.size(), 0);
  for (int d : ranking) {
    if (d < 0 || d >= query.n_docs())
      throw validation_error("ranking references unknown document");
    if (seen[d]) throw validation_error("ranking repeats a document");
    seen[d] = 1;
  }
}

inline double log_prob(const StochasticRankingPolicy& policy,
                       const QueryRecord& query, const Ranking& ranking) {
  check_query_size(policy, query);
  check_ranking(policy, query, ranking);
  const Vec s = policy.scores(query);
  std::vector<char> placed(query.documents.size(), 0);
  double lp = 0.0;
  for (int k = 0; k < policy.cutoff_k; ++k) {
    double smax = -1e300;
    for (int d = 0; d < query.n_docs(); ++d)
      if (!placed[d]) smax = std::max(smax, s[d]);
    double denom = 0.0;
    for (int d = 0; d < query.n_docs(); ++d)
      if (!placed[d]) denom += std::exp((s[d] - smax) / policy.temperature);
    lp += (s[ranking[k]] - smax) / policy.temperature - std::log(denom);
    placed[ranking[k]] = 1;
  }
  return lp;
}

// Analytic gradient of log_prob with respect to the policy weights.
inline Vec grad_log_prob(const StochasticRankingPolicy& policy,
                         const QueryRecord& query, const Ranking& ranking) {
  check_query_size(policy, query);
  check_ranking(policy, query, ranking);
  const Vec s = policy.scores(query);
  const int dim = static_cast<int>(policy.weights.size());
  std::vector<char> placed(query.documents.size(), 0);
  Vec grad(dim, 0.0);
  for (int k = 0; k < policy.cutoff_k; ++k) {
    double smax = -1e300;
    for (int d = 0; d < query.n_docs(); ++d)
      if (!placed[d]) smax = std::max(smax, s[d]);
    double denom = 0.0;
    Vec fbar(dim, 0.0);
    for (int d = 0; d < query.n_docs(); ++d) {
      if (placed[d]) continue;
      const double e = std::exp((s[d] - smax) / policy.temperature);
      denom += e;
      axpy(e, query.documents[d].features, fbar);
    }
    const int chosen = ranking[k];
    for (int j = 0; j < dim; ++j)
      grad[j] += (query.documents[chosen].features[j] - fbar[j] / denom) /
                 policy.temperature;
    placed[chosen] = 1;
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Exact enumeration over K-prefixes
// ---------------------------------------------------------------------------

namespace detail {

// The denominator is recomputed from the remaining set at every node;
// running subtraction cancels catastrophically for peaked score profiles.
template <typename Fn>
void enum_rec(const Vec& e, int k_left, double prefix_prob,
              std::vector<char>& used, Ranking& prefix, Fn& fn) {
  if (k_left == 0) {
    fn(prefix_prob, const_cast<const Ranking&>(prefix));
    return;
  }
  double denom = 0.0;
  for (int d = 0; d < static_cast<int>(e.size()); ++d)
    if (!used[d]) denom += e[d];
  for (int d = 0; d < static_cast<int>(e.size()); ++d) {
    if (used[d]) continue;
    used[d] = 1;
    prefix.push_back(d);
    enum_rec(e, k_left - 1, prefix_prob * e[d] / denom, used, prefix, fn);
    prefix.pop_back();
    used[d] = 0;
  }
}

}  // namespace detail

// Visits every ordered K-prefix with its exact PL probability.
template <typename Fn>
void for_each_ranking(const StochasticRankingPolicy& policy,
                      const QueryRecord& query, Fn fn) {
  check_query_size(policy, query);
  if (query.n_docs() > kEnumDocLimit)
    throw validation_error("enumeration limited to <= " +
                           std::to_string(kEnumDocLimit) + " documents");
  const Vec s = policy.scores(query);
  const double smax = *std::max_element(s.begin(), s.end());
  Vec e(s.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    // Keep exp values above underflow: score spreads this extreme make the
    // enumerated distribution numerically degenerate otherwise.
    e[i] = std::max(std::exp((s[i] - smax) / policy.temperature), 1e-290);
    denom += e[i];
  }
  (void)denom;
  std::vector<char> used(query.documents.size(), 0);
  Ranking prefix;
  prefix.reserve(policy.cutoff_k);
  detail::enum_rec(e, policy.cutoff_k, 1.0, used, prefix, fn);
}

struct ExpectationResult {
  double value = 0.0;
  Vec grad;  // d value / d weights
};

// For a per-(document, rank) gain g, computes
//   E_{y ~ pi}[ sum_k g(y_k, k) ]  and its exact policy-weight gradient
// via the score-function identity, in one pass over the prefix tree.
inline ExpectationResult exact_linear_expectation(
    const StochasticRankingPolicy& policy, const QueryRecord& query,
    const std::function<double(int, int)>& gain) {
  check_query_size(policy, query);
  if (query.n_docs() > kEnumDocLimit)
    throw validation_error("enumeration limited to <= " +
                           std::to_string(kEnumDocLimit) + " documents");
  const Vec s = policy.scores(query);
  const double smax = *std::max_element(s.begin(), s.end());
  const int n = query.n_docs();
  const int dim = static_cast<int>(policy.weights.size());
  Vec e(n);
  for (int d = 0; d < n; ++d)
    e[d] = std::max(std::exp((s[d] - smax) / policy.temperature), 1e-290);

  ExpectationResult out;
  out.grad.assign(dim, 0.0);
  std::vector<char> used(n, 0);
  Vec fw(dim);

  // Returns sum over leaves below this node of pi(y) * total_gain(y).
  // Denominator and feature sums are rebuilt per node from the remaining
  // set; running subtraction cancels for peaked score profiles.
  std::function<double(int, double, double)> dfs =
      [&](int depth, double prefix_prob, double prefix_gain) -> double {
    if (depth == policy.cutoff_k) {
      out.value += prefix_prob * prefix_gain;
      return prefix_prob * prefix_gain;
    }
    double denom = 0.0;
    std::fill(fw.begin(), fw.end(), 0.0);
    for (int d = 0; d < n; ++d) {
      if (used[d]) continue;
      denom += e[d];
      axpy(e[d], query.documents[d].features, fw);
    }
    const Vec fbar = [&] {
      Vec f = fw;
      scale(f, 1.0 / denom);
      return f;
    }();
    double subtree = 0.0;
    for (int d = 0; d < n; ++d) {
      if (used[d]) continue;
      used[d] = 1;
      const double p_child = prefix_prob * e[d] / denom;
      const double g_child = prefix_gain + gain(d, depth + 1);
      const double w_child = dfs(depth + 1, p_child, g_child);
      // Edge gradient (f_d - softmax mean feature) / tau, weighted by the
      // gain mass that flows through this edge.
      for (int j = 0; j < dim; ++j)
        out.grad[j] += w_child *
                       (query.documents[d].features[j] - fbar[j]) /
                       policy.temperature;
      subtree += w_child;
      used[d] = 0;
    }
    return subtree;
  };
  dfs(0, 1.0, 0.0);
  return out;
}

// Monte Carlo counterpart; control variate is the per-query mean gain.
inline ExpectationResult mc_linear_expectation(
    const StochasticRankingPolicy& policy, const QueryRecord& query,
    const std::function<double(int, int)>& gain, int n_samples, Rng& rng,
    bool center = true) {
  if (n_samples < 1) throw config_error("n_samples must be >= 1");
  const int dim = static_cast<int>(policy.weights.size());
  std::vector<Ranking> rankings(n_samples);
  Vec gains(n_samples);
  for (int i = 0; i < n_samples; ++i) {
    rankings[i] = sample_ranking(policy, query, rng);
    double g = 0.0;
    for (int k = 0; k < policy.cutoff_k; ++k)
      g += gain(rankings[i][k], k + 1);
    gains[i] = g;
  }
  ExpectationResult out;
  out.value = mean(gains);
  out.grad.assign(dim, 0.0);
  const double baseline = center ? out.value : 0.0;
  for (int i = 0; i < n_samples; ++i) {
    const Vec glp = grad_log_prob(policy, query, rankings[i]);
    axpy((gains[i] - baseline) / n_samples, glp, out.grad);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exposure profiles
// ---------------------------------------------------------------------------

struct ExposureProfile {
  Vec rho;    // expected alpha per document
  Vec omega;  // expected alpha + beta per document
  int n_samples = 0;
  bool exact = false;

  double rho_sum() const { return std::accumulate(rho.begin(), rho.end(), 0.0); }
  double omega_sum() const {
    return std::accumulate(omega.begin(), omega.end(), 0.0);
  }
};

inline ExposureProfile estimate_exposure(const StochasticRankingPolicy& policy,
                                         const QueryRecord& query,
                                         const ExaminationModel& model,
                                         int n_samples, Rng& rng,
                                         bool exact = false) {
  check_query_size(policy, query);
  ExposureProfile prof;
  prof.rho.assign(query.documents.size(), 0.0);
  prof.omega.assign(query.documents.size(), 0.0);
  prof.n_samples = n_samples;
  prof.exact = exact;
  if (exact) {
    if (query.n_docs() > kEnumDocLimit)
      throw validation_error("exact exposure needs <= " +
                             std::to_string(kEnumDocLimit) + " documents");
    for_each_ranking(policy, query, [&](double p, const Ranking& y) {
      for (std::size_t k = 0; k < y.size(); ++k) {
        prof.rho[y[k]] += p * model.alpha_at(static_cast<int>(k) + 1);
        prof.omega[y[k]] += p * model.omega_at(static_cast<int>(k) + 1);
      }
    });
    return prof;
  }
  if (n_samples < 1) throw config_error("n_samples must be >= 1");
  for (int i = 0; i < n_samples; ++i) {
    const Ranking y = sample_ranking(policy, query, rng);
    for (std::size_t k = 0; k < y.size(); ++k) {
      prof.rho[y[k]] += model.alpha_at(static_cast<int>(k) + 1);
      prof.omega[y[k]] += model.omega_at(static_cast<int>(k) + 1);
    }
  }
  scale(prof.rho, 1.0 / n_samples);
  scale(prof.omega, 1.0 / n_samples);
  return prof;
}

// ---------------------------------------------------------------------------
// NDCG
// ---------------------------------------------------------------------------

inline double dcg_discount(int rank) {
  return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

inline double ideal_dcg(const QueryRecord& query, int k) {
  Vec grades(query.documents.size());
  for (std::size_t i = 0; i < grades.size(); ++i)
    grades[i] = query.documents[i].grade;
  std::sort(grades.begin(), grades.end(), std::greater<>());
  double idcg = 0.0;
  for (int r = 1; r <= k && r <= static_cast<int>(grades.size()); ++r)
    idcg += grades[r - 1] * dcg_discount(r);
  return idcg;
}

// Gain is the raw grade; queries with all-zero grades score 1.0 by convention.
inline double ndcg_at_k(const QueryRecord& query, const Ranking& ranking,
                        int k) {
  const double idcg = ideal_dcg(query, k);
  if (idcg <= 0.0) return 1.0;
  double dcg = 0.0;
  for (int r = 1; r <= k && r <= static_cast<int>(ranking.size()); ++r)
    dcg += query.documents[ranking[r - 1]].grade * dcg_discount(r);
  return dcg / idcg;
}

inline double expected_ndcg(const StochasticRankingPolicy& policy,
                            const QueryRecord& query, int k, Rng& rng,
                            int n_samples = 100, bool exact = false) {
  check_query_size(policy, query);
  const double idcg = ideal_dcg(query, k);
  if (idcg <= 0.0) return 1.0;
  if (exact) {
    double v = 0.0;
    for_each_ranking(policy, query, [&](double p, const Ranking& y) {
      v += p * ndcg_at_k(query, y, k);
    });
    return v;
  }
  double v = 0.0;
  for (int i = 0; i < n_samples; ++i)
    v += ndcg_at_k(query, sample_ranking(policy, query, rng), k);
  return v / n_samples;
}

inline double mean_expected_ndcg(const StochasticRankingPolicy& policy,
                                 const RankingDataset& data, int k, Rng& rng,
                                 int n_samples = 100, bool exact = false) {
  if (data.queries.empty()) throw data_error("empty dataset");
  double v = 0.0;
  for (const auto& q : data.queries)
    v += expected_ndcg(policy, q, k, rng, n_samples, exact);
  return v / data.queries.size();
}

// ---------------------------------------------------------------------------
// Checkpoint serialization (versioned text format)
// ---------------------------------------------------------------------------

inline void save_policy(const StochasticRankingPolicy& p, std::ostream& out) {
  out << "oplab-policy v1\n";
  out << "cutoff_k " << p.cutoff_k << "\n";
  out << "temperature " << fmt_double(p.temperature) << "\n";
  out << "weights " << p.weights.size();
  for (double w : p.weights) out << ' ' << fmt_double(w);
  out << "\n";
}

inline StochasticRankingPolicy load_policy(std::istream& in) {
  std::string tag, version;
  in >> tag >> version;
  if (tag != "oplab-policy" || version != "v1")
    throw parse_error("unrecognized policy checkpoint header");
  StochasticRankingPolicy p;
  std::string key;
  std::size_t n = 0;
  in >> key >> p.cutoff_k;
  if (key != "cutoff_k") throw parse_error("bad policy checkpoint: cutoff_k");
  in >> key >> p.temperature;
  if (key != "temperature")
    throw parse_error("bad policy checkpoint: temperature");
  in >> key >> n;
  if (key != "weights") throw parse_error("bad policy checkpoint: weights");
  p.weights.resize(n);
  for (auto& w : p.weights) in >> w;
  if (!in) throw parse_error("truncated policy checkpoint");
  return p;
}

// ---------------------------------------------------------------------------
// Supervised logging-policy training (listwise softmax cross-entropy)
// ---------------------------------------------------------------------------

struct LoggingPolicyConfig {
  int epochs = 200;
  double learning_rate = 0.5;
  double decay = 0.02;
  int cutoff_k = kDefaultCutoff;
  double temperature = 1.0;
};

// Trains a linear listwise model on a seeded query fraction: the target is
// softmax over grades, the loss is cross-entropy against softmax over scores.
inline StochasticRankingPolicy train_logging_policy(
    const RankingDataset& data, double fraction, std::uint64_t seed,
    LoggingPolicyConfig cfg = {}) {
  if (fraction <= 0.0 || fraction > 1.0)
    throw config_error("fraction must be in (0, 1]");
  const int n_take = static_cast<int>(
      std::floor(fraction * static_cast<double>(data.n_queries()) + 1e-12));
  if (n_take < 1)
    throw config_error("fraction selects zero queries");

  Rng rng = make_rng(seed, /*stream=*/23);
  std::vector<int> order(data.n_queries());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(n_take);

  StochasticRankingPolicy policy = uniform_policy(data.feature_dim, cfg.cutoff_k);
  policy.temperature = cfg.temperature;
  const int dim = data.feature_dim;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Vec grad(dim, 0.0);
    for (int qi : order) {
      const QueryRecord& q = data.queries[qi];
      const int n = q.n_docs();
      Vec s = policy.scores(q);
      double smax = *std::max_element(s.begin(), s.end());
      double zs = 0.0;
      for (int d = 0; d < n; ++d) zs += std::exp(s[d] - smax);
      double gmax = 0.0;
      for (int d = 0; d < n; ++d)
        gmax = std::max(gmax, static_cast<double>(q.documents[d].grade));
      double zg = 0.0;
      for (int d = 0; d < n; ++d) zg += std::exp(q.documents[d].grade - gmax);
      for (int d = 0; d < n; ++d) {
        const double p_model = std::exp(s[d] - smax) / zs;
        const double p_target = std::exp(q.documents[d].grade - gmax) / zg;
        axpy(p_target - p_model, q.documents[d].features, grad);
      }
    }
    const double lr = cfg.learning_rate / (1.0 + cfg.decay * epoch);
    axpy(lr / n_take, grad, policy.weights);
  }
  return policy;
}

}  // namespace oplab
