#include <catch2/catch_amalgamated.hpp>

#include "enumeration_oracles.hpp"
#include "oplab/safeltr.hpp"

using namespace oplab;
using namespace oplab::testing;
using Catch::Approx;

namespace {

ExaminationModel unit_exam() {
  ExaminationModel m;
  m.kind = ExamKind::pbm;
  m.alpha = {1.0};
  m.beta = {0.0};
  return m;
}

}  // namespace

TEST_CASE("ips_exposure single-entry arithmetic") {
  // One query, one doc, one click; omega(d)=0.5, rho0_hat(d)=0.25 -> 2.0.
  RankingDataset data;
  data.feature_dim = 1;
  QueryRecord q;
  q.query_id = 0;
  q.documents.push_back({{0.0}, 3});
  data.queries = {q};

  InteractionLog log;
  log.entries.push_back({0, {0}, {1}});
  const LogAggregate agg = aggregate_log(log, data, unit_exam());

  PropensityEstimate prop;
  prop.cutoff_k = 1;
  PropensityEstimate::QueryProp qp;
  qp.rho_hat_raw = {0.25};
  qp.omega_hat = {0.25};
  qp.n_impressions = 1;
  prop.per_query[0] = qp;

  ExposureMap target;
  ExposureProfile prof;
  prof.rho = {0.5};
  prof.omega = {0.5};
  target[0] = prof;

  CHECK(ips_exposure(agg, prop, target, true).utility == Approx(2.0));

  // No clicks -> 0.
  InteractionLog quiet;
  quiet.entries.push_back({0, {0}, {0}});
  const LogAggregate agg0 = aggregate_log(quiet, data, unit_exam());
  CHECK(ips_exposure(agg0, prop, target, true).utility == Approx(0.0));
}

TEST_CASE("ips_exposure errors on zero propensity for a clicked doc") {
  RankingDataset data;
  data.feature_dim = 1;
  QueryRecord q;
  q.query_id = 0;
  q.documents.push_back({{0.0}, 3});
  data.queries = {q};
  InteractionLog log;
  log.entries.push_back({0, {0}, {1}});
  const LogAggregate agg = aggregate_log(log, data, unit_exam());

  PropensityEstimate prop;  // zero raw propensity, no clipping
  PropensityEstimate::QueryProp qp;
  qp.rho_hat_raw = {0.0};
  qp.omega_hat = {0.0};
  prop.per_query[0] = qp;
  ExposureMap target;
  ExposureProfile prof;
  prof.rho = {0.5};
  prof.omega = {0.5};
  target[0] = prof;
  CHECK_THROWS_AS(ips_exposure(agg, prop, target, true), estimator_error);
}

TEST_CASE("exposure-IPS is unbiased on the enumerated PBM world") {
  const EnumWorld w = make_enum_world({4, 2, 0}, ExamKind::pbm, 2);
  Rng rng = make_rng(21);
  for (int rep = 0; rep < 10; ++rep) {
    const StochasticRankingPolicy logging = random_policy(2, 0.7, rng);
    const StochasticRankingPolicy target = random_policy(2, 0.7, rng);
    const Moments m = exact_estimator_moments(w, logging, target,
                                              OracleEstimator::ips_pbm);
    CHECK(m.mean ==
          Approx(true_utility(w, target, false)).margin(1e-10));
  }
}

TEST_CASE("trust-bias IPS and DR are unbiased on the enumerated world") {
  const EnumWorld w5 =
      make_enum_world({4, 1, 0, 3, 2}, ExamKind::trust_bias, 5);
  Rng rng = make_rng(22);
  const RegressionModel oracle = make_regression_oracle(
      w5.data, RelevanceTransform::trust_bias());
  for (int rep = 0; rep < 3; ++rep) {
    const StochasticRankingPolicy logging = random_policy(5, 0.5, rng);
    const StochasticRankingPolicy target = random_policy(5, 0.5, rng);
    const double truth = true_utility(w5, target, true);
    CHECK(exact_estimator_moments(w5, logging, target,
                                  OracleEstimator::ips_trust)
              .mean == Approx(truth).margin(1e-10));
    CHECK(exact_estimator_moments(w5, logging, target, OracleEstimator::dr,
                                  &oracle)
              .mean == Approx(truth).margin(1e-10));
  }
}

TEST_CASE("ips_action identities") {
  // Two docs with K = 2: the product-of-marginals action propensity is the
  // exact full-ranking probability, so the self-estimation ratio is 1.
  const EnumWorld w = make_enum_world({4, 0}, ExamKind::pbm, 2);
  Rng rng = make_rng(23);
  StochasticRankingPolicy logging = random_policy(2, 0.5, rng);

  InteractionLog log = simulate(400, logging, w.data, w.model, rng);
  const PropensityEstimate prop = true_propensities(logging, w.data,
                                                    w.model.examination);
  double clicks = 0.0;
  for (const auto& it : log.entries)
    for (uint8_t c : it.clicks) clicks += c;
  const double self = ips_action(log, prop, logging, w.data).utility;
  CHECK(self == Approx(clicks / log.size()).margin(1e-9));

  // Deterministic target that always produces the opposite ranking:
  // weight ~0 on every logged entry, estimate ~0.
  StochasticRankingPolicy det;
  det.weights = {50.0};  // doc features are (-1, 0): prefers doc 1 first
  det.cutoff_k = 2;
  det.temperature = 0.01;
  InteractionLog one;
  one.entries.push_back({0, {0, 1}, {1, 0}});
  const double off = ips_action(one, prop, det, w.data).utility;
  CHECK(off == Approx(0.0).margin(1e-6));
}

TEST_CASE("ips_action single-entry ratio arithmetic") {
  // Hand-built propensities: ratio pi/pi0_hat = 2 with one click -> 2.0.
  RankingDataset data;
  data.feature_dim = 1;
  QueryRecord q;
  q.query_id = 0;
  q.documents.push_back({{1.0}, 4});
  q.documents.push_back({{1.0}, 0});  // equal scores: pi(y) = 0.5
  data.queries = {q};
  StochasticRankingPolicy target = uniform_policy(1, 2);

  PropensityEstimate prop;
  prop.cutoff_k = 2;
  PropensityEstimate::QueryProp qp;
  qp.rho_hat_raw = {0.5, 0.5};
  qp.omega_hat = {0.5, 0.5};
  // Action propensity is the product over the first K-1 ranks of the
  // per-rank display frequency: make rank-1 frequency of doc0 equal 0.25.
  qp.rank_freq = {{0.25, 0.75}, {0.75, 0.25}};
  prop.per_query[0] = qp;

  InteractionLog log;
  log.entries.push_back({0, {0, 1}, {0, 1}});
  CHECK(ips_action(log, prop, target, data).utility == Approx(2.0));
}

TEST_CASE("DR reductions") {
  const EnumWorld w = make_enum_world({4, 1, 0, 3, 2}, ExamKind::trust_bias, 5);
  Rng rng = make_rng(24);
  const StochasticRankingPolicy logging = random_policy(5, 0.6, rng);
  const StochasticRankingPolicy target = random_policy(5, 0.6, rng);
  const PropensityEstimate prop =
      true_propensities(logging, w.data, w.model.examination);
  Rng dummy = make_rng(0);
  const ExposureMap target_map =
      exposure_map(target, w.data, w.model.examination, dummy, true);

  // R_hat == 0 collapses DR to the trust-bias IPS estimate on every log.
  const RegressionModel zero = make_regression_constant(w.data, 0.0);
  for (int rep = 0; rep < 5; ++rep) {
    const InteractionLog log = simulate(20, logging, w.data, w.model, rng);
    const LogAggregate agg = aggregate_log(log, w.data, w.model.examination);
    const double dr = dr_estimate(agg, prop, target_map, zero).utility;
    const double ips = ips_exposure(agg, prop, target_map, true).utility;
    CHECK(dr == Approx(ips).margin(1e-12));
  }

  // Exact-model single-doc case: DM 1, correction 0.
  RankingDataset data;
  data.feature_dim = 1;
  QueryRecord q;
  q.query_id = 0;
  q.documents.push_back({{0.0}, 4});
  data.queries = {q};
  InteractionLog log;
  log.entries.push_back({0, {0}, {1}});
  const LogAggregate agg = aggregate_log(log, data, unit_exam());
  PropensityEstimate p1;
  PropensityEstimate::QueryProp qp;
  qp.rho_hat_raw = {1.0};
  qp.omega_hat = {1.0};
  qp.n_impressions = 1;
  p1.per_query[0] = qp;
  ExposureMap t1;
  ExposureProfile prof;
  prof.rho = {1.0};
  prof.omega = {1.0};
  t1[0] = prof;
  const RegressionModel one = make_regression_constant(data, 1.0);
  CHECK(dr_estimate(agg, p1, t1, one).utility == Approx(1.0));
}

TEST_CASE("DR correction has zero expectation under the oracle model") {
  const EnumWorld w = make_enum_world({4, 1, 0, 3, 2}, ExamKind::trust_bias, 5);
  Rng rng = make_rng(25);
  const RegressionModel oracle =
      make_regression_oracle(w.data, RelevanceTransform::trust_bias());
  const StochasticRankingPolicy logging = random_policy(5, 0.4, rng);
  const StochasticRankingPolicy target = random_policy(5, 0.4, rng);
  const PropensityEstimate prop =
      true_propensities(logging, w.data, w.model.examination);
  Rng dummy = make_rng(0);
  const ExposureMap tmap =
      exposure_map(target, w.data, w.model.examination, dummy, true);
  double dm = 0.0;
  {
    const auto& prof = tmap.at(0);
    for (std::size_t d = 0; d < prof.omega.size(); ++d)
      dm += prof.omega[d] * oracle.predict(0, static_cast<int>(d));
  }
  const Moments m =
      exact_estimator_moments(w, logging, target, OracleEstimator::dr, &oracle);
  // E[DR] = DM + E[correction]; with oracle predictions the correction
  // expectation vanishes.
  CHECK(m.mean - dm == Approx(0.0).margin(1e-10));
}

TEST_CASE("empirical divergence identities") {
  const EnumWorld w = make_enum_world({4, 2, 0}, ExamKind::pbm, 2);
  Rng rng = make_rng(26);
  const StochasticRankingPolicy logging = random_policy(2, 0.8, rng);
  const InteractionLog log = simulate(30, logging, w.data, w.model, rng);
  const LogAggregate agg = aggregate_log(log, w.data, w.model.examination);
  const PropensityEstimate prop =
      true_propensities(logging, w.data, w.model.examination);
  Rng dummy = make_rng(0);

  // pi == pi0 -> divergence is exactly 1.
  const ExposureMap self =
      exposure_map(logging, w.data, w.model.examination, dummy, true);
  CHECK(empirical_divergence(agg, self, prop, false) == Approx(1.0));

  // Hand arithmetic: rho' = (0.75, 0.25) vs rho0' = (0.5, 0.5) -> 1.25.
  PropensityEstimate hand;
  PropensityEstimate::QueryProp qp;
  qp.rho_hat_raw = {0.625, 0.625};  // normalizes to (0.5, 0.5)
  qp.omega_hat = {0.625, 0.625};
  qp.n_impressions = 1;
  hand.per_query[0] = qp;
  ExposureMap target;
  ExposureProfile prof;
  prof.rho = {0.9375, 0.3125};  // normalizes to (0.75, 0.25)
  prof.omega = prof.rho;
  target[0] = prof;
  CHECK(empirical_divergence(agg, target, hand, false) == Approx(1.25));

  // Disjoint support triggers the finite guard.
  PropensityEstimate zero;
  PropensityEstimate::QueryProp zp;
  zp.rho_hat_raw = {1.0, 0.0};
  zp.omega_hat = {1.0, 0.0};
  zp.n_impressions = 1;
  zero.per_query[0] = zp;
  ExposureMap opposite;
  ExposureProfile op;
  op.rho = {0.0, 1.0};
  op.omega = op.rho;
  opposite[0] = op;
  CHECK_THROWS_AS(empirical_divergence(agg, opposite, zero, false),
                  estimator_error);
}

TEST_CASE("crm_lower_bound arithmetic") {
  const ExaminationModel pbm = examination_defaults(ExamKind::pbm);
  SafetyConfig cfg = make_safety(SafetyMode::crm_exposure, 0.5, pbm);
  CHECK(cfg.delta_factor() == Approx(1.0));
  cfg.delta = 0.95;
  CHECK(cfg.delta_factor() == Approx(0.05263).margin(1e-4));

  // d2 = 1, Z = 1.46361, N = 146.361, delta = 0.5 -> risk = 0.1.
  CltrEstimate est;
  est.utility = 0.4;
  cfg.delta = 0.5;
  const std::size_t n = static_cast<std::size_t>(std::round(146.361));
  CltrEstimate bounded = crm_lower_bound(est, 1.0, n, cfg);
  CHECK(bounded.risk_term == Approx(0.1).margin(2e-4));
  CHECK(bounded.lower_bound ==
        Approx(bounded.utility - bounded.risk_term).margin(1e-12));
  CHECK(bounded.constant_term == Approx(std::sqrt(1.0 / 146.361)).margin(2e-4));

  // Trust-bias multiplier 1 + 0.65/0.35.
  const ExaminationModel tb = examination_defaults(ExamKind::trust_bias);
  CHECK(1.0 + tb.max_beta_alpha_ratio() == Approx(2.857).margin(1e-3));

  SafetyConfig bad = cfg;
  bad.delta = 1.0;
  CHECK_THROWS_AS(crm_lower_bound(est, 1.0, n, bad), config_error);
}

TEST_CASE("variance bound holds on enumerated worlds") {
  // Theorem-style check: exact Var[U_hat] <= (Z/N) d2 + 1/N with N = 1.
  const EnumWorld w = make_enum_world({4, 2, 0}, ExamKind::pbm, 2);
  const double z = examination_z(w.model.examination);
  Rng rng = make_rng(27);
  for (int rep = 0; rep < 20; ++rep) {
    const StochasticRankingPolicy logging = random_policy(2, 0.8, rng);
    const StochasticRankingPolicy target = random_policy(2, 0.8, rng);
    const Moments m = exact_estimator_moments(w, logging, target,
                                              OracleEstimator::ips_pbm);
    const double d2 = exact_divergence(w, logging, target, false);
    CHECK(m.variance() <= z * d2 + 1.0 + 1e-12);
  }
}

TEST_CASE("covariance lemma: Cov[c - beta, alpha Rhat] >= 0 (3 sigma)") {
  const EnumWorld w = make_enum_world({4, 1, 0, 3, 2}, ExamKind::trust_bias, 5);
  Rng rng = make_rng(28);
  const StochasticRankingPolicy logging = random_policy(5, 0.6, rng);
  const ExaminationModel& exam = w.model.examination;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  for (int d = 0; d < 3; ++d) {
    const double rhat = u01(rng);
    const int n = 20000;
    Vec a_samples, b_samples;
    a_samples.reserve(n);
    b_samples.reserve(n);
    for (int i = 0; i < n; ++i) {
      const Ranking y = sample_ranking(logging, w.query(), rng);
      int rank = 0;  // 0: not displayed
      for (std::size_t k = 0; k < y.size(); ++k)
        if (y[k] == d) rank = static_cast<int>(k) + 1;
      const double alpha = exam.alpha_at(rank);
      const double beta = exam.beta_at(rank);
      const double pclick = click_probability(
          w.model, w.query().documents[d].grade, rank == 0 ? 6 : rank);
      const double c = unif(rng) < pclick ? 1.0 : 0.0;
      a_samples.push_back(c - beta);
      b_samples.push_back(alpha * rhat);
    }
    const double ma = mean(a_samples), mb = mean(b_samples);
    double cov = 0.0, var_term = 0.0;
    for (int i = 0; i < n; ++i) {
      const double prod = (a_samples[i] - ma) * (b_samples[i] - mb);
      cov += prod;
      var_term += prod * prod;
    }
    cov /= n;
    const double se = std::sqrt((var_term / n - cov * cov) / n);
    CHECK(cov >= -3.0 * se);
  }
}

TEST_CASE("crm gradient matches finite differences on 3-doc instances") {
  const EnumWorld w = make_enum_world({4, 2, 0}, ExamKind::pbm, 2);
  Rng rng = make_rng(29);
  const StochasticRankingPolicy logging = random_policy(2, 0.5, rng);
  const InteractionLog log = simulate(60, logging, w.data, w.model, rng);
  const LogAggregate agg = aggregate_log(log, w.data, w.model.examination);
  const PropensityEstimate prop =
      estimate_propensities(log, w.model.examination, w.data, true);
  const SafetyConfig safety =
      make_safety(SafetyMode::crm_exposure, 0.3, w.model.examination);
  GradientSettings gs;
  gs.exact = true;

  StochasticRankingPolicy pol = random_policy(2, 0.4, rng);
  Rng grng = make_rng(0);
  const ObjectiveValueGrad res = crm_objective_gradient(
      pol, w.data, agg, prop, w.model.examination, ObjectiveKind::crm_exposure,
      safety, nullptr, gs, grng, prop.clip_floor);

  const double h = 1e-5;
  for (std::size_t j = 0; j < pol.weights.size(); ++j) {
    auto value_at = [&](double delta) {
      StochasticRankingPolicy p2 = pol;
      p2.weights[j] += delta;
      Rng r2 = make_rng(0);
      return crm_objective_gradient(p2, w.data, agg, prop,
                                    w.model.examination,
                                    ObjectiveKind::crm_exposure, safety,
                                    nullptr, gs, r2, prop.clip_floor)
          .objective;
    };
    const double fd = (value_at(h) - value_at(-h)) / (2 * h);
    const double scale_ref =
        std::max({1.0, std::fabs(fd), std::fabs(res.grad[j])});
    CHECK(std::fabs(res.grad[j] - fd) / scale_ref < 1e-5);
  }
}

TEST_CASE("crm gradient reduces to IPS gradient as delta -> 1") {
  const EnumWorld w = make_enum_world({4, 2, 0}, ExamKind::pbm, 2);
  Rng rng = make_rng(30);
  const StochasticRankingPolicy logging = random_policy(2, 0.5, rng);
  const InteractionLog log = simulate(40, logging, w.data, w.model, rng);
  const LogAggregate agg = aggregate_log(log, w.data, w.model.examination);
  const PropensityEstimate prop =
      estimate_propensities(log, w.model.examination, w.data, true);
  GradientSettings gs;
  StochasticRankingPolicy pol = random_policy(2, 0.4, rng);

  SafetyConfig near_one =
      make_safety(SafetyMode::crm_exposure, 1.0 - 1e-14, w.model.examination);
  Rng r1 = make_rng(0), r2 = make_rng(0);
  const Vec crm_grad = crm_objective_gradient(
                           pol, w.data, agg, prop, w.model.examination,
                           ObjectiveKind::crm_exposure, near_one, nullptr, gs,
                           r1, prop.clip_floor)
                           .grad;
  const Vec ips_grad = crm_objective_gradient(
                           pol, w.data, agg, prop, w.model.examination,
                           ObjectiveKind::exposure_ips, near_one, nullptr, gs,
                           r2, prop.clip_floor)
                           .grad;
  for (std::size_t j = 0; j < crm_grad.size(); ++j)
    CHECK(crm_grad[j] == Approx(ips_grad[j]).margin(1e-8));

  // Self-consistent start: risk gradient finite at pi == pi0 (d2 = 1).
  SafetyConfig mid =
      make_safety(SafetyMode::crm_exposure, 0.5, w.model.examination);
  Rng r3 = make_rng(0);
  const ObjectiveValueGrad at_logging = crm_objective_gradient(
      logging, w.data, agg, prop, w.model.examination,
      ObjectiveKind::crm_exposure, mid, nullptr, gs, r3, prop.clip_floor);
  CHECK(all_finite(at_logging.grad));
  CHECK(at_logging.divergence > 0.5);
}

TEST_CASE("prpo clipping function") {
  CHECK(prpo_clip(2.0, 1.0 / 1.15, 1.15, 1.0) == Approx(1.15));
  CHECK(prpo_clip(0.5, 1.0 / 1.15, 1.15, -1.0) ==
        Approx(-1.0 / 1.15).margin(1e-6));  // max(0.5, 0.8696) * (-1)
  CHECK(prpo_clip(1.0, 1.0, 1.0, 0.7) == Approx(0.7));

  // Identity region gradient mask.
  CHECK(prpo_active(1.05, 0.9, 1.15, 1.0));
  CHECK_FALSE(prpo_active(1.2, 0.9, 1.15, 1.0));   // clipped, r > 0
  CHECK(prpo_active(1.2, 0.9, 1.15, -1.0));
  CHECK_FALSE(prpo_active(0.5, 0.9, 1.15, -1.0));  // clipped, r < 0
}

TEST_CASE("prpo schedule") {
  {
    const auto [em, ep] = prpo_schedule(123, PrpoSchedule::constant, 1.0);
    CHECK(em == Approx(1.0));
    CHECK(ep == Approx(1.0));
  }
  {
    const auto [em, ep] = prpo_schedule(10000, PrpoSchedule::linear_in_N, 100.0);
    CHECK(em == Approx(0.01));
    CHECK(ep == Approx(100.0));
  }
  {
    const auto [em, ep] = prpo_schedule(50, PrpoSchedule::linear_in_N, 100.0);
    CHECK(em == Approx(1.0));  // capped
    CHECK(ep == Approx(1.0));
  }
  PrpoConfig bad;
  bad.eps_minus = 2.0;
  bad.eps_plus = 1.0;
  CHECK_THROWS_AS(bad.validate(), config_error);
}

TEST_CASE("prpo at the logging policy: objective is sum r, no ranking beats it") {
  // 5 docs, K = 5, deterministic logging ranking; eps- = eps+ = 1.
  const ExaminationModel tb = examination_defaults(ExamKind::trust_bias);
  Rng rng = make_rng(31);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int rep = 0; rep < 10; ++rep) {
    Vec omega0(5);
    for (int k = 0; k < 5; ++k) omega0[k] = tb.omega_at(k + 1);
    // Random rewards, all nonzero.
    Vec r(5);
    for (auto& v : r) {
      do {
        v = gauss(rng);
      } while (std::fabs(v) < 0.05);
    }
    // Logging ranking is the identity permutation: omega0[d] = omega at rank d+1.
    const auto objective_of = [&](const std::vector<int>& ranking) {
      double total = 0.0;
      for (int k = 0; k < 5; ++k) {
        const int d = ranking[k];
        total += prpo_clip(tb.omega_at(k + 1) / omega0[d], 1.0, 1.0, r[d]);
      }
      return total;
    };
    std::vector<int> perm{0, 1, 2, 3, 4};
    const double at_logging = objective_of(perm);
    double sum_r = 0.0;
    for (double v : r) sum_r += v;
    CHECK(at_logging == Approx(sum_r).margin(1e-12));
    double best = -1e300;
    do {
      best = std::max(best, objective_of(perm));
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(best <= at_logging + 1e-12);
  }
}

TEST_CASE("prpo gradient matches finite differences away from boundaries") {
  const EnumWorld w = make_enum_world({4, 1, 0, 3, 2}, ExamKind::trust_bias, 5);
  Rng rng = make_rng(32);
  const StochasticRankingPolicy logging = random_policy(5, 0.4, rng);
  const InteractionLog log = simulate(80, logging, w.data, w.model, rng);
  const LogAggregate agg = aggregate_log(log, w.data, w.model.examination);
  const PropensityEstimate prop =
      estimate_propensities(log, w.model.examination, w.data, true);
  const RegressionModel reg = learn_regression(agg, w.data);
  const PrpoRewards rewards = compute_prpo_rewards(agg, prop, reg);
  PrpoConfig cfg;
  cfg.eps_minus = 0.2;   // wide band keeps ratios off the clip boundaries
  cfg.eps_plus = 5.0;
  GradientSettings gs;
  StochasticRankingPolicy pol = random_policy(5, 0.3, rng);

  Rng g1 = make_rng(0);
  const ObjectiveValueGrad res = prpo_objective_gradient(
      pol, w.data, agg, prop, w.model.examination, rewards, cfg, gs, g1);
  const double h = 1e-5;
  for (std::size_t j = 0; j < pol.weights.size(); ++j) {
    auto value_at = [&](double delta) {
      StochasticRankingPolicy p2 = pol;
      p2.weights[j] += delta;
      Rng g2 = make_rng(0);
      return prpo_objective_gradient(p2, w.data, agg, prop,
                                     w.model.examination, rewards, cfg, gs, g2)
          .objective;
    };
    const double fd = (value_at(h) - value_at(-h)) / (2 * h);
    const double scale_ref =
        std::max({1.0, std::fabs(fd), std::fabs(res.grad[j])});
    CHECK(std::fabs(res.grad[j] - fd) / scale_ref < 1e-5);
  }
}

TEST_CASE("training drives the estimate upward and stays finite") {
  const DatasetBundle data = generate_synthetic(30, 5, 3, 33, {2.0, 0.8, 5});
  const StochasticRankingPolicy logging =
      train_logging_policy(data.train, 0.5, 1);
  ClickModel model{examination_defaults(ExamKind::pbm),
                   RelevanceTransform::pbm_sparse(), false};
  Rng rng = make_rng(34);
  const InteractionLog train_log =
      simulate(2000, logging, data.train, model, rng);
  const InteractionLog val_log =
      simulate(500, logging, data.validation, model, rng);

  TrainConfig cfg;
  cfg.objective = ObjectiveKind::exposure_ips;
  cfg.epochs = 15;
  cfg.learning_rate = 1.0;
  const TrainResult result = train_cltr(data, train_log, val_log, logging,
                                        model.examination, cfg, 7);
  REQUIRE(!result.trace.empty());
  CHECK(result.trace.back().estimate > result.trace.front().estimate);
  CHECK(all_finite(result.policy.weights));
  CHECK(result.best_epoch >= 0);
}
