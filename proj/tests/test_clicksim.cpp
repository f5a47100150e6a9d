#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "oplab/clicksim.hpp"

using namespace oplab;
using Catch::Approx;

namespace {

DatasetBundle small_world(std::uint64_t seed = 3, int docs = 5) {
  return generate_synthetic(6, docs, 3, seed);
}

ClickModel trust_model(bool adversarial = false) {
  return {examination_defaults(ExamKind::trust_bias),
          RelevanceTransform::trust_bias(), adversarial};
}

ClickModel pbm_model(int k = kDefaultCutoff) {
  return {examination_defaults(ExamKind::pbm, k),
          RelevanceTransform::pbm_sparse(), false};
}

}  // namespace

TEST_CASE("click probabilities match the assumed models") {
  const ClickModel trust = trust_model();
  CHECK(click_probability(trust, 4, 1) == Approx(1.0));          // 0.35+0.65
  CHECK(click_probability(trust, 0, 2) == Approx(0.26));         // beta only
  const ClickModel adv = trust_model(true);
  CHECK(click_probability(adv, 4, 1) == Approx(0.0));
  const ClickModel pbm = pbm_model();
  CHECK(click_probability(pbm, 0, 3) == Approx(0.2 / 9.0));
  CHECK(click_probability(pbm, 4, 6) == Approx(0.0));  // beyond cutoff
  CHECK_THROWS_AS(click_probability(pbm, 4, 0), validation_error);
}

TEST_CASE("adversarial and trust-bias probabilities sum to one") {
  const ClickModel trust = trust_model(false);
  const ClickModel adv = trust_model(true);
  for (int grade = 0; grade <= 4; ++grade)
    for (int rank = 1; rank <= 5; ++rank)
      CHECK(click_probability(trust, grade, rank) +
                click_probability(adv, grade, rank) ==
            Approx(1.0));
}

TEST_CASE("simulate basics") {
  const DatasetBundle data = small_world();
  const StochasticRankingPolicy policy = uniform_policy(3);
  Rng rng = make_rng(11);

  const InteractionLog empty =
      simulate(0, policy, data.train, trust_model(), rng);
  CHECK(empty.size() == 0);

  RankingDataset none;
  none.feature_dim = 3;
  CHECK_THROWS_AS(simulate(5, policy, none, trust_model(), rng), data_error);

  Rng r1 = make_rng(12), r2 = make_rng(12);
  const InteractionLog a = simulate(50, policy, data.train, trust_model(), r1);
  const InteractionLog b = simulate(50, policy, data.train, trust_model(), r2);
  std::ostringstream sa, sb;
  save_log(a, sa);
  save_log(b, sb);
  CHECK(sa.str() == sb.str());
}

TEST_CASE("grade-4 documents at rank 1 always click under trust bias") {
  // Single query whose documents all carry grade 4: the rank-1 click
  // probability is exactly alpha_1 + beta_1 = 1.
  DatasetBundle data = small_world();
  RankingDataset one;
  one.feature_dim = 3;
  QueryRecord q = data.train.queries[0];
  for (auto& d : q.documents) d.grade = 4;
  one.queries = {q};
  const StochasticRankingPolicy policy = uniform_policy(3);
  Rng rng = make_rng(13);
  const InteractionLog log = simulate(500, policy, one, trust_model(), rng);
  for (const auto& it : log.entries) CHECK(it.clicks[0] == 1);
}

TEST_CASE("empirical click rates converge to the model (LLN, 3 sigma)") {
  RankingDataset one;
  one.feature_dim = 1;
  QueryRecord q;
  q.query_id = 0;
  for (int grade : {4, 1}) {
    Document d;
    d.features = {0.0};
    d.grade = grade;
    q.documents.push_back(d);
  }
  one.queries = {q};
  const ClickModel model = pbm_model(2);
  StochasticRankingPolicy policy = uniform_policy(1, 2);
  Rng rng = make_rng(14);
  const std::size_t n = 100000;
  const InteractionLog log = simulate(n, policy, one, model, rng);

  // Exact per-interaction click expectation for each doc under the uniform
  // 2-doc policy: 0.5 * (alpha_1 + alpha_2) * P(R | grade).
  const LogAggregate agg = aggregate_log(log, one, model.examination);
  const auto& qa = agg.at_qid(0);
  for (int d = 0; d < 2; ++d) {
    const double rel =
        relevance_probability(model.transform, q.documents[d].grade);
    const double expect = 0.5 * (1.0 + 0.25) * rel;
    const double emp = qa.clicks[d] / static_cast<double>(n);
    const double sigma = std::sqrt(expect * (1.0 - expect) / n) + 1e-12;
    CHECK(std::fabs(emp - expect) < 3.5 * sigma);
  }
}

TEST_CASE("propensity estimates from hand-built logs") {
  RankingDataset one;
  one.feature_dim = 1;
  QueryRecord q;
  q.query_id = 7;
  for (int i = 0; i < 3; ++i) {
    Document d;
    d.features = {0.0};
    d.grade = 0;
    q.documents.push_back(d);
  }
  one.queries = {q};
  const ExaminationModel pbm = examination_defaults(ExamKind::pbm, 3);

  InteractionLog log;
  log.entries.push_back({7, {1, 0, 2}, {0, 0, 0}});  // doc0 at rank 2
  {
    const PropensityEstimate est = estimate_propensities(log, pbm, one);
    CHECK(est.at_qid(7).rho_hat_raw[0] == Approx(0.25));
  }
  log.entries.push_back({7, {0, 1, 2}, {1, 0, 0}});  // doc0 at rank 1
  log.entries.push_back({7, {1, 2, 0}, {0, 0, 0}});  // doc0 at rank 3
  {
    const PropensityEstimate est = estimate_propensities(log, pbm, one);
    CHECK(est.at_qid(7).rho_hat_raw[0] ==
          Approx((0.25 + 1.0 + 1.0 / 9) / 3.0));
    CHECK_THROWS_AS(est.rho(8, 0), estimator_error);  // unlogged query
  }
}

TEST_CASE("clip floor follows 10/sqrt(N)") {
  const DatasetBundle data = small_world();
  const StochasticRankingPolicy policy = uniform_policy(3);
  Rng rng = make_rng(15);
  const InteractionLog log =
      simulate(10000, policy, data.train, pbm_model(), rng);
  const PropensityEstimate est = estimate_propensities(
      log, examination_defaults(ExamKind::pbm), data.train, /*clip=*/true);
  CHECK(est.clip_floor == Approx(0.1));
  const PropensityEstimate unclipped = estimate_propensities(
      log, examination_defaults(ExamKind::pbm), data.train, /*clip=*/false);
  CHECK(unclipped.clip_floor == 0.0);
}

TEST_CASE("never-displayed documents: floor in training, error unclipped") {
  RankingDataset one;
  one.feature_dim = 1;
  QueryRecord q;
  q.query_id = 1;
  for (int i = 0; i < 3; ++i) {
    Document d;
    d.features = {0.0};
    d.grade = 0;
    q.documents.push_back(d);
  }
  one.queries = {q};
  const ExaminationModel pbm = examination_defaults(ExamKind::pbm, 2);
  InteractionLog log;
  log.entries.push_back({1, {0, 1}, {0, 0}});  // doc 2 never displayed

  const PropensityEstimate clipped =
      estimate_propensities(log, pbm, one, /*clip=*/true);
  CHECK(clipped.rho(1, 2) == Approx(clipped.clip_floor));

  const PropensityEstimate strict =
      estimate_propensities(log, pbm, one, /*clip=*/false);
  CHECK_THROWS_AS(strict.rho(1, 2), estimator_error);
}

TEST_CASE("frequency propensities converge to the true exposure") {
  DatasetBundle data = small_world(8, 5);
  RankingDataset one;
  one.feature_dim = 3;
  one.queries = {data.train.queries[0]};
  StochasticRankingPolicy logging;
  logging.weights = {0.5, -0.2, 0.3};
  logging.cutoff_k = 5;
  const ExaminationModel pbm = examination_defaults(ExamKind::pbm);
  Rng rng = make_rng(16);
  const std::size_t n = 40000;
  const InteractionLog log = simulate(n, logging, one, pbm_model(), rng);
  const PropensityEstimate est = estimate_propensities(log, pbm, one);
  const PropensityEstimate truth = true_propensities(logging, one, pbm);
  for (int d = 0; d < 5; ++d) {
    const double sigma = 0.5 / std::sqrt(static_cast<double>(n));
    CHECK(std::fabs(est.rho(0, d) - truth.rho(0, d)) < 3.0 * sigma + 1e-3);
  }
}

TEST_CASE("interaction logs round-trip through the line format") {
  const DatasetBundle data = small_world();
  const StochasticRankingPolicy policy = uniform_policy(3);
  Rng rng = make_rng(17);
  const InteractionLog log =
      simulate(25, policy, data.train, trust_model(), rng);
  std::stringstream ss;
  save_log(log, ss);
  const InteractionLog loaded = load_log(ss);
  REQUIRE(loaded.size() == log.size());
  for (std::size_t i = 0; i < log.size(); ++i) {
    CHECK(loaded.entries[i].query_id == log.entries[i].query_id);
    CHECK(loaded.entries[i].displayed == log.entries[i].displayed);
    CHECK(loaded.entries[i].clicks == log.entries[i].clicks);
  }

  std::stringstream bad("3,0,1,0\n");
  CHECK_THROWS_AS(load_log(bad), parse_error);
}
