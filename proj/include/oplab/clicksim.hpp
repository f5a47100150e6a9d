#pragma once

#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "oplab/common.hpp"
#include "oplab/dataset.hpp"
#include "oplab/policy.hpp"

namespace oplab {

// ---------------------------------------------------------------------------
// Click models
// ---------------------------------------------------------------------------

struct ClickModel {
  ExaminationModel examination;
  RelevanceTransform transform;
  bool adversarial = false;
};

// P(C=1 | grade, rank). Ranks beyond the cutoff yield zero, not an error.
inline double click_probability(const ClickModel& model, int grade, int rank) {
  if (rank < 1) throw validation_error("rank must be >= 1");
  if (rank > model.examination.cutoff()) return 0.0;
  const double rel = relevance_probability(model.transform, grade);
  const double base = model.examination.alpha_at(rank) * rel +
                      model.examination.beta_at(rank);
  return model.adversarial ? 1.0 - base : base;
}

// ---------------------------------------------------------------------------
// Interaction logs
// ---------------------------------------------------------------------------

struct Interaction {
  int query_id = 0;
  Ranking displayed;            // document positions within the query
  std::vector<uint8_t> clicks;  // one bit per displayed rank
};

struct InteractionLog {
  std::vector<Interaction> entries;
  std::string logging_policy_ref;

  std::size_t size() const { return entries.size(); }
};

inline InteractionLog simulate(std::size_t n_interactions,
                               const StochasticRankingPolicy& policy,
                               const RankingDataset& data,
                               const ClickModel& model, Rng& rng,
                               const std::string& policy_ref = "logging") {
  if (data.queries.empty()) throw data_error("cannot simulate on empty dataset");
  if (policy.cutoff_k != model.examination.cutoff())
    throw config_error("policy cutoff and click-model cutoff disagree");
  InteractionLog log;
  log.logging_policy_ref = policy_ref;
  log.entries.reserve(n_interactions);
  std::uniform_int_distribution<int> qdist(0, data.n_queries() - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (std::size_t i = 0; i < n_interactions; ++i) {
    const int qi = qdist(rng);
    const QueryRecord& q = data.queries[qi];
    Interaction it;
    it.query_id = q.query_id;
    it.displayed = sample_ranking(policy, q, rng);
    it.clicks.resize(it.displayed.size());
    for (std::size_t k = 0; k < it.displayed.size(); ++k) {
      const int grade = q.documents[it.displayed[k]].grade;
      const double p =
          click_probability(model, grade, static_cast<int>(k) + 1);
      it.clicks[k] = unif(rng) < p ? 1 : 0;
    }
    log.entries.push_back(std::move(it));
  }
  return log;
}

// Line format: qid,doc_id,doc_id,...,clickbits  (re-loadable for estimator runs)
inline void save_log(const InteractionLog& log, std::ostream& out) {
  for (const auto& it : log.entries) {
    out << it.query_id;
    for (int d : it.displayed) out << ',' << d;
    out << ',';
    for (uint8_t c : it.clicks) out << (c ? '1' : '0');
    out << '\n';
  }
}

inline InteractionLog load_log(std::istream& in) {
  InteractionLog log;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) fields.push_back(tok);
    if (fields.size() < 3)
      throw parse_error("log line " + std::to_string(line_no) +
                        ": too few fields");
    Interaction it;
    try {
      it.query_id = std::stoi(fields[0]);
      for (std::size_t i = 1; i + 1 < fields.size(); ++i)
        it.displayed.push_back(std::stoi(fields[i]));
    } catch (const std::exception&) {
      throw parse_error("log line " + std::to_string(line_no) + ": bad field");
    }
    const std::string& bits = fields.back();
    if (bits.size() != it.displayed.size())
      throw parse_error("log line " + std::to_string(line_no) +
                        ": click bits do not match ranking length");
    for (char c : bits) it.clicks.push_back(c == '1' ? 1 : 0);
    log.entries.push_back(std::move(it));
  }
  return log;
}

// ---------------------------------------------------------------------------
// Per-query aggregation (estimators only need these sufficient statistics)
// ---------------------------------------------------------------------------

struct QueryAggregate {
  int query_id = 0;
  int n_impressions = 0;
  Vec clicks;      // per document: total clicks
  Vec alpha_sum;   // per document: sum of alpha at displayed rank
  Vec omega_sum;   // per document: sum of alpha+beta at displayed rank
  std::vector<Vec> rank_doc_count;  // [rank-1][doc]: display counts

  double beta_sum(int d) const { return omega_sum[d] - alpha_sum[d]; }
};

struct LogAggregate {
  std::vector<QueryAggregate> queries;  // only queries present in the log
  std::map<int, int> index_by_qid;
  std::size_t total_interactions = 0;

  const QueryAggregate& at_qid(int qid) const {
    auto it = index_by_qid.find(qid);
    if (it == index_by_qid.end())
      throw estimator_error("query " + std::to_string(qid) +
                            " absent from the interaction log");
    return queries[it->second];
  }
  bool has_qid(int qid) const { return index_by_qid.count(qid) > 0; }
};

inline LogAggregate aggregate_log(const InteractionLog& log,
                                  const RankingDataset& data,
                                  const ExaminationModel& model) {
  std::map<int, int> doc_count;
  for (const auto& q : data.queries) doc_count[q.query_id] = q.n_docs();

  LogAggregate agg;
  agg.total_interactions = log.size();
  for (const auto& it : log.entries) {
    auto dc = doc_count.find(it.query_id);
    if (dc == doc_count.end())
      throw data_error("log references query " + std::to_string(it.query_id) +
                       " not present in the dataset");
    auto [slot, inserted] =
        agg.index_by_qid.try_emplace(it.query_id,
                                     static_cast<int>(agg.queries.size()));
    if (inserted) {
      QueryAggregate qa;
      qa.query_id = it.query_id;
      qa.clicks.assign(dc->second, 0.0);
      qa.alpha_sum.assign(dc->second, 0.0);
      qa.omega_sum.assign(dc->second, 0.0);
      qa.rank_doc_count.assign(model.cutoff(), Vec(dc->second, 0.0));
      agg.queries.push_back(std::move(qa));
    }
    QueryAggregate& qa = agg.queries[slot->second];
    qa.n_impressions += 1;
    for (std::size_t k = 0; k < it.displayed.size(); ++k) {
      const int d = it.displayed[k];
      const int rank = static_cast<int>(k) + 1;
      qa.clicks[d] += it.clicks[k];
      qa.alpha_sum[d] += model.alpha_at(rank);
      qa.omega_sum[d] += model.omega_at(rank);
      if (rank <= model.cutoff()) qa.rank_doc_count[k][d] += 1.0;
    }
  }
  return agg;
}

// ---------------------------------------------------------------------------
// Propensity estimation
// ---------------------------------------------------------------------------

struct PropensityEstimate {
  struct QueryProp {
    Vec rho_hat_raw;   // frequency estimate, unclipped
    Vec omega_hat;     // never clipped
    std::vector<Vec> rank_freq;  // [rank-1][doc]: display frequency
    int n_impressions = 0;
  };
  std::map<int, QueryProp> per_query;
  double clip_floor = 0.0;  // 0 disables clipping
  int cutoff_k = kDefaultCutoff;

  const QueryProp& at_qid(int qid) const {
    auto it = per_query.find(qid);
    if (it == per_query.end())
      throw estimator_error("missing propensities for query " +
                            std::to_string(qid));
    return it->second;
  }

  // Training accessor: never-displayed documents fall back to the clip floor.
  // Without clipping (evaluation), a zero propensity is an error.
  double rho(int qid, int d) const {
    const double raw = at_qid(qid).rho_hat_raw[d];
    if (clip_floor > 0.0) return std::max(raw, clip_floor);
    if (raw <= 0.0)
      throw estimator_error("zero propensity for doc " + std::to_string(d) +
                            " of query " + std::to_string(qid));
    return raw;
  }

  double omega0(int qid, int d) const { return at_qid(qid).omega_hat[d]; }

  // Action propensity per Ch. 2's frequency estimate: the product of
  // per-rank display frequencies over the first K-1 ranks.
  double action_propensity(int qid, const Ranking& y) const {
    const QueryProp& qp = at_qid(qid);
    double p = 1.0;
    for (std::size_t k = 0; k + 1 < y.size(); ++k)
      p *= qp.rank_freq[k][y[k]];
    return p;
  }
};

inline PropensityEstimate estimate_propensities(const InteractionLog& log,
                                                const ExaminationModel& model,
                                                const RankingDataset& data,
                                                bool clip = false) {
  const LogAggregate agg = aggregate_log(log, data, model);
  PropensityEstimate est;
  est.cutoff_k = model.cutoff();
  est.clip_floor =
      clip ? 10.0 / std::sqrt(static_cast<double>(
                 std::max<std::size_t>(log.size(), 1)))
           : 0.0;
  for (const auto& qa : agg.queries) {
    PropensityEstimate::QueryProp qp;
    qp.n_impressions = qa.n_impressions;
    const std::size_t n_docs = qa.clicks.size();
    qp.rho_hat_raw.resize(n_docs);
    qp.omega_hat.resize(n_docs);
    for (std::size_t d = 0; d < n_docs; ++d) {
      qp.rho_hat_raw[d] = qa.alpha_sum[d] / qa.n_impressions;
      qp.omega_hat[d] = qa.omega_sum[d] / qa.n_impressions;
    }
    qp.rank_freq.assign(model.cutoff(), Vec(n_docs, 0.0));
    for (int k = 0; k < model.cutoff(); ++k)
      for (std::size_t d = 0; d < n_docs; ++d)
        qp.rank_freq[k][d] = qa.rank_doc_count[k][d] / qa.n_impressions;
    est.per_query[qa.query_id] = std::move(qp);
  }
  return est;
}

// Exact propensities from a known logging policy (enumeration).
inline PropensityEstimate true_propensities(
    const StochasticRankingPolicy& logging, const RankingDataset& data,
    const ExaminationModel& model) {
  PropensityEstimate est;
  est.cutoff_k = model.cutoff();
  est.clip_floor = 0.0;
  Rng dummy = make_rng(0);
  for (const auto& q : data.queries) {
    const ExposureProfile prof =
        estimate_exposure(logging, q, model, 1, dummy, /*exact=*/true);
    PropensityEstimate::QueryProp qp;
    qp.n_impressions = 0;
    qp.rho_hat_raw = prof.rho;
    qp.omega_hat = prof.omega;
    qp.rank_freq.assign(model.cutoff(), Vec(q.documents.size(), 0.0));
    for_each_ranking(logging, q, [&](double p, const Ranking& y) {
      for (std::size_t k = 0; k < y.size(); ++k) qp.rank_freq[k][y[k]] += p;
    });
    est.per_query[q.query_id] = std::move(qp);
  }
  return est;
}

}  // namespace oplab
