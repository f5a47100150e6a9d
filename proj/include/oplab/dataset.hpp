#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "oplab/common.hpp"

namespace oplab {

constexpr int kDefaultCutoff = 5;
constexpr int kMaxGrade = 4;

enum class Split { train, validation, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

struct Document {
  Vec features;
  int grade = 0;  // graded relevance in [0, 4]
};

struct QueryRecord {
  int query_id = 0;
  std::vector<Document> documents;  // canonical order, stable per seed

  int n_docs() const { return static_cast<int>(documents.size()); }
};

struct RankingDataset {
  std::vector<QueryRecord> queries;
  Split split = Split::train;
  int feature_dim = 0;

  int n_queries() const { return static_cast<int>(queries.size()); }

  void validate(int min_docs = 1) const {
    for (const auto& q : queries) {
      if (q.n_docs() < min_docs)
        throw validation_error("query " + std::to_string(q.query_id) +
                               " has fewer than " + std::to_string(min_docs) +
                               " documents");
      for (const auto& d : q.documents) {
        if (d.grade < 0 || d.grade > kMaxGrade)
          throw validation_error("relevance grade out of [0,4]");
        if (static_cast<int>(d.features.size()) != feature_dim)
          throw validation_error("feature vector length != feature_dim");
      }
    }
  }
};

// Train/validation/test carved 60/20/20 from one synthetic draw.
struct DatasetBundle {
  RankingDataset train;
  RankingDataset validation;
  RankingDataset test;
  int feature_dim = 0;
};

// ---------------------------------------------------------------------------
// Relevance transforms (grade -> click-relevance probability)
// ---------------------------------------------------------------------------

enum class TransformKind { pbm_sparse, trust_bias };

struct RelevanceTransform {
  TransformKind kind = TransformKind::pbm_sparse;
  double slope = 0.025;
  double offset = 0.2;

  static RelevanceTransform pbm_sparse() { return {TransformKind::pbm_sparse, 0.025, 0.2}; }
  static RelevanceTransform trust_bias() { return {TransformKind::trust_bias, 0.25, 0.0}; }
};

inline double relevance_probability(const RelevanceTransform& t, int grade) {
  if (grade < 0 || grade > kMaxGrade)
    throw validation_error("grade out of range [0,4]");
  const double p = t.slope * grade + t.offset;
  if (p < 0.0 || p > 1.0)
    throw validation_error("transform yields probability outside [0,1]");
  return p;
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------
// Features are drawn as a grade-conditioned mean shift along a fixed random
// direction plus isotropic noise, so a linear scorer can partially recover
// the grades.

struct SyntheticConfig {
  double signal_strength = 1.0;  // mean shift per grade step along direction
  double noise_std = 1.0;
  int cutoff_k = kDefaultCutoff;
};

inline QueryRecord generate_query(int query_id, int docs_per_query,
                                  int feature_dim, const Vec& direction,
                                  const SyntheticConfig& cfg, Rng& rng) {
  std::uniform_int_distribution<int> grade_dist(0, kMaxGrade);
  std::normal_distribution<double> noise(0.0, cfg.noise_std);
  QueryRecord q;
  q.query_id = query_id;
  q.documents.resize(docs_per_query);
  for (auto& doc : q.documents) {
    doc.grade = grade_dist(rng);
    doc.features.resize(feature_dim);
    const double shift = cfg.signal_strength * (doc.grade - 2.0) / 2.0;
    for (int j = 0; j < feature_dim; ++j)
      doc.features[j] = shift * direction[j] + noise(rng);
  }
  return q;
}

inline DatasetBundle generate_synthetic(int n_queries, int docs_per_query,
                                        int feature_dim, std::uint64_t seed,
                                        SyntheticConfig cfg = {}) {
  if (n_queries < 1) throw config_error("n_queries must be positive");
  if (feature_dim < 1) throw config_error("feature_dim must be >= 1");
  if (docs_per_query < cfg.cutoff_k)
    throw config_error("docs_per_query must be >= ranking cutoff K");

  Rng rng = make_rng(seed, /*stream=*/17);
  Vec direction(feature_dim);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& v : direction) v = gauss(rng);
  const double n = norm2(direction);
  for (auto& v : direction) v /= (n > 0 ? n : 1.0);

  std::vector<QueryRecord> all;
  all.reserve(n_queries);
  for (int i = 0; i < n_queries; ++i)
    all.push_back(
        generate_query(i, docs_per_query, feature_dim, direction, cfg, rng));

  DatasetBundle out;
  out.feature_dim = feature_dim;
  out.train.split = Split::train;
  out.validation.split = Split::validation;
  out.test.split = Split::test;
  out.train.feature_dim = out.validation.feature_dim =
      out.test.feature_dim = feature_dim;
  // 60/20/20 split in canonical order; train gets the remainder.
  const int n_val = n_queries / 5;
  const int n_test = n_queries / 5;
  const int n_train = n_queries - n_val - n_test;
  for (int i = 0; i < n_queries; ++i) {
    if (i < n_train) {
      out.train.queries.push_back(all[i]);
    } else if (i < n_train + n_val) {
      out.validation.queries.push_back(all[i]);
    } else {
      out.test.queries.push_back(all[i]);
    }
  }
  out.train.validate();
  out.validation.validate();
  out.test.validate();
  return out;
}

// ---------------------------------------------------------------------------
// LTR file loading: lines of "grade qid:<int> <idx>:<val> ..."
// ---------------------------------------------------------------------------

inline RankingDataset load_ltr_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open LTR file: " + path);

  struct RawDoc {
    int grade;
    std::map<int, double> feats;
  };
  std::vector<int> qid_order;
  std::map<int, std::vector<RawDoc>> by_qid;
  int max_feature = 0;

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    // strip comments and whitespace-only lines
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string tok;
    if (!(ls >> tok)) continue;

    RawDoc doc;
    try {
      doc.grade = std::stoi(tok);
    } catch (const std::exception&) {
      throw parse_error("line " + std::to_string(line_no) +
                        ": expected integer grade, got '" + tok + "'");
    }
    if (doc.grade < 0 || doc.grade > kMaxGrade)
      throw validation_error("line " + std::to_string(line_no) +
                             ": grade outside [0,4]");

    if (!(ls >> tok) || tok.rfind("qid:", 0) != 0)
      throw parse_error("line " + std::to_string(line_no) +
                        ": expected qid:<int> token");
    int qid = 0;
    try {
      qid = std::stoi(tok.substr(4));
    } catch (const std::exception&) {
      throw parse_error("line " + std::to_string(line_no) + ": bad qid");
    }

    while (ls >> tok) {
      const auto colon = tok.find(':');
      if (colon == std::string::npos)
        throw parse_error("line " + std::to_string(line_no) +
                          ": expected <idx>:<val>, got '" + tok + "'");
      int idx = 0;
      double val = 0.0;
      try {
        idx = std::stoi(tok.substr(0, colon));
        val = std::stod(tok.substr(colon + 1));
      } catch (const std::exception&) {
        throw parse_error("line " + std::to_string(line_no) +
                          ": bad feature token '" + tok + "'");
      }
      if (idx < 1)
        throw parse_error("line " + std::to_string(line_no) +
                          ": feature index must be >= 1");
      doc.feats[idx] = val;
      max_feature = std::max(max_feature, idx);
    }

    if (by_qid.find(qid) == by_qid.end()) qid_order.push_back(qid);
    by_qid[qid].push_back(std::move(doc));
  }

  if (qid_order.empty()) throw data_error("empty LTR file: " + path);

  RankingDataset ds;
  ds.feature_dim = max_feature;
  for (int qid : qid_order) {
    QueryRecord q;
    q.query_id = qid;
    for (const auto& raw : by_qid[qid]) {
      Document d;
      d.grade = raw.grade;
      d.features.assign(max_feature, 0.0);  // missing indices imputed as 0
      for (const auto& [idx, val] : raw.feats) d.features[idx - 1] = val;
      q.documents.push_back(std::move(d));
    }
    ds.queries.push_back(std::move(q));
  }
  ds.validate();
  return ds;
}

// Debug snapshot: one JSON object per query.
inline void export_snapshot(const RankingDataset& ds, std::ostream& out) {
  for (const auto& q : ds.queries) {
    out << "{\"query_id\":" << q.query_id << ",\"split\":\""
        << split_name(ds.split) << "\",\"documents\":[";
    for (std::size_t i = 0; i < q.documents.size(); ++i) {
      const auto& d = q.documents[i];
      if (i) out << ',';
      out << "{\"grade\":" << d.grade << ",\"features\":[";
      for (std::size_t j = 0; j < d.features.size(); ++j) {
        if (j) out << ',';
        out << fmt_double(d.features[j]);
      }
      out << "]}";
    }
    out << "]}\n";
  }
}

}  // namespace oplab
