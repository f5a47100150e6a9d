#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "oplab/dataset.hpp"

using namespace oplab;
using Catch::Approx;

namespace {

std::string write_temp(const std::string& contents) {
  static int counter = 0;
  std::string path =
      "ltr_fixture_" + std::to_string(counter++) + ".txt";
  std::ofstream out(path);
  out << contents;
  return path;
}

// Ordinary least squares of grade on features (with intercept); returns R^2.
double ols_r_squared(const RankingDataset& ds) {
  const int d = ds.feature_dim + 1;
  std::vector<double> xtx(d * d, 0.0);
  Vec xty(d, 0.0);
  double y_sum = 0.0, y_sq = 0.0;
  int n = 0;
  for (const auto& q : ds.queries) {
    for (const auto& doc : q.documents) {
      Vec x(d, 1.0);
      for (int j = 0; j < ds.feature_dim; ++j) x[j + 1] = doc.features[j];
      for (int i = 0; i < d; ++i) {
        xty[i] += x[i] * doc.grade;
        for (int j = 0; j < d; ++j) xtx[i * d + j] += x[i] * x[j];
      }
      y_sum += doc.grade;
      y_sq += static_cast<double>(doc.grade) * doc.grade;
      ++n;
    }
  }
  for (int i = 0; i < d; ++i) xtx[i * d + i] += 1e-9;
  const Vec w = solve_spd(xtx, xty);
  double sse = 0.0;
  for (const auto& q : ds.queries)
    for (const auto& doc : q.documents) {
      double pred = w[0];
      for (int j = 0; j < ds.feature_dim; ++j)
        pred += w[j + 1] * doc.features[j];
      sse += (doc.grade - pred) * (doc.grade - pred);
    }
  const double sst = y_sq - y_sum * y_sum / n;
  return 1.0 - sse / sst;
}

std::string snapshot(const DatasetBundle& b) {
  std::ostringstream os;
  export_snapshot(b.train, os);
  export_snapshot(b.validation, os);
  export_snapshot(b.test, os);
  return os.str();
}

}  // namespace

TEST_CASE("generate_synthetic shape contract") {
  const DatasetBundle b = generate_synthetic(1, 5, 2, 7);
  REQUIRE(b.train.n_queries() == 1);
  REQUIRE(b.train.queries[0].n_docs() == 5);
  for (const auto& d : b.train.queries[0].documents) {
    CHECK(d.grade >= 0);
    CHECK(d.grade <= 4);
    CHECK(d.features.size() == 2);
  }
}

TEST_CASE("generate_synthetic is deterministic per seed") {
  const auto a = generate_synthetic(20, 6, 3, 7);
  const auto b = generate_synthetic(20, 6, 3, 7);
  const auto c = generate_synthetic(20, 6, 3, 8);
  CHECK(snapshot(a) == snapshot(b));
  CHECK(snapshot(a) != snapshot(c));
}

TEST_CASE("synthetic features carry linear signal (OLS oracle)") {
  const DatasetBundle b = generate_synthetic(100, 10, 5, 1);
  CHECK(ols_r_squared(b.train) > 0.05);
}

TEST_CASE("generate_synthetic validates sizes") {
  CHECK_THROWS_AS(generate_synthetic(0, 5, 2, 1), config_error);
  CHECK_THROWS_AS(generate_synthetic(5, 3, 2, 1), config_error);
  CHECK_THROWS_AS(generate_synthetic(5, 5, 0, 1), config_error);
}

TEST_CASE("dataset invariants hold across seeds (property)") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DatasetBundle b = generate_synthetic(15, 7, 4, seed);
    for (const RankingDataset* ds : {&b.train, &b.validation, &b.test}) {
      CHECK_NOTHROW(ds->validate(5));
      for (const auto& q : ds->queries)
        for (const auto& doc : q.documents)
          CHECK(doc.features.size() == static_cast<std::size_t>(4));
    }
  }
}

TEST_CASE("relevance transforms") {
  CHECK(relevance_probability(RelevanceTransform::pbm_sparse(), 4) ==
        Approx(0.3));
  CHECK(relevance_probability(RelevanceTransform::trust_bias(), 0) ==
        Approx(0.0));
  CHECK(relevance_probability(RelevanceTransform::trust_bias(), 2) ==
        Approx(0.5));
  CHECK_THROWS_AS(relevance_probability(RelevanceTransform::pbm_sparse(), 5),
                  validation_error);
  CHECK_THROWS_AS(relevance_probability(RelevanceTransform::pbm_sparse(), -1),
                  validation_error);
}

TEST_CASE("relevance transforms are monotone in grade") {
  for (const auto& t :
       {RelevanceTransform::pbm_sparse(), RelevanceTransform::trust_bias()}) {
    double prev = -1.0;
    for (int g = 0; g <= 4; ++g) {
      const double p = relevance_probability(t, g);
      CHECK(p >= prev);
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
      prev = p;
    }
  }
}

TEST_CASE("load_ltr_file parses the two-line fixture") {
  const std::string path = write_temp("4 qid:1 1:0.5\n0 qid:1 2:1.0\n");
  const RankingDataset ds = load_ltr_file(path);
  REQUIRE(ds.n_queries() == 1);
  REQUIRE(ds.queries[0].n_docs() == 2);
  CHECK(ds.feature_dim >= 2);
  CHECK(ds.queries[0].documents[0].grade == 4);
  CHECK(ds.queries[0].documents[0].features[0] == Approx(0.5));
  CHECK(ds.queries[0].documents[0].features[1] == Approx(0.0));  // imputed
  CHECK(ds.queries[0].documents[1].features[1] == Approx(1.0));
  std::remove(path.c_str());
}

TEST_CASE("load_ltr_file groups out-of-order qids by first appearance") {
  const std::string path = write_temp(
      "1 qid:2 1:0.1\n"
      "2 qid:1 1:0.2\n"
      "3 qid:2 1:0.3\n");
  const RankingDataset ds = load_ltr_file(path);
  REQUIRE(ds.n_queries() == 2);
  CHECK(ds.queries[0].query_id == 2);
  CHECK(ds.queries[0].n_docs() == 2);
  CHECK(ds.queries[0].documents[0].grade == 1);
  CHECK(ds.queries[0].documents[1].grade == 3);
  CHECK(ds.queries[1].query_id == 1);
  CHECK(ds.queries[1].n_docs() == 1);
  std::remove(path.c_str());
}

TEST_CASE("load_ltr_file error paths") {
  const std::string empty = write_temp("");
  CHECK_THROWS_AS(load_ltr_file(empty), data_error);
  std::remove(empty.c_str());

  const std::string bad_grade = write_temp("7 qid:1 1:0.5\n");
  CHECK_THROWS_AS(load_ltr_file(bad_grade), validation_error);
  std::remove(bad_grade.c_str());

  const std::string malformed = write_temp("1 qid:1 junk\n");
  try {
    load_ltr_file(malformed);
    FAIL("expected parse_error");
  } catch (const parse_error& e) {
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }
  std::remove(malformed.c_str());
}

TEST_CASE("snapshot export emits one JSON object per query") {
  const DatasetBundle b = generate_synthetic(5, 5, 2, 3);
  std::ostringstream os;
  export_snapshot(b.train, os);
  std::istringstream is(os.str());
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    ++lines;
    CHECK(line.front() == '{');
    CHECK(line.find("\"query_id\"") != std::string::npos);
  }
  CHECK(lines == b.train.n_queries());
}
