#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "fairmeta/tasks.hpp"

namespace fairmeta::tasks {
namespace {

const std::string kFixtures = FAIRMETA_FIXTURE_DIR;

CsvSchema crime_schema() {
  std::ifstream in(kFixtures + "/crime_schema.json");
  return CsvSchema::from_json(nlohmann::json::parse(in));
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.records_per_task = 60;
  s.n_train = 6;
  s.n_val = 2;
  s.n_test = 2;
  return s;
}

// Kolmogorov-Smirnov one-sample test against U[a, b]; asymptotic p-value.
double ks_uniform_p(std::vector<double> v, double a, double b) {
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double d = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f = (v[i] - a) / (b - a);
    d = std::max({d, (static_cast<double>(i) + 1) / n - f, f - static_cast<double>(i) / n});
  }
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0;
  for (int k = 1; k < 100; ++k)
    p += 2 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

TEST(Synthetic, ShapesAndGroups) {
  SyntheticSpec spec;
  spec.n_train = 3;
  spec.n_val = 1;
  spec.n_test = 1;
  const auto ts = generate_synthetic(spec, 1);
  ASSERT_EQ(ts.train.size(), 3u);
  ASSERT_EQ(ts.val.size(), 1u);
  ASSERT_EQ(ts.test.size(), 1u);
  EXPECT_EQ(ts.n_features, 7u);
  for (const auto* split : {&ts.train, &ts.val, &ts.test})
    for (const auto& t : *split) {
      EXPECT_EQ(t.size(), 1000u);
      EXPECT_TRUE(t.has_both_groups());
      for (const auto& r : t.records) {
        ASSERT_EQ(r.x.size(), 7u);
        for (double x : r.x) {
          EXPECT_GE(x, 0.0);
          EXPECT_LT(x, 1.0);
        }
      }
      ASSERT_TRUE(t.meta);
      EXPECT_GE(t.meta->base_mean, 0.0);
      EXPECT_LE(t.meta->base_mean, 10.0);
      EXPECT_GE(t.meta->shift, 1.0);
      EXPECT_LE(t.meta->shift, 5.0);
    }
  EXPECT_FALSE(ts.standardized);
}

TEST(Synthetic, SameSeedIsBitIdentical) {
  EXPECT_EQ(generate_synthetic(small_spec(), 42), generate_synthetic(small_spec(), 42));
  EXPECT_FALSE(generate_synthetic(small_spec(), 42) == generate_synthetic(small_spec(), 43));
}

TEST(Synthetic, GroupGapConcentratesAtShift) {
  SyntheticSpec spec;
  spec.records_per_task = 100000;
  spec.n_train = 3;
  spec.n_val = spec.n_test = 0;
  const auto ts = generate_synthetic(spec, 7);
  for (const auto& t : ts.train) {
    double sp = 0, sm = 0;
    std::size_t np = 0, nm = 0;
    for (const auto& r : t.records) {
      if (r.s) {
        sp += r.y;
        ++np;
      } else {
        sm += r.y;
        ++nm;
      }
    }
    const double gap = sp / np - sm / nm;
    const double bound = 3 * spec.sigma / std::sqrt(spec.records_per_task / 2.0);
    EXPECT_NEAR(gap, t.meta->shift, bound) << t.id;
  }
}

TEST(Synthetic, ShiftIsUniformOnRange) {
  SyntheticSpec spec;
  spec.records_per_task = 2;
  spec.n_train = 1000;
  spec.n_val = spec.n_test = 0;
  const auto ts = generate_synthetic(spec, 2024);
  std::vector<double> shifts, bases;
  for (const auto& t : ts.train) {
    shifts.push_back(t.meta->shift);
    bases.push_back(t.meta->base_mean);
  }
  EXPECT_GT(ks_uniform_p(shifts, 1.0, 5.0), 0.01);
  EXPECT_GT(ks_uniform_p(bases, 0.0, 10.0), 0.01);
  // the test itself rejects a wrong range
  EXPECT_LT(ks_uniform_p(shifts, 0.0, 5.0), 0.01);
}

TEST(Synthetic, RejectsInvalidSpec) {
  auto s = small_spec();
  s.sigma = 0;
  EXPECT_THROW(generate_synthetic(s, 1), Error);
  s = small_spec();
  s.shift_min = -1;
  EXPECT_THROW(generate_synthetic(s, 1), Error);
}

TEST(Synthetic, ExportHasExpectedColumns) {
  const auto ts = generate_synthetic(small_spec(), 1);
  std::ostringstream out;
  export_split_csv(ts.val, ts.n_features, out);
  std::istringstream in(out.str());
  const auto table = csv::read(in);
  EXPECT_EQ(table.header, (std::vector<std::string>{"task_id", "s", "y", "x1", "x2", "x3", "x4",
                                                    "x5", "x6", "x7"}));
  EXPECT_EQ(table.rows.size(), 2u * 60);
  // shortest round-trip formatting reproduces the values exactly
  EXPECT_EQ(csv::parse_number(table.rows[0][2], 0, "y"), ts.val[0].records[0].y);
}

TEST(LoadCsv, CrimeShapedFixture) {
  const auto ts = load_csv(kFixtures + "/crime_fixture.csv", crime_schema());
  EXPECT_EQ(ts.n_features, 13u);
  EXPECT_EQ(ts.dropped_tasks, 1u);
  EXPECT_EQ(ts.train.size(), 4u);
  EXPECT_EQ(ts.val.size(), 1u);
  EXPECT_EQ(ts.test.size(), 2u);
  EXPECT_TRUE(ts.standardized);
  std::set<std::string> ids;
  for (const auto* split : {&ts.train, &ts.val, &ts.test})
    for (const auto& t : *split) {
      EXPECT_EQ(t.size(), 52u);
      EXPECT_TRUE(t.has_both_groups());
      EXPECT_NE(t.id, "community_5");
      EXPECT_TRUE(ids.insert(t.id).second) << "split overlap " << t.id;
    }
  const bool warned_constant = std::any_of(ts.warnings.begin(), ts.warnings.end(), [](auto& w) {
    return w.find("weekday_share") != std::string::npos;
  });
  EXPECT_TRUE(warned_constant);

  // training split is standardized; the constant column is all zeros
  std::vector<double> sum(13, 0), ss(13, 0);
  double count = 0;
  for (const auto& t : ts.train)
    for (const auto& r : t.records) {
      for (int k = 0; k < 13; ++k) sum[k] += r.x[k];
      ++count;
    }
  for (int k = 0; k < 13; ++k) {
    const double mean = sum[k] / count;
    EXPECT_LT(std::abs(mean), 1e-9);
    for (const auto& t : ts.train)
      for (const auto& r : t.records) ss[k] += (r.x[k] - mean) * (r.x[k] - mean);
    const double sd = std::sqrt(ss[k] / count);
    if (k == 12)
      EXPECT_EQ(sd, 0.0);
    else
      EXPECT_NEAR(sd, 1.0, 1e-9);
  }
  for (const auto& t : ts.train)
    for (const auto& r : t.records) EXPECT_EQ(r.x[12], 0.0);
}

TEST(LoadCsv, RoundTripThroughStandardization) {
  const auto ts = load_csv(kFixtures + "/crime_fixture.csv", crime_schema());
  auto copy = ts;
  undo_standardization(copy);
  copy.standardized = false;
  apply_standardization(copy);
  for (std::size_t i = 0; i < ts.train.size(); ++i)
    for (std::size_t r = 0; r < ts.train[i].size(); ++r) {
      EXPECT_NEAR(copy.train[i].records[r].y, ts.train[i].records[r].y, 1e-12);
      for (std::size_t k = 0; k < 13; ++k)
        EXPECT_NEAR(copy.train[i].records[r].x[k], ts.train[i].records[r].x[k], 1e-12);
    }
}

TEST(LoadCsv, ProtectedThreshold) {
  const std::string text =
      "task,y,p,f\n"
      "a,1,0.71,1\n"
      "a,2,0.69,2\n"
      "a,3,0.70,3\n";
  std::istringstream in(text);
  CsvSchema s;
  s.task_column = "task";
  s.target_column = "y";
  s.protected_column = "p";
  s.feature_columns = {"f"};
  const auto ts = load_csv(csv::read(in), s);
  ASSERT_EQ(ts.train.size(), 1u);
  EXPECT_TRUE(ts.train[0].records[0].s);
  EXPECT_FALSE(ts.train[0].records[1].s);
  EXPECT_FALSE(ts.train[0].records[2].s);
}

TEST(LoadCsv, SchemaErrors) {
  CsvSchema s;
  s.task_column = "task";
  s.target_column = "y";
  s.protected_column = "p";
  s.feature_columns = {"f"};
  {
    std::istringstream in("task,y,p\na,1,0.9\n");
    EXPECT_THROW(load_csv(csv::read(in), s), Error);
  }
  {
    std::istringstream in("task,y,p,f\na,1,0.9,1\na,oops,0.1,2\n");
    try {
      load_csv(csv::read(in), s);
      FAIL();
    } catch (const ParseError& e) {
      EXPECT_EQ(e.line(), 3u);
    }
  }
  {
    std::istringstream in("task,y,p,f\na,1,0.9,1\na,2,0.1\n");
    EXPECT_THROW(csv::read(in), ParseError);
  }
  {
    std::istringstream in("task,y,p,f\na,1,0.9,1\na,2,0.1,2\n");
    s.splits = {3, 0, 0};
    EXPECT_THROW(load_csv(csv::read(in), s), Error);
  }
}

TEST(Episode, ShapesDisjointAndStratified) {
  const auto ts = generate_synthetic(small_spec(), 5);
  std::mt19937_64 rng(0);
  for (std::size_t k : {5u, 10u, 20u}) {
    for (int trial = 0; trial < 50; ++trial) {
      const auto ep = sample_episode(ts.train[trial % ts.train.size()], k, rng);
      ASSERT_EQ(ep.support.size(), k);
      ASSERT_EQ(ep.query.size(), 2 * k);
      std::set<std::size_t> support(ep.support_indices.begin(), ep.support_indices.end());
      EXPECT_EQ(support.size(), k);
      for (auto q : ep.query_indices) EXPECT_FALSE(support.count(q));
      for (const auto* b : {&ep.support, &ep.query}) {
        EXPECT_GT(b->count_protected(), 0u);
        EXPECT_LT(b->count_protected(), b->size());
      }
      EXPECT_EQ(ep.support.dim, 8u);
      EXPECT_EQ(ep.support.row(0)[7], ep.support.groups[0] ? 1.0 : 0.0);
    }
  }
}

TEST(Episode, DeterministicGivenRngState) {
  const auto ts = generate_synthetic(small_spec(), 5);
  std::mt19937_64 a(99), b(99);
  const auto ea = sample_episode(ts.train[0], 10, a);
  const auto eb = sample_episode(ts.train[0], 10, b);
  EXPECT_EQ(ea.support_indices, eb.support_indices);
  EXPECT_EQ(ea.query_indices, eb.query_indices);
}

TEST(Episode, Preconditions) {
  auto ts = generate_synthetic(small_spec(), 5);
  auto task = ts.train[0];
  std::mt19937_64 rng(1);
  for (auto& r : task.records) r.s = true;
  EXPECT_THROW(sample_episode(task, 5, rng), Error);
  task.records.resize(10);
  EXPECT_THROW(sample_episode(ts.train[0], 25, rng), Error);
}

}  // namespace
}  // namespace fairmeta::tasks
