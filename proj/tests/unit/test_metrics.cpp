#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "endonet/common/error.hpp"
#include "endonet/common/rng.hpp"
#include "endonet/metrics/metrics.hpp"
#include "error_helpers.hpp"
#include "metric_oracles.hpp"
#include "temp_dir.hpp"

using namespace endonet;
using namespace endonet::metrics;
using endonet::testing::throws_code;

using namespace endonet::testing;

TEST_CASE("weighted F1") {
  CHECK(weighted_f1(from_confusion(5, 0, 0, 5)) == 1.0);
  // F1_High = 16/19, F1_Low = 18/21, equal supports
  const double expected = 0.5 * 16.0 / 19.0 + 0.5 * 18.0 / 21.0;
  CHECK(std::abs(weighted_f1(from_confusion(8, 2, 1, 9)) - expected) < 1e-12);
  CHECK(std::abs(weighted_f1(from_confusion(8, 2, 1, 9)) - 0.8496) < 1e-4);
  // everything predicted Low, half the truth High
  const double f1_low = 2.0 * 5 / (2.0 * 5 + 5);
  CHECK(std::abs(weighted_f1(from_confusion(0, 5, 0, 5)) - 0.5 * f1_low) < 1e-12);
  CHECK(throws_code([] { weighted_f1(std::vector<ScoredSlide>{}); }, ErrorCode::EmptyInput));
}

TEST_CASE("AUC") {
  CHECK(auc({slide(0.9, Grade::High), slide(0.1, Grade::Low)}) == 1.0);
  CHECK(auc({slide(0.9, Grade::High), slide(0.6, Grade::Low), slide(0.4, Grade::High), slide(0.2, Grade::Low)}) == 0.75);
  CHECK(auc({slide(0.3, Grade::High), slide(0.3, Grade::Low), slide(0.3, Grade::Low)}) == 0.5);
  CHECK(throws_code([] { auc({slide(0.3, Grade::High)}); }, ErrorCode::SingleClass));
}

TEST_CASE("AUC equals all-pairs counting on 1000 random instances") {
  Rng rng(404);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    auto v = random_scored(rng, 2 + rng.below(19), 2 + static_cast<int>(rng.below(8)));
    if (auc(v) != brute_auc(v)) ++mismatches;
  }
  CHECK(mismatches == 0);
}

TEST_CASE("ROC points") {
  auto perfect = roc_points({slide(0.9, Grade::High), slide(0.8, Grade::High), slide(0.1, Grade::Low)});
  REQUIRE(perfect.size() == 4);
  CHECK(perfect[0].fpr == 0.0);
  CHECK(perfect[0].tpr == 0.0);
  CHECK(perfect[2].fpr == 0.0);
  CHECK(perfect[2].tpr == 1.0);
  CHECK(perfect.back().fpr == 1.0);
  CHECK(perfect.back().tpr == 1.0);
  CHECK(trapezoid_area(roc_points({slide(0.5, Grade::High), slide(0.5, Grade::Low)})) == 0.5);
  CHECK(trapezoid_area(roc_points({slide(0.9, Grade::High), slide(0.6, Grade::Low), slide(0.4, Grade::High),
                                   slide(0.2, Grade::Low)})) == doctest::Approx(0.75).epsilon(1e-12));
  Rng rng(5);
  for (int t = 0; t < 500; ++t) {
    auto v = random_scored(rng, 2 + rng.below(40), 2 + static_cast<int>(rng.below(30)));
    auto curve = roc_points(v);
    CHECK(std::abs(trapezoid_area(curve) - auc(v)) < 1e-9);
    for (std::size_t i = 1; i < curve.size(); ++i) {
      CHECK(curve[i].fpr >= curve[i - 1].fpr);
      CHECK(curve[i].tpr >= curve[i - 1].tpr);
    }
  }
}

TEST_CASE("metrics are invariant to input order") {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    auto v = random_scored(rng, 3 + rng.below(30), 7);
    const double f = weighted_f1(v), a = auc(v);
    rng.shuffle(std::span<ScoredSlide>(v));
    CHECK(weighted_f1(v) == f);
    CHECK(auc(v) == a);
  }
}

TEST_CASE("bootstrap matches an independent reimplementation") {
  std::vector<ScoredSlide> v = {slide(0.9, Grade::High), slide(0.7, Grade::Low), slide(0.4, Grade::High),
                                slide(0.2, Grade::Low),  slide(0.6, Grade::High), slide(0.55, Grade::Low)};
  const std::uint64_t seed = 12345;
  auto r = bootstrap_ci(v, [](const auto& s) { return weighted_f1(s); }, 100, seed);

  std::vector<double> values;
  for (std::uint64_t i = 0; i < 100; ++i) {
    OracleStream st{oracle_key(seed, i)};
    std::vector<ScoredSlide> sample;
    for (std::size_t k = 0; k < v.size(); ++k) sample.push_back(v[st.below(v.size())]);
    values.push_back(oracle_f1(sample));
  }
  CHECK(r.values == values);
  CHECK(r.lower == oracle_percentile(values, 0.025));
  CHECK(r.upper == oracle_percentile(values, 0.975));

  // AUC resamples lacking a class are redrawn from the same substream
  auto ra = bootstrap_ci(v, [](const auto& s) { return auc(s); }, 100, seed, true);
  std::vector<double> auc_values;
  std::size_t redrawn = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    OracleStream st{oracle_key(seed, i)};
    for (;;) {
      std::vector<ScoredSlide> sample;
      for (std::size_t k = 0; k < v.size(); ++k) sample.push_back(v[st.below(v.size())]);
      const bool hi = std::any_of(sample.begin(), sample.end(), [](auto& s) { return s.true_grade == Grade::High; });
      const bool lo = std::any_of(sample.begin(), sample.end(), [](auto& s) { return s.true_grade == Grade::Low; });
      if (hi && lo) {
        auc_values.push_back(brute_auc(sample));
        break;
      }
      ++redrawn;
    }
  }
  CHECK(ra.values == auc_values);
  CHECK(ra.redrawn == redrawn);
}

TEST_CASE("bootstrap properties") {
  auto correct = from_confusion(6, 0, 0, 6);
  auto r = bootstrap_ci(correct, [](const auto& s) { return weighted_f1(s); }, 200, 3);
  CHECK(r.lower == 1.0);
  CHECK(r.upper == 1.0);
  CHECK(throws_code([&] { bootstrap_ci(correct, [](const auto&) { return 0.0; }, 0, 1); }, ErrorCode::InvalidArgument));

  Rng rng(17);
  for (int t = 0; t < 20; ++t) {
    auto v = random_scored(rng, 30, 11);
    auto fn = [](const auto& s) { return auc(s); };
    auto r95 = bootstrap_ci(v, fn, 500, 77 + t, true, 0.95);
    auto r90 = bootstrap_ci(v, fn, 500, 77 + t, true, 0.90);
    CHECK(r95.lower <= r90.lower);
    CHECK(r90.upper <= r95.upper);
  }
}

TEST_CASE("bootstrap of 10000 iterations on 200 slides is fast") {
  Rng rng(1);
  auto v = random_scored(rng, 200, 1000);
  const auto t0 = std::chrono::steady_clock::now();
  MetricReport r = evaluate(v, 10000, 1);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("evaluate(n=200, 10000 iterations): " << secs << " s");
  CHECK(secs < 5.0);
  CHECK(r.iterations == 10000);
}

TEST_CASE("subtype accuracy rows") {
  std::vector<ScoredSlide> v;
  for (int i = 0; i < 85; ++i) v.push_back(slide(i < 77 ? 0.1 : 0.9, Grade::Low, Subtype::EndometrioidG1));
  v.push_back(slide(0.9, Grade::High, Subtype::Serous));
  auto rows = subtype_accuracy(v);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].format() == "0.91 (77/ 85)");
  CHECK(rows[3].format() == "1.00 (1/ 1)");
  CHECK(rows[4].format() == "NA");
  CHECK_FALSE(rows[4].accuracy.has_value());
}

TEST_CASE("report and file formats") {
  endonet::testing::TempDir dir("metrics");
  Rng rng(2);
  auto v = random_scored(rng, 40, 50);
  write_predictions(dir / "p.jsonl", v);
  auto back = read_predictions(dir / "p.jsonl");
  REQUIRE(back.size() == v.size());
  CHECK(back[3].prob_high == v[3].prob_high);
  CHECK(back[3].subtype == v[3].subtype);

  write_roc_csv(dir / "roc.csv", roc_points(v));
  std::ifstream in(dir / "roc.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "fpr,tpr,threshold");

  MetricReport r = evaluate(v, 200, 9);
  CHECK(r.f1_lower <= r.f1_upper);
  const std::string tables = report_tables(r);
  CHECK(tables.find("F1 ") != std::string::npos);
  CHECK(report_json(r).find("\"ci95\"") != std::string::npos);

  std::ofstream(dir / "empty.jsonl") << "";
  CHECK(read_predictions(dir / "empty.jsonl").empty());
  std::ofstream(dir / "bad.jsonl") << "{\"slide_id\":\"a\"}\n";
  CHECK(throws_code([&] { read_predictions(dir / "bad.jsonl"); }, ErrorCode::MalformedInput));
}
