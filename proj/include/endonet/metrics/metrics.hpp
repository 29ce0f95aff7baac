#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "endonet/wsi/manifest.hpp"

namespace endonet::metrics {

using wsi::Grade;
using wsi::Subtype;

inline constexpr double kDefaultThreshold = 0.5;
inline constexpr std::size_t kDefaultIterations = 10000;

struct ScoredSlide {
  std::string slide_id;
  Subtype subtype = Subtype::EndometrioidG1;
  Grade true_grade = Grade::Low;
  double prob_high = 0.0;

  /// High iff prob_high >= threshold.
  Grade predicted(double threshold = kDefaultThreshold) const {
    return prob_high >= threshold ? Grade::High : Grade::Low;
  }
};

/// High is the positive class.
struct Confusion {
  std::size_t tp = 0, fn = 0, fp = 0, tn = 0;
  std::size_t total() const { return tp + fn + fp + tn; }
};

Confusion confusion(const std::vector<ScoredSlide>& scored, double threshold = kDefaultThreshold);

/// Support-weighted mean of per-class F1 over {Low, High}; a class whose F1
/// denominator is zero scores 0. Throws EmptyInput on an empty list.
double weighted_f1(const std::vector<ScoredSlide>& scored, double threshold = kDefaultThreshold);
double weighted_f1(const Confusion& c);

/// Mann-Whitney statistic: share of (High, Low) pairs where the High slide
/// scores higher, ties counting 1/2. Throws SingleClass unless both grades
/// are present.
double auc(const std::vector<ScoredSlide>& scored);

using MetricFn = std::function<double(const std::vector<ScoredSlide>&)>;

struct BootstrapResult {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t iterations = 0;
  std::size_t redrawn = 0;  // resamples discarded for lacking a class
  std::vector<double> values;  // metric per iteration, in iteration order
};

/// Percentile bootstrap. Iteration i draws n = len(scored) indices with
/// Rng(derive_key(seed, i)).below(n); when `needs_both_classes` and the
/// draw lacks a grade, the iteration keeps drawing further resamples from
/// the same stream. Bounds are the (1 -+ level) / 2 quantiles of the
/// iteration values with linear interpolation between order statistics.
BootstrapResult bootstrap_ci(const std::vector<ScoredSlide>& scored, const MetricFn& metric,
                             std::size_t iterations = kDefaultIterations, std::uint64_t seed = 0,
                             bool needs_both_classes = false, double level = 0.95, int jobs = 1);

/// Linear-interpolated quantile of ascending-sorted values (q in [0, 1]).
double quantile_sorted(const std::vector<double>& sorted, double q);

struct SubtypeAccuracyRow {
  Subtype subtype = Subtype::EndometrioidG1;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::optional<double> accuracy;  // absent when total == 0

  /// "0.91 (77/ 85)" or "NA".
  std::string format() const;
};

/// One row per subtype in declaration order.
std::vector<SubtypeAccuracyRow> subtype_accuracy(const std::vector<ScoredSlide>& scored,
                                                 double threshold = kDefaultThreshold);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = std::numeric_limits<double>::infinity();
};

/// (0,0) at threshold +inf, then one point per distinct score in descending
/// order (predict High when score >= threshold), ending at (1,1).
std::vector<RocPoint> roc_points(const std::vector<ScoredSlide>& scored);
double trapezoid_area(const std::vector<RocPoint>& curve);

struct MetricReport {
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  double threshold = kDefaultThreshold;
  double f1 = 0.0;
  double f1_lower = 0.0, f1_upper = 0.0;
  double auc = 0.0;
  double auc_lower = 0.0, auc_upper = 0.0;
  std::size_t auc_redrawn = 0;
  Confusion confusion;
  std::vector<SubtypeAccuracyRow> subtypes;
};

MetricReport evaluate(const std::vector<ScoredSlide>& scored, std::size_t iterations = kDefaultIterations,
                      std::uint64_t seed = 0, double threshold = kDefaultThreshold, int jobs = 1);

/// JSON object with every report field (serialized with nlohmann::json).
std::string report_json(const MetricReport& report);
/// Plain-text tables: "F1  0.92 (0.87–0.95)" style summary and per-subtype rows.
std::string report_tables(const MetricReport& report);

/// Predictions JSON lines {slide_id, subtype, true_grade, prob_high}.
std::vector<ScoredSlide> read_predictions(const std::filesystem::path& path);
void write_predictions(const std::filesystem::path& path, const std::vector<ScoredSlide>& scored);
/// CSV with header "fpr,tpr,threshold".
void write_roc_csv(const std::filesystem::path& path, const std::vector<RocPoint>& curve);

}  // namespace endonet::metrics
