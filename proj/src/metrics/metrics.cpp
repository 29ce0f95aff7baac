#include "endonet/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "endonet/common/error.hpp"
#include "endonet/common/parallel.hpp"
#include "endonet/common/rng.hpp"

namespace endonet::metrics {

using nlohmann::json;

Confusion confusion(const std::vector<ScoredSlide>& scored, double threshold) {
  Confusion c;
  for (const auto& s : scored) {
    const bool pred_high = s.predicted(threshold) == Grade::High;
    if (s.true_grade == Grade::High) {
      (pred_high ? c.tp : c.fn) += 1;
    } else {
      (pred_high ? c.fp : c.tn) += 1;
    }
  }
  return c;
}

double weighted_f1(const Confusion& c) {
  const double n = static_cast<double>(c.total());
  if (n == 0) throw Error(ErrorCode::EmptyInput, "weighted_f1: no slides");
  auto f1 = [](double tp, double fp, double fn) {
    const double denom = 2 * tp + fp + fn;
    return denom > 0 ? 2 * tp / denom : 0.0;
  };
  const double f1_high = f1(static_cast<double>(c.tp), static_cast<double>(c.fp), static_cast<double>(c.fn));
  const double f1_low = f1(static_cast<double>(c.tn), static_cast<double>(c.fn), static_cast<double>(c.fp));
  const double support_high = static_cast<double>(c.tp + c.fn);
  const double support_low = static_cast<double>(c.tn + c.fp);
  return (support_high * f1_high + support_low * f1_low) / n;
}

double weighted_f1(const std::vector<ScoredSlide>& scored, double threshold) {
  if (scored.empty()) throw Error(ErrorCode::EmptyInput, "weighted_f1: no slides");
  return weighted_f1(confusion(scored, threshold));
}

double auc(const std::vector<ScoredSlide>& scored) {
  std::vector<std::pair<double, bool>> v;
  v.reserve(scored.size());
  std::size_t pos = 0;
  for (const auto& s : scored) {
    const bool high = s.true_grade == Grade::High;
    pos += high;
    v.emplace_back(s.prob_high, high);
  }
  const std::size_t neg = v.size() - pos;
  if (pos == 0 || neg == 0) throw Error(ErrorCode::SingleClass, "auc needs both Low and High slides");
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  // U counted in half-units so the sum stays an exact integer
  std::uint64_t half_wins = 0;
  std::size_t neg_below = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i, tie_pos = 0, tie_neg = 0;
    while (j < v.size() && v[j].first == v[i].first) {
      (v[j].second ? tie_pos : tie_neg) += 1;
      ++j;
    }
    half_wins += 2 * static_cast<std::uint64_t>(tie_pos) * neg_below + static_cast<std::uint64_t>(tie_pos) * tie_neg;
    neg_below += tie_neg;
    i = j;
  }
  return (static_cast<double>(half_wins) / 2.0) / (static_cast<double>(pos) * static_cast<double>(neg));
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw Error(ErrorCode::EmptyInput, "quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

BootstrapResult bootstrap_ci(const std::vector<ScoredSlide>& scored, const MetricFn& metric,
                             std::size_t iterations, std::uint64_t seed, bool needs_both_classes,
                             double level, int jobs) {
  if (iterations < 1) throw Error(ErrorCode::InvalidArgument, "bootstrap_ci: iterations must be >= 1");
  if (scored.empty()) throw Error(ErrorCode::EmptyInput, "bootstrap_ci: no slides");
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorCode::InvalidArgument, "bootstrap_ci: level must be in (0,1)");
  if (needs_both_classes) {
    bool low = false, high = false;
    for (const auto& s : scored) (s.true_grade == Grade::High ? high : low) = true;
    if (!low || !high) throw Error(ErrorCode::SingleClass, "bootstrap_ci: metric needs both classes");
  }
  const std::size_t n = scored.size();
  BootstrapResult r;
  r.iterations = iterations;
  r.values.resize(iterations);
  std::vector<std::size_t> redrawn(iterations, 0);
  parallel_for(iterations, jobs, [&](std::size_t i) {
    Rng rng(derive_key(seed, i));
    std::vector<ScoredSlide> sample(n);
    for (;;) {
      bool low = false, high = false;
      for (std::size_t k = 0; k < n; ++k) {
        sample[k] = scored[static_cast<std::size_t>(rng.below(n))];
        (sample[k].true_grade == Grade::High ? high : low) = true;
      }
      if (!needs_both_classes || (low && high)) break;
      ++redrawn[i];
    }
    r.values[i] = metric(sample);
  });
  for (auto c : redrawn) r.redrawn += c;
  std::vector<double> sorted = r.values;
  std::sort(sorted.begin(), sorted.end());
  const double tail = (1.0 - level) / 2.0;
  r.lower = quantile_sorted(sorted, tail);
  r.upper = quantile_sorted(sorted, 1.0 - tail);
  return r;
}

std::string SubtypeAccuracyRow::format() const {
  if (!accuracy) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f (%zu/ %zu)", *accuracy, correct, total);
  return buf;
}

std::vector<SubtypeAccuracyRow> subtype_accuracy(const std::vector<ScoredSlide>& scored, double threshold) {
  std::vector<SubtypeAccuracyRow> rows;
  for (Subtype st : wsi::kAllSubtypes) {
    SubtypeAccuracyRow row;
    row.subtype = st;
    for (const auto& s : scored) {
      if (s.subtype != st) continue;
      ++row.total;
      row.correct += s.predicted(threshold) == s.true_grade;
    }
    if (row.total > 0) row.accuracy = static_cast<double>(row.correct) / static_cast<double>(row.total);
    rows.push_back(row);
  }
  return rows;
}

std::vector<RocPoint> roc_points(const std::vector<ScoredSlide>& scored) {
  std::size_t pos = 0;
  for (const auto& s : scored) pos += s.true_grade == Grade::High;
  const std::size_t neg = scored.size() - pos;
  if (pos == 0 || neg == 0) throw Error(ErrorCode::SingleClass, "roc_points needs both Low and High slides");
  std::vector<std::pair<double, bool>> v;
  for (const auto& s : scored) v.emplace_back(s.prob_high, s.true_grade == Grade::High);
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<RocPoint> curve{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < v.size();) {
    const double t = v[i].first;
    while (i < v.size() && v[i].first == t) {
      (v[i].second ? tp : fp) += 1;
      ++i;
    }
    curve.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos), t});
  }
  return curve;
}

double trapezoid_area(const std::vector<RocPoint>& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  }
  return area;
}

MetricReport evaluate(const std::vector<ScoredSlide>& scored, std::size_t iterations, std::uint64_t seed,
                      double threshold, int jobs) {
  if (scored.empty()) throw Error(ErrorCode::EmptyInput, "evaluate: no predictions");
  MetricReport r;
  r.n = scored.size();
  r.seed = seed;
  r.iterations = iterations;
  r.threshold = threshold;
  r.confusion = confusion(scored, threshold);
  r.f1 = weighted_f1(r.confusion);
  r.auc = auc(scored);
  const auto f1_ci = bootstrap_ci(
      scored, [threshold](const std::vector<ScoredSlide>& s) { return weighted_f1(s, threshold); }, iterations, seed,
      false, 0.95, jobs);
  const auto auc_ci = bootstrap_ci(
      scored, [](const std::vector<ScoredSlide>& s) { return auc(s); }, iterations, seed, true, 0.95, jobs);
  r.f1_lower = f1_ci.lower;
  r.f1_upper = f1_ci.upper;
  r.auc_lower = auc_ci.lower;
  r.auc_upper = auc_ci.upper;
  r.auc_redrawn = auc_ci.redrawn;
  r.subtypes = subtype_accuracy(scored, threshold);
  return r;
}

std::string report_json(const MetricReport& r) {
  json j;
  j["n"] = r.n;
  j["seed"] = r.seed;
  j["iterations"] = r.iterations;
  j["threshold"] = r.threshold;
  j["f1"] = {{"point", r.f1}, {"ci95", {r.f1_lower, r.f1_upper}}};
  j["auc"] = {{"point", r.auc}, {"ci95", {r.auc_lower, r.auc_upper}}, {"redrawn_resamples", r.auc_redrawn}};
  j["confusion"] = {{"tp", r.confusion.tp}, {"fn", r.confusion.fn}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn}};
  json rows = json::array();
  for (const auto& row : r.subtypes) {
    json jr;
    jr["subtype"] = wsi::subtype_name(row.subtype);
    jr["correct"] = row.correct;
    jr["total"] = row.total;
    jr["accuracy"] = row.accuracy ? json(*row.accuracy) : json(nullptr);
    jr["formatted"] = row.format();
    rows.push_back(jr);
  }
  j["subtypes"] = rows;
  return j.dump(2);
}

std::string report_tables(const MetricReport& r) {
  char buf[160];
  std::string out = "Metric    Value\n";
  std::snprintf(buf, sizeof buf, "F1        %.2f (%.2f–%.2f)\n", r.f1, r.f1_lower, r.f1_upper);
  out += buf;
  std::snprintf(buf, sizeof buf, "AUC       %.2f (%.2f–%.2f)\n", r.auc, r.auc_lower, r.auc_upper);
  out += buf;
  out += "\nSubtype           Accuracy\n";
  for (const auto& row : r.subtypes) {
    std::snprintf(buf, sizeof buf, "%-17s %s\n", std::string(wsi::subtype_name(row.subtype)).c_str(),
                  row.format().c_str());
    out += buf;
  }
  return out;
}

std::vector<ScoredSlide> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::vector<ScoredSlide> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      ScoredSlide s;
      s.slide_id = j.at("slide_id").get<std::string>();
      s.subtype = wsi::parse_subtype(j.at("subtype").get<std::string>());
      s.true_grade = wsi::parse_grade(j.at("true_grade").get<std::string>());
      s.prob_high = j.at("prob_high").get<double>();
      if (!(s.prob_high >= 0.0 && s.prob_high <= 1.0)) {
        throw Error(ErrorCode::MalformedInput, "prob_high outside [0,1]");
      }
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedInput, path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorCode::MalformedInput, path.string() + " line " + std::to_string(line_no) + ": " + e.detail());
    }
  }
  return out;
}

void write_predictions(const std::filesystem::path& path, const std::vector<ScoredSlide>& scored) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  for (const auto& s : scored) {
    json j;
    j["slide_id"] = s.slide_id;
    j["subtype"] = wsi::subtype_name(s.subtype);
    j["true_grade"] = wsi::grade_name(s.true_grade);
    j["prob_high"] = s.prob_high;
    out << j.dump() << '\n';
  }
}

void write_roc_csv(const std::filesystem::path& path, const std::vector<RocPoint>& curve) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "fpr,tpr,threshold\n";
  char buf[128];
  for (const auto& p : curve) {
    if (std::isinf(p.threshold)) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,inf\n", p.fpr, p.tpr);
    } else {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.fpr, p.tpr, p.threshold);
    }
    out << buf;
  }
}

}  // namespace endonet::metrics
