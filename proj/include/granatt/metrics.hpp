#pragma once

// Saliency evaluation: MAE, PR curves with max F-measure, the structure
// measure, the enhanced-alignment measure, and filename-matched dataset
// aggregation with CSV/JSON emission.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "granatt/imageio.hpp"
#include "granatt/tensor.hpp"

namespace granatt {

inline constexpr double kFBetaSquared = 0.3;
inline constexpr double kStructureAlpha = 0.5;

namespace detail {

inline std::pair<std::size_t, std::size_t> map_hw(const Tensor& t,
                                                  const char* op) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  require(t.rank() == 3 && t.dim(0) == 1,
          std::string(op) + ": expected HxW or 1xHxW, got " +
              shape_str(t.shape()));
  return {t.dim(1), t.dim(2)};
}

inline void check_metric_inputs(const Tensor& pred, const Tensor& gt,
                                const char* op) {
  require(pred.shape() == gt.shape(),
          std::string(op) + ": shape mismatch " + shape_str(pred.shape()) +
              " vs " + shape_str(gt.shape()));
  auto [h, w] = map_hw(pred, op);
  require(h > 0 && w > 0, std::string(op) + ": empty map");
  for (double v : pred.values())
    require(v >= 0.0 && v <= 1.0,
            std::string(op) + ": prediction outside [0,1]");
}

// Ground truth enters every metric binarized at 0.5.
inline std::vector<std::uint8_t> binarize_gt(const Tensor& gt) {
  std::vector<std::uint8_t> out(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i)
    out[i] = gt.value(i) > 0.5 ? 1 : 0;
  return out;
}

struct ThresholdCounts {
  // Confusion-matrix entries at pred > t for each of the 256 thresholds.
  std::array<std::int64_t, 256> tp{}, fp{};
  std::int64_t positives = 0;  // ground-truth foreground pixels
  std::int64_t total = 0;
};

inline ThresholdCounts threshold_counts(const Tensor& pred,
                                        const std::vector<std::uint8_t>& gt) {
  std::size_t n = pred.size();
  std::vector<std::pair<double, std::uint8_t>> px(n);
  for (std::size_t i = 0; i < n; ++i) px[i] = {pred.value(i), gt[i]};
  std::sort(px.begin(), px.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::int64_t> gt_prefix(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i)
    gt_prefix[i + 1] = gt_prefix[i] + px[i].second;
  ThresholdCounts c;
  c.total = static_cast<std::int64_t>(n);
  c.positives = gt_prefix[n];
  for (int k = 0; k < 256; ++k) {
    double t = k / 255.0;
    auto it = std::upper_bound(
        px.begin(), px.end(), t,
        [](double v, const auto& e) { return v < e.first; });
    std::size_t idx = static_cast<std::size_t>(it - px.begin());
    std::int64_t predicted = static_cast<std::int64_t>(n - idx);
    c.tp[k] = c.positives - gt_prefix[idx];
    c.fp[k] = predicted - c.tp[k];
  }
  return c;
}

}  // namespace detail

// Mean absolute difference against the binarized ground truth.
inline double mae(const Tensor& pred, const Tensor& gt) {
  detail::check_metric_inputs(pred, gt, "mae");
  std::vector<std::uint8_t> g = detail::binarize_gt(gt);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    acc += std::abs(pred.value(i) - static_cast<double>(g[i]));
  return acc / static_cast<double>(pred.size());
}

struct PrPoint {
  double precision = 1.0;
  double recall = 1.0;
};

struct PrCurve {
  std::array<PrPoint, 256> points{};
  bool empty_gt = false;  // recall degenerates to the 0/0 convention
};

// Precision/recall after binarizing the prediction at t = k/255 (strictly
// greater), k = 0..255. Empty denominators score 1 by convention.
inline PrCurve pr_curve(const Tensor& pred, const Tensor& gt) {
  detail::check_metric_inputs(pred, gt, "pr_curve");
  detail::ThresholdCounts c =
      detail::threshold_counts(pred, detail::binarize_gt(gt));
  PrCurve out;
  out.empty_gt = c.positives == 0;
  for (int k = 0; k < 256; ++k) {
    std::int64_t predicted = c.tp[k] + c.fp[k];
    out.points[k].precision =
        predicted == 0 ? 1.0
                       : static_cast<double>(c.tp[k]) /
                             static_cast<double>(predicted);
    out.points[k].recall = c.positives == 0
                               ? 1.0
                               : static_cast<double>(c.tp[k]) /
                                     static_cast<double>(c.positives);
  }
  return out;
}

inline double f_beta(double precision, double recall) {
  double denom = kFBetaSquared * precision + recall;
  if (denom == 0.0) return 0.0;
  return (1.0 + kFBetaSquared) * precision * recall / denom;
}

inline double max_f_measure(const Tensor& pred, const Tensor& gt) {
  PrCurve curve = pr_curve(pred, gt);
  double best = 0.0;
  for (const PrPoint& p : curve.points)
    best = std::max(best, f_beta(p.precision, p.recall));
  return best;
}

namespace detail {

// Dispersion-penalized mean score of the region selected by the mask.
inline double object_score(const std::vector<double>& v,
                           const std::vector<std::uint8_t>& mask,
                           std::uint8_t keep) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (mask[i] == keep) {
      sum += v[i];
      ++n;
    }
  double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (mask[i] == keep) var += (v[i] - mean) * (v[i] - mean);
  double sd = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
  return 2.0 * mean / (mean * mean + 1.0 + sd);
}

// Luminance/contrast/structure similarity on one region, with the exact
// zero-product branches: both moments zero scores 1, a zero cross term
// against nonzero moments scores 0.
inline double region_ssim(const std::vector<double>& p,
                          const std::vector<double>& g) {
  std::size_t n = p.size();
  double mp = 0.0, mg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mp += p[i];
    mg += g[i];
  }
  mp /= static_cast<double>(n);
  mg /= static_cast<double>(n);
  double vp = 0.0, vg = 0.0, cov = 0.0;
  if (n > 1) {
    for (std::size_t i = 0; i < n; ++i) {
      vp += (p[i] - mp) * (p[i] - mp);
      vg += (g[i] - mg) * (g[i] - mg);
      cov += (p[i] - mp) * (g[i] - mg);
    }
    vp /= static_cast<double>(n - 1);
    vg /= static_cast<double>(n - 1);
    cov /= static_cast<double>(n - 1);
  }
  double a = 4.0 * mp * mg * cov;
  double b = (mp * mp + mg * mg) * (vp + vg);
  if (a != 0.0) return a / b;
  return b == 0.0 ? 1.0 : 0.0;
}

}  // namespace detail

// Structure similarity: object-aware and region-aware terms mixed at 0.5.
// Degenerate ground truths fall back to the published conventions (all
// background scores 1 - mean(pred), all foreground scores mean(pred)).
inline double s_measure(const Tensor& pred, const Tensor& gt) {
  detail::check_metric_inputs(pred, gt, "s_measure");
  auto [h, w] = detail::map_hw(pred, "s_measure");
  std::vector<std::uint8_t> g = detail::binarize_gt(gt);
  const std::vector<double>& p = pred.values();
  std::size_t n = p.size();
  std::int64_t fg = 0;
  for (std::uint8_t b : g) fg += b;
  double mean_pred = 0.0;
  for (double v : p) mean_pred += v;
  mean_pred /= static_cast<double>(n);
  if (fg == 0) return 1.0 - mean_pred;
  if (fg == static_cast<std::int64_t>(n)) return mean_pred;

  double mu = static_cast<double>(fg) / static_cast<double>(n);
  std::vector<double> bg_comp(n);
  for (std::size_t i = 0; i < n; ++i) bg_comp[i] = 1.0 - p[i];
  double s_object = mu * detail::object_score(p, g, 1) +
                    (1.0 - mu) * detail::object_score(bg_comp, g, 0);

  // Foreground centroid on the 1-indexed grid, rounded half away from zero.
  double row_mass = 0.0, col_mass = 0.0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      if (g[r * w + c]) {
        row_mass += static_cast<double>(r + 1);
        col_mass += static_cast<double>(c + 1);
      }
  std::size_t cy = static_cast<std::size_t>(
      std::round(row_mass / static_cast<double>(fg)));
  std::size_t cx = static_cast<std::size_t>(
      std::round(col_mass / static_cast<double>(fg)));

  double s_region = 0.0;
  double area = static_cast<double>(n);
  std::array<std::pair<std::size_t, std::size_t>, 2> row_spans{
      {{0, cy}, {cy, h}}};
  std::array<std::pair<std::size_t, std::size_t>, 2> col_spans{
      {{0, cx}, {cx, w}}};
  for (const auto& rs : row_spans)
    for (const auto& cs : col_spans) {
      std::size_t rh = rs.second - rs.first, cw = cs.second - cs.first;
      if (rh == 0 || cw == 0) continue;
      std::vector<double> pq, gq;
      pq.reserve(rh * cw);
      gq.reserve(rh * cw);
      for (std::size_t r = rs.first; r < rs.second; ++r)
        for (std::size_t c = cs.first; c < cs.second; ++c) {
          pq.push_back(p[r * w + c]);
          gq.push_back(static_cast<double>(g[r * w + c]));
        }
      double weight = static_cast<double>(rh * cw) / area;
      s_region += weight * detail::region_ssim(pq, gq);
    }

  double s = kStructureAlpha * s_object + (1.0 - kStructureAlpha) * s_region;
  return std::max(0.0, s);
}

// Enhanced-alignment score, maximized over the 256 binarization thresholds.
// The alignment ratio is left at 0 when both bias terms vanish; uniform
// ground truths reduce to the complement-of-error convention.
inline double e_measure(const Tensor& pred, const Tensor& gt) {
  detail::check_metric_inputs(pred, gt, "e_measure");
  std::vector<std::uint8_t> g = detail::binarize_gt(gt);
  detail::ThresholdCounts c = detail::threshold_counts(pred, g);
  double n = static_cast<double>(c.total);
  double best = 0.0;
  for (int k = 0; k < 256; ++k) {
    std::int64_t predicted = c.tp[k] + c.fp[k];
    double score;
    if (c.positives == 0) {
      score = 1.0 - static_cast<double>(predicted) / n;
    } else if (c.positives == c.total) {
      score = static_cast<double>(c.tp[k]) / n;
    } else {
      double mu_gt = static_cast<double>(c.positives) / n;
      double mu_fm = static_cast<double>(predicted) / n;
      double a1 = 1.0 - mu_gt, a0 = -mu_gt;
      double b1 = 1.0 - mu_fm, b0 = -mu_fm;
      auto enhanced = [](double a, double b) {
        double denom = a * a + b * b;
        double xi = denom == 0.0 ? 0.0 : 2.0 * a * b / denom;
        return (xi + 1.0) * (xi + 1.0) / 4.0;
      };
      std::int64_t n11 = c.tp[k];
      std::int64_t n01 = c.fp[k];
      std::int64_t n10 = c.positives - n11;
      std::int64_t n00 = c.total - n11 - n01 - n10;
      score = (static_cast<double>(n11) * enhanced(a1, b1) +
               static_cast<double>(n10) * enhanced(a1, b0) +
               static_cast<double>(n01) * enhanced(a0, b1) +
               static_cast<double>(n00) * enhanced(a0, b0)) /
              n;
    }
    best = std::max(best, score);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Dataset aggregation

struct ImageMetrics {
  std::string name;
  double mae = 0.0;
  double max_f = 0.0;
  double s_measure = 0.0;
  double e_measure = 0.0;
  PrCurve pr;
};

struct MetricReport {
  std::vector<ImageMetrics> images;  // filename order
  double mean_mae = 0.0;
  double mean_max_f = 0.0;
  double mean_s = 0.0;
  double mean_e = 0.0;
  std::array<PrPoint, 256> mean_pr{};
  std::vector<std::string> warnings;  // unmatched or unreadable files
};

inline ImageMetrics evaluate_pair(std::string name, const Tensor& pred_raw,
                                  const Tensor& gt_raw) {
  Tensor gt = to_gray(gt_raw);
  Tensor pred = to_gray(pred_raw);
  if (pred.shape() != gt.shape()) {
    std::size_t h = gt.dim(1), w = gt.dim(2);
    pred = pred.reshaped({1, 1, pred.dim(1), pred.dim(2)});
    pred = upsample_bilinear(pred, h, w).reshaped({1, h, w});
  }
  ImageMetrics m;
  m.name = std::move(name);
  m.mae = mae(pred, gt);
  m.max_f = max_f_measure(pred, gt);
  m.s_measure = granatt::s_measure(pred, gt);
  m.e_measure = granatt::e_measure(pred, gt);
  m.pr = pr_curve(pred, gt);
  return m;
}

namespace detail {

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  return ext == ".png" || ext == ".pgm" || ext == ".ppm";
}

inline std::map<std::string, std::filesystem::path> scan_images(
    const std::string& dir) {
  require(std::filesystem::is_directory(dir),
          "evaluate_dataset: not a directory: " + dir);
  std::map<std::string, std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && is_image_file(entry.path()))
      out[entry.path().stem().string()] = entry.path();
  return out;
}

}  // namespace detail

// Walks two directories, pairs files by stem, and averages per-image metrics.
// Pairs are evaluated in parallel when threads > 1; aggregation order stays
// filename-sorted regardless. Unmatched or unreadable files become warnings.
inline MetricReport evaluate_dataset(const std::string& pred_dir,
                                     const std::string& gt_dir,
                                     std::size_t threads = 1) {
  auto preds = detail::scan_images(pred_dir);
  auto gts = detail::scan_images(gt_dir);
  MetricReport report;
  std::vector<std::pair<std::string, std::string>> pairs;  // (pred, gt) paths
  std::vector<std::string> names;
  for (const auto& [stem, path] : preds) {
    auto it = gts.find(stem);
    if (it == gts.end()) {
      report.warnings.push_back("no ground truth for " + path.string());
      continue;
    }
    pairs.emplace_back(path.string(), it->second.string());
    names.push_back(stem);
  }
  for (const auto& [stem, path] : gts)
    if (!preds.count(stem))
      report.warnings.push_back("no prediction for " + path.string());

  std::vector<ImageMetrics> rows(pairs.size());
  std::vector<std::string> failures(pairs.size());
  std::atomic<std::size_t> cursor{0};
  auto worker = [&]() {
    for (std::size_t i; (i = cursor.fetch_add(1)) < pairs.size();) {
      try {
        Tensor pred = load_image(pairs[i].first);
        Tensor gt = load_image(pairs[i].second);
        rows[i] = evaluate_pair(names[i], pred, gt);
      } catch (const std::exception& e) {
        failures[i] = e.what();
      }
    }
  };
  std::size_t nthreads =
      std::min(std::max<std::size_t>(1, threads), std::max<std::size_t>(1, pairs.size()));
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!failures[i].empty()) {
      report.warnings.push_back("failed to evaluate " + names[i] + ": " +
                                failures[i]);
      continue;
    }
    report.images.push_back(std::move(rows[i]));
  }
  std::sort(report.warnings.begin(), report.warnings.end());

  report.mean_pr.fill(PrPoint{0.0, 0.0});
  if (!report.images.empty()) {
    double n = static_cast<double>(report.images.size());
    for (const ImageMetrics& m : report.images) {
      report.mean_mae += m.mae / n;
      report.mean_max_f += m.max_f / n;
      report.mean_s += m.s_measure / n;
      report.mean_e += m.e_measure / n;
      for (int k = 0; k < 256; ++k) {
        report.mean_pr[k].precision += m.pr.points[k].precision / n;
        report.mean_pr[k].recall += m.pr.points[k].recall / n;
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report emission

inline void write_metrics_csv(const MetricReport& report, std::ostream& out) {
  out << std::setprecision(17);
  out << "name,mae,max_f,s_measure,e_measure\n";
  for (const ImageMetrics& m : report.images)
    out << m.name << ',' << m.mae << ',' << m.max_f << ',' << m.s_measure
        << ',' << m.e_measure << '\n';
  out << "mean," << report.mean_mae << ',' << report.mean_max_f << ','
      << report.mean_s << ',' << report.mean_e << '\n';
}

inline void write_metrics_csv(const MetricReport& report,
                              const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "write_metrics_csv: cannot open " + path);
  write_metrics_csv(report, out);
  require(out.good(), "write_metrics_csv: write failed for " + path);
}

inline void write_pr_csv(const std::array<PrPoint, 256>& pr,
                         std::ostream& out) {
  out << std::setprecision(17);
  out << "threshold,precision,recall\n";
  for (int k = 0; k < 256; ++k)
    out << k / 255.0 << ',' << pr[k].precision << ',' << pr[k].recall << '\n';
}

inline void write_pr_csv(const std::array<PrPoint, 256>& pr,
                         const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "write_pr_csv: cannot open " + path);
  write_pr_csv(pr, out);
  require(out.good(), "write_pr_csv: write failed for " + path);
}

inline nlohmann::json metrics_json(const MetricReport& report) {
  nlohmann::json j;
  j["e_measure_variant"] =
      "enhanced-alignment matrix, maximum over 256 thresholds";
  j["image_count"] = report.images.size();
  j["mean"] = {{"mae", report.mean_mae},
               {"max_f", report.mean_max_f},
               {"s_measure", report.mean_s},
               {"e_measure", report.mean_e}};
  j["images"] = nlohmann::json::array();
  for (const ImageMetrics& m : report.images)
    j["images"].push_back({{"name", m.name},
                           {"mae", m.mae},
                           {"max_f", m.max_f},
                           {"s_measure", m.s_measure},
                           {"e_measure", m.e_measure}});
  j["warnings"] = report.warnings;
  return j;
}

inline void write_metrics_json(const MetricReport& report,
                               const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "write_metrics_json: cannot open " + path);
  out << metrics_json(report).dump(2) << '\n';
  require(out.good(), "write_metrics_json: write failed for " + path);
}

}  // namespace granatt
