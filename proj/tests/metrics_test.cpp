#include "granatt/metrics.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <vector>

using namespace granatt;

namespace {

double urand(std::mt19937_64& rng) { return (rng() >> 11) * 0x1.0p-53; }

Tensor random_pred(std::mt19937_64& rng, std::size_t h, std::size_t w,
                   bool quantized) {
  std::vector<double> v(h * w);
  for (double& x : v) {
    x = urand(rng);
    if (quantized) x = quantize8(x) / 255.0;
  }
  return Tensor::from({h, w}, std::move(v));
}

Tensor random_gt(std::mt19937_64& rng, std::size_t h, std::size_t w,
                 double density) {
  std::vector<double> v(h * w);
  for (double& x : v) x = urand(rng) < density ? 1.0 : 0.0;
  return Tensor::from({h, w}, std::move(v));
}

// ---------------------------------------------------------------------------
// Direct-from-definition oracles, per-pixel throughout.

struct OraclePr {
  double p[256], r[256];
};

OraclePr pr_oracle(const Tensor& pred, const Tensor& gt) {
  OraclePr out{};
  for (int k = 0; k < 256; ++k) {
    double t = k / 255.0;
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      bool fm = pred.value(i) > t;
      bool g = gt.value(i) > 0.5;
      if (fm && g) ++tp;
      if (fm && !g) ++fp;
      if (!fm && g) ++fn;
    }
    out.p[k] = tp + fp == 0 ? 1.0 : double(tp) / double(tp + fp);
    out.r[k] = tp + fn == 0 ? 1.0 : double(tp) / double(tp + fn);
  }
  return out;
}

double maxf_oracle(const Tensor& pred, const Tensor& gt) {
  OraclePr pr = pr_oracle(pred, gt);
  double best = 0.0;
  for (int k = 0; k < 256; ++k) {
    double denom = 0.3 * pr.p[k] + pr.r[k];
    double f = denom == 0.0 ? 0.0 : 1.3 * pr.p[k] * pr.r[k] / denom;
    best = std::max(best, f);
  }
  return best;
}

double mae_oracle(const Tensor& pred, const Tensor& gt) {
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    acc += std::abs(pred.value(i) - (gt.value(i) > 0.5 ? 1.0 : 0.0));
  return acc / double(pred.size());
}

double dispersion_score_oracle(const std::vector<double>& region) {
  double mean = 0.0;
  for (double v : region) mean += v;
  mean /= double(region.size());
  double var = 0.0;
  for (double v : region) var += (v - mean) * (v - mean);
  double sd =
      region.size() > 1 ? std::sqrt(var / double(region.size() - 1)) : 0.0;
  return 2.0 * mean / (mean * mean + 1.0 + sd);
}

double ssim_oracle(const std::vector<double>& p, const std::vector<double>& g) {
  std::size_t n = p.size();
  double mp = 0.0, mg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mp += p[i];
    mg += g[i];
  }
  mp /= double(n);
  mg /= double(n);
  double vp = 0.0, vg = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    vp += (p[i] - mp) * (p[i] - mp);
    vg += (g[i] - mg) * (g[i] - mg);
    cov += (p[i] - mp) * (g[i] - mg);
  }
  if (n > 1) {
    vp /= double(n - 1);
    vg /= double(n - 1);
    cov /= double(n - 1);
  } else {
    vp = vg = cov = 0.0;
  }
  double a = 4.0 * mp * mg * cov;
  double b = (mp * mp + mg * mg) * (vp + vg);
  if (a != 0.0) return a / b;
  return b == 0.0 ? 1.0 : 0.0;
}

double s_oracle(const Tensor& pred, const Tensor& gt) {
  std::size_t h = pred.dim(0), w = pred.dim(1);
  std::size_t n = h * w;
  std::vector<int> g(n);
  long fg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = gt.value(i) > 0.5 ? 1 : 0;
    fg += g[i];
  }
  double mean_pred = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_pred += pred.value(i);
  mean_pred /= double(n);
  if (fg == 0) return 1.0 - mean_pred;
  if (fg == long(n)) return mean_pred;

  std::vector<double> fg_vals, bg_vals;
  for (std::size_t i = 0; i < n; ++i) {
    if (g[i])
      fg_vals.push_back(pred.value(i));
    else
      bg_vals.push_back(1.0 - pred.value(i));
  }
  double mu = double(fg) / double(n);
  double so = mu * dispersion_score_oracle(fg_vals) +
              (1.0 - mu) * dispersion_score_oracle(bg_vals);

  double ry = 0.0, rx = 0.0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      if (g[r * w + c]) {
        ry += double(r + 1);
        rx += double(c + 1);
      }
  std::size_t cy = std::size_t(std::round(ry / double(fg)));
  std::size_t cx = std::size_t(std::round(rx / double(fg)));

  double sr = 0.0;
  struct Box {
    std::size_t r0, r1, c0, c1;
  };
  Box boxes[4] = {{0, cy, 0, cx}, {0, cy, cx, w}, {cy, h, 0, cx},
                  {cy, h, cx, w}};
  for (const Box& b : boxes) {
    if (b.r1 == b.r0 || b.c1 == b.c0) continue;
    std::vector<double> pq, gq;
    for (std::size_t r = b.r0; r < b.r1; ++r)
      for (std::size_t c = b.c0; c < b.c1; ++c) {
        pq.push_back(pred.value(r * w + c));
        gq.push_back(double(g[r * w + c]));
      }
    double weight = double((b.r1 - b.r0) * (b.c1 - b.c0)) / double(n);
    sr += weight * ssim_oracle(pq, gq);
  }
  return std::max(0.0, 0.5 * so + 0.5 * sr);
}

double e_oracle(const Tensor& pred, const Tensor& gt) {
  std::size_t n = pred.size();
  std::vector<int> g(n);
  long fg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = gt.value(i) > 0.5 ? 1 : 0;
    fg += g[i];
  }
  double best = 0.0;
  for (int k = 0; k < 256; ++k) {
    double t = k / 255.0;
    std::vector<int> fm(n);
    long on = 0;
    for (std::size_t i = 0; i < n; ++i) {
      fm[i] = pred.value(i) > t ? 1 : 0;
      on += fm[i];
    }
    double score = 0.0;
    if (fg == 0) {
      score = 1.0 - double(on) / double(n);
    } else if (fg == long(n)) {
      long tp = 0;
      for (std::size_t i = 0; i < n; ++i) tp += fm[i];
      score = double(tp) / double(n);
    } else {
      double mu_g = double(fg) / double(n);
      double mu_f = double(on) / double(n);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double a = double(g[i]) - mu_g;
        double b = double(fm[i]) - mu_f;
        double denom = a * a + b * b;
        double xi = denom == 0.0 ? 0.0 : 2.0 * a * b / denom;
        acc += (xi + 1.0) * (xi + 1.0) / 4.0;
      }
      score = acc / double(n);
    }
    best = std::max(best, score);
  }
  return best;
}

std::string fresh_dir(const std::string& name) {
  std::string dir = ::testing::TempDir() + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace

TEST(Mae, IdealsAndOracle) {
  std::mt19937_64 rng(200);
  Tensor gt = random_gt(rng, 8, 8, 0.4);
  EXPECT_EQ(mae(gt, gt), 0.0);
  std::vector<double> inv(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) inv[i] = 1.0 - gt.value(i);
  EXPECT_EQ(mae(Tensor::from({8, 8}, inv), gt), 1.0);
  for (int cs = 0; cs < 20; ++cs) {
    Tensor pred = random_pred(rng, 8, 8, cs % 2 == 0);
    Tensor g = random_gt(rng, 8, 8, 0.5);
    EXPECT_NEAR(mae(pred, g), mae_oracle(pred, g), 1e-12);
  }
  EXPECT_THROW(mae(Tensor::zeros({4, 4}), Tensor::zeros({4, 5})),
               std::invalid_argument);
  EXPECT_THROW(mae(Tensor::full({4, 4}, 1.5), Tensor::zeros({4, 4})),
               std::invalid_argument);
}

TEST(Mae, InvariantUnderPixelReplication) {
  std::mt19937_64 rng(201);
  Tensor pred = random_pred(rng, 8, 8, false);
  Tensor gt = random_gt(rng, 8, 8, 0.3);
  std::size_t f = 3;
  std::vector<double> bp(24 * 24), bg(24 * 24);
  for (std::size_t r = 0; r < 24; ++r)
    for (std::size_t c = 0; c < 24; ++c) {
      bp[r * 24 + c] = pred.value((r / f) * 8 + c / f);
      bg[r * 24 + c] = gt.value((r / f) * 8 + c / f);
    }
  EXPECT_NEAR(mae(pred, gt),
              mae(Tensor::from({24, 24}, bp), Tensor::from({24, 24}, bg)),
              1e-12);
}

TEST(PrCurve, PerfectPrediction) {
  std::mt19937_64 rng(202);
  Tensor gt = random_gt(rng, 8, 8, 0.4);
  PrCurve curve = pr_curve(gt, gt);
  EXPECT_FALSE(curve.empty_gt);
  for (int k = 0; k <= 254; ++k) {
    EXPECT_EQ(curve.points[k].precision, 1.0) << k;
    EXPECT_EQ(curve.points[k].recall, 1.0) << k;
  }
  EXPECT_EQ(curve.points[255].precision, 1.0);
  EXPECT_EQ(curve.points[255].recall, 0.0);
}

TEST(PrCurve, AllZeroPrediction) {
  std::mt19937_64 rng(203);
  Tensor gt = random_gt(rng, 6, 6, 0.5);
  PrCurve curve = pr_curve(Tensor::zeros({6, 6}), gt);
  for (int k = 0; k < 256; ++k) {
    EXPECT_EQ(curve.points[k].precision, 1.0);
    EXPECT_EQ(curve.points[k].recall, 0.0);
  }
}

TEST(PrCurve, EmptyGroundTruthIsFlagged) {
  std::mt19937_64 rng(204);
  Tensor pred = random_pred(rng, 6, 6, false);
  PrCurve curve = pr_curve(pred, Tensor::zeros({6, 6}));
  EXPECT_TRUE(curve.empty_gt);
  for (int k = 0; k < 256; ++k) EXPECT_EQ(curve.points[k].recall, 1.0);
}

TEST(PrCurve, MatchesConfusionMatrixOracle) {
  std::mt19937_64 rng(205);
  for (int cs = 0; cs < 10; ++cs) {
    Tensor pred = random_pred(rng, 8, 8, cs % 2 == 0);
    Tensor gt = random_gt(rng, 8, 8, 0.35);
    PrCurve curve = pr_curve(pred, gt);
    OraclePr ref = pr_oracle(pred, gt);
    for (int k = 0; k < 256; ++k) {
      EXPECT_DOUBLE_EQ(curve.points[k].precision, ref.p[k]);
      EXPECT_DOUBLE_EQ(curve.points[k].recall, ref.r[k]);
    }
  }
}

TEST(PrCurve, RecallIsNonIncreasing) {
  std::mt19937_64 rng(206);
  for (int cs = 0; cs < 10; ++cs) {
    Tensor pred = random_pred(rng, 12, 12, cs % 2 == 0);
    Tensor gt = random_gt(rng, 12, 12, 0.5);
    PrCurve curve = pr_curve(pred, gt);
    for (int k = 1; k < 256; ++k)
      EXPECT_LE(curve.points[k].recall, curve.points[k - 1].recall);
  }
}

TEST(MaxF, HandComputedCases) {
  std::mt19937_64 rng(207);
  Tensor gt = random_gt(rng, 8, 8, 0.4);
  EXPECT_NEAR(max_f_measure(gt, gt), 1.0, 1e-15);
  std::vector<double> g(16, 0.0);
  for (int i = 0; i < 8; ++i) g[i] = 1.0;
  Tensor half_gt = Tensor::from({4, 4}, g);
  Tensor half_pred = Tensor::full({4, 4}, 0.5);
  EXPECT_NEAR(max_f_measure(half_pred, half_gt), 0.65 / 1.15, 1e-12);
}

TEST(SMeasure, IdealAndDegenerateCases) {
  std::mt19937_64 rng(208);
  Tensor gt = random_gt(rng, 16, 16, 0.3);
  EXPECT_NEAR(s_measure(gt, gt), 1.0, 1e-15);
  Tensor zeros = Tensor::zeros({4, 4});
  EXPECT_EQ(s_measure(zeros, zeros), 1.0);
  Tensor quarter = Tensor::full({4, 4}, 0.25);
  EXPECT_NEAR(s_measure(quarter, zeros), 0.75, 1e-15);
  Tensor ones = Tensor::full({4, 4}, 1.0);
  EXPECT_NEAR(s_measure(quarter, ones), 0.25, 1e-15);
}

TEST(EMeasure, IdealAndAntiAlignedCases) {
  std::mt19937_64 rng(209);
  Tensor gt = random_gt(rng, 16, 16, 0.4);
  EXPECT_NEAR(e_measure(gt, gt), 1.0, 1e-15);
  std::vector<double> inv(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) inv[i] = 1.0 - gt.value(i);
  Tensor anti = Tensor::from({16, 16}, inv);
  EXPECT_NEAR(e_measure(anti, gt), 0.25, 1e-12);
  EXPECT_NEAR(e_measure(anti, gt), e_oracle(anti, gt), 1e-12);
}

TEST(EMeasure, UniformGroundTruthConventions) {
  std::mt19937_64 rng(210);
  Tensor pred = random_pred(rng, 6, 6, false);
  EXPECT_EQ(e_measure(pred, Tensor::zeros({6, 6})), 1.0);
  std::vector<double> v(16, 0.0);
  for (int i = 0; i < 8; ++i) v[i] = 0.7;
  Tensor half = Tensor::from({4, 4}, v);
  EXPECT_EQ(e_measure(half, Tensor::full({4, 4}, 1.0)), 0.5);
}

TEST(Metrics, FiftyRandomCasesMatchOracles) {
  std::mt19937_64 rng(211);
  for (int cs = 0; cs < 50; ++cs) {
    Tensor pred = random_pred(rng, 16, 16, cs % 2 == 0);
    double density = 0.05 + 0.9 * urand(rng);
    Tensor gt = cs == 0   ? Tensor::zeros({16, 16})
                : cs == 1 ? Tensor::full({16, 16}, 1.0)
                          : random_gt(rng, 16, 16, density);
    EXPECT_NEAR(mae(pred, gt), mae_oracle(pred, gt), 1e-9) << cs;
    EXPECT_NEAR(max_f_measure(pred, gt), maxf_oracle(pred, gt), 1e-9) << cs;
    EXPECT_NEAR(s_measure(pred, gt), s_oracle(pred, gt), 1e-9) << cs;
    EXPECT_NEAR(e_measure(pred, gt), e_oracle(pred, gt), 1e-9) << cs;
  }
}

TEST(EvaluateDataset, SinglePerfectPair) {
  std::string pred_dir = fresh_dir("eval_perfect/pred/");
  std::string gt_dir = fresh_dir("eval_perfect/gt/");
  std::mt19937_64 rng(212);
  Tensor gt = random_gt(rng, 12, 12, 0.4);
  Tensor img = gt.reshaped({1, 12, 12});
  save_map(img, pred_dir + "a.png");
  save_map(img, gt_dir + "a.png");
  MetricReport report = evaluate_dataset(pred_dir, gt_dir);
  ASSERT_EQ(report.images.size(), 1u);
  EXPECT_TRUE(report.warnings.empty());
  EXPECT_NEAR(report.mean_mae, 0.0, 1e-9);
  EXPECT_NEAR(report.mean_max_f, 1.0, 1e-9);
  EXPECT_NEAR(report.mean_s, 1.0, 1e-9);
  EXPECT_NEAR(report.mean_e, 1.0, 1e-9);
}

TEST(EvaluateDataset, MeanIsArithmeticAverage) {
  std::string pred_dir = fresh_dir("eval_mean/pred/");
  std::string gt_dir = fresh_dir("eval_mean/gt/");
  std::mt19937_64 rng(213);
  Tensor gt = random_gt(rng, 10, 10, 0.5);
  std::vector<double> inv(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) inv[i] = 1.0 - gt.value(i);
  save_map(gt.reshaped({1, 10, 10}), pred_dir + "x.png");
  save_map(gt.reshaped({1, 10, 10}), gt_dir + "x.png");
  save_map(Tensor::from({1, 10, 10}, inv), pred_dir + "y.png");
  save_map(gt.reshaped({1, 10, 10}), gt_dir + "y.png");
  MetricReport report = evaluate_dataset(pred_dir, gt_dir);
  ASSERT_EQ(report.images.size(), 2u);
  EXPECT_EQ(report.images[0].name, "x");
  EXPECT_EQ(report.images[1].name, "y");
  EXPECT_NEAR(report.mean_mae,
              0.5 * (report.images[0].mae + report.images[1].mae), 1e-12);
  EXPECT_NEAR(report.mean_max_f,
              0.5 * (report.images[0].max_f + report.images[1].max_f), 1e-12);
  EXPECT_NEAR(report.mean_s,
              0.5 * (report.images[0].s_measure + report.images[1].s_measure),
              1e-12);
  EXPECT_NEAR(report.mean_e,
              0.5 * (report.images[0].e_measure + report.images[1].e_measure),
              1e-12);
  EXPECT_NEAR(report.images[1].mae, 1.0, 1e-12);
  EXPECT_NEAR(report.images[1].e_measure, 0.25, 1e-12);
  EXPECT_NEAR(report.images[1].max_f, 0.0, 1e-12);
}

TEST(EvaluateDataset, TenImageSetMatchesPerImageOracles) {
  std::string pred_dir = fresh_dir("eval_ten/pred/");
  std::string gt_dir = fresh_dir("eval_ten/gt/");
  std::mt19937_64 rng(214);
  std::vector<Tensor> preds, gts;
  for (int i = 0; i < 10; ++i) {
    Tensor pred = random_pred(rng, 16, 16, true);
    Tensor gt = i == 3 ? Tensor::zeros({16, 16})
                       : random_gt(rng, 16, 16, 0.2 + 0.06 * i);
    char name[16];
    std::snprintf(name, sizeof name, "img%02d.png", i);
    save_map(pred.reshaped({1, 16, 16}), pred_dir + name);
    save_map(gt.reshaped({1, 16, 16}), gt_dir + name);
    preds.push_back(pred);
    gts.push_back(gt);
  }
  MetricReport report = evaluate_dataset(pred_dir, gt_dir);
  ASSERT_EQ(report.images.size(), 10u);
  double sum_mae = 0.0, sum_f = 0.0, sum_s = 0.0, sum_e = 0.0;
  for (int i = 0; i < 10; ++i) {
    const ImageMetrics& row = report.images[i];
    EXPECT_NEAR(row.mae, mae(preds[i], gts[i]), 1e-12) << i;
    EXPECT_NEAR(row.max_f, max_f_measure(preds[i], gts[i]), 1e-12) << i;
    EXPECT_NEAR(row.s_measure, s_measure(preds[i], gts[i]), 1e-12) << i;
    EXPECT_NEAR(row.e_measure, e_measure(preds[i], gts[i]), 1e-12) << i;
    sum_mae += row.mae;
    sum_f += row.max_f;
    sum_s += row.s_measure;
    sum_e += row.e_measure;
  }
  EXPECT_NEAR(report.mean_mae, sum_mae / 10.0, 1e-12);
  EXPECT_NEAR(report.mean_max_f, sum_f / 10.0, 1e-12);
  EXPECT_NEAR(report.mean_s, sum_s / 10.0, 1e-12);
  EXPECT_NEAR(report.mean_e, sum_e / 10.0, 1e-12);
  for (int k = 0; k < 256; ++k) {
    double pm = 0.0;
    for (const ImageMetrics& row : report.images)
      pm += row.pr.points[k].precision / 10.0;
    EXPECT_NEAR(report.mean_pr[k].precision, pm, 1e-12);
  }
}

TEST(EvaluateDataset, UnmatchedAndUnreadableFilesBecomeWarnings) {
  std::string pred_dir = fresh_dir("eval_warn/pred/");
  std::string gt_dir = fresh_dir("eval_warn/gt/");
  std::mt19937_64 rng(215);
  Tensor gt = random_gt(rng, 8, 8, 0.5);
  save_map(gt.reshaped({1, 8, 8}), pred_dir + "ok.png");
  save_map(gt.reshaped({1, 8, 8}), gt_dir + "ok.png");
  save_map(gt.reshaped({1, 8, 8}), pred_dir + "orphan_pred.png");
  save_map(gt.reshaped({1, 8, 8}), gt_dir + "orphan_gt.png");
  std::ofstream(pred_dir + "broken.png") << "not a png";
  save_map(gt.reshaped({1, 8, 8}), gt_dir + "broken.png");
  MetricReport report = evaluate_dataset(pred_dir, gt_dir);
  ASSERT_EQ(report.images.size(), 1u);
  EXPECT_EQ(report.images[0].name, "ok");
  EXPECT_EQ(report.warnings.size(), 3u);
}

TEST(EvaluateDataset, PredictionsAreResizedToGroundTruth) {
  std::string pred_dir = fresh_dir("eval_resize/pred/");
  std::string gt_dir = fresh_dir("eval_resize/gt/");
  std::mt19937_64 rng(216);
  Tensor pred = random_pred(rng, 8, 8, true);
  Tensor gt = random_gt(rng, 16, 16, 0.4);
  save_map(pred.reshaped({1, 8, 8}), pred_dir + "a.png");
  save_map(gt.reshaped({1, 16, 16}), gt_dir + "a.png");
  MetricReport report = evaluate_dataset(pred_dir, gt_dir);
  ASSERT_EQ(report.images.size(), 1u);
  Tensor up = upsample_bilinear(pred.reshaped({1, 1, 8, 8}), 16, 16)
                  .reshaped({16, 16});
  EXPECT_NEAR(report.images[0].mae, mae(up, gt), 1e-12);
}

TEST(EvaluateDataset, ThreadCountDoesNotChangeTheReport) {
  std::string pred_dir = fresh_dir("eval_thr/pred/");
  std::string gt_dir = fresh_dir("eval_thr/gt/");
  std::mt19937_64 rng(217);
  for (int i = 0; i < 6; ++i) {
    Tensor pred = random_pred(rng, 12, 12, true);
    Tensor gt = random_gt(rng, 12, 12, 0.4);
    std::string name = "f" + std::to_string(i) + ".png";
    save_map(pred.reshaped({1, 12, 12}), pred_dir + name);
    save_map(gt.reshaped({1, 12, 12}), gt_dir + name);
  }
  MetricReport serial = evaluate_dataset(pred_dir, gt_dir, 1);
  MetricReport parallel = evaluate_dataset(pred_dir, gt_dir, 4);
  ASSERT_EQ(serial.images.size(), parallel.images.size());
  for (std::size_t i = 0; i < serial.images.size(); ++i) {
    EXPECT_EQ(serial.images[i].name, parallel.images[i].name);
    EXPECT_EQ(serial.images[i].mae, parallel.images[i].mae);
    EXPECT_EQ(serial.images[i].e_measure, parallel.images[i].e_measure);
  }
  EXPECT_EQ(serial.mean_mae, parallel.mean_mae);
}

TEST(Reports, CsvAndJsonRoundTrip) {
  std::string pred_dir = fresh_dir("eval_csv/pred/");
  std::string gt_dir = fresh_dir("eval_csv/gt/");
  std::mt19937_64 rng(218);
  for (int i = 0; i < 3; ++i) {
    Tensor pred = random_pred(rng, 8, 8, true);
    Tensor gt = random_gt(rng, 8, 8, 0.5);
    std::string name = "r" + std::to_string(i) + ".png";
    save_map(pred.reshaped({1, 8, 8}), pred_dir + name);
    save_map(gt.reshaped({1, 8, 8}), gt_dir + name);
  }
  MetricReport report = evaluate_dataset(pred_dir, gt_dir);
  std::string csv = ::testing::TempDir() + "metrics.csv";
  write_metrics_csv(report, csv);
  std::vector<std::string> lines = read_lines(csv);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "name,mae,max_f,s_measure,e_measure");
  EXPECT_EQ(lines[4].rfind("mean,", 0), 0u);

  std::string pr_path = ::testing::TempDir() + "pr.csv";
  write_pr_csv(report.mean_pr, pr_path);
  EXPECT_EQ(read_lines(pr_path).size(), 257u);

  std::string json_path = ::testing::TempDir() + "metrics.json";
  write_metrics_json(report, json_path);
  std::ifstream in(json_path);
  nlohmann::json j = nlohmann::json::parse(in);
  EXPECT_EQ(j["image_count"], 3);
  EXPECT_EQ(j["images"].size(), 3u);
  EXPECT_NEAR(double(j["mean"]["mae"]), report.mean_mae, 1e-15);
  EXPECT_TRUE(j.contains("e_measure_variant"));
}
