#pragma once

// Depth histogramming, exhaustive multi-threshold Otsu search, and the binary
// granularity masks derived from the resulting depth regions.

#include <array>
#include <cstdint>
#include <limits>
#include <vector>

#include "granatt/tensor.hpp"

namespace granatt {

struct DepthMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major, each in [0,1]
};

inline DepthMap make_depth_map(std::size_t height, std::size_t width,
                               std::vector<double> values) {
  require(height > 0 && width > 0, "depth map: empty dimensions");
  require(values.size() == height * width,
          "depth map: value count " + std::to_string(values.size()) +
              " does not match " + std::to_string(height) + "x" +
              std::to_string(width));
  for (std::size_t i = 0; i < values.size(); ++i)
    require(values[i] >= 0.0 && values[i] <= 1.0,
            "depth map: value outside [0,1] at flat index " +
                std::to_string(i));
  return DepthMap{height, width, std::move(values)};
}

inline int depth_bin(double v) {
  int b = static_cast<int>(std::floor(v * 255.0 + 0.5));
  return std::min(255, std::max(0, b));
}

struct DepthHistogram {
  std::array<std::int64_t, 256> bins{};
  std::int64_t total = 0;
};

inline DepthHistogram build_histogram(const DepthMap& depth) {
  DepthHistogram h;
  for (double v : depth.values) ++h.bins[depth_bin(v)];
  h.total = static_cast<std::int64_t>(depth.values.size());
  return h;
}

struct ThresholdSet {
  std::vector<int> thresholds;  // strictly ascending bin indices in [0,255)
  double objective = 0.0;       // achieved between-class variance
};

// Exhaustively maximizes the between-class variance
//   sum_i w_i mu_i^2 - (sum_i w_i mu_i)^2 / N
// over all ascending threshold tuples of the requested size. Class moments
// are exact integer prefix sums; every candidate is scored by the same
// canonical double expression, so equal-score ties are exact and resolved by
// preferring tuples without empty classes, then the lexicographically
// smallest tuple. When the histogram occupies fewer than T+1 bins the search
// size is reduced to occupied-1.
inline ThresholdSet multi_otsu(const DepthHistogram& hist, int t) {
  require(t >= 0 && t <= 3,
          "multi_otsu: threshold count " + std::to_string(t) +
              " outside [0,3]");
  require(hist.total > 0, "multi_otsu: empty histogram");
  std::int64_t check = 0;
  for (std::int64_t c : hist.bins) {
    require(c >= 0, "multi_otsu: negative bin count");
    check += c;
  }
  require(check == hist.total, "multi_otsu: bin counts do not sum to total");

  int occupied = 0;
  for (std::int64_t c : hist.bins)
    if (c > 0) ++occupied;
  int k = std::min(t, occupied - 1);
  if (k <= 0) return ThresholdSet{{}, 0.0};

  std::array<std::int64_t, 257> cnt{}, mom{};
  for (int b = 0; b < 256; ++b) {
    cnt[b + 1] = cnt[b] + hist.bins[b];
    mom[b + 1] = mom[b] + static_cast<std::int64_t>(b) * hist.bins[b];
  }
  // Class covering bins (lo, hi]; score contribution S^2/w, empty classes
  // contribute zero but are flagged.
  auto part = [&](int lo, int hi, bool& empty) -> double {
    std::int64_t w = cnt[hi + 1] - cnt[lo + 1];
    if (w == 0) {
      empty = true;
      return 0.0;
    }
    double s = static_cast<double>(mom[hi + 1] - mom[lo + 1]);
    return s * s / static_cast<double>(w);
  };

  double best_score = -std::numeric_limits<double>::infinity();
  bool best_empty = true;
  std::array<int, 3> best{};
  auto consider = [&](double score, bool empty, int d1, int d2, int d3) {
    if (score > best_score ||
        (score == best_score && best_empty && !empty)) {
      best_score = score;
      best_empty = empty;
      best = {d1, d2, d3};
    }
  };

  if (k == 1) {
    for (int d1 = 0; d1 <= 254; ++d1) {
      bool e = false;
      double s = part(-1, d1, e) + part(d1, 255, e);
      consider(s, e, d1, 0, 0);
    }
  } else if (k == 2) {
    for (int d1 = 0; d1 <= 253; ++d1) {
      bool e1 = false;
      double s1 = part(-1, d1, e1);
      for (int d2 = d1 + 1; d2 <= 254; ++d2) {
        bool e = e1;
        double s = s1 + part(d1, d2, e) + part(d2, 255, e);
        consider(s, e, d1, d2, 0);
      }
    }
  } else {
    for (int d1 = 0; d1 <= 252; ++d1) {
      bool e1 = false;
      double s1 = part(-1, d1, e1);
      for (int d2 = d1 + 1; d2 <= 253; ++d2) {
        bool e2 = e1;
        double s2 = s1 + part(d1, d2, e2);
        for (int d3 = d2 + 1; d3 <= 254; ++d3) {
          bool e = e2;
          double s = s2 + part(d2, d3, e) + part(d3, 255, e);
          consider(s, e, d1, d2, d3);
        }
      }
    }
  }

  ThresholdSet out;
  out.thresholds.assign(best.begin(), best.begin() + k);
  double n = static_cast<double>(cnt[256]);
  double q = static_cast<double>(mom[256]);
  out.objective = best_score - q * q / n;
  return out;
}

struct GranularityMasks {
  std::size_t height = 0, width = 0;
  std::vector<std::vector<std::uint8_t>> masks;  // ordered by ascending bin
};

// Region i holds the pixels whose bin lies in (d_{i-1}, d_i], with the outer
// sentinels d_0 = -1 and d_{T+1} = 255, so the masks partition the image.
inline GranularityMasks generate_masks(const DepthMap& depth,
                                       const ThresholdSet& tset) {
  for (std::size_t i = 1; i < tset.thresholds.size(); ++i)
    require(tset.thresholds[i - 1] < tset.thresholds[i],
            "generate_masks: thresholds must be strictly ascending");
  for (int d : tset.thresholds)
    require(d >= 0 && d <= 254,
            "generate_masks: threshold " + std::to_string(d) +
                " outside [0,255)");
  GranularityMasks out;
  out.height = depth.height;
  out.width = depth.width;
  std::size_t regions = tset.thresholds.size() + 1;
  out.masks.assign(regions,
                   std::vector<std::uint8_t>(depth.values.size(), 0));
  for (std::size_t p = 0; p < depth.values.size(); ++p) {
    int b = depth_bin(depth.values[p]);
    std::size_t r = 0;
    while (r < tset.thresholds.size() && b > tset.thresholds[r]) ++r;
    out.masks[r][p] = 1;
  }
  return out;
}

// Nearest-neighbor resize; each output pixel copies one source pixel, so a
// partition stays a partition at any target size.
inline GranularityMasks resize_masks(const GranularityMasks& in,
                                     std::size_t h, std::size_t w) {
  require(h > 0 && w > 0, "resize_masks: target size must be positive");
  GranularityMasks out;
  out.height = h;
  out.width = w;
  out.masks.assign(in.masks.size(), std::vector<std::uint8_t>(h * w, 0));
  std::vector<std::size_t> src_row(h), src_col(w);
  for (std::size_t y = 0; y < h; ++y)
    src_row[y] = std::min(
        in.height - 1,
        static_cast<std::size_t>((static_cast<double>(y) + 0.5) *
                                 static_cast<double>(in.height) /
                                 static_cast<double>(h)));
  for (std::size_t x = 0; x < w; ++x)
    src_col[x] = std::min(
        in.width - 1,
        static_cast<std::size_t>((static_cast<double>(x) + 0.5) *
                                 static_cast<double>(in.width) /
                                 static_cast<double>(w)));
  for (std::size_t m = 0; m < in.masks.size(); ++m)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out.masks[m][y * w + x] = in.masks[m][src_row[y] * in.width + src_col[x]];
  return out;
}

inline Tensor mask_tensor(const GranularityMasks& masks, std::size_t i) {
  require(i < masks.masks.size(), "mask_tensor: region index out of range");
  std::vector<double> v(masks.masks[i].begin(), masks.masks[i].end());
  return Tensor::from({masks.height, masks.width}, std::move(v));
}

inline std::vector<std::uint8_t> mask_gray8(const GranularityMasks& masks,
                                            std::size_t i) {
  require(i < masks.masks.size(), "mask_gray8: region index out of range");
  std::vector<std::uint8_t> v(masks.masks[i].size());
  for (std::size_t p = 0; p < v.size(); ++p)
    v[p] = masks.masks[i][p] ? 255 : 0;
  return v;
}

}  // namespace granatt
