#pragma once

// Supervision: per-map binary cross-entropy plus soft IoU, and the
// level-weighted total over the three output branches.

#include <array>
#include <vector>

#include "granatt/tensor.hpp"

namespace granatt {

constexpr double kBceClamp = 1e-7;

struct LossWeights {
  std::array<double, 5> lambda = {1.0, 0.8, 0.6, 0.4, 0.2};
};

inline void validate_loss_inputs(const Tensor& pred, const Tensor& gt,
                                 const char* op) {
  require(pred.defined() && gt.defined(),
          std::string(op) + ": undefined input");
  require(pred.shape() == gt.shape(),
          std::string(op) + ": prediction shape " + shape_str(pred.shape()) +
              " does not match ground truth " + shape_str(gt.shape()));
  for (std::size_t i = 0; i < pred.size(); ++i)
    require(pred.value(i) >= 0.0 && pred.value(i) <= 1.0,
            std::string(op) + ": prediction outside [0,1] at flat index " +
                std::to_string(i));
  for (std::size_t i = 0; i < gt.size(); ++i)
    require(gt.value(i) == 0.0 || gt.value(i) == 1.0,
            std::string(op) + ": ground truth not binary at flat index " +
                std::to_string(i));
}

// Mean over pixels of -[g ln p + (1-g) ln(1-p)], with p clamped away from the
// endpoints so saturated predictions stay finite.
inline Tensor bce_loss(const Tensor& pred, const Tensor& gt) {
  validate_loss_inputs(pred, gt, "bce_loss");
  Tensor p = clamp(pred, kBceClamp, 1.0 - kBceClamp);
  Tensor one_minus_p = add_scalar(mul_scalar(p, -1.0), 1.0);
  Tensor one_minus_g = add_scalar(mul_scalar(gt, -1.0), 1.0);
  Tensor s = add(mul(gt, granatt::log(p)),
                 mul(one_minus_g, granatt::log(one_minus_p)));
  return mul_scalar(sum(s), -1.0 / static_cast<double>(pred.size()));
}

// 1 - (sum(p*g) + 1) / (sum(p) + sum(g) - sum(p*g) + 1).
inline Tensor iou_loss(const Tensor& pred, const Tensor& gt) {
  validate_loss_inputs(pred, gt, "iou_loss");
  Tensor inter = sum(mul(pred, gt));
  Tensor denom = add_scalar(sub(add(sum(pred), sum(gt)), inter), 1.0);
  Tensor ratio = div(add_scalar(inter, 1.0), denom);
  return add_scalar(mul_scalar(ratio, -1.0), 1.0);
}

inline Tensor map_loss(const Tensor& pred, const Tensor& gt) {
  return add(bce_loss(pred, gt), iou_loss(pred, gt));
}

// Double sum over levels and branches: sum_l lambda_l * sum_b L(map_{b,l}).
// Expects maps[branch][level] with exactly three branches of five levels.
inline Tensor multilevel_loss(const std::vector<std::vector<Tensor>>& maps,
                              const Tensor& gt, const LossWeights& weights) {
  require(maps.size() == 3, "multilevel_loss: expected 3 branches, got " +
                                std::to_string(maps.size()));
  for (const auto& branch : maps)
    require(branch.size() == 5, "multilevel_loss: expected 5 levels, got " +
                                    std::to_string(branch.size()));
  for (double l : weights.lambda)
    require(l >= 0.0, "multilevel_loss: negative level weight");
  Tensor total;
  for (std::size_t level = 0; level < 5; ++level) {
    Tensor level_sum;
    for (std::size_t branch = 0; branch < 3; ++branch) {
      Tensor l = map_loss(maps[branch][level], gt);
      level_sum = branch == 0 ? l : add(level_sum, l);
    }
    Tensor weighted = mul_scalar(level_sum, weights.lambda[level]);
    total = level == 0 ? weighted : add(total, weighted);
  }
  return total;
}

}  // namespace granatt
