#pragma once

// Registered central-difference gradient checks over the differentiable
// operations, plus an end-to-end sweep through the full network objective.
// Scope names: all, tensor, gba, fusion, objective, network.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "granatt/fusion.hpp"
#include "granatt/gba.hpp"
#include "granatt/granularity.hpp"
#include "granatt/network.hpp"
#include "granatt/objective.hpp"
#include "granatt/tensor.hpp"

namespace granatt {

struct GradCheckResult {
  std::string name;
  double tolerance = 0.0;
  double max_rel_err = 0.0;
  bool passed() const { return max_rel_err < tolerance; }
};

namespace verify_detail {

inline Tensor rand_tensor(std::mt19937_64& rng, Shape shape, double lo,
                          double hi) {
  std::vector<double> v(numel(shape));
  for (double& x : v) {
    double u = (rng() >> 11) * 0x1.0p-53;
    x = lo + u * (hi - lo);
  }
  return Tensor::from(std::move(shape), std::move(v));
}

// Mixed-sign values kept away from zero so kinked ops (relu) stay smooth
// around every probe.
inline Tensor rand_signed(std::mt19937_64& rng, Shape shape) {
  Tensor t = rand_tensor(rng, std::move(shape), 0.05, 1.0);
  std::vector<double>& v = t.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (i % 2 == 0) v[i] = -v[i];
  return t;
}

inline double guarded_rel(double a, double n) {
  return std::abs(a - n) / std::max(1e-6, std::abs(a) + std::abs(n));
}

inline double op_err(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& inputs) {
  return grad_check(
      [&](const std::vector<Tensor>& in) { return sum(f(in)); }, inputs);
}

inline CdaParams rand_cda(std::mt19937_64& rng, std::size_t c) {
  std::size_t half = c / 2, hidden = cda_mlp_hidden(half);
  auto t = [&](Shape s) { return rand_signed(rng, std::move(s)); };
  CdaParams p;
  p.branch_x = {t({half, c, 1, 1}), t({half, 1, 1}), t({half, half, 3, 3}),
                t({half, 1, 1})};
  p.branch_y = {t({half, c, 1, 1}), t({half, 1, 1}), t({half, half, 3, 3}),
                t({half, 1, 1})};
  p.mlp_w1 = t({hidden, half});
  p.mlp_b1 = t({hidden});
  p.mlp_w2 = t({half, hidden});
  p.mlp_b2 = t({half});
  p.spatial_w = t({1, 2, 7, 7});
  p.spatial_b = t({1, 1, 1});
  p.out_w = t({half, c, 3, 3});
  p.out_b = t({half, 1, 1});
  return p;
}

inline Tensor half_mask(std::size_t h, std::size_t w) {
  std::vector<double> m(h * w, 0.0);
  for (std::size_t i = 0; i < h * w / 2; ++i) m[i] = 1.0;
  return Tensor::from({h, w}, std::move(m));
}

// Manual check so a fault can be planted into the analytic gradient; the
// fault path exists purely to prove the failure reporting works end to end.
inline double bce_manual_err(std::uint64_t seed, bool plant_fault) {
  std::mt19937_64 rng(seed);
  Tensor pred = rand_tensor(rng, {1, 1, 6, 6}, 0.05, 0.95);
  pred.set_requires_grad(true);
  std::vector<double> gv(36);
  for (double& g : gv) g = (rng() & 1) ? 1.0 : 0.0;
  Tensor gt = Tensor::from({1, 1, 6, 6}, std::move(gv));

  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = bce_loss(pred, gt);
  }
  backward(tape, loss);
  std::vector<double> analytic = pred.grad();
  if (plant_fault) analytic[0] *= 1.5;

  const double eps = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double base = pred.value(i);
    pred.mutable_values()[i] = base + eps;
    double up = bce_loss(pred, gt).value(0);
    pred.mutable_values()[i] = base - eps;
    double down = bce_loss(pred, gt).value(0);
    pred.mutable_values()[i] = base;
    worst = std::max(worst, guarded_rel(analytic[i], (up - down) / (2 * eps)));
  }
  return worst;
}

// One reverse sweep through the full network objective against central
// differences on a random subsample of parameter entries.
inline double network_subsample_err(std::uint64_t seed) {
  NetworkConfig cfg;
  cfg.height = 88;
  cfg.width = 88;
  cfg.widths = {4, 6, 8, 12, 16};
  cfg.reduced = 8;
  cfg.seed = seed;
  Network net = build_network(cfg);

  std::mt19937_64 rng(seed + 1);
  Tensor rgb = rand_tensor(rng, {3, cfg.height, cfg.width}, 0.0, 1.0);
  Tensor depth = rand_tensor(rng, {1, cfg.height, cfg.width}, 0.0, 1.0);
  DepthMap dm = make_depth_map(cfg.height, cfg.width, depth.values());
  GranularityMasks masks =
      generate_masks(dm, multi_otsu(build_histogram(dm), 2));
  std::vector<double> gv(cfg.height * cfg.width);
  for (double& g : gv) g = (rng() & 1) ? 1.0 : 0.0;
  Tensor gt = Tensor::from({1, 1, cfg.height, cfg.width}, std::move(gv));

  auto loss_value = [&]() {
    ForwardOutputs out = network_forward(net, rgb, depth, masks);
    return multilevel_loss(out.maps, gt, LossWeights{}).value(0);
  };
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    ForwardOutputs out = network_forward(net, rgb, depth, masks);
    loss = multilevel_loss(out.maps, gt, LossWeights{});
  }
  backward(tape, loss);

  const double eps = 1e-5;
  double worst = 0.0;
  for (int pick = 0; pick < 32; ++pick) {
    Tensor& t = net.params[rng() % net.params.size()].second;
    std::size_t idx = rng() % t.size();
    double analytic = t.has_grad() ? t.grad()[idx] : 0.0;
    double base = t.value(idx);
    t.mutable_values()[idx] = base + eps;
    double up = loss_value();
    t.mutable_values()[idx] = base - eps;
    double down = loss_value();
    t.mutable_values()[idx] = base;
    worst = std::max(worst, guarded_rel(analytic, (up - down) / (2 * eps)));
  }
  return worst;
}

}  // namespace verify_detail

// Runs the registered checks for one scope (or "all"). Unknown scopes yield
// an empty result list. plant_fault corrupts one analytic gradient so the
// reporting path can be exercised.
inline std::vector<GradCheckResult> run_gradient_checks(
    const std::string& scope, std::uint64_t seed, bool plant_fault = false) {
  using namespace verify_detail;
  std::vector<GradCheckResult> results;
  auto want = [&](const char* module) {
    return scope == "all" || scope == module;
  };
  auto mk = [&](std::uint64_t salt) { return std::mt19937_64(seed ^ salt); };
  auto record = [&](const std::string& name, double tol, double err) {
    results.push_back({name, tol, err});
  };

  if (want("tensor")) {
    {
      auto rng = mk(1);
      record("tensor/add-broadcast", 1e-4,
             op_err([](const std::vector<Tensor>& in) { return add(in[0], in[1]); },
                    {rand_signed(rng, {2, 3, 4, 4}), rand_signed(rng, {3, 1, 1})}));
    }
    {
      auto rng = mk(2);
      record("tensor/mul", 1e-4,
             op_err([](const std::vector<Tensor>& in) { return mul(in[0], in[1]); },
                    {rand_signed(rng, {2, 3, 4, 4}),
                     rand_signed(rng, {2, 3, 4, 4})}));
    }
    {
      auto rng = mk(3);
      record("tensor/conv2d", 1e-4,
             op_err(
                 [](const std::vector<Tensor>& in) {
                   return conv2d(in[0], in[1], 2, 1);
                 },
                 {rand_signed(rng, {1, 3, 6, 6}), rand_signed(rng, {4, 3, 3, 3})}));
    }
    {
      auto rng = mk(4);
      record("tensor/conv1d-channels", 1e-4,
             op_err(
                 [](const std::vector<Tensor>& in) {
                   return conv1d_channels(in[0], in[1]);
                 },
                 {rand_signed(rng, {6}), rand_signed(rng, {3})}));
    }
    {
      auto rng = mk(5);
      record("tensor/linear", 1e-4,
             op_err(
                 [](const std::vector<Tensor>& in) {
                   return linear(in[0], in[1], in[2]);
                 },
                 {rand_signed(rng, {5}), rand_signed(rng, {3, 5}),
                  rand_signed(rng, {3})}));
    }
    {
      auto rng = mk(6);
      record("tensor/sigmoid", 1e-4,
             op_err([](const std::vector<Tensor>& in) { return sigmoid(in[0]); },
                    {rand_signed(rng, {2, 3, 4, 4})}));
    }
    {
      auto rng = mk(7);
      record("tensor/relu", 1e-4,
             op_err([](const std::vector<Tensor>& in) { return relu(in[0]); },
                    {rand_signed(rng, {2, 3, 4, 4})}));
    }
    {
      auto rng = mk(8);
      record("tensor/upsample-bilinear", 1e-4,
             op_err(
                 [](const std::vector<Tensor>& in) {
                   return upsample_bilinear(in[0], 5, 7);
                 },
                 {rand_signed(rng, {1, 2, 3, 3})}));
    }
    {
      auto rng = mk(9);
      record("tensor/pool-gap", 1e-4,
             op_err(
                 [](const std::vector<Tensor>& in) {
                   return pool(in[0], PoolMode::GAP);
                 },
                 {rand_signed(rng, {2, 3, 4, 4})}));
    }
  }
  if (want("gba")) {
    {
      auto rng = mk(10);
      record("gba/global-eca", 1e-4,
             op_err(
                 [](const std::vector<Tensor>& in) {
                   return global_eca(in[0], in[1]);
                 },
                 {rand_signed(rng, {1, 4, 5, 5}), rand_signed(rng, {3})}));
    }
    {
      auto rng = mk(11);
      Tensor mask = half_mask(5, 5);
      record("gba/local-eca", 1e-4,
             op_err(
                 [mask](const std::vector<Tensor>& in) {
                   return local_eca(mul(in[0], mask), mask, in[1]);
                 },
                 {rand_signed(rng, {1, 4, 5, 5}), rand_signed(rng, {3})}));
    }
    {
      auto rng = mk(12);
      Tensor m0 = half_mask(6, 6);
      std::vector<double> rest(36, 1.0);
      for (std::size_t i = 0; i < 36; ++i) rest[i] -= m0.value(i);
      Tensor m1 = Tensor::from({6, 6}, std::move(rest));
      std::vector<Tensor> masks = {m0, m1};
      record("gba/forward", 1e-4,
             op_err(
                 [masks](const std::vector<Tensor>& in) {
                   return gba_forward(in[0], masks,
                                      make_gba_params({in[1], in[2]}, true));
                 },
                 {rand_signed(rng, {1, 4, 6, 6}), rand_signed(rng, {3}),
                  rand_signed(rng, {3})}));
    }
  }
  if (want("fusion")) {
    {
      auto rng = mk(13);
      CdaParams p = rand_cda(rng, 4);
      record("fusion/cda", 1e-4,
             op_err(
                 [p](const std::vector<Tensor>& in) {
                   return cda_fuse(in[0], in[1], p);
                 },
                 {rand_signed(rng, {1, 4, 6, 6}), rand_signed(rng, {1, 4, 6, 6})}));
    }
    {
      auto rng = mk(14);
      MergeParams mp{rand_signed(rng, {2, 4, 3, 3}), rand_signed(rng, {2, 1, 1})};
      record("fusion/encoder-merge", 1e-4,
             op_err(
                 [mp](const std::vector<Tensor>& in) {
                   return encoder_level_merge(in[0], &in[1], &mp);
                 },
                 {rand_signed(rng, {1, 2, 4, 4}), rand_signed(rng, {1, 2, 8, 8})}));
    }
    {
      auto rng = mk(15);
      EmiParams ep{rand_signed(rng, {4, 12, 3, 3}), rand_signed(rng, {4, 1, 1}),
                   rand_signed(rng, {3})};
      record("fusion/emi", 1e-4,
             op_err(
                 [ep](const std::vector<Tensor>& in) {
                   return emi_fuse(in[0], in[1], in[2], ep);
                 },
                 {rand_signed(rng, {1, 4, 5, 5}), rand_signed(rng, {1, 4, 5, 5}),
                  rand_signed(rng, {1, 4, 5, 5})}));
    }
  }
  if (want("objective")) {
    record("objective/bce", 1e-4, bce_manual_err(seed ^ 16, plant_fault));
    {
      auto rng = mk(17);
      std::vector<double> gv(36);
      for (double& g : gv) g = (rng() & 1) ? 1.0 : 0.0;
      Tensor gt = Tensor::from({1, 1, 6, 6}, std::move(gv));
      record("objective/iou", 1e-4,
             op_err(
                 [gt](const std::vector<Tensor>& in) {
                   return iou_loss(in[0], gt);
                 },
                 {rand_tensor(rng, {1, 1, 6, 6}, 0.05, 0.95)}));
    }
    {
      auto rng = mk(18);
      std::vector<double> gv(9);
      for (double& g : gv) g = (rng() & 1) ? 1.0 : 0.0;
      Tensor gt = Tensor::from({1, 1, 3, 3}, std::move(gv));
      std::vector<Tensor> flat;
      for (int i = 0; i < 15; ++i)
        flat.push_back(rand_tensor(rng, {1, 1, 3, 3}, 0.05, 0.95));
      record("objective/multilevel", 1e-4,
             op_err(
                 [gt](const std::vector<Tensor>& in) {
                   std::vector<std::vector<Tensor>> maps(3);
                   for (int b = 0; b < 3; ++b)
                     for (int l = 0; l < 5; ++l)
                       maps[b].push_back(in[b * 5 + l]);
                   return multilevel_loss(maps, gt, LossWeights{});
                 },
                 flat));
    }
  }
  if (want("network"))
    record("network/end-to-end", 1e-3, network_subsample_err(seed));
  return results;
}

}  // namespace granatt
