#include "granatt/fusion.hpp"

#include <gtest/gtest.h>

#include <random>
#include <vector>

using namespace granatt;

namespace {

double urand(std::mt19937_64& rng, double lo, double hi) {
  double u = (rng() >> 11) * 0x1.0p-53;
  return lo + u * (hi - lo);
}

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0,
                     double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = urand(rng, lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

CdaBranchParams random_branch(std::mt19937_64& rng, std::size_t c) {
  std::size_t half = c / 2;
  return CdaBranchParams{random_tensor(rng, {half, c, 1, 1}),
                         random_tensor(rng, {half, 1, 1}),
                         random_tensor(rng, {half, half, 3, 3}),
                         random_tensor(rng, {half, 1, 1})};
}

CdaParams random_cda(std::mt19937_64& rng, std::size_t c) {
  std::size_t half = c / 2;
  std::size_t hidden = cda_mlp_hidden(half);
  CdaParams p;
  p.branch_x = random_branch(rng, c);
  p.branch_y = random_branch(rng, c);
  p.mlp_w1 = random_tensor(rng, {hidden, half});
  p.mlp_b1 = random_tensor(rng, {hidden});
  p.mlp_w2 = random_tensor(rng, {half, hidden});
  p.mlp_b2 = random_tensor(rng, {half});
  p.spatial_w = random_tensor(rng, {1, 2, 7, 7});
  p.spatial_b = random_tensor(rng, {1, 1, 1});
  p.out_w = random_tensor(rng, {half, c, 3, 3});
  p.out_b = random_tensor(rng, {half, 1, 1});
  return p;
}

EmiParams random_emi(std::mt19937_64& rng, std::size_t w) {
  return EmiParams{random_tensor(rng, {w, 3 * w, 3, 3}),
                   random_tensor(rng, {w, 1, 1}), random_tensor(rng, {3})};
}

double sigmoid_ref(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                  : std::exp(v) / (1.0 + std::exp(v));
}

}  // namespace

TEST(TransformFt, TwoToOneChannelHandComputed) {
  Tensor f = Tensor::from({1, 2, 2, 2},
                          {1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.5, -3.0});
  double a = 0.7, b = -0.4, c = 0.2, d = 1.3, e = -0.6;
  CdaBranchParams branch{
      Tensor::from({1, 2, 1, 1}, {a, b}), Tensor::from({1, 1, 1}, {c}),
      Tensor::from({1, 1, 3, 3}, {0, 0, 0, 0, d, 0, 0, 0, 0}),
      Tensor::from({1, 1, 1}, {e})};
  Tensor y = transform_ft(f, branch);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (std::size_t p = 0; p < 4; ++p) {
    double t = a * f.value(p) + b * f.value(4 + p) + c;
    EXPECT_NEAR(y.value(p), d * t + e, 1e-12);
  }
}

TEST(TransformFt, ZeroWeightsGiveZeroOutput) {
  std::mt19937_64 rng(70);
  Tensor f = random_tensor(rng, {1, 4, 3, 3});
  CdaBranchParams branch{Tensor::zeros({2, 4, 1, 1}), Tensor::zeros({2, 1, 1}),
                         Tensor::zeros({2, 2, 3, 3}), Tensor::zeros({2, 1, 1})};
  Tensor y = transform_ft(f, branch);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y.value(i), 0.0);
}

TEST(TransformFt, HalvesChannelsKeepsSpace) {
  std::mt19937_64 rng(71);
  Tensor f = random_tensor(rng, {2, 8, 16, 16});
  Tensor y = transform_ft(f, random_branch(rng, 8));
  EXPECT_EQ(y.shape(), (Shape{2, 4, 16, 16}));
}

TEST(TransformFt, RejectsOddChannels) {
  std::mt19937_64 rng(72);
  Tensor f = random_tensor(rng, {1, 3, 4, 4});
  EXPECT_THROW(transform_ft(f, random_branch(rng, 4)), std::invalid_argument);
}

TEST(ChannelAttention, ZeroInputZeroBiasGivesHalf) {
  std::mt19937_64 rng(73);
  CdaParams p = random_cda(rng, 8);
  p.mlp_b1 = Tensor::zeros({cda_mlp_hidden(4)});
  p.mlp_b2 = Tensor::zeros({4});
  Tensor f = Tensor::zeros({2, 4, 5, 5});
  Tensor mc = channel_attention(f, p);
  ASSERT_EQ(mc.shape(), (Shape{2, 4, 1, 1}));
  for (std::size_t i = 0; i < mc.size(); ++i)
    EXPECT_DOUBLE_EQ(mc.value(i), 0.5);
}

TEST(ChannelAttention, ConstantInputDoublesSharedMlp) {
  std::mt19937_64 rng(74);
  CdaParams p = random_cda(rng, 8);
  std::vector<double> per_channel = {0.3, -1.2, 0.8, 2.0};
  std::vector<double> fv(4 * 36);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 36; ++i) fv[c * 36 + i] = per_channel[c];
  Tensor f = Tensor::from({1, 4, 6, 6}, fv);
  Tensor mc = channel_attention(f, p);
  std::size_t hidden = cda_mlp_hidden(4);
  for (std::size_t o = 0; o < 4; ++o) {
    std::vector<double> h(hidden);
    for (std::size_t j = 0; j < hidden; ++j) {
      double acc = p.mlp_b1.value(j);
      for (std::size_t i = 0; i < 4; ++i)
        acc += p.mlp_w1.value(j * 4 + i) * per_channel[i];
      h[j] = std::max(0.0, acc);
    }
    double out = p.mlp_b2.value(o);
    for (std::size_t j = 0; j < hidden; ++j)
      out += p.mlp_w2.value(o * hidden + j) * h[j];
    EXPECT_NEAR(mc.value(o), sigmoid_ref(2.0 * out), 1e-12);
  }
}

TEST(ChannelAttention, MatchesCompositionalOracle) {
  std::mt19937_64 rng(75);
  CdaParams p = random_cda(rng, 8);
  Tensor f = random_tensor(rng, {2, 4, 5, 6});
  Tensor mc = channel_attention(f, p);
  std::size_t hidden = cda_mlp_hidden(4);
  for (std::size_t n = 0; n < 2; ++n) {
    std::vector<double> gap(4, 0.0), gmp(4, -1e300);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < 30; ++i) {
        double v = f.value((n * 4 + c) * 30 + i);
        gap[c] += v / 30.0;
        gmp[c] = std::max(gmp[c], v);
      }
    auto mlp = [&](const std::vector<double>& d) {
      std::vector<double> h(hidden), o(4);
      for (std::size_t j = 0; j < hidden; ++j) {
        double acc = p.mlp_b1.value(j);
        for (std::size_t i = 0; i < 4; ++i)
          acc += p.mlp_w1.value(j * 4 + i) * d[i];
        h[j] = std::max(0.0, acc);
      }
      for (std::size_t k = 0; k < 4; ++k) {
        double acc = p.mlp_b2.value(k);
        for (std::size_t j = 0; j < hidden; ++j)
          acc += p.mlp_w2.value(k * hidden + j) * h[j];
        o[k] = acc;
      }
      return o;
    };
    auto oa = mlp(gap);
    auto ob = mlp(gmp);
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_NEAR(mc.value(n * 4 + c), sigmoid_ref(oa[c] + ob[c]), 1e-12);
  }
}

TEST(SpatialAttention, ZeroInputZeroBiasGivesHalfMap) {
  std::mt19937_64 rng(76);
  CdaParams p = random_cda(rng, 8);
  p.spatial_b = Tensor::zeros({1, 1, 1});
  Tensor f = Tensor::zeros({1, 4, 6, 6});
  Tensor ms = spatial_attention(f, p);
  ASSERT_EQ(ms.shape(), (Shape{1, 1, 6, 6}));
  for (std::size_t i = 0; i < ms.size(); ++i)
    EXPECT_DOUBLE_EQ(ms.value(i), 0.5);
}

TEST(SpatialAttention, SpatiallyConstantInputHasConstantInterior) {
  std::mt19937_64 rng(77);
  CdaParams p = random_cda(rng, 8);
  std::vector<double> fv(4 * 81);
  std::vector<double> per_channel = {1.0, -0.5, 0.25, 2.0};
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 81; ++i) fv[c * 81 + i] = per_channel[c];
  Tensor f = Tensor::from({1, 4, 9, 9}, fv);
  Tensor ms = spatial_attention(f, p);
  double center = ms.value(4 * 9 + 4);
  for (std::size_t y = 3; y <= 5; ++y)
    for (std::size_t x = 3; x <= 5; ++x)
      EXPECT_DOUBLE_EQ(ms.value(y * 9 + x), center);
}

TEST(SpatialAttention, MatchesCompositionalOracle) {
  std::mt19937_64 rng(78);
  CdaParams p = random_cda(rng, 8);
  Tensor f = random_tensor(rng, {1, 4, 8, 7});
  Tensor ms = spatial_attention(f, p);
  std::size_t h = 8, w = 7;
  std::vector<double> cap(h * w, 0.0), cmp(h * w, -1e300);
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      double v = f.value(c * h * w + i);
      cap[i] += v / 4.0;
      cmp[i] = std::max(cmp[i], v);
    }
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = p.spatial_b.value(0);
      for (std::size_t r = 0; r < 7; ++r)
        for (std::size_t s = 0; s < 7; ++s) {
          long iy = static_cast<long>(y + r) - 3;
          long ix = static_cast<long>(x + s) - 3;
          if (iy < 0 || iy >= static_cast<long>(h) || ix < 0 ||
              ix >= static_cast<long>(w))
            continue;
          acc += p.spatial_w.value(r * 7 + s) * cap[iy * w + ix] +
                 p.spatial_w.value(49 + r * 7 + s) * cmp[iy * w + ix];
        }
      EXPECT_NEAR(ms.value(y * w + x), sigmoid_ref(acc), 1e-12);
    }
}

TEST(CdaFuse, UnitAttentionLeavesTransformUnchanged) {
  std::mt19937_64 rng(79);
  CdaParams p = random_cda(rng, 8);
  Tensor fx = random_tensor(rng, {1, 8, 6, 6});
  Tensor fpx = transform_ft(fx, p.branch_x);
  CdaAttention unit{Tensor::full({1, 4, 1, 1}, 1.0),
                    Tensor::full({1, 1, 6, 6}, 1.0)};
  Tensor enh = cda_enhance(fpx, unit);
  for (std::size_t i = 0; i < fpx.size(); ++i)
    EXPECT_EQ(enh.value(i), fpx.value(i));
}

TEST(CdaFuse, SwapExchangesEnhancedBranches) {
  std::mt19937_64 rng(80);
  CdaParams p = random_cda(rng, 8);
  Tensor fx = random_tensor(rng, {1, 8, 5, 5});
  Tensor fy = random_tensor(rng, {1, 8, 5, 5});
  Tensor fpx = transform_ft(fx, p.branch_x);
  Tensor fpy = transform_ft(fy, p.branch_y);
  Tensor ex = cda_enhance(fpx, cda_attention(fpy, p));
  Tensor ey = cda_enhance(fpy, cda_attention(fpx, p));
  Tensor ex_sw = cda_enhance(fpy, cda_attention(fpx, p));
  Tensor ey_sw = cda_enhance(fpx, cda_attention(fpy, p));
  for (std::size_t i = 0; i < ex.size(); ++i) {
    EXPECT_EQ(ex.value(i), ey_sw.value(i));
    EXPECT_EQ(ey.value(i), ex_sw.value(i));
  }
}

TEST(CdaFuse, MatchesCompositionalOracle) {
  std::mt19937_64 rng(81);
  CdaParams p = random_cda(rng, 6);
  Tensor fx = random_tensor(rng, {2, 6, 5, 5});
  Tensor fy = random_tensor(rng, {2, 6, 5, 5});
  Tensor out = cda_fuse(fx, fy, p);
  ASSERT_EQ(out.shape(), (Shape{2, 3, 5, 5}));

  auto transform = [&](const Tensor& f, const CdaBranchParams& b) {
    return add(conv2d(add(conv2d(f, b.conv1x1_w), b.conv1x1_b), b.conv3x3_w, 1,
                      1),
               b.conv3x3_b);
  };
  auto attend = [&](const Tensor& fp) {
    auto mlp = [&](const Tensor& d) {
      return linear(relu(linear(d, p.mlp_w1, p.mlp_b1)), p.mlp_w2, p.mlp_b2);
    };
    Tensor mc = sigmoid(
        add(mlp(pool(fp, PoolMode::GAP)), mlp(pool(fp, PoolMode::GMP))));
    Tensor ms = sigmoid(add(
        conv2d(concat_channels({pool(fp, PoolMode::CAP), pool(fp, PoolMode::CMP)}),
               p.spatial_w, 1, 3),
        p.spatial_b));
    return std::pair<Tensor, Tensor>(mc, ms);
  };
  Tensor fpx = transform(fx, p.branch_x);
  Tensor fpy = transform(fy, p.branch_y);
  auto [mcy, msy] = attend(fpy);
  auto [mcx, msx] = attend(fpx);
  Tensor ex = mul(mul(msy, mcy), fpx);
  Tensor ey = mul(mul(msx, mcx), fpy);
  Tensor ref = add(conv2d(concat_channels({ex, ey}), p.out_w, 1, 1), p.out_b);
  for (std::size_t i = 0; i < out.size(); ++i)
    EXPECT_NEAR(out.value(i), ref.value(i), 1e-12);
}

TEST(CdaFuse, OutputHalvesChannelsAcrossLevels) {
  std::mt19937_64 rng(82);
  std::vector<std::array<std::size_t, 3>> configs = {
      {16, 11, 11}, {24, 6, 6}, {32, 5, 5}, {48, 4, 4}, {64, 3, 3}};
  for (auto [c, h, w] : configs) {
    CdaParams p = random_cda(rng, c);
    Tensor fx = random_tensor(rng, {1, c, h, w});
    Tensor fy = random_tensor(rng, {1, c, h, w});
    Tensor out = cda_fuse(fx, fy, p);
    EXPECT_EQ(out.shape(), (Shape{1, c / 2, h, w}));
  }
}

TEST(CdaFuse, RejectsMismatchedInputs) {
  std::mt19937_64 rng(83);
  CdaParams p = random_cda(rng, 8);
  Tensor fx = random_tensor(rng, {1, 8, 5, 5});
  Tensor fy = random_tensor(rng, {1, 8, 4, 5});
  EXPECT_THROW(cda_fuse(fx, fy, p), std::invalid_argument);
  Tensor f6 = random_tensor(rng, {1, 6, 5, 5});
  EXPECT_THROW(cda_fuse(f6, f6, p), std::invalid_argument);
}

TEST(CdaFuse, OtherBranchActsOnlyThroughAttention) {
  std::mt19937_64 rng(84);
  CdaParams p = random_cda(rng, 8);
  Tensor fx = random_tensor(rng, {1, 8, 5, 5});
  Tensor fy1 = random_tensor(rng, {1, 8, 5, 5});
  Tensor fy2 = random_tensor(rng, {1, 8, 5, 5});
  Tensor fpx1 = transform_ft(fx, p.branch_x);
  Tensor fpx2 = transform_ft(fx, p.branch_x);
  for (std::size_t i = 0; i < fpx1.size(); ++i)
    ASSERT_EQ(fpx1.value(i), fpx2.value(i));

  // The transform of x never reads y, so y gets no gradient from it...
  Tensor fy_leaf = Tensor::from(fy1.shape(), fy1.values(), true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum(transform_ft(fx, p.branch_x));
  }
  backward(tape, loss);
  EXPECT_FALSE(fy_leaf.has_grad());

  // ...while the fused output still depends on y through its attention maps.
  Tape tape2;
  Tensor loss2;
  {
    TapeScope scope(tape2);
    loss2 = sum(cda_enhance(transform_ft(fx, p.branch_x),
                            cda_attention(transform_ft(fy_leaf, p.branch_y), p)));
  }
  backward(tape2, loss2);
  ASSERT_TRUE(fy_leaf.has_grad());
  double mag = 0.0;
  for (double g : fy_leaf.grad()) mag += std::abs(g);
  EXPECT_GT(mag, 0.0);
}

TEST(CdaFuse, GradientCheckOnInputsAndParameters) {
  std::mt19937_64 rng(85);
  CdaParams base = random_cda(rng, 4);
  Tensor fx = random_tensor(rng, {1, 4, 5, 5});
  Tensor fy = random_tensor(rng, {1, 4, 5, 5});
  std::vector<Tensor> inputs = {fx,
                                fy,
                                base.branch_x.conv1x1_w,
                                base.branch_x.conv1x1_b,
                                base.branch_x.conv3x3_w,
                                base.branch_x.conv3x3_b,
                                base.branch_y.conv1x1_w,
                                base.branch_y.conv1x1_b,
                                base.branch_y.conv3x3_w,
                                base.branch_y.conv3x3_b,
                                base.mlp_w1,
                                base.mlp_b1,
                                base.mlp_w2,
                                base.mlp_b2,
                                base.spatial_w,
                                base.spatial_b,
                                base.out_w,
                                base.out_b};
  double err = grad_check(
      [](const std::vector<Tensor>& in) {
        CdaParams p;
        p.branch_x = {in[2], in[3], in[4], in[5]};
        p.branch_y = {in[6], in[7], in[8], in[9]};
        p.mlp_w1 = in[10];
        p.mlp_b1 = in[11];
        p.mlp_w2 = in[12];
        p.mlp_b2 = in[13];
        p.spatial_w = in[14];
        p.spatial_b = in[15];
        p.out_w = in[16];
        p.out_b = in[17];
        Tensor out = cda_fuse(in[0], in[1], p);
        return sum(mul(out, out));
      },
      inputs);
  EXPECT_LT(err, 1e-4);
}

TEST(EncoderLevelMerge, FirstLevelPassesThrough) {
  std::mt19937_64 rng(86);
  Tensor fused = random_tensor(rng, {1, 8, 44, 44});
  Tensor out = encoder_level_merge(fused);
  for (std::size_t i = 0; i < fused.size(); ++i)
    EXPECT_EQ(out.value(i), fused.value(i));
}

TEST(EncoderLevelMerge, IdentityConvWithZeroPreviousKeepsFused) {
  std::mt19937_64 rng(87);
  Tensor fused = random_tensor(rng, {1, 3, 4, 4});
  Tensor previous = Tensor::zeros({1, 2, 8, 8});
  MergeParams p{Tensor::zeros({3, 5, 3, 3}), Tensor::zeros({3, 1, 1})};
  for (std::size_t o = 0; o < 3; ++o) {
    std::vector<double>& w = p.conv_w.mutable_values();
    w[((o * 5 + o) * 3 + 1) * 3 + 1] = 1.0;
  }
  Tensor out = encoder_level_merge(fused, &previous, &p);
  for (std::size_t i = 0; i < fused.size(); ++i)
    EXPECT_EQ(out.value(i), fused.value(i));
}

TEST(EncoderLevelMerge, FiveLevelShapeChain) {
  std::mt19937_64 rng(88);
  std::vector<std::size_t> widths = {2, 3, 4, 6, 8};
  std::vector<std::size_t> sizes = {44, 22, 11, 6, 3};
  Tensor prev;
  for (std::size_t l = 0; l < 5; ++l) {
    Tensor fused = random_tensor(rng, {1, widths[l], sizes[l], sizes[l]});
    Tensor out;
    if (l == 0) {
      out = encoder_level_merge(fused);
    } else {
      MergeParams p{
          random_tensor(rng, {widths[l], widths[l] + widths[l - 1], 3, 3}),
          random_tensor(rng, {widths[l], 1, 1})};
      out = encoder_level_merge(fused, &prev, &p);
    }
    ASSERT_EQ(out.shape(), (Shape{1, widths[l], sizes[l], sizes[l]}));
    prev = out;
  }
}

TEST(EncoderLevelMerge, RejectsUnalignableSizes) {
  std::mt19937_64 rng(89);
  Tensor fused = random_tensor(rng, {1, 2, 5, 5});
  Tensor previous = random_tensor(rng, {1, 2, 12, 12});
  MergeParams p{random_tensor(rng, {2, 4, 3, 3}),
                random_tensor(rng, {2, 1, 1})};
  EXPECT_THROW(encoder_level_merge(fused, &previous, &p),
               std::invalid_argument);
}

TEST(EmiFuse, AllZeroInputsAndWeightsGiveZero) {
  Tensor z = Tensor::zeros({1, 2, 4, 4});
  EmiParams p{Tensor::zeros({2, 6, 3, 3}), Tensor::zeros({2, 1, 1}),
              Tensor::zeros({3})};
  Tensor out = emi_fuse(z, z, z, p);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out.value(i), 0.0);
}

TEST(EmiFuse, SaturatedPassThroughDoublesResidual) {
  Tensor z = Tensor::zeros({1, 2, 3, 3});
  Tensor fh = Tensor::full({1, 2, 3, 3}, 1.0);
  EmiParams p{Tensor::zeros({2, 6, 3, 3}), Tensor::zeros({2, 1, 1}),
              Tensor::from({3}, {0.0, 1e4, 0.0})};
  for (std::size_t o = 0; o < 2; ++o) {
    std::vector<double>& w = p.conv_w.mutable_values();
    w[((o * 6 + 4 + o) * 3 + 1) * 3 + 1] = 1.0;
  }
  Tensor out = emi_fuse(z, z, fh, p);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out.value(i), 2.0);

  // Central-difference slope at one pixel: pass-through plus the residual.
  double h = 1e-4;
  auto probe = [&](double eps) {
    std::vector<double> v = fh.values();
    v[4] += eps;
    Tensor fhp = Tensor::from(fh.shape(), v);
    return emi_fuse(z, z, fhp, p).value(4);
  };
  double slope = (probe(h) - probe(-h)) / (2.0 * h);
  EXPECT_NEAR(slope, 2.0, 1e-6);
}

TEST(EmiFuse, ZeroWeightsSlopeIsPureResidual) {
  std::mt19937_64 rng(90);
  Tensor fr = random_tensor(rng, {1, 2, 3, 3});
  Tensor fd = random_tensor(rng, {1, 2, 3, 3});
  Tensor fh = random_tensor(rng, {1, 2, 3, 3});
  EmiParams p{Tensor::zeros({2, 6, 3, 3}), Tensor::zeros({2, 1, 1}),
              Tensor::zeros({3})};
  double h = 1e-4;
  auto probe = [&](double eps) {
    std::vector<double> v = fh.values();
    v[7] += eps;
    return emi_fuse(fr, fd, Tensor::from(fh.shape(), v), p).value(7);
  };
  double slope = (probe(h) - probe(-h)) / (2.0 * h);
  EXPECT_NEAR(slope, 1.0, 1e-10);
}

TEST(EmiFuse, MatchesCompositionalOracle) {
  std::mt19937_64 rng(91);
  Tensor fr = random_tensor(rng, {2, 3, 5, 5});
  Tensor fd = random_tensor(rng, {2, 3, 5, 5});
  Tensor fh = random_tensor(rng, {2, 3, 5, 5});
  EmiParams p{random_tensor(rng, {3, 9, 3, 3}), random_tensor(rng, {3, 1, 1}),
              random_tensor(rng, {3})};
  Tensor out = emi_fuse(fr, fd, fh, p);
  Tensor t = add(conv2d(concat_channels({fr, fd, fh}), p.conv_w, 1, 1), p.conv_b);
  Tensor att = sigmoid(conv1d_channels(pool(t, PoolMode::GAP), p.eca_kernel));
  Tensor ref = add(mul(att, t), fh);
  ASSERT_EQ(out.shape(), fh.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    EXPECT_NEAR(out.value(i), ref.value(i), 1e-12);
}

TEST(EmiFuse, RejectsMismatchedInputs) {
  std::mt19937_64 rng(92);
  Tensor a = random_tensor(rng, {1, 2, 4, 4});
  Tensor b = random_tensor(rng, {1, 2, 4, 3});
  EmiParams p = random_emi(rng, 2);
  EXPECT_THROW(emi_fuse(a, b, a, p), std::invalid_argument);
  EXPECT_THROW(emi_fuse(a, a, b, p), std::invalid_argument);
}

TEST(EmiFuse, GradientCheckOnInputsAndParameters) {
  std::mt19937_64 rng(93);
  Tensor fr = random_tensor(rng, {1, 2, 4, 4});
  Tensor fd = random_tensor(rng, {1, 2, 4, 4});
  Tensor fh = random_tensor(rng, {1, 2, 4, 4});
  EmiParams base = random_emi(rng, 2);
  double err = grad_check(
      [](const std::vector<Tensor>& in) {
        EmiParams p{in[3], in[4], in[5]};
        Tensor out = emi_fuse(in[0], in[1], in[2], p);
        return sum(mul(out, out));
      },
      {fr, fd, fh, base.conv_w, base.conv_b, base.eca_kernel});
  EXPECT_LT(err, 1e-4);
}
