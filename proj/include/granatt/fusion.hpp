#pragma once

// Cross dual-attention fusion of two feature branches, encoder level
// chaining, and the attention-gated three-input decoder fusion.

#include <vector>

#include "granatt/gba.hpp"
#include "granatt/tensor.hpp"

namespace granatt {

inline void require_shape(const Tensor& t, const Shape& s, const char* what) {
  require(t.defined(), std::string(what) + ": tensor is undefined");
  require(t.shape() == s, std::string(what) + ": expected shape " +
                              shape_str(s) + ", got " + shape_str(t.shape()));
}

constexpr std::size_t kCdaMlpReduction = 16;

inline std::size_t cda_mlp_hidden(std::size_t half_channels) {
  return std::max<std::size_t>(1, half_channels / kCdaMlpReduction);
}

struct CdaBranchParams {
  Tensor conv1x1_w;  // (C/2, C, 1, 1)
  Tensor conv1x1_b;  // (C/2, 1, 1)
  Tensor conv3x3_w;  // (C/2, C/2, 3, 3)
  Tensor conv3x3_b;  // (C/2, 1, 1)
};

struct CdaParams {
  CdaBranchParams branch_x, branch_y;
  Tensor mlp_w1, mlp_b1;      // (hidden, C/2), (hidden); shared across paths
  Tensor mlp_w2, mlp_b2;      // (C/2, hidden), (C/2)
  Tensor spatial_w, spatial_b;  // (1, 2, 7, 7), (1, 1, 1)
  Tensor out_w, out_b;          // (C/2, C, 3, 3), (C/2, 1, 1)
};

inline void validate_cda_branch(const CdaBranchParams& b, std::size_t c,
                                std::size_t half, const char* name) {
  require_shape(b.conv1x1_w, {half, c, 1, 1},
                (std::string(name) + " 1x1 weight").c_str());
  require_shape(b.conv1x1_b, {half, 1, 1},
                (std::string(name) + " 1x1 bias").c_str());
  require_shape(b.conv3x3_w, {half, half, 3, 3},
                (std::string(name) + " 3x3 weight").c_str());
  require_shape(b.conv3x3_b, {half, 1, 1},
                (std::string(name) + " 3x3 bias").c_str());
}

// Returns the input channel count the parameter set serves.
inline std::size_t validate_cda_params(const CdaParams& p) {
  require(p.branch_x.conv1x1_w.defined() &&
              p.branch_x.conv1x1_w.rank() == 4,
          "cda params: branch-x 1x1 weight missing");
  std::size_t half = p.branch_x.conv1x1_w.dim(0);
  std::size_t c = p.branch_x.conv1x1_w.dim(1);
  require(c == 2 * half, "cda params: 1x1 stage must halve the channel count");
  validate_cda_branch(p.branch_x, c, half, "branch-x");
  validate_cda_branch(p.branch_y, c, half, "branch-y");
  std::size_t hidden = cda_mlp_hidden(half);
  require_shape(p.mlp_w1, {hidden, half}, "mlp first weight");
  require_shape(p.mlp_b1, {hidden}, "mlp first bias");
  require_shape(p.mlp_w2, {half, hidden}, "mlp second weight");
  require_shape(p.mlp_b2, {half}, "mlp second bias");
  require_shape(p.spatial_w, {1, 2, 7, 7}, "spatial weight");
  require_shape(p.spatial_b, {1, 1, 1}, "spatial bias");
  require_shape(p.out_w, {half, c, 3, 3}, "output weight");
  require_shape(p.out_b, {half, 1, 1}, "output bias");
  return c;
}

inline Tensor transform_ft(const Tensor& f, const CdaBranchParams& branch) {
  require(f.rank() == 4, "transform_ft: input must be rank-4 NCHW, got " +
                             shape_str(f.shape()));
  require(f.dim(1) % 2 == 0, "transform_ft: channel count " +
                                 std::to_string(f.dim(1)) + " must be even");
  std::size_t half = f.dim(1) / 2;
  validate_cda_branch(branch, f.dim(1), half, "branch");
  Tensor t = add(conv2d(f, branch.conv1x1_w), branch.conv1x1_b);
  return add(conv2d(t, branch.conv3x3_w, 1, 1), branch.conv3x3_b);
}

// sigma(MLP(GAP) + MLP(GMP)) with one MLP shared between the two paths.
inline Tensor channel_attention(const Tensor& f_prime, const CdaParams& p) {
  auto mlp = [&](const Tensor& d) {
    return linear(relu(linear(d, p.mlp_w1, p.mlp_b1)), p.mlp_w2, p.mlp_b2);
  };
  return sigmoid(
      add(mlp(pool(f_prime, PoolMode::GAP)), mlp(pool(f_prime, PoolMode::GMP))));
}

// sigma(conv7x7(concat(CAP, CMP))), padding 3 keeps the spatial size.
inline Tensor spatial_attention(const Tensor& f_prime, const CdaParams& p) {
  Tensor stacked =
      concat_channels({pool(f_prime, PoolMode::CAP), pool(f_prime, PoolMode::CMP)});
  return sigmoid(add(conv2d(stacked, p.spatial_w, 1, 3), p.spatial_b));
}

struct CdaAttention {
  Tensor channel;  // (N, C/2, 1, 1)
  Tensor spatial;  // (N, 1, H, W)
};

inline CdaAttention cda_attention(const Tensor& f_prime, const CdaParams& p) {
  return CdaAttention{channel_attention(f_prime, p), spatial_attention(f_prime, p)};
}

inline Tensor cda_enhance(const Tensor& f_prime, const CdaAttention& cross) {
  return mul(mul(cross.spatial, cross.channel), f_prime);
}

inline Tensor cda_output(const Tensor& enh_x, const Tensor& enh_y,
                         const CdaParams& p) {
  return add(conv2d(concat_channels({enh_x, enh_y}), p.out_w, 1, 1), p.out_b);
}

// Each branch is transformed to half width, enhanced by the other branch's
// channel and spatial attention, then the pair is concatenated and fused back
// to half width.
inline Tensor cda_fuse(const Tensor& f_x, const Tensor& f_y,
                       const CdaParams& p) {
  require(f_x.defined() && f_y.defined(), "cda_fuse: undefined input");
  require(f_x.shape() == f_y.shape(),
          "cda_fuse: branch shapes differ: " + shape_str(f_x.shape()) +
              " vs " + shape_str(f_y.shape()));
  std::size_t c = validate_cda_params(p);
  require(f_x.rank() == 4 && f_x.dim(1) == c,
          "cda_fuse: parameters serve " + std::to_string(c) +
              " channels, inputs have " + shape_str(f_x.shape()));
  Tensor fpx = transform_ft(f_x, p.branch_x);
  Tensor fpy = transform_ft(f_y, p.branch_y);
  CdaAttention from_y = cda_attention(fpy, p);
  CdaAttention from_x = cda_attention(fpx, p);
  return cda_output(cda_enhance(fpx, from_y), cda_enhance(fpy, from_x), p);
}

struct MergeParams {
  Tensor conv_w;  // (Cf, Cf + Cp, 3, 3)
  Tensor conv_b;  // (Cf, 1, 1)
};

// Chains encoder levels: the previous level is aligned by stride-2 max
// pooling, concatenated, and fused back to the current width. With no
// previous level the input passes through unchanged.
inline Tensor encoder_level_merge(const Tensor& fused,
                                  const Tensor* previous = nullptr,
                                  const MergeParams* params = nullptr) {
  require(fused.rank() == 4, "encoder_level_merge: input must be rank-4, got " +
                                 shape_str(fused.shape()));
  if (previous == nullptr) return fused;
  require(params != nullptr, "encoder_level_merge: missing parameters");
  require(previous->rank() == 4,
          "encoder_level_merge: previous level must be rank-4, got " +
              shape_str(previous->shape()));
  Tensor aligned = maxpool2x2(*previous);
  require(aligned.dim(2) == fused.dim(2) && aligned.dim(3) == fused.dim(3),
          "encoder_level_merge: previous level " +
              shape_str(previous->shape()) + " does not align to " +
              shape_str(fused.shape()) + " after stride-2 pooling");
  std::size_t cf = fused.dim(1), cp = aligned.dim(1);
  require_shape(params->conv_w, {cf, cf + cp, 3, 3}, "merge weight");
  require_shape(params->conv_b, {cf, 1, 1}, "merge bias");
  return add(conv2d(concat_channels({fused, aligned}), params->conv_w, 1, 1),
             params->conv_b);
}

struct EmiParams {
  Tensor conv_w;      // (W, 3W, 3, 3)
  Tensor conv_b;      // (W, 1, 1)
  Tensor eca_kernel;  // odd length >= 3
};

// f_shared = G-ECA(conv3x3(concat(f_R, f_D, f_h))) + f_h.
inline Tensor emi_fuse(const Tensor& f_r, const Tensor& f_d, const Tensor& f_h,
                       const EmiParams& p) {
  require(f_r.defined() && f_d.defined() && f_h.defined(),
          "emi_fuse: undefined input");
  require(f_r.shape() == f_h.shape() && f_d.shape() == f_h.shape(),
          "emi_fuse: input shapes differ: " + shape_str(f_r.shape()) + ", " +
              shape_str(f_d.shape()) + ", " + shape_str(f_h.shape()));
  require(f_h.rank() == 4, "emi_fuse: inputs must be rank-4, got " +
                               shape_str(f_h.shape()));
  std::size_t w = f_h.dim(1);
  require_shape(p.conv_w, {w, 3 * w, 3, 3}, "emi weight");
  require_shape(p.conv_b, {w, 1, 1}, "emi bias");
  validate_eca_kernel(p.eca_kernel);
  Tensor fusedin = concat_channels({f_r, f_d, f_h});
  Tensor t = add(conv2d(fusedin, p.conv_w, 1, 1), p.conv_b);
  return add(global_eca(t, p.eca_kernel), f_h);
}

}  // namespace granatt
