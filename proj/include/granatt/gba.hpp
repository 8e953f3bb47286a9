#pragma once

// Granularity-based attention: per-region local channel attention with a
// residual sum over the depth regions, plus the pooling-variant descriptors
// used to compare masked and unmasked channel pooling.

#include <vector>

#include "granatt/granularity.hpp"
#include "granatt/tensor.hpp"

namespace granatt {

// Nearest odd integer to (log2(C)+1)/2, never below 3; exact ties take the
// smaller candidate.
inline std::size_t eca_kernel_size(std::size_t channels) {
  require(channels >= 1, "eca_kernel_size: channel count must be positive");
  double v = (std::log2(static_cast<double>(channels)) + 1.0) / 2.0;
  long lo = 2 * static_cast<long>(std::floor((v - 1.0) / 2.0)) + 1;
  long hi = lo + 2;
  long k = (v - static_cast<double>(lo)) <= (static_cast<double>(hi) - v)
               ? lo
               : hi;
  return static_cast<std::size_t>(std::max(3L, k));
}

struct GbaParams {
  std::vector<Tensor> kernels;  // one shared kernel, or one per region
  bool per_region = false;
};

inline void validate_eca_kernel(const Tensor& k) {
  require(k.defined() && k.rank() == 1, "eca kernel must be a flat vector");
  require(k.dim(0) >= 3 && k.dim(0) % 2 == 1,
          "eca kernel length must be odd and at least 3, got " +
              std::to_string(k.dim(0)));
}

inline GbaParams make_gba_params(std::vector<Tensor> kernels,
                                 bool per_region = false) {
  require(!kernels.empty(), "gba params: no kernels");
  require(per_region || kernels.size() == 1,
          "gba params: shared mode takes exactly one kernel");
  for (const Tensor& k : kernels) validate_eca_kernel(k);
  return GbaParams{std::move(kernels), per_region};
}

inline const Tensor& gba_kernel_for(const GbaParams& p, std::size_t region) {
  if (!p.per_region) return p.kernels[0];
  require(region < p.kernels.size(),
          "gba params: no kernel for region " + std::to_string(region));
  return p.kernels[region];
}

struct EcaDiagnostics {
  std::size_t empty_mask_regions = 0;
};

// Channel-attention vector sigma(conv1d(pool(x))); pooling is the masked
// average when a mask is given, the global average otherwise.
inline Tensor eca_attention(const Tensor& x, const Tensor& kernel,
                            const Tensor* mask = nullptr) {
  validate_eca_kernel(kernel);
  Tensor d = mask ? pool(x, PoolMode::LAP, mask) : pool(x, PoolMode::GAP);
  return sigmoid(conv1d_channels(d, kernel));
}

inline bool mask_is_empty(const Tensor& mask) {
  for (double v : mask.values())
    if (v != 0.0) return false;
  return true;
}

inline Tensor local_eca(const Tensor& x, const Tensor& mask,
                        const Tensor& kernel, EcaDiagnostics* diag = nullptr) {
  require(x.rank() == 4,
          "local_eca: input must be rank-4 NCHW, got " + shape_str(x.shape()));
  require(mask.rank() == 2 && mask.dim(0) == x.dim(2) &&
              mask.dim(1) == x.dim(3),
          "local_eca: mask shape " + shape_str(mask.shape()) +
              " does not match feature " + shape_str(x.shape()));
  if (mask_is_empty(mask)) {
    if (diag) ++diag->empty_mask_regions;
    return mul_scalar(x, 0.0);
  }
  return mul(eca_attention(x, kernel, &mask), x);
}

inline Tensor global_eca(const Tensor& x, const Tensor& kernel) {
  require(x.rank() == 4,
          "global_eca: input must be rank-4 NCHW, got " + shape_str(x.shape()));
  return mul(eca_attention(x, kernel), x);
}

// f_out = sum_i L-ECA(f_in * m_i, m_i) + f_in over the granularity regions.
inline Tensor gba_forward(const Tensor& f_in, const std::vector<Tensor>& masks,
                          const GbaParams& params,
                          EcaDiagnostics* diag = nullptr) {
  require(f_in.rank() == 4, "gba_forward: input must be rank-4 NCHW, got " +
                                shape_str(f_in.shape()));
  require(!masks.empty(), "gba_forward: no masks");
  std::size_t h = f_in.dim(2), w = f_in.dim(3);
  for (const Tensor& m : masks)
    require(m.rank() == 2 && m.dim(0) == h && m.dim(1) == w,
            "gba_forward: mask shape " + shape_str(m.shape()) +
                " does not match feature " + shape_str(f_in.shape()));
  for (std::size_t p = 0; p < h * w; ++p) {
    double s = 0.0;
    for (const Tensor& m : masks) s += m.value(p);
    require(s == 1.0, "gba_forward: masks do not partition the image at pixel " +
                          std::to_string(p));
  }
  for (const Tensor& k : params.kernels) validate_eca_kernel(k);
  Tensor acc;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    Tensor term =
        local_eca(mul(f_in, masks[i]), masks[i], gba_kernel_for(params, i), diag);
    acc = i == 0 ? term : add(acc, term);
  }
  return add(acc, f_in);
}

enum class PoolingVariant { I, II, III };

// Per-channel descriptors for the three average-pooling formulations:
// (I) plain global average, (II) masked sum over the full area, (III) masked
// average over the mask support.
inline Tensor pooling_variant(const Tensor& x, PoolingVariant variant,
                              const Tensor* mask = nullptr) {
  require(x.rank() == 4, "pooling_variant: input must be rank-4 NCHW, got " +
                             shape_str(x.shape()));
  if (variant == PoolingVariant::I) return pool(x, PoolMode::GAP);
  require(mask != nullptr, "pooling_variant: variants II and III need a mask");
  if (variant == PoolingVariant::III) return pool(x, PoolMode::LAP, mask);
  require(mask->rank() == 2 && mask->dim(0) == x.dim(2) &&
              mask->dim(1) == x.dim(3),
          "pooling_variant: mask shape " + shape_str(mask->shape()) +
              " does not match feature " + shape_str(x.shape()));
  return pool(mul(x, *mask), PoolMode::GAP);
}

}  // namespace granatt
