#pragma once

// Toy end-to-end assembly: two five-stage encoders with granularity-based
// attention, per-level cross dual-attention fusion into a shared encoder
// stream, three U-Net style decoders joined by efficient multi-input fusion
// with attention skip connections, and fifteen supervised output maps.

#include <json.hpp>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "granatt/fusion.hpp"
#include "granatt/gba.hpp"
#include "granatt/granularity.hpp"
#include "granatt/tensor.hpp"

namespace granatt {

struct NetworkConfig {
  std::size_t height = 352;
  std::size_t width = 352;
  std::array<std::size_t, 5> widths = {16, 24, 32, 48, 64};
  std::size_t reduced = 16;   // common width after the per-level 1x1 reduction
  std::size_t thresholds = 2; // depth split count; masks = thresholds + 1
  std::uint64_t seed = 1;
  bool cross_attention = true;
};

inline void validate_config(const NetworkConfig& c) {
  require(c.height >= 16 && c.width >= 16,
          "network: input resolution must be at least 16x16");
  for (std::size_t w : c.widths)
    require(w >= 2 && w % 2 == 0,
            "network: stage widths must be even, got " + std::to_string(w));
  require(c.reduced >= 2 && c.reduced % 2 == 0,
          "network: reduced width must be even, got " +
              std::to_string(c.reduced));
  require(c.thresholds <= 3, "network: threshold count must be in [0,3]");
}

// Spatial size after each stride-2 stage: ceil of successive halvings.
inline std::array<std::pair<std::size_t, std::size_t>, 5> level_sizes(
    const NetworkConfig& c) {
  std::array<std::pair<std::size_t, std::size_t>, 5> out;
  std::size_t h = c.height, w = c.width;
  for (int l = 0; l < 5; ++l) {
    h = (h + 1) / 2;
    w = (w + 1) / 2;
    out[l] = {h, w};
  }
  return out;
}

struct EncoderStage {
  Tensor conv_w, conv_b;
  GbaParams att;
};

struct DecoderStage {
  Tensor conv_w, conv_b;
};

struct Head {
  Tensor w, b;
};

struct Network {
  NetworkConfig config;
  std::array<EncoderStage, 5> enc_rgb, enc_dep;
  std::array<CdaParams, 5> fuse;       // per-level encoder fusion
  std::array<MergeParams, 4> merge;    // shared encoder, levels 2..5
  std::array<Head, 5> reduce_rgb, reduce_dep, reduce_shared;
  std::array<DecoderStage, 4> dec_rgb, dec_dep;  // levels 4..1
  std::array<DecoderStage, 5> sdec_h;            // shared decoder stage convs
  std::array<EmiParams, 5> emi;
  std::array<CdaParams, 5> skip;       // shared decoder skip fusion
  std::array<Head, 5> head_rgb, head_dep, head_shared;
  std::vector<std::pair<std::string, Tensor>> params;  // registration order

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
  }
  const Tensor& param(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return t;
    fail("network: no parameter named " + name);
  }
};

namespace detail {

class ParamFactory {
 public:
  ParamFactory(std::uint64_t seed, Network& net) : rng_(seed), net_(net) {}

  Tensor make(const std::string& name, Shape shape, std::size_t fan_in) {
    std::vector<double> v(numel(shape));
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& x : v) {
      double u = (rng_() >> 11) * 0x1.0p-53;
      x = (2.0 * u - 1.0) * bound;
    }
    Tensor t = Tensor::from(std::move(shape), std::move(v));
    t.set_requires_grad(true);
    net_.params.emplace_back(name, t);
    return t;
  }

  Tensor conv(const std::string& name, std::size_t co, std::size_t ci,
              std::size_t k) {
    return make(name, {co, ci, k, k}, ci * k * k);
  }
  Tensor bias(const std::string& name, std::size_t co, std::size_t fan_in) {
    return make(name, {co, 1, 1}, fan_in);
  }

  CdaParams cda(const std::string& prefix, std::size_t c) {
    std::size_t half = c / 2;
    std::size_t hidden = cda_mlp_hidden(half);
    CdaParams p;
    const std::pair<CdaBranchParams*, const char*> branches[] = {
        {&p.branch_x, ".x"}, {&p.branch_y, ".y"}};
    for (auto [branch, tag] : branches) {
      branch->conv1x1_w = conv(prefix + tag + ".t1.w", half, c, 1);
      branch->conv1x1_b = bias(prefix + tag + ".t1.b", half, c);
      branch->conv3x3_w = conv(prefix + tag + ".t3.w", half, half, 3);
      branch->conv3x3_b = bias(prefix + tag + ".t3.b", half, half * 9);
    }
    p.mlp_w1 = make(prefix + ".mlp.w1", {hidden, half}, half);
    p.mlp_b1 = make(prefix + ".mlp.b1", {hidden}, half);
    p.mlp_w2 = make(prefix + ".mlp.w2", {half, hidden}, hidden);
    p.mlp_b2 = make(prefix + ".mlp.b2", {half}, hidden);
    p.spatial_w = conv(prefix + ".sp.w", 1, 2, 7);
    p.spatial_b = bias(prefix + ".sp.b", 1, 2 * 49);
    p.out_w = conv(prefix + ".out.w", half, c, 3);
    p.out_b = bias(prefix + ".out.b", half, c * 9);
    return p;
  }

 private:
  std::mt19937_64 rng_;
  Network& net_;
};

}  // namespace detail

// Deterministic build: every parameter drawn uniformly from +-1/sqrt(fan_in)
// in registration order off a single seeded generator.
inline Network build_network(const NetworkConfig& config) {
  validate_config(config);
  Network net;
  net.config = config;
  detail::ParamFactory f(config.seed, net);
  std::size_t regions = config.thresholds + 1;
  std::size_t r = config.reduced;

  auto build_encoder = [&](std::array<EncoderStage, 5>& enc,
                           const std::string& name, std::size_t in_ch) {
    std::size_t prev = in_ch;
    for (int l = 0; l < 5; ++l) {
      std::size_t w = config.widths[l];
      std::string p = name + "." + std::to_string(l + 1);
      enc[l].conv_w = f.conv(p + ".conv.w", w, prev, 3);
      enc[l].conv_b = f.bias(p + ".conv.b", w, prev * 9);
      std::vector<Tensor> kernels;
      std::size_t k = eca_kernel_size(w);
      for (std::size_t g = 0; g < regions; ++g)
        kernels.push_back(
            f.make(p + ".att.k" + std::to_string(g), {k}, k));
      enc[l].att = make_gba_params(std::move(kernels), true);
      prev = w;
    }
  };
  build_encoder(net.enc_rgb, "enc_rgb", 3);
  build_encoder(net.enc_dep, "enc_dep", 1);

  for (int l = 0; l < 5; ++l)
    net.fuse[l] = f.cda("fuse." + std::to_string(l + 1), config.widths[l]);

  for (int l = 1; l < 5; ++l) {
    std::size_t cf = config.widths[l] / 2, cp = config.widths[l - 1] / 2;
    std::string p = "senc." + std::to_string(l + 1) + ".merge";
    net.merge[l - 1].conv_w = f.conv(p + ".w", cf, cf + cp, 3);
    net.merge[l - 1].conv_b = f.bias(p + ".b", cf, (cf + cp) * 9);
  }

  auto build_reduce = [&](std::array<Head, 5>& heads, const std::string& name,
                          bool halved) {
    for (int l = 0; l < 5; ++l) {
      std::size_t in = halved ? config.widths[l] / 2 : config.widths[l];
      std::string p = name + "." + std::to_string(l + 1);
      heads[l].w = f.conv(p + ".w", r, in, 1);
      heads[l].b = f.bias(p + ".b", r, in);
    }
  };
  build_reduce(net.reduce_rgb, "reduce_rgb", false);
  build_reduce(net.reduce_dep, "reduce_dep", false);
  build_reduce(net.reduce_shared, "reduce_shared", true);

  auto build_decoder = [&](std::array<DecoderStage, 4>& dec,
                           const std::string& name) {
    for (int l = 0; l < 4; ++l) {
      std::string p = name + "." + std::to_string(l + 1);
      dec[l].conv_w = f.conv(p + ".conv.w", r, 2 * r, 3);
      dec[l].conv_b = f.bias(p + ".conv.b", r, 2 * r * 9);
    }
  };
  build_decoder(net.dec_rgb, "dec_rgb");
  build_decoder(net.dec_dep, "dec_dep");

  for (int l = 4; l >= 0; --l) {
    std::size_t in = l == 4 ? r : r / 2;  // deepest stage reads the encoder
    std::string p = "sdec." + std::to_string(l + 1) + ".h";
    net.sdec_h[l].conv_w = f.conv(p + ".w", r, in, 3);
    net.sdec_h[l].conv_b = f.bias(p + ".b", r, in * 9);
  }
  for (int l = 0; l < 5; ++l) {
    std::string p = "sdec." + std::to_string(l + 1) + ".emi";
    net.emi[l].conv_w = f.conv(p + ".w", r, 3 * r, 3);
    net.emi[l].conv_b = f.bias(p + ".b", r, 3 * r * 9);
    std::size_t k = eca_kernel_size(r);
    net.emi[l].eca_kernel = f.make(p + ".k", {k}, k);
  }
  for (int l = 0; l < 5; ++l)
    net.skip[l] = f.cda("skip." + std::to_string(l + 1), r);

  auto build_heads = [&](std::array<Head, 5>& heads, const std::string& name,
                         std::size_t in) {
    for (int l = 0; l < 5; ++l) {
      std::string p = name + "." + std::to_string(l + 1);
      heads[l].w = f.conv(p + ".w", 1, in, 1);
      heads[l].b = f.bias(p + ".b", 1, in);
    }
  };
  build_heads(net.head_rgb, "head_rgb", r);
  build_heads(net.head_dep, "head_dep", r);
  build_heads(net.head_shared, "head_shared", r / 2);
  return net;
}

struct ForwardOutputs {
  // maps[branch][level]: branch 0 = RGB, 1 = depth, 2 = shared; level index 0
  // is the finest. Every map is (1,1,H,W) at input resolution, post-sigmoid.
  std::vector<std::vector<Tensor>> maps;
  Tensor final_map;  // shared branch, level 1
};

struct ForwardTrace {
  std::vector<Tensor> enc_rgb_pre, enc_rgb, enc_dep_pre, enc_dep;
  std::vector<Tensor> fused, shared_enc;
  std::vector<Tensor> reduced_rgb, reduced_dep, reduced_shared;
  std::vector<Tensor> dec_rgb, dec_dep, dec_shared;
};

namespace detail {

// Cross-attention applies each branch's dual attention to the other branch;
// with the cross wiring disabled every branch attends to itself.
inline Tensor cda_apply(const Tensor& f_x, const Tensor& f_y,
                        const CdaParams& p, bool cross) {
  if (cross) return cda_fuse(f_x, f_y, p);
  validate_cda_params(p);
  Tensor fpx = transform_ft(f_x, p.branch_x);
  Tensor fpy = transform_ft(f_y, p.branch_y);
  return cda_output(cda_enhance(fpx, cda_attention(fpx, p)),
                    cda_enhance(fpy, cda_attention(fpy, p)), p);
}

inline Tensor predict(const Tensor& feat, const Head& head, std::size_t h,
                      std::size_t w) {
  Tensor logits = add(conv2d(feat, head.w), head.b);
  return upsample_bilinear(sigmoid(logits), h, w);
}

}  // namespace detail

// Runs the full assembly on one RGB-D pair. Masks come in at input
// resolution and are resampled per level; they are treated as fixed inputs,
// not parameters. Pass a trace to keep the intermediate features.
inline ForwardOutputs network_forward(const Network& net, const Tensor& rgb,
                                      const Tensor& depth,
                                      const GranularityMasks& masks,
                                      ForwardTrace* trace = nullptr) {
  const NetworkConfig& cfg = net.config;
  require(rgb.rank() == 3 && rgb.dim(0) == 3 && rgb.dim(1) == cfg.height &&
              rgb.dim(2) == cfg.width,
          "network_forward: rgb must be 3x" + std::to_string(cfg.height) +
              "x" + std::to_string(cfg.width) + ", got " +
              shape_str(rgb.shape()));
  require(depth.rank() == 3 && depth.dim(0) == 1 &&
              depth.dim(1) == cfg.height && depth.dim(2) == cfg.width,
          "network_forward: depth must be 1x" + std::to_string(cfg.height) +
              "x" + std::to_string(cfg.width) + ", got " +
              shape_str(depth.shape()));
  require(masks.height == cfg.height && masks.width == cfg.width,
          "network_forward: masks are not at input resolution");
  require(!masks.masks.empty() &&
              masks.masks.size() <= cfg.thresholds + 1,
          "network_forward: expected between 1 and " +
              std::to_string(cfg.thresholds + 1) + " regions, got " +
              std::to_string(masks.masks.size()));

  auto sizes = level_sizes(cfg);
  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;

  // Per-level mask tensors at the matching encoder resolution.
  std::array<std::vector<Tensor>, 5> level_masks;
  for (int l = 0; l < 5; ++l) {
    GranularityMasks resized =
        resize_masks(masks, sizes[l].first, sizes[l].second);
    for (std::size_t g = 0; g < resized.masks.size(); ++g)
      level_masks[l].push_back(mask_tensor(resized, g));
  }

  auto run_encoder = [&](const std::array<EncoderStage, 5>& enc,
                         const Tensor& input, std::vector<Tensor>& pre,
                         std::vector<Tensor>& post) {
    Tensor x = input;
    for (int l = 0; l < 5; ++l) {
      x = relu(add(conv2d(x, enc[l].conv_w, 2, 1), enc[l].conv_b));
      pre.push_back(x);
      x = gba_forward(x, level_masks[l], enc[l].att);
      post.push_back(x);
    }
  };
  run_encoder(net.enc_rgb, rgb.reshaped({1, 3, cfg.height, cfg.width}),
              tr.enc_rgb_pre, tr.enc_rgb);
  run_encoder(net.enc_dep, depth.reshaped({1, 1, cfg.height, cfg.width}),
              tr.enc_dep_pre, tr.enc_dep);

  // Shared encoder: cross fusion per level, then merged with the previous
  // level from the second stage on.
  for (int l = 0; l < 5; ++l) {
    Tensor fused = detail::cda_apply(tr.enc_rgb[l], tr.enc_dep[l], net.fuse[l],
                                     cfg.cross_attention);
    tr.fused.push_back(fused);
    Tensor merged = l == 0 ? encoder_level_merge(fused, nullptr, nullptr)
                           : encoder_level_merge(fused, &tr.shared_enc[l - 1],
                                                 &net.merge[l - 1]);
    tr.shared_enc.push_back(merged);
  }

  for (int l = 0; l < 5; ++l) {
    tr.reduced_rgb.push_back(
        add(conv2d(tr.enc_rgb[l], net.reduce_rgb[l].w), net.reduce_rgb[l].b));
    tr.reduced_dep.push_back(
        add(conv2d(tr.enc_dep[l], net.reduce_dep[l].w), net.reduce_dep[l].b));
    tr.reduced_shared.push_back(add(conv2d(tr.shared_enc[l],
                                           net.reduce_shared[l].w),
                                    net.reduce_shared[l].b));
  }

  // Branch decoders: deepest level passes through, every following stage
  // upsamples to the next level's resolution and folds in the skip feature.
  auto run_decoder = [&](const std::array<DecoderStage, 4>& dec,
                         const std::vector<Tensor>& reduced,
                         std::vector<Tensor>& out) {
    out.assign(5, Tensor());
    out[4] = reduced[4];
    for (int l = 3; l >= 0; --l) {
      Tensor up =
          upsample_bilinear(out[l + 1], sizes[l].first, sizes[l].second);
      Tensor cat = concat_channels({up, reduced[l]});
      out[l] = relu(add(conv2d(cat, dec[l].conv_w, 1, 1), dec[l].conv_b));
    }
  };
  run_decoder(net.dec_rgb, tr.reduced_rgb, tr.dec_rgb);
  run_decoder(net.dec_dep, tr.reduced_dep, tr.dec_dep);

  // Shared decoder: previous-level shared features enter each stage's
  // three-way fusion, and the encoder skip joins through cross attention.
  tr.dec_shared.assign(5, Tensor());
  for (int l = 4; l >= 0; --l) {
    Tensor h_in = l == 4 ? tr.reduced_shared[4]
                         : upsample_bilinear(tr.dec_shared[l + 1],
                                             sizes[l].first, sizes[l].second);
    Tensor h = relu(add(conv2d(h_in, net.sdec_h[l].conv_w, 1, 1),
                        net.sdec_h[l].conv_b));
    Tensor m = emi_fuse(tr.dec_rgb[l], tr.dec_dep[l], h, net.emi[l]);
    tr.dec_shared[l] = detail::cda_apply(m, tr.reduced_shared[l], net.skip[l],
                                         cfg.cross_attention);
  }

  ForwardOutputs out;
  out.maps.assign(3, std::vector<Tensor>());
  for (int l = 0; l < 5; ++l) {
    out.maps[0].push_back(detail::predict(tr.dec_rgb[l], net.head_rgb[l],
                                          cfg.height, cfg.width));
    out.maps[1].push_back(detail::predict(tr.dec_dep[l], net.head_dep[l],
                                          cfg.height, cfg.width));
    out.maps[2].push_back(detail::predict(tr.dec_shared[l],
                                          net.head_shared[l], cfg.height,
                                          cfg.width));
  }
  out.final_map = out.maps[2][0];
  return out;
}

// Plain gradient-descent update over every parameter holding a gradient;
// gradients are consumed (cleared) by the step.
inline void sgd_step(Network& net, double lr) {
  for (auto& [name, t] : net.params) {
    if (!t.has_grad()) continue;
    std::vector<double>& v = t.mutable_values();
    const std::vector<double>& g = t.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    t.clear_grad();
  }
}

// ---------------------------------------------------------------------------
// Checkpoint format: "GRANATT1" magic, little-endian u64 header length, JSON
// header (config plus the ordered parameter table), then the raw f64 data.

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'G', 'R', 'A', 'N',
                                             'A', 'T', 'T', '1'};

inline nlohmann::json config_json(const NetworkConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"widths", c.widths},
          {"reduced", c.reduced},
          {"thresholds", c.thresholds},
          {"seed", c.seed},
          {"cross_attention", c.cross_attention}};
}

inline NetworkConfig config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  auto widths = j.at("widths").get<std::vector<std::size_t>>();
  require(widths.size() == 5, "checkpoint: config lists " +
                                  std::to_string(widths.size()) +
                                  " stage widths, expected 5");
  std::copy(widths.begin(), widths.end(), c.widths.begin());
  c.reduced = j.at("reduced").get<std::size_t>();
  c.thresholds = j.at("thresholds").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.cross_attention = j.at("cross_attention").get<bool>();
  return c;
}

inline void save_checkpoint(const Network& net, const std::string& path) {
  nlohmann::json header;
  header["format"] = "GRANATT1";
  header["config"] = config_json(net.config);
  header["params"] = nlohmann::json::array();
  for (const auto& [name, t] : net.params)
    header["params"].push_back({{"name", name}, {"shape", t.shape()}});
  std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  require(out.good(), "save_checkpoint: cannot open " + path);
  out.write(kCheckpointMagic, 8);
  std::uint64_t len = head.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& [name, t] : net.params)
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  require(out.good(), "save_checkpoint: write failed for " + path);
}

inline Network load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  require(in.gcount() == 8 && std::equal(magic, magic + 8, kCheckpointMagic),
          "load_checkpoint: bad magic in " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  require(in.good() && len > 0 && len < (1ull << 32),
          "load_checkpoint: corrupt header length in " + path);
  std::string head(len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(len));
  require(static_cast<std::uint64_t>(in.gcount()) == len,
          "load_checkpoint: truncated header in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::exception& e) {
    fail("load_checkpoint: unparseable header in " + path + ": " + e.what());
  }
  require(header.value("format", "") == "GRANATT1",
          "load_checkpoint: unknown format in " + path);

  Network net = build_network(config_from_json(header.at("config")));
  const auto& listed = header.at("params");
  require(listed.size() == net.params.size(),
          "load_checkpoint: header lists " + std::to_string(listed.size()) +
              " parameters, network has " +
              std::to_string(net.params.size()));
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    auto& [name, t] = net.params[i];
    require(listed[i].at("name") == name &&
                listed[i].at("shape").get<Shape>() == t.shape(),
            "load_checkpoint: parameter table mismatch at index " +
                std::to_string(i) + " (" + name + ")");
    in.read(reinterpret_cast<char*>(t.mutable_values().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    require(static_cast<std::size_t>(in.gcount()) == t.size() * sizeof(double),
            "load_checkpoint: truncated data for " + name + " in " + path);
  }
  in.peek();
  require(in.eof(), "load_checkpoint: trailing bytes in " + path);
  return net;
}

}  // namespace granatt
