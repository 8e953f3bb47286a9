// Batch command-line tool: granularity mask generation, network inference,
// saliency evaluation, gradient verification, and depth-noise simulation.
//
// Exit codes: 0 success, 1 usage or fatal error, 2 partial success (some
// items skipped, see warnings), 3 verification failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "granatt/granularity.hpp"
#include "granatt/imageio.hpp"
#include "granatt/metrics.hpp"
#include "granatt/network.hpp"
#include "granatt/objective.hpp"
#include "granatt/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace granatt;

namespace {

constexpr const char* kVersion = "1.0.0";
constexpr int kExitOk = 0, kExitFatal = 1, kExitPartial = 2, kExitVerify = 3;

std::size_t resolve_threads(std::size_t flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("GRANATT_THREADS")) {
    char* end = nullptr;
    unsigned long v = std::strtoul(env, &end, 10);
    if (end && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

// Stable per-image seed so adding or removing files never changes the noise
// drawn for the others.
std::uint64_t mix_seed(std::uint64_t seed, const std::string& stem) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : stem) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return seed ^ h;
}

// Runs fn(0..n-1) on a bounded pool; callers collect results into per-index
// slots and aggregate in order afterwards. fn must not throw.
void run_pool(std::size_t n, std::size_t threads,
              const std::function<void(std::size_t)>& fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), std::max<std::size_t>(n, 1));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> cursor{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = cursor.fetch_add(1)) < n;) fn(i);
    });
  for (std::thread& th : pool) th.join();
}

json report_base(const std::string& command, std::uint64_t seed,
                 json config) {
  config["command"] = command;
  return {{"tool_version", kVersion},
          {"command", command},
          {"seed", seed},
          {"config", std::move(config)}};
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  require(out.good(), "cannot open " + path.string());
  out << j.dump(2) << '\n';
  require(out.good(), "write failed for " + path.string());
}

Tensor resize_chw(const Tensor& t, std::size_t h, std::size_t w) {
  std::size_t c = t.dim(0);
  return upsample_bilinear(t.reshaped({1, c, t.dim(1), t.dim(2)}), h, w)
      .reshaped({c, h, w});
}

Tensor ensure_rgb(const Tensor& img) {
  if (img.dim(0) == 3) return img;
  const std::vector<double>& v = img.values();
  std::vector<double> out;
  out.reserve(v.size() * 3);
  for (int c = 0; c < 3; ++c) out.insert(out.end(), v.begin(), v.end());
  return Tensor::from({3, img.dim(1), img.dim(2)}, std::move(out));
}

DepthMap depth_map_from(const Tensor& gray) {
  return make_depth_map(gray.dim(1), gray.dim(2), gray.values());
}

// ---------------------------------------------------------------------------
// masks: one set of granularity masks plus a JSON sidecar per depth image.

int cmd_masks(const std::string& depth_dir, const std::string& out_dir, int t,
              std::size_t threads, std::uint64_t seed) {
  auto files = detail::scan_images(depth_dir);
  fs::create_directories(out_dir);
  json base = report_base("masks", seed,
                          {{"depth_dir", depth_dir},
                           {"out_dir", out_dir},
                           {"T", t},
                           {"threads", threads}});

  std::vector<std::pair<std::string, fs::path>> items(files.begin(),
                                                      files.end());
  struct Slot {
    std::string warning;
    json entry;
  };
  std::vector<Slot> slots(items.size());

  run_pool(items.size(), threads, [&](std::size_t i) {
    const auto& [stem, path] = items[i];
    try {
      Tensor depth = to_gray(load_image(path.string()));
      DepthMap dm = depth_map_from(depth);
      ThresholdSet tset = multi_otsu(build_histogram(dm), t);
      GranularityMasks masks = generate_masks(dm, tset);

      json sidecar = base;
      sidecar["image"] = stem;
      sidecar["requested_t"] = t;
      sidecar["effective_t"] = tset.thresholds.size();
      sidecar["thresholds"] = tset.thresholds;
      sidecar["objective"] = tset.objective;
      json names = json::array();
      for (std::size_t g = 0; g < masks.masks.size(); ++g) {
        std::string name = stem + "_mask" + std::to_string(g) + ".png";
        save_map(mask_tensor(masks, g).reshaped({1, dm.height, dm.width}),
                 (fs::path(out_dir) / name).string());
        names.push_back(name);
      }
      sidecar["masks"] = names;
      write_json(sidecar, fs::path(out_dir) / (stem + "_masks.json"));
      slots[i].entry = {{"image", stem},
                        {"effective_t", tset.thresholds.size()},
                        {"thresholds", tset.thresholds}};
    } catch (const std::exception& e) {
      slots[i].warning = stem + ": " + e.what();
    }
  });

  json report = base;
  report["images"] = json::array();
  report["warnings"] = json::array();
  std::size_t skipped = 0;
  for (const Slot& s : slots) {
    if (!s.warning.empty()) {
      ++skipped;
      report["warnings"].push_back(s.warning);
      std::cerr << "warning: skipped " << s.warning << '\n';
    } else {
      report["images"].push_back(s.entry);
    }
  }
  write_json(report, fs::path(out_dir) / "masks_report.json");
  if (items.empty())
    std::cerr << "warning: no images found in " << depth_dir << '\n';
  std::cout << "masks: processed " << items.size() - skipped << ", skipped "
            << skipped << '\n';
  return skipped > 0 ? kExitPartial : kExitOk;
}

// ---------------------------------------------------------------------------
// forward: run the network on name-paired RGB and depth directories.

int cmd_forward(const std::string& rgb_dir, const std::string& depth_dir,
                const std::string& out_dir, const std::string& checkpoint,
                std::size_t size, int t, std::uint64_t seed, bool all_levels,
                std::size_t threads) {
  auto rgbs = detail::scan_images(rgb_dir);
  auto depths = detail::scan_images(depth_dir);
  fs::create_directories(out_dir);

  Network net;
  if (checkpoint.empty()) {
    NetworkConfig cfg;
    cfg.height = size;
    cfg.width = size;
    cfg.thresholds = static_cast<std::size_t>(t);
    cfg.seed = seed;
    net = build_network(cfg);
  } else {
    net = load_checkpoint(checkpoint);  // errors propagate as fatal
  }
  const NetworkConfig& cfg = net.config;

  std::vector<std::string> warnings;
  std::vector<std::pair<std::string, std::pair<fs::path, fs::path>>> pairs;
  for (const auto& [stem, path] : rgbs) {
    auto it = depths.find(stem);
    if (it == depths.end())
      warnings.push_back("no depth image for " + stem);
    else
      pairs.push_back({stem, {path, it->second}});
  }
  for (const auto& [stem, path] : depths)
    if (!rgbs.count(stem)) warnings.push_back("no rgb image for " + stem);
  if (pairs.empty()) {
    std::cerr << "error: no rgb/depth pairs found\n";
    return kExitFatal;
  }

  static const char* kBranch[3] = {"rgb", "dep", "shared"};
  struct Slot {
    std::string warning;
    std::string image;
  };
  std::vector<Slot> slots(pairs.size());

  run_pool(pairs.size(), threads, [&](std::size_t i) {
    const auto& [stem, paths] = pairs[i];
    try {
      Tensor rgb = resize_chw(ensure_rgb(load_image(paths.first.string())),
                              cfg.height, cfg.width);
      Tensor depth = resize_chw(to_gray(load_image(paths.second.string())),
                                cfg.height, cfg.width);
      DepthMap dm = depth_map_from(depth);
      ThresholdSet tset =
          multi_otsu(build_histogram(dm), static_cast<int>(cfg.thresholds));
      GranularityMasks masks = generate_masks(dm, tset);

      ForwardOutputs out = network_forward(net, rgb, depth, masks);
      save_map(out.final_map.reshaped({1, cfg.height, cfg.width}),
               (fs::path(out_dir) / (stem + ".png")).string());
      if (all_levels)
        for (int b = 0; b < 3; ++b)
          for (int l = 0; l < 5; ++l) {
            std::string name = stem + "_" + kBranch[b] + "_l" +
                               std::to_string(l + 1) + ".png";
            save_map(out.maps[b][l].reshaped({1, cfg.height, cfg.width}),
                     (fs::path(out_dir) / name).string());
          }
      slots[i].image = stem;
    } catch (const std::exception& e) {
      slots[i].warning = stem + ": " + e.what();
    }
  });

  json report = report_base("forward", seed,
                            {{"rgb_dir", rgb_dir},
                             {"depth_dir", depth_dir},
                             {"out_dir", out_dir},
                             {"checkpoint", checkpoint},
                             {"size", size},
                             {"T", t},
                             {"all_levels", all_levels},
                             {"threads", threads}});
  report["network"] = config_json(cfg);
  report["network"]["parameters"] = net.parameter_count();
  report["images"] = json::array();
  std::size_t done = 0;
  for (const Slot& s : slots) {
    if (!s.warning.empty())
      warnings.push_back(s.warning);
    else {
      report["images"].push_back(s.image);
      ++done;
    }
  }
  report["warnings"] = warnings;
  write_json(report, fs::path(out_dir) / "forward_report.json");
  for (const std::string& w : warnings)
    std::cerr << "warning: " << w << '\n';
  std::cout << "forward: wrote " << done << " of " << pairs.size()
            << " pairs\n";
  return warnings.empty() ? kExitOk : kExitPartial;
}

// ---------------------------------------------------------------------------
// eval: dataset metrics over name-paired prediction and ground-truth dirs.

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir,
             const std::string& fmt, std::string out_path,
             const std::string& pr_path, std::size_t threads,
             std::uint64_t seed) {
  MetricReport rep = evaluate_dataset(pred_dir, gt_dir, threads);
  if (rep.images.empty()) {
    std::cerr << "error: no matched prediction/ground-truth pairs\n";
    return kExitFatal;
  }
  json config = {{"pred_dir", pred_dir}, {"gt_dir", gt_dir},
                 {"report", fmt},        {"out", out_path},
                 {"pr", pr_path},        {"threads", threads}};

  if (out_path.empty()) out_path = fmt == "json" ? "metrics.json" : "metrics.csv";
  if (fmt == "json") {
    json j = metrics_json(rep);
    json base = report_base("eval", seed, config);
    for (auto& [k, v] : base.items()) j[k] = v;
    write_json(j, out_path);
  } else {
    std::ofstream out(out_path);
    require(out.good(), "cannot open " + out_path);
    out << "# tool_version=" << kVersion << '\n';
    out << "# seed=" << seed << '\n';
    json echo = config;
    echo["command"] = "eval";
    out << "# config=" << echo.dump() << '\n';
    write_metrics_csv(rep, out);
    require(out.good(), "write failed for " + out_path);
  }
  if (!pr_path.empty()) write_pr_csv(rep.mean_pr, pr_path);

  std::cout << "images=" << rep.images.size() << " mae=" << rep.mean_mae
            << " max_f=" << rep.mean_max_f << " s=" << rep.mean_s
            << " e=" << rep.mean_e << " warnings=" << rep.warnings.size()
            << '\n';
  for (const std::string& w : rep.warnings)
    std::cerr << "warning: " << w << '\n';
  return rep.warnings.empty() ? kExitOk : kExitPartial;
}

// ---------------------------------------------------------------------------
// gradcheck: run the registered verification suite and report per check.

int cmd_gradcheck(const std::string& scope, std::uint64_t seed,
                  bool plant_fault) {
  std::vector<GradCheckResult> results =
      run_gradient_checks(scope, seed, plant_fault);
  if (results.empty()) {
    std::cerr << "error: unknown scope " << scope << '\n';
    return kExitFatal;
  }
  std::string first_fail;
  for (const GradCheckResult& r : results) {
    std::printf("%-24s max_rel_err=%.3e tol=%.0e %s\n", r.name.c_str(),
                r.max_rel_err, r.tolerance, r.passed() ? "PASS" : "FAIL");
    if (!r.passed() && first_fail.empty()) first_fail = r.name;
  }
  if (!first_fail.empty()) {
    std::cerr << "gradient check failed: " << first_fail << '\n';
    return kExitVerify;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// noise: calibrated depth perturbation with per-image spec sidecars.

int cmd_noise(const std::string& depth_dir, const std::string& out_dir,
              double rmse, const std::string& preset, std::uint64_t seed,
              std::size_t threads) {
  double target = rmse;
  if (!preset.empty()) {
    target = 0.0;
    for (const NoisePreset& p : kNoisePresets)
      if (preset == p.name) target = p.target_rmse;
    if (target == 0.0) {
      std::cerr << "error: unknown preset " << preset << " (have:";
      for (const NoisePreset& p : kNoisePresets) std::cerr << ' ' << p.name;
      std::cerr << ")\n";
      return kExitFatal;
    }
  }
  if (!(target > 0.0 && target < 1.0)) {
    std::cerr << "error: target RMSE must lie in (0,1), got " << target
              << '\n';
    return kExitFatal;
  }

  auto files = detail::scan_images(depth_dir);
  fs::create_directories(out_dir);
  json base = report_base("noise", seed,
                          {{"depth_dir", depth_dir},
                           {"out_dir", out_dir},
                           {"rmse", target},
                           {"preset", preset},
                           {"threads", threads}});
  const char* kDeltaNote =
      "delta1 = fraction of pixels with max(clean,noisy)/min(clean,noisy) > "
      "1.25, counted only where both depths exceed 1e-3; 0 when no pixel "
      "qualifies";

  std::vector<std::pair<std::string, fs::path>> items(files.begin(),
                                                      files.end());
  struct Slot {
    std::string warning;
    json entry;
  };
  std::vector<Slot> slots(items.size());

  run_pool(items.size(), threads, [&](std::size_t i) {
    const auto& [stem, path] = items[i];
    try {
      Tensor depth = to_gray(load_image(path.string()));
      std::uint64_t image_seed = mix_seed(seed, stem);
      NoisyDepth noisy =
          add_depth_noise(depth_map_from(depth), target, image_seed);
      Tensor out_map = Tensor::from(
          {1, noisy.depth.height, noisy.depth.width},
          std::vector<double>(noisy.depth.values));
      save_map(out_map, (fs::path(out_dir) / (stem + ".png")).string());

      json sidecar = base;
      sidecar["image"] = stem;
      sidecar["image_seed"] = image_seed;
      sidecar["target_rmse"] = noisy.spec.target_rmse;
      sidecar["achieved_rmse"] = noisy.spec.achieved_rmse;
      sidecar["achieved_delta1"] = noisy.spec.achieved_delta1;
      sidecar["delta1_convention"] = kDeltaNote;
      write_json(sidecar, fs::path(out_dir) / (stem + "_noise.json"));
      slots[i].entry = {{"image", stem},
                        {"achieved_rmse", noisy.spec.achieved_rmse},
                        {"achieved_delta1", noisy.spec.achieved_delta1}};
    } catch (const std::exception& e) {
      slots[i].warning = stem + ": " + e.what();
    }
  });

  json report = base;
  report["delta1_convention"] = kDeltaNote;
  report["images"] = json::array();
  report["warnings"] = json::array();
  double rmse_acc = 0.0, d1_acc = 0.0;
  std::size_t done = 0, skipped = 0;
  for (const Slot& s : slots) {
    if (!s.warning.empty()) {
      ++skipped;
      report["warnings"].push_back(s.warning);
      std::cerr << "warning: skipped " << s.warning << '\n';
    } else {
      rmse_acc += s.entry["achieved_rmse"].get<double>();
      d1_acc += s.entry["achieved_delta1"].get<double>();
      report["images"].push_back(s.entry);
      ++done;
    }
  }
  if (done > 0) {
    report["mean_achieved_rmse"] = rmse_acc / static_cast<double>(done);
    report["mean_achieved_delta1"] = d1_acc / static_cast<double>(done);
  }
  write_json(report, fs::path(out_dir) / "noise_report.json");
  if (items.empty())
    std::cerr << "warning: no images found in " << depth_dir << '\n';
  std::cout << "noise: processed " << done << ", skipped " << skipped;
  if (done > 0)
    std::cout << ", mean rmse=" << rmse_acc / static_cast<double>(done)
              << ", mean delta1=" << d1_acc / static_cast<double>(done);
  std::cout << '\n';
  return skipped > 0 ? kExitPartial : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"granularity-attention RGB-D saliency toolkit"};
  app.set_version_flag("--version", std::string("granatt ") + kVersion);
  app.require_subcommand(1);

  std::uint64_t seed = 42;
  int t = 2;
  std::size_t threads = 0;
  std::string depth_dir, out_dir, rgb_dir, pred_dir, gt_dir;
  std::string checkpoint, report_fmt = "csv", out_path, pr_path;
  std::string scope = "all", preset;
  std::size_t size = 352;
  double rmse = 0.0;
  bool all_levels = false, plant_fault = false;

  CLI::App* masks = app.add_subcommand("masks", "generate granularity masks");
  masks->add_option("depth_dir", depth_dir, "directory of depth images")
      ->required();
  masks->add_option("out_dir", out_dir, "output directory")->required();
  masks->add_option("--T", t, "number of depth thresholds")
      ->check(CLI::Range(0, 3));
  masks->add_option("--threads", threads, "worker threads");
  masks->add_option("--seed", seed, "seed echoed into reports");

  CLI::App* forward = app.add_subcommand("forward", "run the network");
  forward->add_option("rgb_dir", rgb_dir, "directory of RGB images")
      ->required();
  forward->add_option("depth_dir", depth_dir, "directory of depth images")
      ->required();
  forward->add_option("out_dir", out_dir, "output directory")->required();
  forward->add_option("--checkpoint", checkpoint, "GRANATT1 checkpoint file");
  forward->add_option("--size", size, "input resolution (square)")
      ->check(CLI::Range(std::size_t{16}, std::size_t{2048}));
  forward->add_option("--T", t, "number of depth thresholds")
      ->check(CLI::Range(0, 3));
  forward->add_option("--seed", seed, "network init seed");
  forward->add_flag("--all-levels", all_levels, "write all 15 maps per image");
  forward->add_option("--threads", threads, "worker threads");

  CLI::App* eval = app.add_subcommand("eval", "evaluate saliency maps");
  eval->add_option("pred_dir", pred_dir, "directory of predictions")
      ->required();
  eval->add_option("gt_dir", gt_dir, "directory of ground-truth masks")
      ->required();
  eval->add_option("--report", report_fmt, "report format")
      ->check(CLI::IsMember({"csv", "json"}));
  eval->add_option("--out", out_path, "report path (default metrics.<fmt>)");
  eval->add_option("--pr", pr_path, "also write the mean PR curve CSV here");
  eval->add_option("--threads", threads, "worker threads");
  eval->add_option("--seed", seed, "seed echoed into reports");

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "verify gradients by central differences");
  gradcheck->add_option("--scope", scope, "all or one module")
      ->check(CLI::IsMember(
          {"all", "tensor", "gba", "fusion", "objective", "network"}));
  gradcheck->add_option("--seed", seed, "seed for the random probes");
  gradcheck->add_flag("--plant-fault", plant_fault)->group("");

  CLI::App* noise = app.add_subcommand("noise", "add calibrated depth noise");
  noise->add_option("depth_dir", depth_dir, "directory of depth images")
      ->required();
  noise->add_option("out_dir", out_dir, "output directory")->required();
  noise->add_option("--rmse", rmse, "target RMSE in (0,1)");
  noise->add_option("--preset", preset, "named target, e.g. rmse-0.261");
  noise->add_option("--seed", seed, "base noise seed");
  noise->add_option("--threads", threads, "worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitFatal;
  }

  try {
    std::size_t workers = resolve_threads(threads);
    if (masks->parsed())
      return cmd_masks(depth_dir, out_dir, t, workers, seed);
    if (forward->parsed())
      return cmd_forward(rgb_dir, depth_dir, out_dir, checkpoint, size, t,
                         seed, all_levels, workers);
    if (eval->parsed())
      return cmd_eval(pred_dir, gt_dir, report_fmt, out_path, pr_path,
                      workers, seed);
    if (gradcheck->parsed()) return cmd_gradcheck(scope, seed, plant_fault);
    if (noise->parsed())
      return cmd_noise(depth_dir, out_dir, rmse, preset, seed, workers);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFatal;
  }
  return kExitFatal;
}
