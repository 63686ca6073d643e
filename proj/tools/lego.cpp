// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0

// lego: train, sample, panorama, flops and inspect from one binary.
// Exit status: 0 success, 1 runtime error, 2 usage error. Failures also print
// one JSON record {"error": kind, "message": ...} on stderr.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lego/lego.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : lego::Error {
  explicit UsageError(const std::string& what) : lego::Error("usage", what) {}
};

struct Options {
  std::string config;
  std::string ckpt;
  std::string out;
  std::optional<std::uint64_t> seed;
  int n = 0;
  int steps = 0;
  std::optional<double> cfg_scale;
  std::string skip_mode;
  std::optional<int> t_break;
  int workers = 1;
  std::vector<int> classes;
  int width = 0;
  int height = 0;
  int stride = 0;
  std::string class_map;
  bool raw = false;
  bool resume = false;
  bool force = false;
};

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

std::uint64_t resolve_seed(const Options& o, std::uint64_t fallback) {
  if (o.seed) return *o.seed;
  if (auto v = env("LEGO_SEED")) {
    try {
      return std::stoull(*v);
    } catch (const std::exception&) {
      throw UsageError("LEGO_SEED must be an unsigned integer, got '" + *v + "'");
    }
  }
  return fallback;
}

fs::path resolve_out(const Options& o, const std::string& fallback) {
  if (!o.out.empty()) return o.out;
  if (auto v = env("LEGO_OUT_DIR")) return *v;
  return fallback;
}

/// Run config from --config, else rebuilt from the checkpoint's embedded
/// stack and train sections.
lego::RunConfig run_config_for(const Options& o, const lego::Checkpoint* ckpt) {
  if (!o.config.empty()) return lego::load_run_config(o.config);
  if (!ckpt) throw UsageError("--config is required");
  json j = {{"stack", ckpt->config.at("stack")}, {"train", ckpt->config.at("train")}};
  return lego::parse_run_config(j.dump(), o.ckpt);
}

lego::SkipSchedule skip_for(const Options& o, const lego::RunConfig& rc, int T) {
  const lego::SkipMode mode = o.skip_mode.empty() ? rc.sampler.skip_mode : lego::parse_skip_mode(o.skip_mode);
  const int t_break = o.t_break.value_or(rc.sampler.t_break);
  return lego::skip_schedule(mode, t_break, T, rc.stack);
}

std::vector<int> classes_for(const Options& o, const lego::StackConfig& c, std::size_t n) {
  std::vector<int> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (!o.classes.empty()) out.push_back(o.classes[i % o.classes.size()]);
    else out.push_back(c.num_classes > 0 ? int(i % std::size_t(c.num_classes)) : -1);
  }
  for (int cls : out) {
    if (cls < -1 || cls >= c.num_classes) {
      throw UsageError(lego::detail::concat("--class ", cls, " outside [-1, ", c.num_classes, ")"));
    }
  }
  return out;
}

int cmd_train(const Options& o) {
  lego::RunConfig rc = lego::load_run_config(o.config);
  rc.train.seed = resolve_seed(o, rc.train.seed);
  if (o.steps > 0) rc.train.total_images = static_cast<long long>(o.steps) * rc.train.batch_size;
  const fs::path out = resolve_out(o, rc.out_dir);
  fs::create_directories(out);
  auto ds = lego::open_dataset(rc.dataset);
  lego::Trainer trainer(rc.stack, rc.train, rc.make_schedule());
  const std::string ckpt = o.ckpt.empty() ? (out / "checkpoint.ckpt").string() : o.ckpt;
  if (o.resume && fs::exists(ckpt)) trainer.restore(lego::load_checkpoint(ckpt), o.force);
  trainer.set_diagnostic_path((out / "diagnostic.ckpt").string());
  lego::write_run_manifest(out, "train", rc, rc.train.seed, {{"checkpoint", ckpt}});
  std::ofstream metrics(out / "metrics.jsonl", o.resume ? std::ios::app : std::ios::trunc);
  const auto trace = trainer.train(*ds, &metrics, ckpt);
  json summary = {{"steps", trainer.step()}, {"images_seen", trainer.images_seen()}, {"checkpoint", ckpt}};
  if (!trace.empty()) summary["final_loss"] = trace.back().loss;
  std::cout << summary.dump() << '\n';
  return 0;
}

void write_images(const fs::path& out, const std::vector<lego::Image>& images, const std::vector<int>& classes,
                  std::uint64_t seed, const std::string& stem) {
  fs::create_directories(out);
  for (std::size_t i = 0; i < images.size(); ++i) {
    lego::write_png((out / lego::detail::concat(stem, "_s", seed, "_i", i, "_c", classes[i], ".png")).string(),
                    images[i]);
  }
  const std::size_t cols = std::size_t(std::ceil(std::sqrt(double(images.size()))));
  lego::write_png((out / (stem + "_grid.png")).string(), lego::make_grid(images, cols));
}

int cmd_sample(const Options& o) {
  if (o.ckpt.empty()) throw UsageError("sample: --ckpt is required");
  const auto ckpt = lego::load_checkpoint(o.ckpt);
  lego::RunConfig rc = run_config_for(o, &ckpt);
  const auto state = lego::state_from_checkpoint(ckpt, rc.stack, !o.raw, o.force);
  const std::uint64_t seed = resolve_seed(o, rc.train.seed);
  const fs::path out = resolve_out(o, rc.out_dir);
  const std::size_t n = std::size_t(o.n > 0 ? o.n : rc.sampler.n);
  const auto classes = classes_for(o, rc.stack, n);
  const std::optional<double> cfg = o.cfg_scale ? o.cfg_scale : rc.sampler.cfg_scale;
  lego::Rng rng(seed);
  lego::SampleResult<float> res;
  if (rc.stack.parameterization == lego::Parameterization::ddpm) {
    const auto schedule = rc.make_schedule();
    const int steps = o.steps > 0 ? o.steps : rc.sampler.steps;
    res = lego::ddpm_sample(state, rc.stack, schedule, skip_for(o, rc, schedule.T()), cfg, steps, classes, rng,
                            o.workers);
  } else {
    lego::EdmSamplerParams sp = rc.sampler.edm;
    if (o.steps > 0) sp.steps = o.steps;
    res = lego::edm_heun_sample(state, rc.stack, rc.stack.edm, sp, skip_for(o, rc, sp.steps), cfg, classes, rng,
                                o.workers);
  }
  write_images(out, res.images, classes, seed, "sample");
  lego::write_run_manifest(out, "sample", rc, seed,
                           {{"checkpoint", o.ckpt}, {"n", n}, {"nfe_per_image", res.nfe}, {"classes", classes}});
  std::cout << json{{"images", n}, {"nfe_per_image", res.nfe}, {"out", out.string()}}.dump() << '\n';
  return 0;
}

int cmd_panorama(const Options& o) {
  if (o.ckpt.empty()) throw UsageError("panorama: --ckpt is required");
  const auto ckpt = lego::load_checkpoint(o.ckpt);
  lego::RunConfig rc = run_config_for(o, &ckpt);
  const auto state = lego::state_from_checkpoint(ckpt, rc.stack, !o.raw, o.force);
  const std::uint64_t seed = resolve_seed(o, rc.train.seed);
  const fs::path out = resolve_out(o, rc.out_dir);
  const std::size_t H = std::size_t(o.height > 0 ? o.height : rc.stack.height);
  const std::size_t W = std::size_t(o.width > 0 ? o.width : 4 * rc.stack.width);
  const std::size_t stride = std::size_t(o.stride > 0 ? o.stride : rc.sampler.stride);
  const auto plan = lego::window_plan(H, W, std::size_t(rc.stack.height), stride);
  const auto map = o.class_map.empty() ? lego::uniform_class_map(H, W, classes_for(o, rc.stack, 1).front())
                                       : lego::load_class_map(o.class_map, H, W);
  lego::PanoramaSampler ps;
  ps.steps = o.steps > 0 ? o.steps : rc.sampler.steps;
  ps.edm = rc.sampler.edm;
  if (rc.stack.parameterization == lego::Parameterization::edm && o.steps > 0) ps.edm.steps = o.steps;
  ps.cfg_scale = o.cfg_scale ? o.cfg_scale : rc.sampler.cfg_scale;
  const auto schedule = rc.make_schedule();
  const int T = rc.stack.parameterization == lego::Parameterization::ddpm ? schedule.T() : ps.edm.steps;
  ps.skip = skip_for(o, rc, T);
  lego::Rng rng(seed);
  const auto res = lego::panorama_sample(state, rc.stack, plan, map, schedule, ps, rng);
  fs::create_directories(out);
  const std::string file = lego::detail::concat("panorama_s", seed, "_", W, "x", H, ".png");
  lego::write_png((out / file).string(), res.images.front());
  lego::write_run_manifest(out, "panorama", rc, seed,
                           {{"checkpoint", o.ckpt}, {"width", W}, {"height", H}, {"stride", stride},
                            {"windows", plan.windows.size()}, {"class_map", o.class_map}, {"nfe", res.nfe}});
  std::cout << json{{"file", (out / file).string()}, {"windows", plan.windows.size()}, {"nfe", res.nfe}}.dump()
            << '\n';
  return 0;
}

int cmd_flops(const Options& o) {
  const lego::RunConfig rc = lego::load_run_config(o.config);
  const auto& c = rc.stack;
  const auto params = lego::param_count(c);
  const auto train = lego::flops_estimate(c, lego::FlopsMode::train);
  const auto sample = lego::flops_estimate(c, lego::FlopsMode::sample);
  json bricks = json::array();
  for (std::size_t k = 0; k < c.bricks.size(); ++k) {
    const auto& b = c.bricks[k];
    bricks.push_back({{"k", k + 1},
                      {"r", b.r},
                      {"l", b.l},
                      {"d", b.d},
                      {"depth", b.depth},
                      {"heads", b.heads},
                      {"kind", b.kind},
                      {"tokens", b.tokens()},
                      {"patches", (c.height / b.r) * (c.width / b.r)},
                      {"params", params.per_brick[k]},
                      {"flops_sample", sample.per_brick[k]},
                      {"flops_train", train.per_brick[k]}});
  }
  json report = {{"config_hash", lego::config_hash(c)},
                 {"resolution", {c.height, c.width, c.channels}},
                 {"total_params", params.total},
                 {"total_params_millions", double(params.total) / 1e6},
                 {"embedder_params", params.embedder},
                 {"bricks", bricks},
                 {"flops_sample", sample.total},
                 {"flops_sample_giga", sample.total / 1e9},
                 {"flops_train", train.total}};
  if (!o.skip_mode.empty() || o.t_break) {
    const auto schedule = rc.make_schedule();
    const auto skip = skip_for(o, rc, schedule.T());
    report["flops_sample_with_skip"] = lego::flops_estimate(c, lego::FlopsMode::sample, skip).total;
  }
  std::cout << report.dump(2) << '\n';
  return 0;
}

int cmd_inspect(const Options& o) {
  if (o.ckpt.empty()) throw UsageError("inspect: --ckpt is required");
  const auto ckpt = lego::load_checkpoint(o.ckpt);
  json report = lego::checkpoint_manifest(ckpt);
  std::uint64_t model_params = 0;
  for (auto& t : report["tensors"]) {
    std::uint64_t n = 1;
    for (auto d : t["shape"]) n *= d.get<std::uint64_t>();
    t["numel"] = n;
    if (t["name"].get<std::string>().rfind("model.", 0) == 0) model_params += n;
  }
  report["model_params"] = model_params;
  if (ckpt.config.contains("stack")) {
    const auto c = ckpt.config.at("stack").get<lego::StackConfig>();
    report["param_count"] = lego::param_count(c).total;
    report["param_count_matches"] = lego::param_count(c).total == model_params;
  }
  std::cout << report.dump(2) << '\n';
  return 0;
}

void print_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LEGO brick diffusion: train, sample, panorama, flops, inspect"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  double cfg = 0.0;
  int t_break = 0;

  auto add_seed = [&](CLI::App* s) { return s->add_option("--seed", seed, "RNG seed (overrides LEGO_SEED)"); };
  auto add_sampling = [&](CLI::App* s) {
    s->add_option("--ckpt", o.ckpt, "checkpoint file")->required();
    s->add_option("--config", o.config, "run config (defaults to the checkpoint's own)");
    s->add_option("--steps", o.steps, "sampling steps")->check(CLI::PositiveNumber);
    s->add_option("--cfg-scale", cfg, "classifier-free guidance scale");
    s->add_option("--skip-mode", o.skip_mode, "top-brick skipping")->check(CLI::IsMember({"pg", "pr", "none"}));
    s->add_option("--t-break", t_break, "skip threshold timestep")->check(CLI::NonNegativeNumber);
    s->add_option("--class", o.classes, "class ids (cycled); -1 is unconditional");
    s->add_option("--out", o.out, "output directory (overrides LEGO_OUT_DIR)");
    s->add_flag("--raw", o.raw, "use raw weights instead of the EMA shadow");
    s->add_flag("--force", o.force, "accept a config-hash mismatch");
    add_seed(s);
  };

  auto* train = app.add_subcommand("train", "train a stack on the configured dataset");
  train->add_option("--config", o.config, "run config")->required()->check(CLI::ExistingFile);
  train->add_option("--ckpt", o.ckpt, "checkpoint path (default <out>/checkpoint.ckpt)");
  train->add_option("--steps", o.steps, "override the number of optimizer steps")->check(CLI::PositiveNumber);
  train->add_option("--out", o.out, "output directory (overrides LEGO_OUT_DIR)");
  train->add_flag("--resume", o.resume, "continue from --ckpt when it exists");
  train->add_flag("--force", o.force, "accept a config-hash mismatch on resume");
  add_seed(train);

  auto* sample = app.add_subcommand("sample", "generate images from a checkpoint");
  add_sampling(sample);
  sample->add_option("--n", o.n, "number of images")->check(CLI::PositiveNumber);
  sample->add_option("--workers", o.workers, "sampling threads")->check(CLI::PositiveNumber);

  auto* pano = app.add_subcommand("panorama", "generate a canvas larger than the training resolution");
  add_sampling(pano);
  pano->add_option("--width", o.width, "canvas width")->check(CLI::PositiveNumber);
  pano->add_option("--height", o.height, "canvas height")->check(CLI::PositiveNumber);
  pano->add_option("--stride", o.stride, "window stride")->check(CLI::PositiveNumber);
  pano->add_option("--class-map", o.class_map, "rectangles 'x0 y0 x1 y1 class', one per line");

  auto* flops = app.add_subcommand("flops", "parameter and FLOPs report for a config");
  flops->add_option("--config", o.config, "run config")->required()->check(CLI::ExistingFile);
  flops->add_option("--skip-mode", o.skip_mode, "top-brick skipping")->check(CLI::IsMember({"pg", "pr", "none"}));
  flops->add_option("--t-break", t_break, "skip threshold timestep")->check(CLI::NonNegativeNumber);

  auto* inspect = app.add_subcommand("inspect", "print a checkpoint manifest");
  inspect->add_option("--ckpt", o.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }
  for (auto* s : {sample, pano, train}) {
    if (s->count("--seed")) o.seed = seed;
  }
  for (auto* s : {sample, pano}) {
    if (s->count("--cfg-scale")) o.cfg_scale = cfg;
  }
  for (auto* s : {sample, pano, flops}) {
    if (s->count("--t-break")) o.t_break = t_break;
  }

  try {
    if (*train) return cmd_train(o);
    if (*sample) return cmd_sample(o);
    if (*pano) return cmd_panorama(o);
    if (*flops) return cmd_flops(o);
    if (*inspect) return cmd_inspect(o);
  } catch (const UsageError& e) {
    print_error(e.kind(), e.what());
    return 2;
  } catch (const lego::Error& e) {
    print_error(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return 1;
  }
  return 0;
}
