// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <limits>
#include <mutex>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lego/config.hpp"
#include "lego/dataset.hpp"
#include "lego/images.hpp"
#include "lego/panorama.hpp"
#include "lego/rng.hpp"
#include "lego/sampler.hpp"
#include "lego/trainer.hpp"

namespace lego {

enum class DatasetKind { synthetic_blobs, image_dir };

NLOHMANN_JSON_SERIALIZE_ENUM(DatasetKind, {{DatasetKind::synthetic_blobs, "synthetic-blobs"},
                                           {DatasetKind::image_dir, "image-dir"}})

struct Rgb {
  double r = 0, g = 0, b = 0;  // in [-1, 1]
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

inline std::vector<Rgb> default_palette() {
  return {{1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}, {1, 1, -1}, {1, -1, 1}, {-1, 1, 1}, {1, 0, -1}, {0, -1, 1}};
}

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic_blobs;
  int height = 16;
  int width = 16;
  int channels = 3;
  int num_classes = 2;
  // synthetic-blobs
  int base_blobs = 1;  // class c draws base_blobs + c blobs
  double blob_radius = 0.2;  // fraction of the shorter side
  Rgb background{-0.6, -0.6, -0.6};
  std::vector<Rgb> palette = default_palette();
  std::uint64_t seed = 0;
  // image-dir
  std::string path;

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

inline void to_json(nlohmann::json& j, const Rgb& c) { j = {c.r, c.g, c.b}; }
inline void from_json(const nlohmann::json& j, Rgb& c) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("colour must be [r, g, b] in [-1, 1]");
  c = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline void to_json(nlohmann::json& j, const DatasetSpec& d) {
  j = {{"kind", d.kind},           {"height", d.height},         {"width", d.width},
       {"channels", d.channels},   {"num_classes", d.num_classes}, {"base_blobs", d.base_blobs},
       {"blob_radius", d.blob_radius}, {"background", d.background}, {"palette", d.palette},
       {"seed", d.seed},           {"path", d.path}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& d) {
  detail::check_keys(j, {"kind", "height", "width", "channels", "num_classes", "base_blobs", "blob_radius",
                         "background", "palette", "seed", "path"},
                     "dataset");
  d = DatasetSpec{};
  detail::read_opt(j, "kind", d.kind);
  detail::read_opt(j, "height", d.height);
  detail::read_opt(j, "width", d.width);
  detail::read_opt(j, "channels", d.channels);
  detail::read_opt(j, "num_classes", d.num_classes);
  detail::read_opt(j, "base_blobs", d.base_blobs);
  detail::read_opt(j, "blob_radius", d.blob_radius);
  detail::read_opt(j, "background", d.background);
  detail::read_opt(j, "palette", d.palette);
  detail::read_opt(j, "seed", d.seed);
  detail::read_opt(j, "path", d.path);
}

// ---- synthetic blobs -------------------------------------------------------

/// Soft discs of a class-specific colour on a fixed background. Sample i has
/// label i mod num_classes; geometry is drawn from a stream seeded by (seed, i).
class SyntheticBlobs : public Dataset {
 public:
  explicit SyntheticBlobs(DatasetSpec spec) : spec_(std::move(spec)) {
    if (spec_.height < 8 || spec_.width < 8) throw ConfigError("synthetic-blobs: resolution must be >= 8");
    if (spec_.num_classes < 1) throw ConfigError("synthetic-blobs: num_classes must be >= 1");
    if (spec_.channels != 3) throw ConfigError("synthetic-blobs: only 3-channel images are generated");
    if (spec_.palette.empty()) throw ConfigError("synthetic-blobs: palette is empty");
    if (spec_.base_blobs < 1 || !(spec_.blob_radius > 0.0)) {
      throw ConfigError("synthetic-blobs: base_blobs >= 1 and blob_radius > 0 required");
    }
  }

  std::size_t height() const override { return std::size_t(spec_.height); }
  std::size_t width() const override { return std::size_t(spec_.width); }
  std::size_t channels() const override { return 3; }
  int num_classes() const override { return spec_.num_classes; }

  Sample at(std::uint64_t index) const override {
    const int label = int(index % std::uint64_t(spec_.num_classes));
    Rng rng(derive_seed(spec_.seed, index));
    const std::size_t H = height(), W = width();
    Image img({H, W, 3});
    for (std::size_t p = 0; p < H * W; ++p) {
      img[3 * p] = float(spec_.background.r);
      img[3 * p + 1] = float(spec_.background.g);
      img[3 * p + 2] = float(spec_.background.b);
    }
    const Rgb col = spec_.palette[std::size_t(label) % spec_.palette.size()];
    const double radius = spec_.blob_radius * double(std::min(H, W));
    const int blobs = spec_.base_blobs + label;
    for (int k = 0; k < blobs; ++k) {
      const double cy = uniform01(rng) * double(H), cx = uniform01(rng) * double(W);
      const double rad = radius * (0.75 + 0.5 * uniform01(rng));
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double dy = double(y) + 0.5 - cy, dx = double(x) + 0.5 - cx;
          const double dist = std::sqrt(dy * dy + dx * dx);
          const double a = std::clamp(rad + 0.5 - dist, 0.0, 1.0);  // one-pixel soft edge
          if (a <= 0.0) continue;
          float* px = &img(y, x, 0);
          px[0] = float((1 - a) * px[0] + a * col.r);
          px[1] = float((1 - a) * px[1] + a * col.g);
          px[2] = float((1 - a) * px[2] + a * col.b);
        }
      }
    }
    for (auto& v : img.values()) v = std::clamp(v, -1.0f, 1.0f);
    return {std::move(img), label};
  }

 private:
  DatasetSpec spec_;
};

inline std::unique_ptr<Dataset> make_synthetic_blobs(const DatasetSpec& spec) {
  return std::make_unique<SyntheticBlobs>(spec);
}

// ---- image directory -------------------------------------------------------

/// Cycles a finite list in a fresh seeded permutation every epoch.
class ShuffledDataset : public Dataset {
 public:
  ShuffledDataset(std::shared_ptr<const ListDataset> base, std::uint64_t seed) : base_(std::move(base)), seed_(seed) {}

  std::size_t height() const override { return base_->height(); }
  std::size_t width() const override { return base_->width(); }
  std::size_t channels() const override { return base_->channels(); }
  int num_classes() const override { return base_->num_classes(); }
  std::size_t size() const { return base_->size(); }

  Sample at(std::uint64_t index) const override {
    const std::uint64_t n = base_->size(), epoch = index / n;
    std::lock_guard<std::mutex> lock(mu_);
    if (epoch != epoch_ || perm_.empty()) {
      perm_.resize(n);
      std::iota(perm_.begin(), perm_.end(), std::uint64_t{0});
      Rng rng(derive_seed(seed_, epoch));
      for (std::uint64_t i = n; i > 1; --i) std::swap(perm_[i - 1], perm_[std::uniform_int_distribution<std::uint64_t>(0, i - 1)(rng)]);
      epoch_ = epoch;
    }
    return base_->at(perm_[index % n]);
  }

 private:
  std::shared_ptr<const ListDataset> base_;
  std::uint64_t seed_;
  mutable std::mutex mu_;
  mutable std::uint64_t epoch_ = 0;
  mutable std::vector<std::uint64_t> perm_;
};

/// One sorted subdirectory per class; each PNG is centre-cropped, resized to
/// `height x width` and normalised to [-1, 1]. Unreadable files are skipped
/// with a warning on `warn`.
inline std::shared_ptr<ListDataset> ingest_image_dir(const std::string& path, std::size_t height, std::size_t width,
                                                     std::ostream& warn = std::cerr) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) throw IngestError("image-dir: '" + path + "' is not a directory");
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw ConfigError("image-dir: '" + path + "' has no class subdirectories");
  std::vector<Sample> samples;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[c]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::size_t kept = 0;
    for (const auto& f : files) {
      try {
        samples.push_back({resize(center_crop(read_png(f.string())), height, width), int(c)});
        ++kept;
      } catch (const IngestError& e) {
        warn << nlohmann::json{{"warning", "skipped"}, {"file", f.string()}, {"reason", e.what()}}.dump() << '\n';
      }
    }
    if (kept == 0) throw ConfigError("image-dir: class '" + classes[c].filename().string() + "' has no readable images");
  }
  return std::make_shared<ListDataset>(std::move(samples), int(classes.size()));
}

inline std::unique_ptr<Dataset> open_dataset(const DatasetSpec& spec) {
  if (spec.kind == DatasetKind::synthetic_blobs) return make_synthetic_blobs(spec);
  auto list = ingest_image_dir(spec.path, std::size_t(spec.height), std::size_t(spec.width));
  if (list->num_classes() != spec.num_classes) {
    throw ConfigError(detail::concat("image-dir: found ", list->num_classes(), " classes, config says ", spec.num_classes));
  }
  return std::make_unique<ShuffledDataset>(std::move(list), spec.seed);
}

// ---- run configuration -----------------------------------------------------

struct ScheduleSpec {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  friend bool operator==(const ScheduleSpec&, const ScheduleSpec&) = default;
};

struct SamplerSpec {
  int steps = 250;  // DDPM strided steps
  std::optional<double> cfg_scale;
  SkipMode skip_mode = SkipMode::none;
  int t_break = 0;
  EdmSamplerParams edm;
  int n = 16;
  int stride = 7;
};

inline bool operator==(const EdmSamplerParams& a, const EdmSamplerParams& b) {
  return a.steps == b.steps && a.s_churn == b.s_churn && a.s_min == b.s_min && a.s_max == b.s_max &&
         a.s_noise == b.s_noise;
}

inline bool operator==(const SamplerSpec& a, const SamplerSpec& b) {
  return a.steps == b.steps && a.cfg_scale == b.cfg_scale && a.skip_mode == b.skip_mode && a.t_break == b.t_break &&
         a.edm == b.edm && a.n == b.n && a.stride == b.stride;
}

/// Everything one CLI run needs, as one JSON document.
struct RunConfig {
  StackConfig stack;
  TrainConfig train;
  ScheduleSpec schedule;
  SamplerSpec sampler;
  DatasetSpec dataset;
  std::string out_dir = "out";

  NoiseSchedule make_schedule() const {
    return make_linear_schedule(schedule.T, schedule.beta_start, schedule.beta_end);
  }
};

namespace detail {

inline nlohmann::json number_or_inf(double v) {
  return std::isinf(v) ? nlohmann::json("inf") : nlohmann::json(v);
}

inline double read_number_or_inf(const nlohmann::json& j) {
  if (j.is_string() && j.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
  return j.get<double>();
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ScheduleSpec& s) {
  j = {{"T", s.T}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline void from_json(const nlohmann::json& j, ScheduleSpec& s) {
  detail::check_keys(j, {"T", "beta_start", "beta_end"}, "schedule");
  s = ScheduleSpec{};
  detail::read_opt(j, "T", s.T);
  detail::read_opt(j, "beta_start", s.beta_start);
  detail::read_opt(j, "beta_end", s.beta_end);
}

inline void to_json(nlohmann::json& j, const EdmSamplerParams& p) {
  j = {{"steps", p.steps},
       {"s_churn", p.s_churn},
       {"s_min", p.s_min},
       {"s_max", detail::number_or_inf(p.s_max)},
       {"s_noise", p.s_noise}};
}

inline void from_json(const nlohmann::json& j, EdmSamplerParams& p) {
  detail::check_keys(j, {"steps", "s_churn", "s_min", "s_max", "s_noise"}, "edm_sampler");
  p = EdmSamplerParams{};
  detail::read_opt(j, "steps", p.steps);
  detail::read_opt(j, "s_churn", p.s_churn);
  detail::read_opt(j, "s_min", p.s_min);
  if (j.contains("s_max")) p.s_max = detail::read_number_or_inf(j.at("s_max"));
  detail::read_opt(j, "s_noise", p.s_noise);
}

inline void to_json(nlohmann::json& j, const SamplerSpec& s) {
  j = {{"steps", s.steps},
       {"cfg_scale", s.cfg_scale ? nlohmann::json(*s.cfg_scale) : nlohmann::json(nullptr)},
       {"skip_mode", to_string(s.skip_mode)},
       {"t_break", s.t_break},
       {"edm", s.edm},
       {"n", s.n},
       {"stride", s.stride}};
}

inline void from_json(const nlohmann::json& j, SamplerSpec& s) {
  detail::check_keys(j, {"steps", "cfg_scale", "skip_mode", "t_break", "edm", "n", "stride"}, "sampler");
  s = SamplerSpec{};
  detail::read_opt(j, "steps", s.steps);
  if (auto it = j.find("cfg_scale"); it != j.end() && !it->is_null()) s.cfg_scale = it->get<double>();
  if (auto it = j.find("skip_mode"); it != j.end()) s.skip_mode = parse_skip_mode(it->get<std::string>());
  detail::read_opt(j, "t_break", s.t_break);
  detail::read_opt(j, "edm", s.edm);
  detail::read_opt(j, "n", s.n);
  detail::read_opt(j, "stride", s.stride);
}

inline void to_json(nlohmann::json& j, const RunConfig& r) {
  j = {{"stack", r.stack},     {"train", r.train},     {"schedule", r.schedule},
       {"sampler", r.sampler}, {"dataset", r.dataset}, {"out_dir", r.out_dir}};
}

inline void from_json(const nlohmann::json& j, RunConfig& r) {
  detail::check_keys(j, {"stack", "train", "schedule", "sampler", "dataset", "out_dir"}, "run config");
  if (!j.contains("stack")) throw ConfigError("run config: missing key 'stack'");
  r = RunConfig{};
  r.stack = j.at("stack").get<StackConfig>();
  detail::read_opt(j, "train", r.train);
  detail::read_opt(j, "schedule", r.schedule);
  detail::read_opt(j, "sampler", r.sampler);
  detail::read_opt(j, "dataset", r.dataset);
  detail::read_opt(j, "out_dir", r.out_dir);
}

inline RunConfig parse_run_config(const std::string& text, const std::string& origin = "<string>") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  RunConfig r;
  try {
    r = j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  r.stack.validate();
  return r;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

inline constexpr const char* kCodeVersion = "0.1.0";

/// Written next to every CLI output.
inline void write_run_manifest(const std::filesystem::path& dir, const std::string& command, const RunConfig& rc,
                               std::uint64_t seed, const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json m = {{"command", command},
                      {"config_hash", config_hash(rc.stack)},
                      {"seed", seed},
                      {"code_version", kCodeVersion},
                      {"config", rc}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

}  // namespace lego
