// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lego/sampler.hpp"

namespace lego {

struct WindowOffset {
  std::size_t top = 0;
  std::size_t left = 0;
  friend bool operator==(const WindowOffset&, const WindowOffset&) = default;
};

/// Sliding w x w windows over a larger canvas, with per-pixel coverage counts.
struct WindowPlan {
  std::size_t height = 0, width = 0, window = 0, stride = 0;
  std::vector<WindowOffset> windows;  // row-major over (top, left)
  std::vector<int> weight_map;        // height x width

  int weight(std::size_t y, std::size_t x) const { return weight_map[y * width + x]; }
};

/// Offsets along one axis: 0, s, 2s, ... while the window fits, then one
/// window clamped to the far edge if the sweep fell short of it.
inline std::vector<std::size_t> window_offsets(std::size_t extent, std::size_t window, std::size_t stride) {
  std::vector<std::size_t> out;
  for (std::size_t o = 0; o + window <= extent; o += stride) out.push_back(o);
  if (out.back() + window < extent) out.push_back(extent - window);
  return out;
}

inline void accumulate_weights(WindowPlan& p) {
  p.weight_map.assign(p.height * p.width, 0);
  for (const auto& w : p.windows)
    for (std::size_t y = 0; y < p.window; ++y)
      for (std::size_t x = 0; x < p.window; ++x) ++p.weight_map[(w.top + y) * p.width + w.left + x];
}

inline WindowPlan window_plan(std::size_t height, std::size_t width, std::size_t window, std::size_t stride) {
  if (window < 1 || stride < 1) {
    throw ParameterError(detail::concat("window plan: window and stride must be >= 1, got ", window, " and ", stride));
  }
  if (stride > window) {
    throw ParameterError(detail::concat("window plan: stride ", stride, " exceeds window ", window,
                                        " and would leave pixels uncovered"));
  }
  if (height < window || width < window) {
    throw ParameterError(detail::concat("window plan: target ", height, "x", width, " is smaller than window ", window));
  }
  WindowPlan p{height, width, window, stride, {}, {}};
  for (auto top : window_offsets(height, window, stride))
    for (auto left : window_offsets(width, window, stride)) p.windows.push_back({top, left});
  accumulate_weights(p);
  return p;
}

/// Per-pixel class ids over a canvas; -1 marks the null class.
struct ClassMap {
  std::size_t height = 0, width = 0;
  std::vector<int> ids;

  int at(std::size_t y, std::size_t x) const { return ids[y * width + x]; }
};

inline ClassMap uniform_class_map(std::size_t height, std::size_t width, int class_id) {
  return {height, width, std::vector<int>(height * width, class_id)};
}

/// Parses `x0 y0 x1 y1 class` rectangles (x1, y1 exclusive). Later lines win;
/// blank lines and `#` comments are ignored; every pixel must be covered.
inline ClassMap parse_class_map(std::istream& in, std::size_t height, std::size_t width) {
  ClassMap m{height, width, std::vector<int>(height * width, -2)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    long x0 = 0, y0 = 0, x1 = 0, y1 = 0, cls = 0;
    if (!(ls >> x0)) continue;
    std::string extra;
    if (!(ls >> y0 >> x1 >> y1 >> cls) || (ls >> extra)) {
      throw FormatError(detail::concat("class map line ", lineno, ": expected 'x0 y0 x1 y1 class'"));
    }
    if (x0 < 0 || y0 < 0 || x1 <= x0 || y1 <= y0 || x1 > long(width) || y1 > long(height)) {
      throw FormatError(detail::concat("class map line ", lineno, ": rectangle [", x0, ",", x1, ")x[", y0, ",", y1,
                                       ") outside the ", width, "x", height, " canvas or empty"));
    }
    for (long y = y0; y < y1; ++y)
      for (long x = x0; x < x1; ++x) m.ids[std::size_t(y) * width + std::size_t(x)] = int(cls);
  }
  for (std::size_t i = 0; i < m.ids.size(); ++i) {
    if (m.ids[i] == -2) {
      throw FormatError(detail::concat("class map leaves pixel (x=", i % width, ", y=", i / width, ") unassigned"));
    }
  }
  return m;
}

inline ClassMap load_class_map(const std::string& path, std::size_t height, std::size_t width) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open class map '" + path + "'");
  return parse_class_map(in, height, width);
}

/// Most frequent class inside a window; ties go to the smallest id.
inline int majority_class(const ClassMap& m, const WindowOffset& w, std::size_t window) {
  std::map<int, std::size_t> counts;
  for (std::size_t y = 0; y < window; ++y)
    for (std::size_t x = 0; x < window; ++x) ++counts[m.at(w.top + y, w.left + x)];
  int best = 0;
  std::size_t n = 0;
  for (const auto& [cls, c] : counts) {
    if (c > n) {
      best = cls;
      n = c;
    }
  }
  return best;
}

/// Lifts a window-level eps model to the whole canvas: every window is
/// evaluated, predictions are summed per pixel and divided by coverage.
template <typename T>
EpsModel<T> canvas_eps_model(const WindowPlan& plan, EpsModel<T> window_model) {
  return [&plan, window_model = std::move(window_model)](const std::vector<Tensor<T>>& canvases, const NoiseLevel& level,
                                                         const EpsFrame& frame, const std::vector<bool>& active) {
    const std::size_t w = plan.window, nw = plan.windows.size();
    std::vector<Tensor<T>> crops;
    for (const auto& c : canvases) {
      if (c.dim(0) != plan.height || c.dim(1) != plan.width) {
        throw ShapeError(detail::concat("panorama: canvas ", detail::shape_str(c.shape()), " does not match plan ",
                                        plan.height, "x", plan.width));
      }
      const std::size_t C = c.dim(2);
      for (const auto& o : plan.windows) {
        Tensor<T> crop({w, w, C});
        for (std::size_t y = 0; y < w; ++y)
          std::copy_n(&c(o.top + y, o.left, 0), w * C, &crop(y, 0, 0));
        crops.push_back(std::move(crop));
      }
    }
    const auto eps = window_model(crops, level, frame, active);
    std::vector<std::vector<double>> out;
    for (std::size_t b = 0; b < canvases.size(); ++b) {
      const std::size_t C = canvases[b].dim(2);
      std::vector<double> acc(canvases[b].size(), 0.0);
      for (std::size_t k = 0; k < nw; ++k) {
        const auto& o = plan.windows[k];
        const auto& e = eps[b * nw + k];
        for (std::size_t y = 0; y < w; ++y)
          for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < C; ++c) acc[((o.top + y) * plan.width + o.left + x) * C + c] += e[(y * w + x) * C + c];
      }
      for (std::size_t p = 0; p < plan.height * plan.width; ++p) {
        const int n = plan.weight_map[p];
        if (n < 1) throw StructuralError(detail::concat("panorama: pixel ", p, " has zero coverage"));
        for (std::size_t c = 0; c < C; ++c) acc[p * C + c] /= double(n);
      }
      out.push_back(std::move(acc));
    }
    return out;
  };
}

struct PanoramaSampler {
  int steps = 250;                    // DDPM strided steps
  EdmSamplerParams edm;               // used when the stack is EDM
  std::optional<double> cfg_scale;
  SkipSchedule skip;
};

/// Per-window classes from the class map, checked against the trained labels.
inline std::vector<int> window_classes(const WindowPlan& plan, const ClassMap& map, const StackConfig& config) {
  if (map.height != plan.height || map.width != plan.width) {
    throw ShapeError(detail::concat("panorama: class map ", map.width, "x", map.height, " does not cover canvas ",
                                    plan.width, "x", plan.height));
  }
  std::vector<int> cls;
  for (const auto& w : plan.windows) {
    const int c = majority_class(map, w, plan.window);
    if (c >= config.num_classes || c < -1) {
      throw ConfigError(detail::concat("panorama: class ", c, " is not in the trained label set [0, ",
                                       config.num_classes, ")"));
    }
    cls.push_back(c);
  }
  return cls;
}

/// Generates one canvas. `noise` supplies every standard-normal draw (initial
/// canvas, then one canvas-sized draw per stochastic step).
template <typename T>
SampleResult<T> panorama_sample(const StackState<T>& state, const StackConfig& config, const WindowPlan& plan,
                                const ClassMap& class_map, const NoiseSchedule& schedule, const PanoramaSampler& ps,
                                NoiseSource<T> noise) {
  if (config.height != config.width || plan.window != std::size_t(config.height)) {
    throw ConfigError(detail::concat("panorama: window ", plan.window, " must equal the trained resolution ",
                                     config.height, "x", config.width));
  }
  SampleResult<T> res;
  auto window_model = stack_eps_model(state, config, window_classes(plan, class_map, config), ps.cfg_scale, &res.nfe);
  const auto model = canvas_eps_model<T>(plan, std::move(window_model));
  const Shape shape{plan.height, plan.width, std::size_t(config.channels)};
  std::vector<NoiseSource<T>> sources{std::move(noise)};
  if (config.parameterization == Parameterization::ddpm) {
    res.images = ddpm_sample_eps<T>(model, shape, schedule, ps.skip, ps.steps, sources);
  } else {
    res.images = edm_heun_sample_eps<T>(model, shape, config.edm, ps.edm, ps.skip, sources);
  }
  return res;
}

/// Draws the canvas stream exactly as ddpm_sample / edm_heun_sample draw the
/// stream of their first image.
template <typename T>
SampleResult<T> panorama_sample(const StackState<T>& state, const StackConfig& config, const WindowPlan& plan,
                                const ClassMap& class_map, const NoiseSchedule& schedule, const PanoramaSampler& ps,
                                Rng& rng) {
  Rng stream(derive_seed(rng(), 0));
  return panorama_sample(state, config, plan, class_map, schedule, ps, rng_noise<T>(stream));
}

}  // namespace lego
