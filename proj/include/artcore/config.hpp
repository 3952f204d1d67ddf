#pragma once

#include "artcore/backend.hpp"
#include "artcore/core.hpp"
#include "artcore/frontend.hpp"
#include "artcore/gaussian_map.hpp"
#include "artcore/map_optimizer.hpp"
#include "artcore/providers.hpp"
#include "artcore/renderer.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

namespace artcore {

struct PipelineConfig {
  std::string provider = "synthetic";  // synthetic | files
  std::string input_dir;
  std::string out_dir = "artcore_out";
  std::uint64_t seed = 1;
  bool deterministic = false;
  bool loop_closure = true;
  int eval_stride = 8;

  SyntheticSceneConfig synthetic;
  FrontendConfig frontend;
  BackendConfig backend;
  MapConfig map;
  TrainSchedule optimizer;
  RendererConfig renderer;

  void validate() const {
    if (provider != "synthetic" && provider != "files")
      throw ConfigError("pipeline.provider must be synthetic or files");
    if (eval_stride < 2) throw ConfigError("pipeline.eval_stride must be >= 2");
    if (provider == "files" && input_dir.empty())
      throw ConfigError("pipeline.input_dir required for the files provider");
    if (optimizer.k_iters < 2) throw ConfigError("optimizer.k_iters must be >= 2");
  }
};

namespace detail {

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("not a boolean: " + v);
}

inline double parse_double(const std::string& v) {
  size_t pos = 0;
  const double d = std::stod(v, &pos);
  if (pos != v.size()) throw ConfigError("not a number: " + v);
  return d;
}

inline int parse_int(const std::string& v) {
  size_t pos = 0;
  const int i = std::stoi(v, &pos);
  if (pos != v.size()) throw ConfigError("not an integer: " + v);
  return i;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

using ConfigSetter = std::function<void(PipelineConfig&, const std::string&)>;

inline const std::map<std::string, ConfigSetter>& config_setters() {
  static const std::map<std::string, ConfigSetter> setters = {
      {"pipeline.provider", [](PipelineConfig& c, const std::string& v) { c.provider = v; }},
      {"pipeline.input_dir", [](PipelineConfig& c, const std::string& v) { c.input_dir = v; }},
      {"pipeline.out_dir", [](PipelineConfig& c, const std::string& v) { c.out_dir = v; }},
      {"pipeline.seed",
       [](PipelineConfig& c, const std::string& v) { c.seed = std::stoull(v); }},
      {"pipeline.deterministic",
       [](PipelineConfig& c, const std::string& v) { c.deterministic = parse_bool(v); }},
      {"pipeline.loop_closure",
       [](PipelineConfig& c, const std::string& v) { c.loop_closure = parse_bool(v); }},
      {"pipeline.eval_stride",
       [](PipelineConfig& c, const std::string& v) { c.eval_stride = parse_int(v); }},

      {"synthetic.landmarks",
       [](PipelineConfig& c, const std::string& v) { c.synthetic.landmark_count = parse_int(v); }},
      {"synthetic.trajectory",
       [](PipelineConfig& c, const std::string& v) {
         c.synthetic.trajectory = trajectory_shape_from_string(v);
       }},
      {"synthetic.frames",
       [](PipelineConfig& c, const std::string& v) { c.synthetic.frame_count = parse_int(v); }},
      {"synthetic.sigma_point",
       [](PipelineConfig& c, const std::string& v) { c.synthetic.sigma_point = parse_double(v); }},
      {"synthetic.outlier_fraction",
       [](PipelineConfig& c, const std::string& v) {
         c.synthetic.outlier_fraction = parse_double(v);
       }},
      {"synthetic.scale_drift",
       [](PipelineConfig& c, const std::string& v) { c.synthetic.scale_drift = parse_double(v); }},
      {"synthetic.focal_noise",
       [](PipelineConfig& c, const std::string& v) { c.synthetic.focal_noise = parse_double(v); }},
      {"synthetic.span",
       [](PipelineConfig& c, const std::string& v) {
         c.synthetic.trajectory_span = parse_double(v);
       }},
      {"synthetic.width",
       [](PipelineConfig& c, const std::string& v) { c.synthetic.width = parse_int(v); }},
      {"synthetic.height",
       [](PipelineConfig& c, const std::string& v) { c.synthetic.height = parse_int(v); }},
      {"synthetic.focal",
       [](PipelineConfig& c, const std::string& v) { c.synthetic.focal = parse_double(v); }},
      {"synthetic.provide_intrinsics",
       [](PipelineConfig& c, const std::string& v) {
         c.synthetic.provide_intrinsics = parse_bool(v);
       }},

      {"frontend.huber_delta",
       [](PipelineConfig& c, const std::string& v) { c.frontend.huber_delta = parse_double(v); }},
      {"frontend.tau_det",
       [](PipelineConfig& c, const std::string& v) { c.frontend.tau_det = parse_double(v); }},
      {"frontend.tau_m_at_512",
       [](PipelineConfig& c, const std::string& v) { c.frontend.tau_m_at_512 = parse_double(v); }},
      {"frontend.max_iterations",
       [](PipelineConfig& c, const std::string& v) { c.frontend.max_iterations = parse_int(v); }},
      {"frontend.k_f",
       [](PipelineConfig& c, const std::string& v) { c.frontend.k_f = parse_int(v); }},
      {"frontend.cov_radius",
       [](PipelineConfig& c, const std::string& v) { c.frontend.cov_radius = parse_double(v); }},
      {"frontend.freeze_focal_on_loop",
       [](PipelineConfig& c, const std::string& v) {
         c.frontend.freeze_focal_on_loop = parse_bool(v);
       }},

      {"backend.loop_score_threshold",
       [](PipelineConfig& c, const std::string& v) {
         c.backend.loop_score_threshold = parse_double(v);
       }},
      {"backend.loop_min_gap",
       [](PipelineConfig& c, const std::string& v) { c.backend.loop_min_gap = parse_int(v); }},
      {"backend.gba_iters_keyframe",
       [](PipelineConfig& c, const std::string& v) {
         c.backend.gba_iters_keyframe = parse_int(v);
       }},
      {"backend.gba_iters_loop",
       [](PipelineConfig& c, const std::string& v) { c.backend.gba_iters_loop = parse_int(v); }},
      {"backend.eps_c",
       [](PipelineConfig& c, const std::string& v) { c.backend.eps_c = parse_double(v); }},
      {"backend.c_floor",
       [](PipelineConfig& c, const std::string& v) { c.backend.c_floor = parse_double(v); }},
      {"backend.n_conf_neighbors",
       [](PipelineConfig& c, const std::string& v) {
         c.backend.n_conf_neighbors = parse_int(v);
       }},

      {"map.levels",
       [](PipelineConfig& c, const std::string& v) { c.map.levels = parse_int(v); }},
      {"map.tau_a",
       [](PipelineConfig& c, const std::string& v) { c.map.tau_a = parse_double(v); }},
      {"map.log_sigma",
       [](PipelineConfig& c, const std::string& v) { c.map.log_sigma = parse_double(v); }},
      {"map.feature_dim",
       [](PipelineConfig& c, const std::string& v) { c.map.feature_dim = parse_int(v); }},
      {"map.voxel_factor",
       [](PipelineConfig& c, const std::string& v) { c.map.voxel_factor = parse_double(v); }},
      {"map.fade_literal",
       [](PipelineConfig& c, const std::string& v) { c.map.fade_literal = parse_bool(v); }},

      {"optimizer.k_iters",
       [](PipelineConfig& c, const std::string& v) { c.optimizer.k_iters = parse_int(v); }},
      {"optimizer.current_frame_prob",
       [](PipelineConfig& c, const std::string& v) {
         c.optimizer.current_frame_prob = parse_double(v);
       }},
      {"optimizer.lr_color",
       [](PipelineConfig& c, const std::string& v) { c.optimizer.lr_color = parse_double(v); }},
      {"optimizer.lr_opacity",
       [](PipelineConfig& c, const std::string& v) { c.optimizer.lr_opacity = parse_double(v); }},
      {"optimizer.lr_mu",
       [](PipelineConfig& c, const std::string& v) { c.optimizer.lr_mu = parse_double(v); }},
      {"optimizer.lr_scale",
       [](PipelineConfig& c, const std::string& v) { c.optimizer.lr_scale = parse_double(v); }},
      {"optimizer.lr_rot",
       [](PipelineConfig& c, const std::string& v) { c.optimizer.lr_rot = parse_double(v); }},
      {"optimizer.lr_pose",
       [](PipelineConfig& c, const std::string& v) { c.optimizer.lr_pose = parse_double(v); }},
      {"optimizer.global_budget",
       [](PipelineConfig& c, const std::string& v) {
         c.optimizer.global_budget = parse_int(v);
       }},
      {"optimizer.pose_refinement",
       [](PipelineConfig& c, const std::string& v) {
         c.optimizer.pose_refinement = parse_bool(v);
       }},
      {"optimizer.use_dssim",
       [](PipelineConfig& c, const std::string& v) { c.optimizer.use_dssim = parse_bool(v); }},
      {"optimizer.dssim_weight",
       [](PipelineConfig& c, const std::string& v) {
         c.optimizer.dssim_weight = parse_double(v);
       }},

      {"renderer.threads",
       [](PipelineConfig& c, const std::string& v) { c.renderer.threads = parse_int(v); }},
      {"renderer.dilation",
       [](PipelineConfig& c, const std::string& v) { c.renderer.dilation = parse_double(v); }},
      {"renderer.background",
       [](PipelineConfig& c, const std::string& v) {
         std::istringstream ss(v);
         double r, g, b;
         char comma1 = ',', comma2 = ',';
         if (!(ss >> r >> comma1 >> g >> comma2 >> b) || comma1 != ',' || comma2 != ',')
           throw ConfigError("renderer.background wants r,g,b");
         c.renderer.background = Vec3(r, g, b);
       }},
  };
  return setters;
}

inline std::string env_name_of(const std::string& key) {
  std::string out = "ARTCORE_";
  for (char ch : key) out += (ch == '.') ? '_' : static_cast<char>(std::toupper(ch));
  return out;
}

}  // namespace detail

inline void set_config_value(PipelineConfig& cfg, const std::string& key,
                             const std::string& value) {
  const auto& setters = detail::config_setters();
  const auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown config key: " + key);
  try {
    it->second(cfg, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("bad value for " + key + ": " + value + " (" + e.what() + ")");
  }
}

/// Line-oriented `key = value` with dotted section keys and '#' comments.
inline PipelineConfig parse_config(std::istream& in) {
  PipelineConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = detail::trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    set_config_value(cfg, detail::trim(stripped.substr(0, eq)),
                     detail::trim(stripped.substr(eq + 1)));
  }
  return cfg;
}

inline PipelineConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  return parse_config(in);
}

/// Environment overrides: ARTCORE_<SECTION>_<KEY> (dots become underscores,
/// uppercased) replaces the file value.
inline void apply_env_overrides(PipelineConfig& cfg) {
  for (const auto& [key, setter] : detail::config_setters()) {
    const char* v = std::getenv(detail::env_name_of(key).c_str());
    if (v != nullptr) set_config_value(cfg, key, v);
  }
}

}  // namespace artcore
