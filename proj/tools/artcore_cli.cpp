#include "artcore/artcore.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>
#include <sstream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitProvider = 3;
constexpr int kExitIncomplete = 4;

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed,
            bool deterministic, bool no_loop_closure, const std::string& provider,
            const std::string& out_dir, const std::string& input_dir) {
  artcore::PipelineConfig cfg;
  try {
    if (!config_path.empty()) cfg = artcore::load_config_file(config_path);
    artcore::apply_env_overrides(cfg);
    if (seed) cfg.seed = *seed;
    if (deterministic) cfg.deterministic = true;
    if (no_loop_closure) cfg.loop_closure = false;
    if (!provider.empty()) cfg.provider = provider;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!input_dir.empty()) cfg.input_dir = input_dir;
    cfg.validate();
  } catch (const artcore::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    artcore::Pipeline pipeline(cfg);
    const artcore::RunReport report = pipeline.run();
    pipeline.emit_artifacts(cfg.out_dir);
    std::cout << report.to_json();
    if (!report.complete) {
      std::cerr << "run incomplete: " << report.error << "\n";
      return kExitIncomplete;
    }
    return kExitOk;
  } catch (const artcore::ProviderError& e) {
    std::cerr << "provider error: " << e.what() << "\n";
    return kExitProvider;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIncomplete;
  }
}

int cmd_eval(const std::string& est_path, const std::string& gt_path) {
  try {
    const artcore::Trajectory est = artcore::read_tum_trajectory(est_path);
    const artcore::Trajectory gt = artcore::read_tum_trajectory(gt_path);
    const artcore::AlignmentResult res = artcore::align_trajectories(est, gt);
    std::printf("ate_rmse %.9g\nn_pairs %d\nscale %.9g\n", res.ate_rmse, res.n_pairs,
                res.alignment.s);
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "eval error: " << e.what() << "\n";
    return kExitProvider;
  }
}

int cmd_render(const std::string& map_path, const std::string& pose_str, double focal,
               int width, int height, const std::string& out_path) {
  try {
    const artcore::GaussianMap map = artcore::GaussianMap::import_map(map_path);
    std::istringstream ss(pose_str);
    std::vector<double> v;
    double x;
    while (ss >> x) {
      v.push_back(x);
      if (ss.peek() == ',') ss.get();
    }
    if (v.size() != 7 && v.size() != 8) {
      std::cerr << "render error: --pose wants tx,ty,tz,qx,qy,qz,qw[,s]\n";
      return kExitConfig;
    }
    artcore::Sim3 T_wc;
    T_wc.t = artcore::Vec3(v[0], v[1], v[2]);
    T_wc.q = artcore::Quat(v[6], v[3], v[4], v[5]).normalized();
    T_wc.s = v.size() == 8 ? v[7] : 1.0;

    const artcore::CameraIntrinsics K =
        artcore::CameraIntrinsics::with_focal(focal, width, height);
    const artcore::LodSelection sel =
        artcore::lod_select(map.primitives(), T_wc.t, map.config().fade_literal);
    const artcore::RenderedImage out =
        artcore::splat(map.primitives(), sel, T_wc.inverse(), K, {});
    if (!artcore::write_png(out_path, out.color)) {
      std::cerr << "render error: cannot write " << out_path << "\n";
      return kExitIncomplete;
    }
    std::printf("rendered %zu primitives (%d selected) to %s\n", map.primitives().size(),
                static_cast<int>(sel.indices.size()), out_path.c_str());
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "render error: " << e.what() << "\n";
    return kExitProvider;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"artcore: streaming monocular reconstruction engine"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "track, map, and report on a sequence");
  std::string config_path, provider, out_dir, input_dir;
  std::uint64_t seed_value = 0;
  bool deterministic = false, no_loop = false;
  auto* seed_opt = run->add_option("--seed", seed_value, "override pipeline.seed");
  run->add_option("--config", config_path, "key = value config file");
  run->add_flag("--deterministic", deterministic, "single-threaded seeded execution");
  run->add_flag("--no-loop-closure", no_loop, "disable loop detection");
  run->add_option("--provider", provider, "synthetic | files");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--input", input_dir, "dataset directory for the files provider");

  auto* eval = app.add_subcommand("eval", "align two TUM trajectories and report ATE");
  std::string est_path, gt_path;
  eval->add_option("--traj-est", est_path, "estimated trajectory")->required();
  eval->add_option("--traj-gt", gt_path, "ground-truth trajectory")->required();

  auto* render = app.add_subcommand("render", "render an exported map from a pose");
  std::string map_path, pose_str, png_path;
  double focal = 64.0;
  int width = 64, height = 64;
  render->add_option("--map", map_path, "map file (.adgs)")->required();
  render->add_option("--pose", pose_str, "camera-to-world tx,ty,tz,qx,qy,qz,qw[,s]")
      ->required();
  render->add_option("--focal", focal, "focal length in pixels");
  render->add_option("--width", width, "image width");
  render->add_option("--height", height, "image height");
  render->add_option("--out", png_path, "output PNG")->required();

  CLI11_PARSE(app, argc, argv);

  if (run->parsed())
    return cmd_run(config_path,
                   seed_opt->count() > 0 ? std::optional(seed_value) : std::nullopt,
                   deterministic, no_loop, provider, out_dir, input_dir);
  if (eval->parsed()) return cmd_eval(est_path, gt_path);
  if (render->parsed())
    return cmd_render(map_path, pose_str, focal, width, height, png_path);
  return kExitConfig;
}
