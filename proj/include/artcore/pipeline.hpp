#pragma once

#include "artcore/backend.hpp"
#include "artcore/config.hpp"
#include "artcore/frontend.hpp"
#include "artcore/gaussian_map.hpp"
#include "artcore/map_optimizer.hpp"
#include "artcore/pointmap_io.hpp"
#include "artcore/providers.hpp"
#include "artcore/renderer.hpp"
#include "artcore/trajectory_io.hpp"

#include "json.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>

namespace artcore {

struct RunReport {
  double ate_rmse = 0.0;
  double psnr_mean = 0.0;
  std::vector<double> psnr_per_frame;
  std::vector<int> eval_frame_ids;
  std::vector<int> n_gaussians_per_level;
  double frontend_ms = 0.0, backend_ms = 0.0, mapper_ms = 0.0;
  std::vector<std::string> frame_classes;
  int n_loop_edges = 0;
  bool complete = false;
  std::string error;

  std::string to_json() const {
    nlohmann::json j;
    j["ate_rmse"] = ate_rmse;
    j["psnr_mean"] = psnr_mean;
    j["psnr_per_frame"] = psnr_per_frame;
    j["n_gaussians_per_level"] = n_gaussians_per_level;
    j["timing"] = {{"frontend_ms", frontend_ms},
                   {"backend_ms", backend_ms},
                   {"mapper_ms", mapper_ms}};
    j["frame_classes"] = frame_classes;
    j["n_loop_edges"] = n_loop_edges;
    j["complete"] = complete;
    return j.dump(2) + "\n";
  }
};

// ---------------------------------------------------------------------------
// Bounded single-producer/single-consumer queue
// ---------------------------------------------------------------------------

template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(size_t capacity) : capacity_(std::max<size_t>(1, capacity)) {}

  bool push(T value) {
    std::unique_lock lock(mutex_);
    cv_space_.wait(lock, [&] { return queue_.size() < capacity_ || closed_; });
    if (closed_) return false;
    queue_.push_back(std::move(value));
    cv_item_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock lock(mutex_);
    cv_item_.wait(lock, [&] { return !queue_.empty() || closed_; });
    if (queue_.empty()) return std::nullopt;
    T out = std::move(queue_.front());
    queue_.pop_front();
    cv_space_.notify_one();
    return out;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    cv_item_.notify_all();
    cv_space_.notify_all();
  }

 private:
  std::mutex mutex_;
  std::condition_variable cv_item_, cv_space_;
  std::deque<T> queue_;
  size_t capacity_;
  bool closed_ = false;
};

// ---------------------------------------------------------------------------
// Stage messages
// ---------------------------------------------------------------------------

struct MapperMessage {
  int frame_id = -1;
  FrameClass frame_class = FrameClass::Common;
  bool tracked = false;
  bool is_eval = false;
  Sim3 T_wc;  // camera-to-world resolved against the backend snapshot
  Pointmap pointmap;
  ScalarMap confidence;
};

// ---------------------------------------------------------------------------
// SVG overlay
// ---------------------------------------------------------------------------

inline void write_trajectory_svg(const std::string& path, const std::vector<Vec3>& est,
                                 const std::vector<Vec3>& gt,
                                 const std::vector<std::pair<Vec3, Vec3>>& loop_edges) {
  double lo_x = 1e30, hi_x = -1e30, lo_y = 1e30, hi_y = -1e30;
  auto grow = [&](const Vec3& p) {
    lo_x = std::min(lo_x, p.x());
    hi_x = std::max(hi_x, p.x());
    lo_y = std::min(lo_y, p.y());
    hi_y = std::max(hi_y, p.y());
  };
  for (const auto& p : est) grow(p);
  for (const auto& p : gt) grow(p);
  if (lo_x > hi_x) {
    lo_x = lo_y = -1.0;
    hi_x = hi_y = 1.0;
  }
  const double span = std::max({hi_x - lo_x, hi_y - lo_y, 1e-9});
  const double scale = 480.0 / span;
  auto sx = [&](const Vec3& p) { return 10.0 + (p.x() - lo_x) * scale; };
  auto sy = [&](const Vec3& p) { return 10.0 + (p.y() - lo_y) * scale; };

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open svg for write: " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"500\" height=\"500\" "
         "viewBox=\"0 0 500 500\">\n";
  auto polyline = [&](const std::vector<Vec3>& pts, const char* color) {
    out << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& p : pts) out << sx(p) << ',' << sy(p) << ' ';
    out << "\"/>\n";
  };
  polyline(gt, "#444444");
  polyline(est, "#d62728");
  for (const auto& [a, b] : loop_edges)
    out << "  <line class=\"loop\" stroke=\"#1f77b4\" stroke-dasharray=\"3,2\" x1=\""
        << sx(a) << "\" y1=\"" << sy(a) << "\" x2=\"" << sx(b) << "\" y2=\"" << sy(b)
        << "\"/>\n";
  out << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

class Pipeline {
 public:
  explicit Pipeline(const PipelineConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.deterministic) cfg_.renderer.threads = 1;
    if (cfg_.provider == "synthetic") {
      cfg_.synthetic.seed = cfg_.seed;
      scene_ = std::make_unique<SyntheticScene>(cfg_.synthetic);
      provider_ = scene_.get();
      frames_ = scene_->frames();
      K_ = scene_->intrinsics();
      for (int i = 0; i < scene_->frame_count(); ++i)
        gt_.push_back({frames_[i].timestamp, scene_->rigid_pose(i)});
    } else {
      files_ = std::make_unique<FilesProvider>(cfg_.input_dir);
      provider_ = files_.get();
      frames_ = files_->load_frames();
      const Pointmap pm0 = read_pointmap(cfg_.input_dir + "/" + pointmap_filename(0));
      K_ = CameraIntrinsics::with_focal(files_->focal_estimate(frames_[0]), pm0.width,
                                        pm0.height);
      const std::string gt_path = cfg_.input_dir + "/groundtruth.txt";
      if (std::filesystem::exists(gt_path)) gt_ = read_tum_trajectory(gt_path);
    }
  }

  const GaussianMap& map() const { return *map_; }
  const Backend& backend() const { return *backend_; }
  const MapOptimizer& optimizer() const { return *optimizer_; }
  const FrameUpdateLedger& ledger() const { return optimizer_->ledger(); }
  const Trajectory& estimated_trajectory() const { return est_traj_; }

  bool is_eval_frame(int id) const { return (id % cfg_.eval_stride) == cfg_.eval_stride - 1; }

  RunReport run() {
    setup_stages();
    report_ = RunReport{};
    report_.frame_classes.assign(frames_.size(), "common");
    try {
      if (cfg_.deterministic)
        run_sequential();
      else
        run_threaded();
      if (stage_error_.empty()) {
        finalize();
        report_.complete = true;
      }
    } catch (const std::exception& e) {
      stage_error_ = e.what();
    }
    if (!stage_error_.empty()) {
      report_.complete = false;
      report_.error = stage_error_;
    }
    collect_metrics();
    return report_;
  }

  void emit_artifacts(const std::string& out_dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::ofstream(out_dir + "/metrics.json") << report_.to_json();
    write_tum_trajectory(out_dir + "/trajectory_est.txt", est_traj_);
    if (!gt_.empty()) write_tum_trajectory(out_dir + "/trajectory_gt.txt", gt_);
    map_->export_map(out_dir + "/map.adgs");
    std::ofstream(out_dir + "/graph.txt") << backend_->dump();

    for (size_t k = 0; k < report_.eval_frame_ids.size(); ++k) {
      const int id = report_.eval_frame_ids[k];
      char name[64];
      std::snprintf(name, sizeof(name), "%s/eval_%06d_render.png", out_dir.c_str(), id);
      write_png(name, eval_renders_[k]);
      std::snprintf(name, sizeof(name), "%s/eval_%06d_target.png", out_dir.c_str(), id);
      write_png(name, frames_[id].image);
    }

    std::vector<Vec3> est_pts, gt_pts;
    for (const auto& e : est_traj_) est_pts.push_back(e.pose.t);
    for (const auto& e : gt_) gt_pts.push_back(e.pose.t);
    std::vector<std::pair<Vec3, Vec3>> loops;
    for (const auto& e : backend_->graph().edges)
      if (e.kind == EdgeKind::Loop)
        loops.push_back({backend_->graph().nodes.at(e.i).t,
                         backend_->graph().nodes.at(e.j).t});
    write_trajectory_svg(out_dir + "/overlay.svg", est_pts, gt_pts, loops);
  }

 private:
  using Clock = std::chrono::steady_clock;

  struct FrameLink {
    int ref_kf = -1;
    Sim3 T_kc;
    bool tracked = false;
  };

  void setup_stages() {
    frontend_ = std::make_unique<Frontend>(cfg_.frontend, K_);
    backend_ = std::make_unique<Backend>(cfg_.backend, K_);
    map_ = std::make_unique<GaussianMap>(cfg_.map);
    optimizer_ =
        std::make_unique<MapOptimizer>(*map_, cfg_.optimizer, cfg_.renderer, cfg_.seed);
    links_.assign(frames_.size(), FrameLink{});
    history_.clear();
    eval_renders_.clear();
    est_traj_.clear();
    stage_error_.clear();
    freeze_focal_signal_ = false;
  }

  Sim3 resolve_pose(int frame_id) const {
    const auto& nodes = backend_->graph().nodes;
    const auto it = nodes.find(frame_id);
    if (it != nodes.end()) return it->second;
    const FrameLink& link = links_[frame_id];
    return nodes.at(link.ref_kf) * link.T_kc;
  }

  /// Backend stage body: graph updates for keyframes, pose resolution and
  /// confidence for frames headed to the mapper.
  MapperMessage backend_process(FrontendOutput fo) {
    const int id = fo.frame_id;
    MapperMessage msg;
    msg.frame_id = id;
    msg.frame_class = fo.frame_class;
    msg.tracked = fo.tracked;
    msg.is_eval = is_eval_frame(id);
    if (!fo.tracked) return msg;

    if (fo.promoted) {
      const PromotedKeyframe& pk = *fo.promoted;
      const Sim3 pose = backend_->graph().nodes.at(pk.ref_keyframe) * pk.T_kc;
      const auto res = backend_->add_keyframe(pk.frame_id, pose, frames_[pk.frame_id],
                                              pk.pointmap, pk.corrs, *provider_,
                                              cfg_.loop_closure);
      report_.frame_classes[pk.frame_id] = "keyframe";
      if (res.loop.detected) on_loop_detected();
    }

    links_[id] = {fo.ref_keyframe, fo.T_kc, true};
    report_.frame_classes[id] = to_string(fo.frame_class);

    if (fo.frame_class == FrameClass::Keyframe) {
      const Sim3 pose = backend_->graph().nodes.empty()
                            ? Sim3::identity()
                            : backend_->graph().nodes.at(fo.ref_keyframe) * fo.T_kc;
      const auto res = backend_->add_keyframe(id, pose, frames_[id], fo.pointmap,
                                              fo.corrs, *provider_, cfg_.loop_closure);
      if (res.loop.detected) on_loop_detected();
    }

    msg.T_wc = resolve_pose(id);
    msg.pointmap = std::move(fo.pointmap);
    if (!msg.is_eval && fo.frame_class != FrameClass::Common)
      msg.confidence =
          backend_->confidence_for(frames_[id], msg.pointmap, msg.T_wc, *provider_);
    return msg;
  }

  /// Mapper stage body: LoD insertion for mapper/keyframe frames, then the
  /// streaming optimization schedule. Evaluation frames contribute nothing.
  void mapper_process(const MapperMessage& msg) {
    if (!msg.tracked || msg.is_eval) return;

    SupervisionFrame sf;
    sf.id = msg.frame_id;
    sf.image = frames_[msg.frame_id].image;
    sf.world_to_cam = msg.T_wc.inverse();
    sf.K = K_;

    if (msg.frame_class != FrameClass::Common) {
      LevelInputs full{sf.image, msg.pointmap, msg.confidence, K_};
      if (full.confidence.data.empty())
        full.confidence = ScalarMap(K_.height, K_.width, cfg_.backend.c_floor);
      std::vector<Image> rendered;
      LevelInputs level = full;
      for (int l = 0; l < cfg_.map.levels; ++l) {
        const LodSelection sel = lod_select(map_->primitives(), msg.T_wc.t,
                                            cfg_.map.fade_literal);
        rendered.push_back(
            splat(map_->primitives(), sel, sf.world_to_cam, level.K, cfg_.renderer).color);
        if (l + 1 < cfg_.map.levels) level = downsample_level(level);
      }
      map_->insert_from_frame(msg.frame_id, full, rendered, msg.T_wc);
    }
    optimizer_->streaming_step(msg.frame_class, sf, history_);
    history_.push_back(std::move(sf));
  }

  void on_loop_detected() {
    if (cfg_.frontend.freeze_focal_on_loop) freeze_focal_signal_ = true;
  }

  void run_sequential() {
    for (const Frame& frame : frames_) {
      if (freeze_focal_signal_) frontend_->freeze_focal();
      const auto t0 = Clock::now();
      FrontendOutput fo = process_frontend_checked(frame);
      const auto t1 = Clock::now();
      MapperMessage msg = backend_process(std::move(fo));
      const auto t2 = Clock::now();
      mapper_process(msg);
      const auto t3 = Clock::now();
      accumulate_timing(t0, t1, t2, t3);
    }
  }

  FrontendOutput process_frontend_checked(const Frame& frame) {
    try {
      return frontend_->process(frame, *provider_);
    } catch (const std::exception& e) {
      throw std::runtime_error("frame " + std::to_string(frame.id) + ": " + e.what());
    }
  }

  void run_threaded() {
    BoundedQueue<FrontendOutput> q1(queue_capacity_);
    BoundedQueue<MapperMessage> q2(queue_capacity_);
    std::mutex error_mutex;

    auto record_error = [&](const std::string& what) {
      std::lock_guard lock(error_mutex);
      if (stage_error_.empty()) stage_error_ = what;
      q1.close();
      q2.close();
    };

    std::thread frontend_thread([&] {
      try {
        for (const Frame& frame : frames_) {
          if (freeze_focal_signal_) frontend_->freeze_focal();
          const auto t0 = Clock::now();
          FrontendOutput fo = process_frontend_checked(frame);
          report_.frontend_ms += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
          if (!q1.push(std::move(fo))) return;
        }
      } catch (const std::exception& e) {
        record_error(e.what());
      }
      q1.close();
    });

    std::thread backend_thread([&] {
      try {
        while (auto fo = q1.pop()) {
          const auto t0 = Clock::now();
          MapperMessage msg = backend_process(std::move(*fo));
          report_.backend_ms += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
          if (!q2.push(std::move(msg))) return;
        }
      } catch (const std::exception& e) {
        record_error(e.what());
      }
      q2.close();
    });

    std::thread mapper_thread([&] {
      try {
        while (auto msg = q2.pop()) {
          const auto t0 = Clock::now();
          mapper_process(*msg);
          report_.mapper_ms += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        }
      } catch (const std::exception& e) {
        record_error(e.what());
      }
    });

    frontend_thread.join();
    backend_thread.join();
    mapper_thread.join();
  }

  void accumulate_timing(Clock::time_point t0, Clock::time_point t1, Clock::time_point t2,
                         Clock::time_point t3) {
    report_.frontend_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    report_.backend_ms += std::chrono::duration<double, std::milli>(t2 - t1).count();
    report_.mapper_ms += std::chrono::duration<double, std::milli>(t3 - t2).count();
  }

  void finalize() {
    // Global photometric phase; with pose refinement on, the refined poses
    // replace the tracked ones for supervised frames.
    optimizer_->global_phase(history_, cfg_.optimizer.global_budget);
    std::map<int, Sim3> refined;
    if (cfg_.optimizer.pose_refinement)
      for (const auto& sf : history_) refined[sf.id] = sf.world_to_cam.inverse();

    est_traj_.clear();
    for (const Frame& frame : frames_) {
      if (frame.id != 0 && !links_[frame.id].tracked &&
          !backend_->graph().nodes.count(frame.id))
        continue;
      const auto it = refined.find(frame.id);
      est_traj_.push_back(
          {frame.timestamp, it != refined.end() ? it->second : resolve_pose(frame.id)});
    }

    eval_renders_.clear();
    report_.eval_frame_ids.clear();
    report_.psnr_per_frame.clear();
    for (const Frame& frame : frames_) {
      if (!is_eval_frame(frame.id)) continue;
      if (frame.id != 0 && !links_[frame.id].tracked &&
          !backend_->graph().nodes.count(frame.id))
        continue;
      const Sim3 T_cw = resolve_pose(frame.id).inverse();
      const LodSelection sel =
          lod_select(map_->primitives(), resolve_pose(frame.id).t, cfg_.map.fade_literal);
      const RenderedImage render =
          splat(map_->primitives(), sel, T_cw, K_, cfg_.renderer);
      report_.eval_frame_ids.push_back(frame.id);
      report_.psnr_per_frame.push_back(psnr(render.color, frame.image));
      eval_renders_.push_back(render.color);
    }
  }

  void collect_metrics() {
    report_.n_gaussians_per_level = map_ ? map_->level_counts()
                                         : std::vector<int>(cfg_.map.levels, 0);
    if (!report_.psnr_per_frame.empty()) {
      double sum = 0.0;
      for (double v : report_.psnr_per_frame) sum += v;
      report_.psnr_mean = sum / static_cast<double>(report_.psnr_per_frame.size());
    }
    if (backend_)
      for (const auto& e : backend_->graph().edges)
        report_.n_loop_edges += e.kind == EdgeKind::Loop;
    if (!gt_.empty() && est_traj_.size() >= 3) {
      try {
        report_.ate_rmse = align_trajectories(est_traj_, gt_).ate_rmse;
      } catch (const std::exception&) {
        report_.ate_rmse = 0.0;
      }
    }
    if (cfg_.deterministic) {
      report_.frontend_ms = 0.0;
      report_.backend_ms = 0.0;
      report_.mapper_ms = 0.0;
    }
  }

 public:
  /// Queue capacity used by the threaded mode (stress tests shrink it).
  void set_queue_capacity(size_t cap) { queue_capacity_ = std::max<size_t>(1, cap); }

 private:
  PipelineConfig cfg_;
  std::unique_ptr<SyntheticScene> scene_;
  std::unique_ptr<FilesProvider> files_;
  const MatchingProvider* provider_ = nullptr;
  std::vector<Frame> frames_;
  Trajectory gt_;
  CameraIntrinsics K_;

  std::unique_ptr<Frontend> frontend_;
  std::unique_ptr<Backend> backend_;
  std::unique_ptr<GaussianMap> map_;
  std::unique_ptr<MapOptimizer> optimizer_;
  std::vector<FrameLink> links_;
  std::vector<SupervisionFrame> history_;
  std::vector<Image> eval_renders_;
  Trajectory est_traj_;
  RunReport report_;
  std::string stage_error_;
  std::atomic<bool> freeze_focal_signal_{false};
  size_t queue_capacity_ = 8;
};

}  // namespace artcore
