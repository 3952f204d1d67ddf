#pragma once

#include "artcore/core.hpp"
#include "artcore/image.hpp"
#include "artcore/lie.hpp"
#include "artcore/pointmap.hpp"
#include "artcore/pointmap_io.hpp"
#include "artcore/trajectory_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace artcore {

struct MatchResult {
  Pointmap pm_a;
  Pointmap pm_b;
  CorrespondenceSet corrs;
};

/// Contract shared by the neural-module stand-ins: two-view matching,
/// retrieval similarity, multi-frame loop geometry, and focal estimation.
/// Implementations are read-only after construction and safe to call from
/// multiple threads.
class MatchingProvider {
 public:
  virtual ~MatchingProvider() = default;

  virtual MatchResult match(const Frame& a, const Frame& b) const = 0;
  virtual double retrieval_score(int query_id, int candidate_id) const = 0;
  /// Pointmaps for the given frames in one shared coordinate frame with an
  /// arbitrary Sim(3) gauge; consumers must not assume a metric gauge.
  virtual std::vector<Pointmap> multi_frame_pointmaps(const std::vector<int>& ids) const = 0;
  virtual double focal_estimate(const Frame& frame) const = 0;
};

// ---------------------------------------------------------------------------
// Synthetic scene
// ---------------------------------------------------------------------------

enum class TrajectoryShape { Circle, Lissajous, LineWithReturn };

inline TrajectoryShape trajectory_shape_from_string(const std::string& s) {
  if (s == "circle") return TrajectoryShape::Circle;
  if (s == "lissajous") return TrajectoryShape::Lissajous;
  if (s == "line-with-return") return TrajectoryShape::LineWithReturn;
  throw ConfigError("unknown trajectory shape: " + s);
}

struct SyntheticSceneConfig {
  int landmark_count = 220;
  TrajectoryShape trajectory = TrajectoryShape::Circle;
  int frame_count = 40;
  double sigma_point = 0.0;       // per-axis 3D noise, scene units
  double outlier_fraction = 0.0;  // in [0, 1)
  double scale_drift = 1.0;       // measured-pointmap scale factor per frame
  double focal_noise = 0.0;       // relative noise of focal_estimate
  double trajectory_span = 1.0;   // fraction of the path covered by the frames
  std::uint64_t seed = 1;
  int width = 64;
  int height = 64;
  double focal = 64.0;
  bool provide_intrinsics = true;
  int max_correspondences = 4000;
};

/// Deterministic scene of colored planar discs observed by a moving camera.
/// Ground truth and every provider output are fully determined by the config.
class SyntheticScene : public MatchingProvider {
 public:
  explicit SyntheticScene(const SyntheticSceneConfig& cfg) : cfg_(cfg) {
    if (cfg.outlier_fraction < 0.0 || cfg.outlier_fraction >= 1.0)
      throw std::invalid_argument("outlier_fraction must be in [0, 1)");
    if (cfg.sigma_point < 0.0) throw std::invalid_argument("sigma_point must be >= 0");
    K_ = CameraIntrinsics::with_focal(cfg.focal, cfg.width, cfg.height);
    build_landmarks();
    build_trajectory();
    render_all();
  }

  const CameraIntrinsics& intrinsics() const { return K_; }
  const std::vector<Frame>& frames() const { return frames_; }
  int frame_count() const { return cfg_.frame_count; }

  /// Rigid camera-to-world ground truth (the trajectory that goes to TUM).
  const Sim3& rigid_pose(int id) const { return rigid_wc_.at(check_id(id)); }

  /// Camera-to-world pose of the *measured* (scale-drifted) camera frame;
  /// relative transforms between these are the tracking ground truth.
  Sim3 gt_pose(int id) const {
    Sim3 descale;
    descale.s = 1.0 / drift_.at(check_id(id));
    return rigid_wc_[id] * descale;
  }

  /// Ground-truth relative transform mapping measured frame c into measured
  /// frame k: P_k = T_kc(P_c).
  Sim3 gt_relative(int k, int c) const { return gt_pose(k).inverse() * gt_pose(c); }

  const Pointmap& pointmap(int id) const { return pointmaps_.at(check_id(id)); }

  MatchResult match(const Frame& a, const Frame& b) const override {
    const int ia = check_id(a.id), ib = check_id(b.id);
    MatchResult out;
    out.pm_a = pointmaps_[ia];
    out.pm_b = pointmaps_[ib];
    out.corrs.frame_c = a.id;
    out.corrs.frame_k = b.id;

    if (ia == ib) {
      for (int y = 0; y < cfg_.height; ++y)
        for (int x = 0; x < cfg_.width; ++x)
          if (pointmaps_[ia].is_valid(y, x)) {
            Correspondence c;
            c.pixel_c = c.pixel_k = Vec2(x, y);
            c.p_c = c.p_k = pointmaps_[ia].point(y, x);
            out.corrs.items.push_back(c);
          }
      return out;
    }

    std::mt19937_64 rng(mix_seed(cfg_.seed, 0x10000 + 100003ull * ia + ib));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const int n_valid = pointmaps_[ia].valid_count();
    const int stride = std::max(1, (n_valid + cfg_.max_correspondences - 1) /
                                       cfg_.max_correspondences);
    const Sim3 cam_from_world_b = rigid_wc_[ib].inverse();
    int seen = 0;
    for (int y = 0; y < cfg_.height; ++y) {
      for (int x = 0; x < cfg_.width; ++x) {
        const size_t idx = pointmaps_[ia].index(y, x);
        if (!pointmaps_[ia].valid[idx]) continue;
        if (seen++ % stride != 0) continue;
        const Vec3 w = world_hits_[ia][idx];
        const int lm = hit_ids_[ia][idx];
        const Vec3 p_b_true = cam_from_world_b.apply(w);
        if (p_b_true.z() <= z_near_) continue;
        const double u = K_.fx * p_b_true.x() / p_b_true.z() + K_.cx;
        const double v = K_.fy * p_b_true.y() / p_b_true.z() + K_.cy;
        if (!K_.contains(u, v)) continue;
        if (ia != ib) {
          // Occlusion: the exact ray from b toward this point must hit the
          // same landmark first.
          const auto [hit_lm, hit_s] = cast_ray(rigid_wc_[ib].t, w - rigid_wc_[ib].t);
          if (hit_lm != lm || std::abs(hit_s - 1.0) > 1e-6) continue;
        }

        Correspondence c;
        c.pixel_c = Vec2(x, y);
        c.p_c = pointmaps_[ia].points[idx];
        if (cfg_.outlier_fraction > 0.0 && uni(rng) < cfg_.outlier_fraction) {
          // Wrong match: a uniform draw inside frame b's measured bounding
          // box, with the pixel kept consistent with the bogus point. Draws
          // that happen to agree with the true geometry are not outliers and
          // are redrawn.
          for (int attempt = 0; attempt < 64; ++attempt) {
            const Vec3 bogus = random_in_bbox(ib, rng);
            if (bogus.z() <= z_near_) continue;
            const double ub = K_.fx * bogus.x() / bogus.z() + K_.cx;
            const double vb = K_.fy * bogus.y() / bogus.z() + K_.cy;
            if (!K_.contains(ub, vb)) continue;
            if ((Vec2(ub, vb) - Vec2(u, v)).norm() <= 3.05) continue;
            c.p_k = bogus;
            c.pixel_k = Vec2(ub, vb);
            break;
          }
          if (c.p_k.isZero()) continue;
        } else {
          c.pixel_k = Vec2(u, v);
          c.p_k = drift_[ib] * p_b_true;
          if (cfg_.sigma_point > 0.0) {
            c.p_k += cfg_.sigma_point * Vec3(gauss(rng), gauss(rng), gauss(rng));
            if (c.p_k.z() <= z_near_) continue;
          }
        }
        out.corrs.items.push_back(c);
      }
    }
    return out;
  }

  double retrieval_score(int query_id, int candidate_id) const override {
    const auto& a = visible_ids_.at(check_id(query_id));
    const auto& b = visible_ids_.at(check_id(candidate_id));
    std::vector<int> inter;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    const size_t uni = a.size() + b.size() - inter.size();
    if (uni == 0) return 0.0;
    return 0.05 * static_cast<double>(inter.size()) / static_cast<double>(uni);
  }

  std::vector<Pointmap> multi_frame_pointmaps(const std::vector<int>& ids) const override {
    if (ids.size() < 2)
      throw std::invalid_argument("multi_frame_pointmaps: need >= 2 frames");
    std::uint64_t salt = 0x20000;
    for (int id : ids) salt = salt * 1000003ull + static_cast<std::uint64_t>(check_id(id));
    std::mt19937_64 rng(mix_seed(cfg_.seed, salt));

    // Arbitrary global gauge, drawn per input set.
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Vec7 xi;
    for (int i = 0; i < 3; ++i) xi(i) = 2.0 * uni(rng);
    for (int i = 3; i < 6; ++i) xi(i) = 0.8 * uni(rng);
    xi(6) = 0.6 * uni(rng);
    const Sim3 gauge = sim3_exp(xi);

    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<Pointmap> out;
    out.reserve(ids.size());
    for (int id : ids) {
      const int i = check_id(id);
      Pointmap pm(cfg_.height, cfg_.width);
      for (size_t idx = 0; idx < pm.points.size(); ++idx) {
        if (!pointmaps_[i].valid[idx]) continue;
        Vec3 p = gauge.apply(world_hits_[i][idx]);
        if (cfg_.sigma_point > 0.0)
          p += cfg_.sigma_point * Vec3(gauss(rng), gauss(rng), gauss(rng));
        pm.points[idx] = p;
        pm.valid[idx] = 1;
        pm.raw_conf[idx] = pointmaps_[i].raw_conf[idx];
      }
      out.push_back(std::move(pm));
    }
    return out;
  }

  double focal_estimate(const Frame& frame) const override {
    const int id = check_id(frame.id);
    std::mt19937_64 rng(mix_seed(cfg_.seed, 0x30000 + static_cast<std::uint64_t>(id)));
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    return cfg_.focal * (1.0 + cfg_.focal_noise * uni(rng));
  }

  /// Co-visible landmark fraction (the quantity retrieval_score scales).
  double covisibility(int a, int b) const { return retrieval_score(a, b) / 0.05; }

  /// Writes the whole sequence as a file-provider dataset.
  void dump_dataset(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (int i = 0; i < cfg_.frame_count; ++i) {
      write_pointmap(dir + "/" + pointmap_filename(i), pointmaps_[i]);
      char name[32];
      std::snprintf(name, sizeof(name), "image_%06d.ppm", i);
      write_ppm(dir + "/" + name, frames_[i].image);
    }
    for (int c = 1; c < cfg_.frame_count; ++c) {
      const MatchResult m = match(frames_[c], frames_[c - 1]);
      write_correspondences(dir + "/" + correspondence_filename(c, c - 1), m.corrs);
    }
    std::ofstream focal(dir + "/focal.txt");
    focal.precision(17);
    focal << cfg_.focal << "\n";
    std::vector<TrajectoryEntry> gt;
    for (int i = 0; i < cfg_.frame_count; ++i)
      gt.push_back({frames_[i].timestamp, rigid_wc_[i]});
    write_tum_trajectory(dir + "/groundtruth.txt", gt);
  }

 private:
  struct Landmark {
    Vec3 center;
    Vec3 normal;
    double radius;
    Vec3 color;
  };

  int check_id(int id) const {
    if (id < 0 || id >= cfg_.frame_count)
      throw std::out_of_range("unknown frame id " + std::to_string(id));
    return id;
  }

  void build_landmarks() {
    std::mt19937_64 rng(mix_seed(cfg_.seed, 1));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    landmarks_.reserve(cfg_.landmark_count);
    for (int i = 0; i < cfg_.landmark_count; ++i) {
      Vec3 dir;
      do {
        dir = Vec3(2 * uni(rng) - 1, 2 * uni(rng) - 1, 2 * uni(rng) - 1);
      } while (dir.norm() < 1e-3 || dir.norm() > 1.0);
      dir.normalize();
      Landmark lm;
      lm.center = dir * (1.0 + uni(rng));  // shell radius in [1, 2]
      lm.normal = dir;
      lm.radius = 0.25 + 0.25 * uni(rng);
      lm.color = Vec3(0.15 + 0.85 * uni(rng), 0.15 + 0.85 * uni(rng),
                      0.15 + 0.85 * uni(rng));
      landmarks_.push_back(lm);
    }
  }

  static Sim3 look_at(const Vec3& pos, const Vec3& target) {
    const Vec3 fwd = (target - pos).normalized();
    Vec3 up(0, 0, 1);
    if (std::abs(fwd.dot(up)) > 0.99) up = Vec3(0, 1, 0);
    const Vec3 right = fwd.cross(up).normalized();
    const Vec3 down = fwd.cross(right);
    Mat3 R;
    R.col(0) = right;
    R.col(1) = down;
    R.col(2) = fwd;
    Sim3 T;
    T.q = Quat(R).normalized();
    T.t = pos;
    return T;
  }

  void build_trajectory() {
    const int n = cfg_.frame_count;
    rigid_wc_.reserve(n);
    drift_.reserve(n);
    const double R = 4.0;
    for (int i = 0; i < n; ++i) {
      Vec3 pos;
      switch (cfg_.trajectory) {
        case TrajectoryShape::Circle: {
          const double th = 2.0 * M_PI * cfg_.trajectory_span * i / n;
          pos = Vec3(R * std::cos(th), R * std::sin(th), 0.4 * std::sin(2.0 * th));
          break;
        }
        case TrajectoryShape::Lissajous: {
          const double th = 2.0 * M_PI * cfg_.trajectory_span * i / n;
          pos = Vec3(R * std::cos(th), 0.6 * R * std::sin(2.0 * th), 0.5 * std::sin(th));
          break;
        }
        case TrajectoryShape::LineWithReturn: {
          const double half = (n - 1) / 2.0;
          const double u = (i <= half) ? i / half : (n - 1 - i) / half;
          pos = Vec3(R, -3.0 + 6.0 * u, 0.5 + 0.02 * ((i <= half) ? 0.0 : 1.0));
          break;
        }
      }
      rigid_wc_.push_back(look_at(pos, Vec3::Zero()));
      drift_.push_back(std::pow(cfg_.scale_drift, i));
    }
  }

  std::pair<int, double> cast_ray(const Vec3& origin, const Vec3& dir) const {
    int best = -1;
    double best_s = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < landmarks_.size(); ++j) {
      const Landmark& lm = landmarks_[j];
      if (lm.normal.dot(origin - lm.center) <= 0.0) continue;  // back side
      const double denom = lm.normal.dot(dir);
      if (std::abs(denom) < 1e-12) continue;
      const double s = lm.normal.dot(lm.center - origin) / denom;
      if (s <= z_near_ || s >= best_s) continue;
      const Vec3 hit = origin + s * dir;
      if ((hit - lm.center).norm() > lm.radius) continue;
      best = static_cast<int>(j);
      best_s = s;
    }
    return {best, best_s};
  }

  void render_all() {
    const int n = cfg_.frame_count;
    frames_.resize(n);
    pointmaps_.reserve(n);
    world_hits_.resize(n);
    hit_ids_.resize(n);
    visible_ids_.resize(n);
    for (int i = 0; i < n; ++i) {
      std::mt19937_64 noise_rng(mix_seed(cfg_.seed, 0x40000 + static_cast<std::uint64_t>(i)));
      std::normal_distribution<double> gauss(0.0, 1.0);
      Frame& f = frames_[i];
      f.id = i;
      f.timestamp = i / 30.0;
      f.image = Image::constant(cfg_.height, cfg_.width, 0.05, 0.05, 0.05);
      if (cfg_.provide_intrinsics) f.intrinsics = K_;

      Pointmap pm(cfg_.height, cfg_.width);
      world_hits_[i].assign(static_cast<size_t>(cfg_.height) * cfg_.width, Vec3::Zero());
      hit_ids_[i].assign(static_cast<size_t>(cfg_.height) * cfg_.width, -1);
      std::set<int> vis;
      const Mat3 R_wc = rigid_wc_[i].rotation();
      const Vec3 origin = rigid_wc_[i].t;
      for (int y = 0; y < cfg_.height; ++y) {
        for (int x = 0; x < cfg_.width; ++x) {
          const Vec3 dir_cam((x - K_.cx) / K_.fx, (y - K_.cy) / K_.fy, 1.0);
          const auto [lm_id, s] = cast_ray(origin, R_wc * dir_cam);
          if (lm_id < 0) continue;
          const size_t idx = pm.index(y, x);
          const Vec3 world = origin + s * (R_wc * dir_cam);
          const Landmark& lm = landmarks_[lm_id];
          const double rho = (world - lm.center).norm() / lm.radius;
          const double shade = 1.0 - 0.45 * rho * rho;
          for (int c = 0; c < 3; ++c) f.image.at(y, x, c) = lm.color(c) * shade;

          Vec3 p_meas = drift_[i] * (dir_cam * s);
          if (cfg_.sigma_point > 0.0) {
            p_meas += cfg_.sigma_point * Vec3(gauss(noise_rng), gauss(noise_rng),
                                              gauss(noise_rng));
            if (p_meas.z() <= z_near_) continue;
          }
          pm.set(y, x, p_meas, static_cast<float>(1.0 - 0.5 * rho * rho));
          world_hits_[i][idx] = world;
          hit_ids_[i][idx] = lm_id;
          vis.insert(lm_id);
        }
      }
      pointmaps_.push_back(std::move(pm));
      visible_ids_[i].assign(vis.begin(), vis.end());
    }
  }

  Vec3 random_in_bbox(int frame, std::mt19937_64& rng) const {
    Vec3 lo(1e9, 1e9, 1e9), hi(-1e9, -1e9, -1e9);
    const Pointmap& pm = pointmaps_[frame];
    for (size_t i = 0; i < pm.points.size(); ++i) {
      if (!pm.valid[i]) continue;
      lo = lo.cwiseMin(pm.points[i]);
      hi = hi.cwiseMax(pm.points[i]);
    }
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    return {lo.x() + uni(rng) * (hi.x() - lo.x()), lo.y() + uni(rng) * (hi.y() - lo.y()),
            lo.z() + uni(rng) * (hi.z() - lo.z())};
  }

  static constexpr double z_near_ = 0.05;

  SyntheticSceneConfig cfg_;
  CameraIntrinsics K_;
  std::vector<Landmark> landmarks_;
  std::vector<Sim3> rigid_wc_;
  std::vector<double> drift_;
  std::vector<Frame> frames_;
  std::vector<Pointmap> pointmaps_;
  std::vector<std::vector<Vec3>> world_hits_;
  std::vector<std::vector<int>> hit_ids_;
  std::vector<std::vector<int>> visible_ids_;
};

// ---------------------------------------------------------------------------
// File-backed provider
// ---------------------------------------------------------------------------

/// Serves precomputed pointmaps and correspondences from a dataset directory.
/// Retrieval and multi-frame geometry are not available from files, so loop
/// closure degrades to sequential edges when this provider is used.
class FilesProvider : public MatchingProvider {
 public:
  explicit FilesProvider(std::string dir) : dir_(std::move(dir)) {}

  MatchResult match(const Frame& a, const Frame& b) const override {
    MatchResult out;
    out.pm_a = read_pointmap(dir_ + "/" + pointmap_filename(a.id));
    out.pm_b = read_pointmap(dir_ + "/" + pointmap_filename(b.id));
    if (a.id == b.id) {
      out.corrs.frame_c = a.id;
      out.corrs.frame_k = b.id;
      for (int y = 0; y < out.pm_a.height; ++y)
        for (int x = 0; x < out.pm_a.width; ++x)
          if (out.pm_a.is_valid(y, x)) {
            Correspondence c;
            c.pixel_c = c.pixel_k = Vec2(x, y);
            c.p_c = c.p_k = out.pm_a.point(y, x);
            out.corrs.items.push_back(c);
          }
      return out;
    }
    out.corrs = read_correspondences(dir_ + "/" + correspondence_filename(a.id, b.id),
                                     a.id, b.id);
    return out;
  }

  double retrieval_score(int, int) const override { return 0.0; }

  std::vector<Pointmap> multi_frame_pointmaps(const std::vector<int>& ids) const override {
    if (ids.size() < 2)
      throw std::invalid_argument("multi_frame_pointmaps: need >= 2 frames");
    throw ProviderError("file provider has no multi-frame geometry");
  }

  double focal_estimate(const Frame&) const override {
    std::ifstream in(dir_ + "/focal.txt");
    double f = 0.0;
    if (!in || !(in >> f) || f <= 0.0)
      throw ProviderError("missing or invalid focal sidecar: " + dir_ + "/focal.txt");
    return f;
  }

  /// Frames on disk: image_NNNNNN.ppm (optional; black frames otherwise).
  std::vector<Frame> load_frames() const {
    std::vector<Frame> frames;
    for (int i = 0;; ++i) {
      const std::string pm_path = dir_ + "/" + pointmap_filename(i);
      if (!std::filesystem::exists(pm_path)) break;
      Frame f;
      f.id = i;
      f.timestamp = i / 30.0;
      char name[32];
      std::snprintf(name, sizeof(name), "image_%06d.ppm", i);
      if (!read_ppm(dir_ + "/" + name, f.image)) {
        const Pointmap pm = read_pointmap(pm_path);
        f.image = Image(pm.height, pm.width);
      }
      frames.push_back(std::move(f));
    }
    if (frames.empty()) throw ProviderError("no pointmap files found in " + dir_);
    return frames;
  }

 private:
  std::string dir_;
};

}  // namespace artcore
