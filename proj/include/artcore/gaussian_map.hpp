#pragma once

#include "artcore/core.hpp"
#include "artcore/image.hpp"
#include "artcore/lie.hpp"
#include "artcore/pointmap.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <vector>

namespace artcore {

struct MapConfig {
  int levels = 4;  // L
  double tau_a = 0.1;
  double log_sigma = 1.5;     // LoG blur std, pixels
  double r_min = 1e-4;        // response floor inside base_scale
  int feature_dim = 16;       // F
  double voxel_factor = 8.0;  // cell size = factor * median level-0 base scale
  bool fade_literal = false;  // use the increasing fade from the source formula
  std::uint64_t refiner_seed = 7;
};

// ---------------------------------------------------------------------------
// Insertion probability and base scale
// ---------------------------------------------------------------------------

struct InsertionMask {
  ScalarMap prob;                     // P_a per pixel
  std::vector<std::uint8_t> selected; // P_a > tau_a
  double tau_a = 0.1;

  bool is_selected(int y, int x) const {
    return selected[static_cast<size_t>(y) * prob.width + x] != 0;
  }
};

/// P_a = max(min(|LoG(I)|, 1) - min(|LoG(render)|, 1), 0), selected above tau_a.
inline InsertionMask insertion_probability(const Image& image, const Image& rendered,
                                           double sigma, double tau_a) {
  if (!image.same_size(rendered))
    throw std::invalid_argument("insertion_probability: size mismatch");
  const ScalarMap resp_i = log_response(image, sigma);
  const ScalarMap resp_r = log_response(rendered, sigma);
  InsertionMask mask;
  mask.tau_a = tau_a;
  mask.prob = ScalarMap(image.height, image.width);
  mask.selected.assign(static_cast<size_t>(image.height) * image.width, 0);
  for (size_t i = 0; i < mask.prob.data.size(); ++i) {
    const double a = std::min(resp_i.data[i], 1.0);
    const double b = std::min(resp_r.data[i], 1.0);
    const double p = std::max(a - b, 0.0);
    mask.prob.data[i] = p;
    mask.selected[i] = p > tau_a ? 1 : 0;
  }
  return mask;
}

/// S_b = d * s' / f with s' the expected nearest-neighbor distance of a 2D
/// Poisson process with the clamped LoG response as intensity.
inline double base_scale(double d, double log_response_value, double f,
                         double r_min = 1e-4) {
  const double clamped = std::min(log_response_value, 1.0);
  const double s_prime = 1.0 / (2.0 * std::sqrt(std::max(clamped, r_min)));
  return d * s_prime / f;
}

// ---------------------------------------------------------------------------
// Refiner heads
// ---------------------------------------------------------------------------

/// Two-layer tanh network; the output layer starts at zero so freshly
/// initialized heads are exact identities.
struct RefinerMlp {
  MatX w1, w2;
  VecX b1, b2;

  RefinerMlp() = default;
  RefinerMlp(int in_dim, int hidden, int out_dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(in_dim));
    w1 = MatX::NullaryExpr(hidden, in_dim, [&]() { return gauss(rng); });
    b1 = VecX::Zero(hidden);
    w2 = MatX::Zero(out_dim, hidden);
    b2 = VecX::Zero(out_dim);
  }

  VecX forward(const VecX& x) const {
    if (x.size() != w1.cols()) throw std::invalid_argument("RefinerMlp: dim mismatch");
    return w2 * (w1 * x + b1).array().tanh().matrix() + b2;
  }

  struct Grads {
    MatX dw1, dw2;
    VecX db1, db2, dx;
  };

  Grads backward(const VecX& x, const VecX& dy) const {
    const VecX z1 = w1 * x + b1;
    const VecX h = z1.array().tanh();
    Grads g;
    g.dw2 = dy * h.transpose();
    g.db2 = dy;
    const VecX dh = w2.transpose() * dy;
    const VecX dz1 = dh.array() * (1.0 - h.array().square());
    g.dw1 = dz1 * x.transpose();
    g.db1 = dz1;
    g.dx = w1.transpose() * dz1;
    return g;
  }
};

/// Multiplicative scale head: exp-activated so the zero-initialized output is
/// exactly (1, 1, 1).
struct ScaleRefiner {
  RefinerMlp mlp;
  ScaleRefiner() = default;
  ScaleRefiner(int feature_dim, std::uint64_t seed) : mlp(2 * feature_dim, 32, 3, seed) {}

  Vec3 refine(const VecX& f) const { return mlp.forward(f).array().exp(); }

  RefinerMlp::Grads backward(const VecX& f, const Vec3& d_multiplier) const {
    const Vec3 y = mlp.forward(f);
    const VecX dy = d_multiplier.cwiseProduct(y.array().exp().matrix());
    return mlp.backward(f, dy);
  }
};

/// Rotation head: a normalized offset from the identity quaternion, identity
/// at zero output. Quaternion order (w, x, y, z).
struct RotationRefiner {
  RefinerMlp mlp;
  RotationRefiner() = default;
  RotationRefiner(int feature_dim, std::uint64_t seed)
      : mlp(2 * feature_dim, 32, 4, seed) {}

  Quat refine(const VecX& f) const {
    const VecX y = mlp.forward(f);
    Vec4 raw(1.0 + y(0), y(1), y(2), y(3));
    raw.normalize();
    return Quat(raw(0), raw(1), raw(2), raw(3));
  }

  RefinerMlp::Grads backward(const VecX& f, const Vec4& d_quat_wxyz) const {
    const VecX y = mlp.forward(f);
    Vec4 raw(1.0 + y(0), y(1), y(2), y(3));
    const double n = raw.norm();
    const Vec4 q = raw / n;
    const Vec4 dy = (Eigen::Matrix4d::Identity() - q * q.transpose()) / n * d_quat_wxyz;
    return mlp.backward(f, VecX(dy));
  }
};

// ---------------------------------------------------------------------------
// Primitives and the voxel grid
// ---------------------------------------------------------------------------

struct GaussianPrimitive {
  Vec3 mu = Vec3::Zero();     // world position
  Vec3 color = Vec3::Zero();  // SH0 RGB
  double alpha = 0.0;
  double base_scale = 0.0;
  Vec3 scales = Vec3::Ones();
  Quat rotation = Quat::Identity();
  VecX feature;  // f_l
  std::uint64_t voxel_id = 0;
  int level = 0;
  double d_max = 0.0;
};

struct VoxelGrid {
  double cell_size = 0.0;            // 0 until calibrated
  std::map<std::uint64_t, VecX> features;  // region feature f_r per live voxel

  static std::uint64_t key_of(const Vec3& mu, double eps) {
    const auto pack = [](double v, double eps_) {
      const auto i = static_cast<std::int64_t>(std::floor(v / eps_)) + (1 << 20);
      return static_cast<std::uint64_t>(i) & ((1ull << 21) - 1);
    };
    return pack(mu.x(), eps) | (pack(mu.y(), eps) << 21) | (pack(mu.z(), eps) << 42);
  }

  /// Resolves (creating, zero-initialized) the voxel for a position.
  std::uint64_t touch(const Vec3& mu, int feature_dim) {
    const std::uint64_t key = key_of(mu, cell_size);
    auto it = features.find(key);
    if (it == features.end()) features[key] = VecX::Zero(feature_dim);
    return key;
  }
};

// ---------------------------------------------------------------------------
// Level-of-detail selection
// ---------------------------------------------------------------------------

struct LodSelection {
  std::vector<int> indices;
  std::vector<double> weights;  // fade weight per selected primitive
};

/// Distance-gated selection: full within d_max, faded to zero at 2 d_max,
/// culled beyond. The literal flag switches to the source formula whose fade
/// grows with distance instead.
inline LodSelection lod_select(std::span<const GaussianPrimitive> prims,
                               const Vec3& camera_center, bool fade_literal = false) {
  LodSelection out;
  for (size_t i = 0; i < prims.size(); ++i) {
    const double d_r = (prims[i].mu - camera_center).norm();
    const double d_max = prims[i].d_max;
    if (d_r > 2.0 * d_max) continue;
    double w = 1.0;
    if (d_r > d_max)
      w = fade_literal ? (d_r - d_max) / d_max : (2.0 * d_max - d_r) / d_max;
    out.indices.push_back(static_cast<int>(i));
    out.weights.push_back(w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// The map store
// ---------------------------------------------------------------------------

struct CreationRecord {
  int frame_id = -1;
  int level = 0;
  int x = 0, y = 0;  // pixel at that level
  double p_a = 0.0;
};

struct LevelInputs {
  Image image;
  Pointmap pointmap;
  ScalarMap confidence;
  CameraIntrinsics K;
};

/// Downsampled image/pointmap/confidence pyramid. Pointmap blocks average the
/// valid members only and go invalid when all four are.
inline LevelInputs downsample_level(const LevelInputs& in) {
  LevelInputs out;
  out.image = downsample2x(in.image);
  const int h = out.image.height, w = out.image.width;
  out.pointmap = Pointmap(h, w);
  out.confidence = ScalarMap(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      Vec3 acc = Vec3::Zero();
      float conf_acc = 0.f;
      int n = 0;
      double conf_all = 0.0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int yy = std::min(2 * y + dy, in.pointmap.height - 1);
          const int xx = std::min(2 * x + dx, in.pointmap.width - 1);
          conf_all += 0.25 * in.confidence.at(yy, xx);
          if (!in.pointmap.is_valid(yy, xx)) continue;
          acc += in.pointmap.point(yy, xx);
          conf_acc += in.pointmap.conf(yy, xx);
          ++n;
        }
      if (n > 0) out.pointmap.set(y, x, acc / n, conf_acc / n);
      out.confidence.at(y, x) = conf_all;
    }
  out.K = in.K;
  out.K.width = w;
  out.K.height = h;
  out.K.fx = in.K.fx * 0.5;
  out.K.fy = in.K.fy * 0.5;
  out.K.cx = (in.K.cx + 0.5) * 0.5 - 0.5;
  out.K.cy = (in.K.cy + 0.5) * 0.5 - 0.5;
  return out;
}

class GaussianMap {
 public:
  explicit GaussianMap(const MapConfig& cfg = {})
      : cfg_(cfg),
        scale_refiner_(cfg.feature_dim, mix_seed(cfg.refiner_seed, 1)),
        rot_refiner_(cfg.feature_dim, mix_seed(cfg.refiner_seed, 2)) {}

  const MapConfig& config() const { return cfg_; }
  const std::vector<GaussianPrimitive>& primitives() const { return prims_; }
  std::vector<GaussianPrimitive>& primitives() { return prims_; }
  const VoxelGrid& grid() const { return grid_; }
  const std::vector<CreationRecord>& creation_log() const { return creation_log_; }
  const ScaleRefiner& scale_refiner() const { return scale_refiner_; }
  const RotationRefiner& rot_refiner() const { return rot_refiner_; }

  std::vector<int> level_counts() const {
    std::vector<int> counts(cfg_.levels, 0);
    for (const auto& p : prims_)
      if (p.level >= 0 && p.level < cfg_.levels) ++counts[p.level];
    return counts;
  }

  double scene_extent() const {
    if (prims_.empty()) return 1.0;
    Vec3 lo = prims_[0].mu, hi = prims_[0].mu;
    for (const auto& p : prims_) {
      lo = lo.cwiseMin(p.mu);
      hi = hi.cwiseMax(p.mu);
    }
    return std::max((hi - lo).norm(), 1e-6);
  }

  /// One primitive from a (level-resolved) pixel. The voxel grid must be
  /// calibrated before the first call. `camera_focal` is the full-resolution
  /// focal length: the level's coarser pixel pitch enters only through the
  /// 1.4^(2l) base-scale weight.
  GaussianPrimitive init_primitive(int x, int y, const LevelInputs& in,
                                   double log_response_value, int level,
                                   const Sim3& T_wc, double camera_focal) {
    if (!in.pointmap.is_valid(y, x))
      throw std::invalid_argument("init_primitive: invalid pointmap pixel");
    GaussianPrimitive p;
    const Vec3 p_cam = in.pointmap.point(y, x);
    p.mu = T_wc.apply(p_cam);
    p.color = Vec3(in.image.at(y, x, 0), in.image.at(y, x, 1), in.image.at(y, x, 2));
    p.alpha = 0.2 * in.confidence.at(y, x);
    p.level = level;
    const double d = (p.mu - T_wc.t).norm();
    p.d_max = d * std::pow(2.0, 2 * level);
    p.base_scale =
        base_scale(d, log_response_value, camera_focal, cfg_.r_min) * std::pow(1.4, 2 * level);
    p.feature = VecX::Zero(cfg_.feature_dim);
    p.voxel_id = grid_.touch(p.mu, cfg_.feature_dim);

    VecX joint(2 * cfg_.feature_dim);
    joint << grid_.features.at(p.voxel_id), p.feature;
    p.scales = p.base_scale * scale_refiner_.refine(joint);
    p.rotation = rot_refiner_.refine(joint);
    return p;
  }

  /// LoG-driven insertion over the full LoD pyramid. `rendered_per_level`
  /// must hold the current map rendered at each level's resolution.
  /// Returns the per-level masks; freshly created primitives are appended.
  std::vector<InsertionMask> insert_from_frame(int frame_id, const LevelInputs& full_res,
                                               const std::vector<Image>& rendered_per_level,
                                               const Sim3& T_wc) {
    std::vector<LevelInputs> pyramid{full_res};
    for (int l = 1; l < cfg_.levels; ++l)
      pyramid.push_back(downsample_level(pyramid.back()));

    // Calibrate the voxel grid from this frame's level-0 base scales.
    if (grid_.cell_size == 0.0) calibrate_grid(pyramid[0], T_wc);

    std::vector<InsertionMask> masks;
    for (int l = 0; l < cfg_.levels; ++l) {
      const LevelInputs& in = pyramid[l];
      const ScalarMap resp = log_response(in.image, cfg_.log_sigma);
      InsertionMask mask =
          insertion_probability(in.image, rendered_per_level.at(l), cfg_.log_sigma,
                                cfg_.tau_a);
      for (int y = 0; y < in.image.height; ++y)
        for (int x = 0; x < in.image.width; ++x) {
          if (!mask.is_selected(y, x)) continue;
          if (!in.pointmap.is_valid(y, x)) continue;
          prims_.push_back(init_primitive(x, y, in, resp.at(y, x), l, T_wc));
          creation_log_.push_back({frame_id, l, x, y, mask.prob.at(y, x)});
        }
      masks.push_back(std::move(mask));
    }
    return masks;
  }

  // -------------------------------------------------------------------------
  // Export: "ADGS" record file plus a ".feat" sidecar with the individual
  // features and the voxel table.
  // -------------------------------------------------------------------------

  void export_map(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open map for write: " + path);
    auto w32 = [&](std::uint32_t v) { out.write(reinterpret_cast<char*>(&v), 4); };
    auto wf = [&](double v) {
      const float f = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&f), 4);
    };
    out.write("ADGS", 4);
    w32(1);
    w32(static_cast<std::uint32_t>(prims_.size()));
    for (const auto& p : prims_) {
      wf(p.mu.x());
      wf(p.mu.y());
      wf(p.mu.z());
      wf(p.color.x());
      wf(p.color.y());
      wf(p.color.z());
      wf(p.alpha);
      wf(p.scales.x());
      wf(p.scales.y());
      wf(p.scales.z());
      wf(p.rotation.x());
      wf(p.rotation.y());
      wf(p.rotation.z());
      wf(p.rotation.w());
      wf(p.d_max);
      w32(static_cast<std::uint32_t>(p.level));
      const std::uint64_t vid = p.voxel_id;
      out.write(reinterpret_cast<const char*>(&vid), 8);
    }

    std::ofstream feat(path + ".feat", std::ios::binary);
    if (!feat) throw std::runtime_error("cannot open feature sidecar: " + path + ".feat");
    auto fw32 = [&](std::uint32_t v) { feat.write(reinterpret_cast<char*>(&v), 4); };
    feat.write("ADGF", 4);
    fw32(1);
    fw32(static_cast<std::uint32_t>(cfg_.feature_dim));
    fw32(static_cast<std::uint32_t>(prims_.size()));
    for (const auto& p : prims_)
      for (int k = 0; k < cfg_.feature_dim; ++k) {
        const float f = static_cast<float>(p.feature(k));
        feat.write(reinterpret_cast<const char*>(&f), 4);
      }
    const double eps = grid_.cell_size;
    feat.write(reinterpret_cast<const char*>(&eps), 8);
    fw32(static_cast<std::uint32_t>(grid_.features.size()));
    for (const auto& [key, fr] : grid_.features) {
      feat.write(reinterpret_cast<const char*>(&key), 8);
      for (int k = 0; k < cfg_.feature_dim; ++k) {
        const float f = static_cast<float>(fr(k));
        feat.write(reinterpret_cast<const char*>(&f), 4);
      }
    }
  }

  static GaussianMap import_map(const std::string& path, const MapConfig& cfg = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open map: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "ADGS")
      throw std::runtime_error("bad map magic: " + path);
    auto r32 = [&]() {
      std::uint32_t v = 0;
      in.read(reinterpret_cast<char*>(&v), 4);
      return v;
    };
    auto rf = [&]() {
      float f = 0;
      in.read(reinterpret_cast<char*>(&f), 4);
      return static_cast<double>(f);
    };
    if (r32() != 1) throw std::runtime_error("unsupported map version: " + path);
    const std::uint32_t count = r32();
    GaussianMap map(cfg);
    map.prims_.resize(count);
    // Sequenced reads: constructor argument evaluation order is unspecified.
    auto r_vec3 = [&]() {
      const double x = rf();
      const double y = rf();
      const double z = rf();
      return Vec3(x, y, z);
    };
    for (auto& p : map.prims_) {
      p.mu = r_vec3();
      p.color = r_vec3();
      p.alpha = rf();
      p.scales = r_vec3();
      const double qx = rf();
      const double qy = rf();
      const double qz = rf();
      const double qw = rf();
      p.rotation = Quat(qw, qx, qy, qz);
      p.d_max = rf();
      p.level = static_cast<int>(r32());
      in.read(reinterpret_cast<char*>(&p.voxel_id), 8);
      p.feature = VecX::Zero(cfg.feature_dim);
    }
    if (!in) throw std::runtime_error("truncated map file: " + path);

    std::ifstream feat(path + ".feat", std::ios::binary);
    if (feat) {
      char fmagic[4];
      feat.read(fmagic, 4);
      std::uint32_t ver = 0, fdim = 0, n = 0;
      feat.read(reinterpret_cast<char*>(&ver), 4);
      feat.read(reinterpret_cast<char*>(&fdim), 4);
      feat.read(reinterpret_cast<char*>(&n), 4);
      if (std::string(fmagic, 4) == "ADGF" && ver == 1 &&
          fdim == static_cast<std::uint32_t>(cfg.feature_dim) && n == count) {
        for (auto& p : map.prims_)
          for (std::uint32_t k = 0; k < fdim; ++k) {
            float f = 0;
            feat.read(reinterpret_cast<char*>(&f), 4);
            p.feature(k) = f;
          }
        feat.read(reinterpret_cast<char*>(&map.grid_.cell_size), 8);
        std::uint32_t n_vox = 0;
        feat.read(reinterpret_cast<char*>(&n_vox), 4);
        for (std::uint32_t v = 0; v < n_vox; ++v) {
          std::uint64_t key = 0;
          feat.read(reinterpret_cast<char*>(&key), 8);
          VecX fr = VecX::Zero(fdim);
          for (std::uint32_t k = 0; k < fdim; ++k) {
            float f = 0;
            feat.read(reinterpret_cast<char*>(&f), 4);
            fr(k) = f;
          }
          map.grid_.features[key] = fr;
        }
      }
    }
    return map;
  }

 private:
  void calibrate_grid(const LevelInputs& in, const Sim3& T_wc) {
    const ScalarMap resp = log_response(in.image, cfg_.log_sigma);
    std::vector<double> scales;
    for (int y = 0; y < in.image.height; ++y)
      for (int x = 0; x < in.image.width; ++x) {
        if (!in.pointmap.is_valid(y, x)) continue;
        const double d = (T_wc.apply(in.pointmap.point(y, x)) - T_wc.t).norm();
        scales.push_back(base_scale(d, resp.at(y, x), in.K.fx, cfg_.r_min));
      }
    if (scales.empty()) {
      grid_.cell_size = 1.0;
      return;
    }
    std::nth_element(scales.begin(), scales.begin() + scales.size() / 2, scales.end());
    grid_.cell_size = cfg_.voxel_factor * scales[scales.size() / 2];
  }

  MapConfig cfg_;
  std::vector<GaussianPrimitive> prims_;
  VoxelGrid grid_;
  ScaleRefiner scale_refiner_;
  RotationRefiner rot_refiner_;
  std::vector<CreationRecord> creation_log_;
};

}  // namespace artcore
