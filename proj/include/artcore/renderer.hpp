#pragma once

#include "artcore/core.hpp"
#include "artcore/gaussian_map.hpp"
#include "artcore/image.hpp"
#include "artcore/lie.hpp"

#include <algorithm>
#include <cmath>
#include <thread>
#include <vector>

namespace artcore {

struct RendererConfig {
  Vec3 background = Vec3::Zero();
  double dilation = 0.3;       // added to the 2D covariance diagonal, px^2
  double min_area_px2 = 0.05;  // skip primitives with a smaller 3-sigma ellipse
  double z_near = 0.01;
  double transmittance_floor = 1e-4;  // per-pixel termination
  double alpha_clamp = 0.999;
  int threads = 1;
  bool compute_depth = false;
};

struct RenderedImage {
  Image color;
  ScalarMap alpha;
  ScalarMap depth;  // expected depth; only filled when requested
};

struct SplatGradients {
  std::vector<Vec3> color;
  std::vector<double> alpha;  // w.r.t. the primitive's own opacity
  std::vector<Vec3> mu;
  std::vector<Vec3> scales;
  std::vector<Vec4> rotation;  // (w, x, y, z), through the normalization
  Vec7 camera = Vec7::Zero();  // left-multiplicative tangent on T_cw

  void resize(size_t n) {
    color.assign(n, Vec3::Zero());
    alpha.assign(n, 0.0);
    mu.assign(n, Vec3::Zero());
    scales.assign(n, Vec3::Zero());
    rotation.assign(n, Vec4::Zero());
    camera.setZero();
  }
};

namespace detail {

struct ProjectedSplat {
  int prim_index = -1;    // into the original primitive array
  double fade_weight = 1.0;
  Vec3 mu_cam = Vec3::Zero();
  Vec2 center = Vec2::Zero();
  Mat2 cov2d = Mat2::Zero();   // after dilation
  Mat2 conic = Mat2::Zero();
  Vec3 color = Vec3::Zero();
  double alpha_eff = 0.0;
  Mat3 cov_cam = Mat3::Zero();
  Eigen::Matrix<double, 2, 3> proj_j = Eigen::Matrix<double, 2, 3>::Zero();
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bbox
};

inline Mat3 quat_to_rot(const Quat& q) { return q.normalized().toRotationMatrix(); }

// d(rotation matrix) / d(unit quaternion component), order (w, x, y, z).
inline std::array<Mat3, 4> rotation_quat_derivatives(const Quat& q) {
  const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
  std::array<Mat3, 4> d;
  d[0] << 0, -z, y, z, 0, -x, -y, x, 0;
  d[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
  d[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
  d[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
  for (auto& m : d) m *= 2.0;
  return d;
}

}  // namespace detail

/// Forward-pass record that ties splat_backward to one specific splat call.
struct ForwardCache {
  int height = 0, width = 0;
  size_t n_primitives = 0;
  Sim3 world_to_cam;
  CameraIntrinsics K;
  RendererConfig cfg;
  std::vector<detail::ProjectedSplat> splats;           // depth-sorted
  std::vector<std::vector<int>> rows;                   // splat indices per row
  std::vector<double> final_transmittance;              // per pixel
  std::vector<int> n_contributing;                      // per pixel
  bool valid = false;
};

/// Depth-sorted front-to-back alpha compositing of the selected primitives.
/// `selection` carries fade weights from lod_select; primitives outside it do
/// not render and receive zero gradients.
inline RenderedImage splat(std::span<const GaussianPrimitive> prims,
                           const LodSelection& selection, const Sim3& world_to_cam,
                           const CameraIntrinsics& K, const RendererConfig& cfg = {},
                           ForwardCache* cache = nullptr) {
  const int H = K.height, W = K.width;
  RenderedImage out;
  out.color = Image(H, W);
  out.alpha = ScalarMap(H, W, 0.0);
  if (cfg.compute_depth) out.depth = ScalarMap(H, W, 0.0);

  std::vector<detail::ProjectedSplat> splats;
  splats.reserve(selection.indices.size());
  const Mat3 R_cw = world_to_cam.rotation();
  const double s_cw = world_to_cam.s;

  for (size_t si = 0; si < selection.indices.size(); ++si) {
    const int pi = selection.indices[si];
    const GaussianPrimitive& p = prims[pi];
    detail::ProjectedSplat sp;
    sp.prim_index = pi;
    sp.fade_weight = selection.weights[si];
    sp.mu_cam = world_to_cam.apply(p.mu);
    if (sp.mu_cam.z() <= cfg.z_near) continue;

    const Mat3 R_q = detail::quat_to_rot(p.rotation);
    const Mat3 cov_world =
        R_q * p.scales.cwiseProduct(p.scales).asDiagonal() * R_q.transpose();
    sp.cov_cam = (s_cw * s_cw) * (R_cw * cov_world * R_cw.transpose());

    const double iz = 1.0 / sp.mu_cam.z();
    sp.center = Vec2(K.fx * sp.mu_cam.x() * iz + K.cx, K.fy * sp.mu_cam.y() * iz + K.cy);
    sp.proj_j << K.fx * iz, 0, -K.fx * sp.mu_cam.x() * iz * iz,
        0, K.fy * iz, -K.fy * sp.mu_cam.y() * iz * iz;
    const Mat2 cov_raw = sp.proj_j * sp.cov_cam * sp.proj_j.transpose();
    if (9.0 * M_PI * std::sqrt(std::max(cov_raw.determinant(), 0.0)) < cfg.min_area_px2)
      continue;
    sp.cov2d = cov_raw + cfg.dilation * Mat2::Identity();
    sp.conic = sp.cov2d.inverse();
    sp.color = p.color;
    sp.alpha_eff = p.alpha * sp.fade_weight;
    if (sp.alpha_eff <= 0.0) continue;

    const double rx = 3.0 * std::sqrt(sp.cov2d(0, 0));
    const double ry = 3.0 * std::sqrt(sp.cov2d(1, 1));
    sp.x0 = std::max(0, static_cast<int>(std::floor(sp.center.x() - rx)));
    sp.x1 = std::min(W - 1, static_cast<int>(std::ceil(sp.center.x() + rx)));
    sp.y0 = std::max(0, static_cast<int>(std::floor(sp.center.y() - ry)));
    sp.y1 = std::min(H - 1, static_cast<int>(std::ceil(sp.center.y() + ry)));
    if (sp.x0 > sp.x1 || sp.y0 > sp.y1) continue;
    splats.push_back(std::move(sp));
  }

  std::sort(splats.begin(), splats.end(),
            [](const detail::ProjectedSplat& a, const detail::ProjectedSplat& b) {
              if (a.mu_cam.z() != b.mu_cam.z()) return a.mu_cam.z() < b.mu_cam.z();
              return a.prim_index < b.prim_index;
            });

  std::vector<std::vector<int>> rows(H);
  for (size_t i = 0; i < splats.size(); ++i)
    for (int y = splats[i].y0; y <= splats[i].y1; ++y) rows[y].push_back(static_cast<int>(i));

  std::vector<double> final_T(static_cast<size_t>(H) * W, 1.0);
  std::vector<int> n_contrib(static_cast<size_t>(H) * W, 0);

  auto render_rows = [&](int y_begin, int y_end) {
    for (int y = y_begin; y < y_end; ++y) {
      for (int x = 0; x < W; ++x) {
        double T = 1.0;
        Vec3 c = Vec3::Zero();
        double depth_acc = 0.0;
        int contributions = 0;
        for (const int i : rows[y]) {
          const detail::ProjectedSplat& sp = splats[i];
          if (x < sp.x0 || x > sp.x1) continue;
          ++contributions;
          const Vec2 d(x - sp.center.x(), y - sp.center.y());
          const double g = std::exp(-0.5 * d.dot(sp.conic * d));
          const double a = std::min(sp.alpha_eff * g, cfg.alpha_clamp);
          if (a <= 0.0) continue;
          c += T * a * sp.color;
          if (cfg.compute_depth) depth_acc += T * a * sp.mu_cam.z();
          T *= 1.0 - a;
          if (T < cfg.transmittance_floor) break;
        }
        c += T * cfg.background;
        for (int ch = 0; ch < 3; ++ch) out.color.at(y, x, ch) = c(ch);
        out.alpha.at(y, x) = 1.0 - T;
        if (cfg.compute_depth) out.depth.at(y, x) = depth_acc;
        final_T[static_cast<size_t>(y) * W + x] = T;
        n_contrib[static_cast<size_t>(y) * W + x] = contributions;
      }
    }
  };

  const int n_threads = std::max(1, cfg.threads);
  if (n_threads == 1 || H < 2 * n_threads) {
    render_rows(0, H);
  } else {
    std::vector<std::thread> workers;
    const int chunk = (H + n_threads - 1) / n_threads;
    for (int t = 0; t < n_threads; ++t) {
      const int y0 = t * chunk, y1 = std::min(H, y0 + chunk);
      if (y0 < y1) workers.emplace_back(render_rows, y0, y1);
    }
    for (auto& w : workers) w.join();
  }

  if (cache) {
    cache->height = H;
    cache->width = W;
    cache->n_primitives = prims.size();
    cache->world_to_cam = world_to_cam;
    cache->K = K;
    cache->cfg = cfg;
    cache->splats = std::move(splats);
    cache->rows = std::move(rows);
    cache->final_transmittance = std::move(final_T);
    cache->n_contributing = std::move(n_contrib);
    cache->valid = true;
  }
  return out;
}

/// Analytic gradients of a scalar loss through the forward pass recorded in
/// `cache`. `d_color` is dL/d(rendered image).
inline SplatGradients splat_backward(std::span<const GaussianPrimitive> prims,
                                     const ForwardCache& cache, const Image& d_color) {
  if (!cache.valid || d_color.height != cache.height || d_color.width != cache.width ||
      prims.size() != cache.n_primitives)
    throw std::invalid_argument("splat_backward: cache does not match this call");

  const int W = cache.width, H = cache.height;
  const RendererConfig& cfg = cache.cfg;
  const CameraIntrinsics& K = cache.K;

  struct SplatGrad {
    Vec3 color = Vec3::Zero();
    double alpha_eff = 0.0;
    Vec2 center = Vec2::Zero();
    Mat2 conic = Mat2::Zero();
  };

  const size_t n_splats = cache.splats.size();
  const int n_threads = std::max(1, cfg.threads);

  std::vector<std::vector<SplatGrad>> per_thread(n_threads,
                                                 std::vector<SplatGrad>(n_splats));

  struct StackEntry {
    int index;
    double a;
    double gauss;
  };

  auto backward_rows = [&](int tid, int y_begin, int y_end) {
    std::vector<SplatGrad>& acc = per_thread[tid];
    std::vector<StackEntry> stack;
    for (int y = y_begin; y < y_end; ++y) {
      for (int x = 0; x < W; ++x) {
        const Vec3 dLdC(d_color.at(y, x, 0), d_color.at(y, x, 1), d_color.at(y, x, 2));
        if (dLdC.isZero()) continue;

        // Replay this pixel's compositing walk.
        stack.clear();
        double T = 1.0;
        int contributions = 0;
        const int walked = cache.n_contributing[static_cast<size_t>(y) * W + x];
        for (const int i : cache.rows[y]) {
          if (contributions >= walked) break;
          const detail::ProjectedSplat& sp = cache.splats[i];
          if (x < sp.x0 || x > sp.x1) continue;
          ++contributions;
          const Vec2 d(x - sp.center.x(), y - sp.center.y());
          const double g = std::exp(-0.5 * d.dot(sp.conic * d));
          const double a = std::min(sp.alpha_eff * g, cfg.alpha_clamp);
          if (a <= 0.0) continue;
          stack.push_back({i, a, g});
          T *= 1.0 - a;
          if (T < cfg.transmittance_floor) break;
        }

        // Walk backward maintaining the composited suffix.
        double T_i = T;  // transmittance *after* the current splat
        Vec3 rest = T * cfg.background;
        for (auto it = stack.rbegin(); it != stack.rend(); ++it) {
          const detail::ProjectedSplat& sp = cache.splats[it->index];
          const double a = it->a;
          T_i /= 1.0 - a;  // transmittance in front of this splat
          SplatGrad& g_acc = acc[it->index];

          g_acc.color += a * T_i * dLdC;
          const double dL_da = dLdC.dot(sp.color * T_i - rest / (1.0 - a));
          rest += a * T_i * sp.color;

          if (sp.alpha_eff * it->gauss > cfg.alpha_clamp) continue;  // locally constant

          const Vec2 d(x - sp.center.x(), y - sp.center.y());
          g_acc.alpha_eff += dL_da * it->gauss;
          const double dL_dg = dL_da * sp.alpha_eff;
          // g = exp(-0.5 d^T A d) with d = pixel - center.
          g_acc.center += dL_dg * it->gauss * (sp.conic * d);
          g_acc.conic += dL_dg * (-0.5 * it->gauss) * (d * d.transpose());
        }
      }
    }
  };

  if (n_threads == 1 || H < 2 * n_threads) {
    backward_rows(0, 0, H);
  } else {
    std::vector<std::thread> workers;
    const int chunk = (H + n_threads - 1) / n_threads;
    for (int t = 0; t < n_threads; ++t) {
      const int y0 = t * chunk, y1 = std::min(H, y0 + chunk);
      if (y0 < y1) workers.emplace_back(backward_rows, t, y0, y1);
    }
    for (auto& w : workers) w.join();
  }

  // Fixed-order reduction across threads.
  std::vector<SplatGrad> total(n_splats);
  for (const auto& part : per_thread)
    for (size_t i = 0; i < n_splats; ++i) {
      total[i].color += part[i].color;
      total[i].alpha_eff += part[i].alpha_eff;
      total[i].center += part[i].center;
      total[i].conic += part[i].conic;
    }

  SplatGradients out;
  out.resize(prims.size());
  const Mat3 R_cw = cache.world_to_cam.rotation();
  const double s_cw = cache.world_to_cam.s;

  for (size_t i = 0; i < n_splats; ++i) {
    const detail::ProjectedSplat& sp = cache.splats[i];
    const SplatGrad& g = total[i];
    const GaussianPrimitive& p = prims[sp.prim_index];

    out.color[sp.prim_index] = g.color;
    out.alpha[sp.prim_index] = g.alpha_eff * sp.fade_weight;

    // conic = cov2d^{-1}.
    const Mat2 g_conic_sym = 0.5 * (g.conic + g.conic.transpose());
    const Mat2 g_cov2d = -sp.conic * g_conic_sym * sp.conic;

    // cov2d = J cov_cam J^T + dilation.
    const Mat3 g_cov_cam_m =
        sp.proj_j.transpose() * g_cov2d * sp.proj_j;
    Eigen::Matrix<double, 2, 3> g_projj =
        2.0 * g_cov2d * sp.proj_j * sp.cov_cam;

    // Center and J both depend on mu_cam.
    Vec3 g_mu_cam = Vec3::Zero();
    const double iz = 1.0 / sp.mu_cam.z();
    g_mu_cam += sp.proj_j.transpose() * g.center;  // du/dmu, dv/dmu rows = J
    // J entries: J00 = fx/z, J02 = -fx x/z^2, J11 = fy/z, J12 = -fy y/z^2.
    g_mu_cam.x() += g_projj(0, 2) * (-K.fx * iz * iz);
    g_mu_cam.y() += g_projj(1, 2) * (-K.fy * iz * iz);
    g_mu_cam.z() += g_projj(0, 0) * (-K.fx * iz * iz) +
                    g_projj(1, 1) * (-K.fy * iz * iz) +
                    g_projj(0, 2) * (2.0 * K.fx * sp.mu_cam.x() * iz * iz * iz) +
                    g_projj(1, 2) * (2.0 * K.fy * sp.mu_cam.y() * iz * iz * iz);

    // Camera tangent: translation/rotation/log-scale of T_cw.
    Mat37 d_mu_cam;
    d_mu_cam.block<3, 3>(0, 0) = Mat3::Identity();
    d_mu_cam.block<3, 3>(0, 3) = -skew(sp.mu_cam);
    d_mu_cam.col(6) = sp.mu_cam;
    out.camera += d_mu_cam.transpose() * g_mu_cam;
    for (int axis = 0; axis < 3; ++axis) {
      Vec3 e = Vec3::Zero();
      e(axis) = 1.0;
      const Mat3 m = skew(e) * sp.cov_cam;
      out.camera(3 + axis) += (g_cov_cam_m.array() * (m + m.transpose()).array()).sum();
    }
    out.camera(6) += 2.0 * (g_cov_cam_m.array() * sp.cov_cam.array()).sum();

    // World position.
    out.mu[sp.prim_index] = s_cw * (R_cw.transpose() * g_mu_cam);

    // cov_cam = s^2 R_cw cov_world R_cw^T.
    const Mat3 g_cov_world = (s_cw * s_cw) * (R_cw.transpose() * g_cov_cam_m * R_cw);

    // cov_world = R_q diag(S^2) R_q^T.
    const Mat3 R_q = detail::quat_to_rot(p.rotation);
    const Mat3 inner = R_q.transpose() * g_cov_world * R_q;
    for (int k = 0; k < 3; ++k)
      out.scales[sp.prim_index](k) = 2.0 * p.scales(k) * inner(k, k);
    const Mat3 g_Rq =
        2.0 * g_cov_world * R_q * p.scales.cwiseProduct(p.scales).asDiagonal();
    const Quat q_unit = p.rotation.normalized();
    const auto dR = detail::rotation_quat_derivatives(q_unit);
    Vec4 g_q_unit;
    for (int k = 0; k < 4; ++k) g_q_unit(k) = (g_Rq.array() * dR[k].array()).sum();
    // Through the normalization of the stored quaternion.
    const Vec4 q_vec(q_unit.w(), q_unit.x(), q_unit.y(), q_unit.z());
    const double norm = p.rotation.norm();
    out.rotation[sp.prim_index] =
        (Eigen::Matrix4d::Identity() - q_vec * q_vec.transpose()) * g_q_unit / norm;
  }
  return out;
}

/// Peak signal-to-noise ratio in dB, capped at 100 for identical inputs.
inline double psnr(const Image& a, const Image& b) {
  if (!a.same_size(b)) throw std::invalid_argument("psnr: size mismatch");
  double mse = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse <= 0.0) return 100.0;
  return std::min(10.0 * std::log10(1.0 / mse), 100.0);
}

}  // namespace artcore
