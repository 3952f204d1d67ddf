#pragma once

#include "artcore/core.hpp"
#include "artcore/frontend.hpp"
#include "artcore/gaussian_map.hpp"
#include "artcore/image.hpp"
#include "artcore/renderer.hpp"

#include <cmath>
#include <map>
#include <random>
#include <vector>

namespace artcore {

struct TrainSchedule {
  int k_iters = 30;  // K; common frames run K/2
  double current_frame_prob = 0.2;
  double lr_color = 2.5e-3;
  double lr_opacity = 5e-2;
  double lr_mu = 1.6e-4;  // multiplied by the scene extent
  double lr_scale = 5e-3;  // log-space
  double lr_rot = 1e-3;    // rotation tangent
  double lr_pose = 1e-4;   // pose tangent (global phase only)
  int global_budget = 500;
  bool pose_refinement = false;
  bool use_dssim = false;
  double dssim_weight = 0.2;
};

using FrameUpdateLedger = std::map<int, int>;  // frame id -> supervision visits

// ---------------------------------------------------------------------------
// Photometric loss
// ---------------------------------------------------------------------------

struct LossResult {
  double value = 0.0;
  Image d_render;  // exact derivative w.r.t. the rendered image
};

namespace detail {

inline void gaussian_window(double sigma, int radius, std::vector<double>& w) {
  w.resize(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    w[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += w[i + radius];
  }
  for (double& v : w) v /= sum;
}

/// Separable windowed mean with reflected boundary, per channel.
inline Image window_mean(const Image& im, const std::vector<double>& w, int radius) {
  Image tmp(im.height, im.width), out(im.height, im.width);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k)
          acc += w[k + radius] * im.at(y, reflect_index(x + k, im.width), c);
        tmp.at(y, x, c) = acc;
      }
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k)
          acc += w[k + radius] * tmp.at(reflect_index(y + k, im.height), x, c);
        out.at(y, x, c) = acc;
      }
  return out;
}

inline Image hadamard(const Image& a, const Image& b) {
  Image out(a.height, a.width);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  return out;
}

}  // namespace detail

/// Mean SSIM over pixels and channels plus its exact gradient w.r.t. x.
inline double ssim_with_gradient(const Image& x, const Image& y, Image& d_x) {
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  constexpr int radius = 5;
  std::vector<double> w;
  detail::gaussian_window(1.5, radius, w);

  const Image mu_x = detail::window_mean(x, w, radius);
  const Image mu_y = detail::window_mean(y, w, radius);
  const Image mx2 = detail::window_mean(detail::hadamard(x, x), w, radius);
  const Image my2 = detail::window_mean(detail::hadamard(y, y), w, radius);
  const Image mxy = detail::window_mean(detail::hadamard(x, y), w, radius);

  const double inv_n = 1.0 / static_cast<double>(x.data.size());
  Image g_mu(x.height, x.width), g_mx2(x.height, x.width), g_mxy(x.height, x.width);
  double total = 0.0;
  for (size_t i = 0; i < x.data.size(); ++i) {
    const double ux = mu_x.data[i], uy = mu_y.data[i];
    const double sx2 = mx2.data[i] - ux * ux;
    const double sy2 = my2.data[i] - uy * uy;
    const double sxy = mxy.data[i] - ux * uy;
    const double A = 2.0 * ux * uy + C1, B = 2.0 * sxy + C2;
    const double C = ux * ux + uy * uy + C1, D = sx2 + sy2 + C2;
    const double s = (A * B) / (C * D);
    total += s * inv_n;

    const double dsdA = B / (C * D);
    const double dsdB = A / (C * D);
    const double dsdC = -s / C;
    const double dsdD = -s / D;
    // Through sx2 = mx2 - ux^2 and sxy = mxy - ux uy.
    g_mu.data[i] = inv_n * (dsdA * 2.0 * uy + dsdC * 2.0 * ux + dsdD * (-2.0 * ux) +
                            dsdB * 2.0 * (-uy));
    g_mx2.data[i] = inv_n * dsdD;
    g_mxy.data[i] = inv_n * dsdB * 2.0;
  }

  // Adjoint of the (symmetric) windowed means.
  const Image back_mu = detail::window_mean(g_mu, w, radius);
  const Image back_mx2 = detail::window_mean(g_mx2, w, radius);
  const Image back_mxy = detail::window_mean(g_mxy, w, radius);
  d_x = Image(x.height, x.width);
  for (size_t i = 0; i < x.data.size(); ++i)
    d_x.data[i] =
        back_mu.data[i] + 2.0 * x.data[i] * back_mx2.data[i] + y.data[i] * back_mxy.data[i];
  return total;
}

/// Plain L1 mean by default, with an optional D-SSIM term behind the flag.
inline LossResult photometric_loss(const Image& render, const Image& target,
                                   const TrainSchedule& sched = {}) {
  if (!render.same_size(target))
    throw std::invalid_argument("photometric_loss: size mismatch");
  LossResult out;
  out.d_render = Image(render.height, render.width);
  const double inv_n = 1.0 / static_cast<double>(render.data.size());
  for (size_t i = 0; i < render.data.size(); ++i) {
    const double d = render.data[i] - target.data[i];
    out.value += std::abs(d) * inv_n;
    out.d_render.data[i] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * inv_n;
  }
  if (sched.use_dssim) {
    Image d_ssim;
    const double ssim = ssim_with_gradient(render, target, d_ssim);
    out.value += sched.dssim_weight * (1.0 - ssim);
    for (size_t i = 0; i < d_ssim.data.size(); ++i)
      out.d_render.data[i] -= sched.dssim_weight * d_ssim.data[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct SupervisionFrame {
  int id = -1;
  Image image;
  Sim3 world_to_cam;  // T_cw at supervision time
  CameraIntrinsics K;
};

namespace detail {

/// Per-parameter adaptive first-order state (one slot per scalar).
struct AdamState {
  std::vector<double> m, v;
  long t = 0;

  void ensure(size_t n) {
    if (m.size() < n) {
      m.resize(n, 0.0);
      v.resize(n, 0.0);
    }
  }

  double step(size_t i, double grad, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-15;
    m[i] = b1 * m[i] + (1.0 - b1) * grad;
    v[i] = b2 * v[i] + (1.0 - b2) * grad * grad;
    const double mh = m[i] / (1.0 - std::pow(b1, static_cast<double>(t)));
    const double vh = v[i] / (1.0 - std::pow(b2, static_cast<double>(t)));
    return -lr * mh / (std::sqrt(vh) + eps);
  }
};

inline Quat quat_times_tangent(const Quat& q, const Vec3& delta) {
  // q * exp(delta), first order exact for the small steps the optimizer takes.
  const Quat dq = quat_exp(delta);
  return (q * dq).normalized();
}

}  // namespace detail

/// Streaming photometric optimizer: the sole writer of the map. Runs K (or
/// K/2) iterations per arrival, sampling supervision 0.2/0.8 between the
/// current frame and the past, and a final global phase weighted toward
/// rarely-visited frames.
class MapOptimizer {
 public:
  MapOptimizer(GaussianMap& map, const TrainSchedule& sched, const RendererConfig& rcfg,
               std::uint64_t seed)
      : map_(map), sched_(sched), rcfg_(rcfg), rng_(mix_seed(seed, 0x09717)) {}

  const FrameUpdateLedger& ledger() const { return ledger_; }
  const TrainSchedule& schedule() const { return sched_; }
  const std::vector<double>& loss_history() const { return loss_history_; }

  /// K iterations for mapper/keyframe arrivals, K/2 for common frames.
  /// `history` must not contain evaluation frames; the current frame is
  /// assumed supervisable (the pipeline filters).
  void streaming_step(FrameClass frame_class, const SupervisionFrame& current,
                      const std::vector<SupervisionFrame>& history) {
    const int iters =
        frame_class == FrameClass::Common ? sched_.k_iters / 2 : sched_.k_iters;
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (int i = 0; i < iters; ++i) {
      const SupervisionFrame* sf = &current;
      if (!history.empty() && uni(rng_) >= sched_.current_frame_prob) {
        std::uniform_int_distribution<size_t> pick(0, history.size() - 1);
        sf = &history[pick(rng_)];
      }
      optimize_once(*sf, nullptr);
    }
  }

  /// Global optimization over all frames, sampling each with weight
  /// 1 / (1 + visits). With pose refinement enabled the supplied poses are
  /// updated through the Sim(3) exponential.
  void global_phase(std::vector<SupervisionFrame>& frames, int budget) {
    if (frames.empty()) return;
    for (int i = 0; i < budget; ++i) {
      std::vector<double> weights;
      weights.reserve(frames.size());
      for (const auto& f : frames) {
        const auto it = ledger_.find(f.id);
        weights.push_back(1.0 / (1.0 + (it == ledger_.end() ? 0 : it->second)));
      }
      std::discrete_distribution<size_t> pick(weights.begin(), weights.end());
      SupervisionFrame& sf = frames[pick(rng_)];
      optimize_once(sf, sched_.pose_refinement ? &sf.world_to_cam : nullptr);
    }
  }

  /// Sampling weights as used by the global phase, for inspection.
  std::vector<double> global_weights(const std::vector<SupervisionFrame>& frames) const {
    std::vector<double> weights;
    for (const auto& f : frames) {
      const auto it = ledger_.find(f.id);
      weights.push_back(1.0 / (1.0 + (it == ledger_.end() ? 0 : it->second)));
    }
    return weights;
  }

  /// One render-loss-update iteration against a supervision frame.
  double optimize_once(const SupervisionFrame& sf, Sim3* pose_inout) {
    auto& prims = map_.primitives();
    if (prims.empty()) return 0.0;
    const Sim3 T_cw = pose_inout ? *pose_inout : sf.world_to_cam;
    const Vec3 cam_center = T_cw.inverse().t;
    const LodSelection sel =
        lod_select(prims, cam_center, map_.config().fade_literal);

    ForwardCache cache;
    const RenderedImage render = splat(prims, sel, T_cw, sf.K, rcfg_, &cache);
    const LossResult loss = photometric_loss(render.color, sf.image, sched_);
    const SplatGradients g = splat_backward(prims, cache, loss.d_render);

    apply_updates(g, pose_inout);
    ++ledger_[sf.id];
    loss_history_.push_back(loss.value);
    return loss.value;
  }

 private:
  void apply_updates(const SplatGradients& g, Sim3* pose_inout) {
    auto& prims = map_.primitives();
    const size_t n = prims.size();
    color_.ensure(3 * n);
    opacity_.ensure(n);
    mu_.ensure(3 * n);
    scale_.ensure(3 * n);
    rot_.ensure(3 * n);
    ++color_.t;
    ++opacity_.t;
    ++mu_.t;
    ++scale_.t;
    ++rot_.t;

    const double lr_mu = sched_.lr_mu * map_.scene_extent();
    for (size_t i = 0; i < n; ++i) {
      GaussianPrimitive& p = prims[i];
      for (int k = 0; k < 3; ++k)
        p.color(k) += color_.step(3 * i + k, g.color[i](k), sched_.lr_color);

      // Opacity through a logistic squashing to stay in (0, 1).
      const double a = std::clamp(p.alpha, 1e-6, 1.0 - 1e-6);
      const double logit = std::log(a / (1.0 - a));
      const double g_logit = g.alpha[i] * a * (1.0 - a);
      p.alpha = 1.0 / (1.0 + std::exp(-(logit + opacity_.step(i, g_logit, sched_.lr_opacity))));

      for (int k = 0; k < 3; ++k) p.mu(k) += mu_.step(3 * i + k, g.mu[i](k), lr_mu);

      // Scales in log-space to stay positive.
      for (int k = 0; k < 3; ++k) {
        const double ls = std::log(std::max(p.scales(k), 1e-12));
        const double g_ls = g.scales[i](k) * p.scales(k);
        p.scales(k) = std::exp(ls + scale_.step(3 * i + k, g_ls, sched_.lr_scale));
      }

      // Rotation on the local tangent: q(delta) = q * exp(delta).
      const Quat q = p.rotation.normalized();
      Vec3 g_tangent;
      for (int k = 0; k < 3; ++k) {
        Vec3 e = Vec3::Zero();
        e(k) = 1.0;
        const Quat dq = q * Quat(0.0, 0.5 * e.x(), 0.5 * e.y(), 0.5 * e.z());
        g_tangent(k) = g.rotation[i](0) * dq.w() + g.rotation[i](1) * dq.x() +
                       g.rotation[i](2) * dq.y() + g.rotation[i](3) * dq.z();
      }
      Vec3 step;
      for (int k = 0; k < 3; ++k)
        step(k) = rot_.step(3 * i + k, g_tangent(k), sched_.lr_rot);
      p.rotation = detail::quat_times_tangent(q, step);
    }

    if (pose_inout) {
      auto& st = pose_adam_[pose_inout];
      st.ensure(7);
      ++st.t;
      Vec7 step;
      for (int k = 0; k < 7; ++k) step(k) = st.step(k, g.camera(k), sched_.lr_pose);
      *pose_inout = sim3_exp(step) * (*pose_inout);
    }
  }

  GaussianMap& map_;
  TrainSchedule sched_;
  RendererConfig rcfg_;
  std::mt19937_64 rng_;
  FrameUpdateLedger ledger_;
  std::vector<double> loss_history_;
  detail::AdamState color_, opacity_, mu_, scale_, rot_;
  std::map<void*, detail::AdamState> pose_adam_;
};

}  // namespace artcore
