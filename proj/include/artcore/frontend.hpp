#pragma once

#include "artcore/core.hpp"
#include "artcore/lie.hpp"
#include "artcore/pointmap.hpp"
#include "artcore/providers.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace artcore {

struct InsufficientCorrespondencesError : std::runtime_error {
  explicit InsufficientCorrespondencesError(const std::string& what)
      : std::runtime_error(what) {}
};

struct ClassificationError : std::runtime_error {
  explicit ClassificationError(const std::string& what) : std::runtime_error(what) {}
};

enum class FrameClass { Common, Mapper, Keyframe };

inline const char* to_string(FrameClass c) {
  switch (c) {
    case FrameClass::Common: return "common";
    case FrameClass::Mapper: return "mapper";
    case FrameClass::Keyframe: return "keyframe";
  }
  return "?";
}

struct FrontendConfig {
  double tau_k_factor = 0.333;  // tau_k = max(factor * W, floor)
  double tau_k_floor = 30.0;
  double tau_m_at_512 = 24.0;  // pixel displacement threshold, linear in W
  double tau_det = 1e-2;       // covariance determinant gate
  double huber_delta = 1.345;  // in whitened-residual units
  double huber_eps = 1e-9;
  double w_logz = 4.0;  // log-depth weight in W_m = diag(1, 1, w_logz)
  int max_iterations = 50;
  double epsilon_dx = 1e-10;  // convergence threshold on ||delta xi||
  int k_f = 5;                // focal bootstrap count
  int min_correspondences = 12;
  double cov_radius = 0.15;  // neighbor radius for local covariance (scene units)
  bool freeze_focal_on_loop = true;
};

struct TrackingResult {
  Sim3 T_kc;
  int inliers = 0;
  double final_energy = 0.0;
  int iterations = 0;
  double focal = 0.0;
  bool converged = false;
};

// ---------------------------------------------------------------------------
// Pure operations
// ---------------------------------------------------------------------------

/// Nearest-rank percentile: the ceil(0.7 n)-th smallest value.
inline double percentile_70(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("percentile_70: empty input");
  const size_t rank = static_cast<size_t>(
      std::ceil(0.7 * static_cast<double>(values.size())));
  const size_t idx = std::max<size_t>(1, rank) - 1;
  std::nth_element(values.begin(), values.begin() + idx, values.end());
  return values[idx];
}

inline double bootstrap_focal(std::vector<double> estimates) {
  if (estimates.empty()) throw std::invalid_argument("bootstrap_focal: empty input");
  std::sort(estimates.begin(), estimates.end());
  const size_t n = estimates.size();
  return (n % 2 == 1) ? estimates[n / 2]
                      : 0.5 * (estimates[n / 2 - 1] + estimates[n / 2]);
}

/// Keep a correspondence iff the transported covariance determinant is within
/// the gate.
inline bool gate_correspondence(const Mat3& sigma_c, const Mat3& R_kc, const Mat3& J_pi,
                                double tau_det) {
  return propagate_covariance(sigma_c, R_kc, J_pi).determinant() <= tau_det;
}

inline double huber_weight(double s, double delta, double eps = 1e-9) {
  return s <= delta ? 1.0 : delta / (s + eps);
}

inline FrameClass classify_frame(int corr_count, const std::vector<double>& displacements,
                                 int image_width, const FrontendConfig& cfg) {
  const double tau_k = std::max(cfg.tau_k_factor * image_width, cfg.tau_k_floor);
  if (corr_count < tau_k) return FrameClass::Keyframe;
  if (displacements.empty())
    throw ClassificationError("no displacements for a frame above the keyframe gate");
  const double tau_m = cfg.tau_m_at_512 * image_width / 512.0;
  return percentile_70(displacements) > tau_m ? FrameClass::Mapper : FrameClass::Common;
}

// ---------------------------------------------------------------------------
// Robust weighted Gauss-Newton pose (and optional focal) estimation
// ---------------------------------------------------------------------------

namespace detail {

/// d(projected point) / d(left-multiplicative Sim(3) increment).
inline Mat37 pose_point_jacobian(const Vec3& p_hat) {
  Mat37 D;
  D.block<3, 3>(0, 0) = Mat3::Identity();
  D.block<3, 3>(0, 3) = -skew(p_hat);
  D.col(6) = p_hat;
  return D;
}

struct ResidualStats {
  double energy = 0.0;
  int inliers = 0;
  int active = 0;
};

}  // namespace detail

/// Robust weighted tracking energy at a given pose: 0.5 sum w_m r^T W_m r with
/// the Huber factor evaluated at that pose. Behind-camera points contribute
/// nothing.
inline double robust_tracking_energy(const CorrespondenceSet& corrs,
                                     const CameraIntrinsics& K, const Sim3& T,
                                     const FrontendConfig& cfg = {}) {
  const Vec3 w_diag(1.0, 1.0, cfg.w_logz);
  double energy = 0.0;
  for (const auto& c : corrs.items) {
    if (c.p_k.z() <= 0.0) continue;
    const Vec3 p_hat = T.apply(c.p_c);
    if (p_hat.z() <= 0.0) continue;
    const auto m = project_log_depth(p_hat, K);
    const Vec3 r(c.pixel_k.x() - m.u, c.pixel_k.y() - m.v, std::log(c.p_k.z()) - m.log_z);
    const double s = std::sqrt(r.dot(w_diag.cwiseProduct(r)));
    energy += 0.5 * huber_weight(s, cfg.huber_delta, cfg.huber_eps) * s * s;
  }
  return energy;
}

/// Minimizes the Huber-weighted pixel + log-depth energy over T_kc (7 dof)
/// and optionally a shared focal length (8th column). Updates apply through
/// the Sim(3) exponential on the left. Steps that do not decrease the energy
/// are retried with Levenberg damping and ultimately rejected.
inline TrackingResult estimate_relative_pose(const CorrespondenceSet& corrs,
                                             const std::vector<Mat3>& covariances,
                                             const CameraIntrinsics& K_in,
                                             const Sim3& T_init, bool optimize_focal,
                                             const FrontendConfig& cfg = {}) {
  // Gate on the transported covariance determinant at the initial estimate.
  std::vector<const Correspondence*> gated;
  gated.reserve(corrs.size());
  const Mat3 R_init = T_init.rotation();
  for (size_t i = 0; i < corrs.size(); ++i) {
    const Correspondence& c = corrs.items[i];
    if (c.p_k.z() <= 0.0) continue;
    if (!covariances.empty()) {
      const Vec3 p_hat = T_init.apply(c.p_c);
      if (p_hat.z() <= 0.0) continue;
      const Mat3 J = jacobian_wrt_point(p_hat, K_in);
      if (!gate_correspondence(covariances[i], R_init, J, cfg.tau_det)) continue;
    }
    gated.push_back(&c);
  }
  if (static_cast<int>(gated.size()) < cfg.min_correspondences)
    throw InsufficientCorrespondencesError(
        "estimate_relative_pose: " + std::to_string(gated.size()) + " gated, need " +
        std::to_string(cfg.min_correspondences));

  Sim3 T = T_init;
  double focal = K_in.fx;
  const int dim = optimize_focal ? 8 : 7;

  auto intrinsics_at = [&](double f) {
    CameraIntrinsics K = K_in;
    if (optimize_focal) K.fx = K.fy = f;
    return K;
  };

  // Source points; under focal optimization they are re-derived from pixel
  // and depth so the focal sensitivity of the back-projection is modeled.
  auto source_point = [&](const Correspondence& c, double f) -> Vec3 {
    if (!optimize_focal) return c.p_c;
    return {c.p_c.z() * (c.pixel_c.x() - K_in.cx) / f,
            c.p_c.z() * (c.pixel_c.y() - K_in.cy) / f, c.p_c.z()};
  };

  const Vec3 w_diag(1.0, 1.0, cfg.w_logz);

  auto eval_subset = [&](const std::vector<const Correspondence*>& set, const Sim3& T_eval,
                         double f_eval) {
    detail::ResidualStats st;
    const CameraIntrinsics K = intrinsics_at(f_eval);
    for (const Correspondence* c : set) {
      const Vec3 p_hat = T_eval.apply(source_point(*c, f_eval));
      if (p_hat.z() <= 0.0) continue;
      const auto m = project_log_depth(p_hat, K);
      const Vec3 r(c->pixel_k.x() - m.u, c->pixel_k.y() - m.v,
                   std::log(c->p_k.z()) - m.log_z);
      const double s = std::sqrt(r.dot(w_diag.cwiseProduct(r)));
      const double w = huber_weight(s, cfg.huber_delta, cfg.huber_eps);
      st.energy += 0.5 * w * s * s;
      st.inliers += s <= cfg.huber_delta;
      st.active += 1;
    }
    return st;
  };

  // One IRLS Gauss-Newton run over a fixed correspondence set.
  auto run_irls = [&](const std::vector<const Correspondence*>& set, Sim3 T0, double f0,
                      int& iterations_used) {
    detail::ResidualStats cur = eval_subset(set, T0, f0);
    bool converged = false;
    int consecutive_rejections = 0;
    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
      ++iterations_used;
      MatX H = MatX::Zero(dim, dim);
      VecX b = VecX::Zero(dim);
      const CameraIntrinsics K = intrinsics_at(f0);
      for (const Correspondence* c : set) {
        const Vec3 p_c = source_point(*c, f0);
        const Vec3 p_hat = T0.apply(p_c);
        if (p_hat.z() <= 0.0) continue;
        const auto m = project_log_depth(p_hat, K);
        const Vec3 r(c->pixel_k.x() - m.u, c->pixel_k.y() - m.v,
                     std::log(c->p_k.z()) - m.log_z);
        const double s = std::sqrt(r.dot(w_diag.cwiseProduct(r)));
        const double w = huber_weight(s, cfg.huber_delta, cfg.huber_eps);
        const Vec3 wrob = w * w_diag;

        Eigen::Matrix<double, 3, Eigen::Dynamic> J(3, dim);
        J.leftCols<7>() =
            jacobian_wrt_point(p_hat, K) * detail::pose_point_jacobian(p_hat);
        if (optimize_focal) J.col(7) = jacobian_wrt_focal(c->pixel_c, c->p_c.z(), T0, K);

        H.noalias() += J.transpose() * wrob.asDiagonal() * J;
        b.noalias() += J.transpose() * wrob.cwiseProduct(r).matrix();
      }

      bool accepted = false;
      double step_norm = 0.0;
      for (double lambda = 0.0; lambda <= 1e-2;
           lambda = (lambda == 0.0 ? 1e-6 : 2.0 * lambda)) {
        MatX H_damped = H;
        if (lambda > 0.0) H_damped.diagonal().array() += lambda * H.trace() / dim;
        const VecX delta = H_damped.ldlt().solve(b);
        if (!delta.allFinite()) continue;
        const Sim3 T_new = sim3_exp(delta.head<7>()) * T0;
        const double f_new = optimize_focal ? f0 + delta(7) : f0;
        if (optimize_focal && f_new <= 1.0) continue;
        const detail::ResidualStats st = eval_subset(set, T_new, f_new);
        if (st.energy <= cur.energy + 1e-15) {
          T0 = T_new;
          f0 = f_new;
          cur = st;
          step_norm = delta.norm();
          accepted = true;
          break;
        }
      }

      if (!accepted) {
        if (++consecutive_rejections >= 3) break;
        continue;
      }
      consecutive_rejections = 0;
      if (step_norm < cfg.epsilon_dx) {
        converged = true;
        break;
      }
    }
    return std::tuple<Sim3, double, bool>(T0, f0, converged);
  };

  TrackingResult out;
  auto [T_est, f_est, converged] = run_irls(gated, T, focal, out.iterations);

  // Huber gating: drop correspondences outside the Huber band and refine on
  // the survivors, so gross outliers lose their residual pull.
  std::vector<const Correspondence*> active = gated;
  for (const double band : {3.0, 1.0, 1.0}) {
    const CameraIntrinsics K = intrinsics_at(f_est);
    std::vector<const Correspondence*> kept;
    kept.reserve(active.size());
    for (const Correspondence* c : active) {
      const Vec3 p_hat = T_est.apply(source_point(*c, f_est));
      if (p_hat.z() <= 0.0) continue;
      const auto m = project_log_depth(p_hat, K);
      const Vec3 r(c->pixel_k.x() - m.u, c->pixel_k.y() - m.v,
                   std::log(c->p_k.z()) - m.log_z);
      const double s = std::sqrt(r.dot(w_diag.cwiseProduct(r)));
      if (s <= band * cfg.huber_delta) kept.push_back(c);
    }
    if (kept.size() == active.size() ||
        static_cast<int>(kept.size()) < cfg.min_correspondences)
      break;
    active = std::move(kept);
    std::tie(T_est, f_est, converged) = run_irls(active, T_est, f_est, out.iterations);
  }

  out.T_kc = T_est;
  out.focal = f_est;
  out.converged = converged;
  const detail::ResidualStats full = eval_subset(gated, T_est, f_est);
  out.final_energy = full.energy;
  out.inliers = full.inliers;
  return out;
}

/// Local covariance of the pointmap around a pixel, using the 5x5 pixel
/// neighborhood as the candidate set.
inline Mat3 pointmap_local_covariance(const Pointmap& pm, int x, int y, double radius) {
  std::vector<Vec3> candidates;
  candidates.reserve(25);
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) {
      const int yy = y + dy, xx = x + dx;
      if (yy < 0 || yy >= pm.height || xx < 0 || xx >= pm.width) continue;
      if (!pm.is_valid(yy, xx)) continue;
      candidates.push_back(pm.point(yy, xx));
    }
  return estimate_local_covariance(candidates, pm.point(y, x), radius);
}

// ---------------------------------------------------------------------------
// Streaming tracker
// ---------------------------------------------------------------------------

/// A previously-emitted frame upgraded to keyframe after the fact, when the
/// frame that followed it lost the current reference.
struct PromotedKeyframe {
  int frame_id = -1;
  int ref_keyframe = -1;
  Sim3 T_kc;
  Pointmap pointmap;
  CorrespondenceSet corrs;
};

struct FrontendOutput {
  int frame_id = -1;
  FrameClass frame_class = FrameClass::Common;
  int ref_keyframe = -1;  // keyframe this frame was tracked against
  Sim3 T_kc;              // maps this frame's points into the reference keyframe
  TrackingResult tracking;
  Pointmap pointmap;        // current frame's pointmap
  CorrespondenceSet corrs;  // correspondences to the reference keyframe
  bool tracked = true;      // false when tracking failed and the frame was demoted
  std::optional<PromotedKeyframe> promoted;  // emitted before this frame's own role
};

/// Per-frame tracking against the latest keyframe. Owns the keyframe
/// reference and the focal estimate; driven by a single thread.
class Frontend {
 public:
  Frontend(const FrontendConfig& cfg, const CameraIntrinsics& K_hint)
      : cfg_(cfg), K_(K_hint) {}

  const CameraIntrinsics& intrinsics() const { return K_; }
  void freeze_focal() { focal_frozen_ = true; }

  FrontendOutput process(const Frame& frame, const MatchingProvider& provider) {
    FrontendOutput out;
    out.frame_id = frame.id;

    const bool known_intrinsics = frame.intrinsics.has_value();
    if (known_intrinsics) {
      K_ = *frame.intrinsics;
    } else if (static_cast<int>(focal_samples_.size()) < cfg_.k_f) {
      focal_samples_.push_back(provider.focal_estimate(frame));
      K_.fx = K_.fy = bootstrap_focal(focal_samples_);
    }

    if (ref_id_ < 0) {
      // First frame anchors the sequence.
      const MatchResult self = provider.match(frame, frame);
      out.frame_class = FrameClass::Keyframe;
      out.ref_keyframe = frame.id;
      out.T_kc = Sim3::identity();
      out.tracking.converged = true;
      out.tracking.focal = K_.fx;
      out.pointmap = self.pm_a;
      set_keyframe(frame);
      last_frame_ = frame;
      last_pointmap_ = out.pointmap;
      return out;
    }

    const bool opt_focal = !known_intrinsics && !focal_frozen_;
    bool ok = track_against_ref(frame, provider, opt_focal, out);
    if (!ok && last_frame_.id >= 0 && last_frame_.id != ref_id_) {
      // The reference fell out of view. Promote the last good frame to a
      // keyframe and retry against it.
      out.promoted = PromotedKeyframe{last_frame_.id, ref_id_, last_T_kc_,
                                      last_pointmap_, last_corrs_};
      set_keyframe(last_frame_);
      ok = track_against_ref(frame, provider, opt_focal, out);
    }
    if (!ok) {
      out.tracked = false;
      out.frame_class = FrameClass::Common;
      return out;
    }

    out.T_kc = out.tracking.T_kc;
    if (opt_focal) K_.fx = K_.fy = out.tracking.focal;

    std::vector<double> displacements;
    displacements.reserve(out.corrs.size());
    for (const auto& c : out.corrs.items)
      displacements.push_back((c.pixel_k - c.pixel_c).norm());
    out.frame_class = classify_frame(out.tracking.inliers, displacements, K_.width, cfg_);

    last_frame_ = frame;
    last_pointmap_ = out.pointmap;
    last_corrs_ = out.corrs;
    last_T_kc_ = out.T_kc;
    if (out.frame_class == FrameClass::Keyframe) set_keyframe(frame);
    return out;
  }

 private:
  bool track_against_ref(const Frame& frame, const MatchingProvider& provider,
                         bool opt_focal, FrontendOutput& out) {
    const MatchResult m = provider.match(frame, ref_frame_);
    out.pointmap = m.pm_a;
    out.corrs = m.corrs;
    out.ref_keyframe = ref_id_;

    std::vector<Mat3> covs(m.corrs.size());
    for (size_t i = 0; i < m.corrs.size(); ++i) {
      const auto& c = m.corrs.items[i];
      covs[i] = pointmap_local_covariance(
          m.pm_a, static_cast<int>(c.pixel_c.x()), static_cast<int>(c.pixel_c.y()),
          cfg_.cov_radius);
    }
    try {
      out.tracking =
          estimate_relative_pose(m.corrs, covs, K_, last_T_kc_, opt_focal, cfg_);
    } catch (const InsufficientCorrespondencesError&) {
      return false;
    }
    // Robustness over abort: a frame that will not converge refines nothing.
    return out.tracking.converged;
  }

  void set_keyframe(const Frame& frame) {
    ref_id_ = frame.id;
    ref_frame_ = frame;
    last_T_kc_ = Sim3::identity();
  }

  FrontendConfig cfg_;
  CameraIntrinsics K_;
  int ref_id_ = -1;
  Frame ref_frame_;
  Sim3 last_T_kc_;  // motion prior: previous frame's pose w.r.t. the keyframe
  Frame last_frame_;
  Pointmap last_pointmap_;
  CorrespondenceSet last_corrs_;
  std::vector<double> focal_samples_;
  bool focal_frozen_ = false;
};

}  // namespace artcore
