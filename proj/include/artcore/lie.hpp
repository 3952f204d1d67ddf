#pragma once

#include "artcore/core.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

namespace artcore {

// ---------------------------------------------------------------------------
// Camera model
// ---------------------------------------------------------------------------

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  static CameraIntrinsics with_focal(double f, int w, int h) {
    return {f, f, 0.5 * (w - 1), 0.5 * (h - 1), w, h};
  }

  bool contains(double u, double v) const {
    return u >= 0.0 && u <= width - 1.0 && v >= 0.0 && v <= height - 1.0;
  }
};

// ---------------------------------------------------------------------------
// Sim(3)
// ---------------------------------------------------------------------------

/// Similarity transform P -> s * R * P + t. Rotation is kept as a unit
/// quaternion and renormalized after every composition.
struct Sim3 {
  double s = 1.0;
  Quat q = Quat::Identity();
  Vec3 t = Vec3::Zero();

  static Sim3 identity() { return {}; }

  Mat3 rotation() const { return q.toRotationMatrix(); }

  Vec3 apply(const Vec3& p) const { return s * (q * p) + t; }

  Sim3 compose(const Sim3& other) const {
    Sim3 out;
    out.s = s * other.s;
    out.q = (q * other.q).normalized();
    out.t = s * (q * other.t) + t;
    return out;
  }

  Sim3 inverse() const {
    Sim3 out;
    out.s = 1.0 / s;
    out.q = q.conjugate();
    out.t = -(out.s * (out.q * t));
    return out;
  }

  Sim3 operator*(const Sim3& other) const { return compose(other); }
};

inline Vec3 sim3_apply(const Sim3& T, const Vec3& p) { return T.apply(p); }
inline Sim3 sim3_compose(const Sim3& a, const Sim3& b) { return a.compose(b); }
inline Sim3 sim3_inverse(const Sim3& T) { return T.inverse(); }

namespace detail {

// W(omega, sigma) = Integral_0^1 exp(sigma u) exp([omega]_x u) du, so that
// exp_sim3(rho, omega, sigma).t = W * rho. Closed forms with Taylor branches
// below 1e-6 in |sigma| and ||omega||.
inline Mat3 sim3_calc_w(const Vec3& omega, double sigma) {
  const double theta = omega.norm();
  const Mat3 Omega = skew(omega);
  const Mat3 Omega2 = Omega * Omega;
  const double eps = 1e-6;

  double A, B, C;
  if (std::abs(sigma) < eps) {
    C = 1.0 + 0.5 * sigma + sigma * sigma / 6.0;
    if (theta < eps) {
      A = 0.5 + sigma / 3.0 + sigma * sigma / 8.0;
      B = 1.0 / 6.0 + sigma / 8.0 + sigma * sigma / 20.0;
    } else {
      const double t2 = theta * theta;
      A = (1.0 - std::cos(theta)) / t2 +
          sigma * (std::sin(theta) - theta * std::cos(theta)) / (t2 * theta);
      B = (theta - std::sin(theta)) / (t2 * theta) +
          sigma * (0.5 * t2 + std::cos(theta) + theta * std::sin(theta) - 1.0) / (t2 * t2);
    }
  } else {
    const double scale = std::exp(sigma);
    C = (scale - 1.0) / sigma;
    if (theta < eps) {
      const double s2 = sigma * sigma;
      A = ((sigma - 1.0) * scale + 1.0) / s2;
      B = (scale * (0.5 * s2 - sigma + 1.0) - 1.0) / (s2 * sigma);
    } else {
      const double a = scale * std::sin(theta);
      const double b = scale * std::cos(theta);
      const double c = theta * theta + sigma * sigma;
      A = (a * sigma + (1.0 - b) * theta) / (theta * c);
      B = (C - ((b - 1.0) * sigma + a * theta) / c) / (theta * theta);
    }
  }
  return C * Mat3::Identity() + A * Omega + B * Omega2;
}

inline Quat quat_exp(const Vec3& omega) {
  const double theta = omega.norm();
  if (theta < 1e-12) {
    Quat q(1.0, 0.5 * omega.x(), 0.5 * omega.y(), 0.5 * omega.z());
    q.normalize();
    return q;
  }
  return Quat(Eigen::AngleAxisd(theta, omega / theta));
}

inline Vec3 quat_log(const Quat& q_in) {
  Quat q = q_in.normalized();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const Eigen::AngleAxisd aa(q);
  return aa.angle() * aa.axis();
}

}  // namespace detail

/// Tangent layout: xi = [translation (0..2), rotation (3..5), log-scale (6)].
inline Sim3 sim3_exp(const Vec7& xi) {
  const Vec3 rho = xi.head<3>();
  const Vec3 omega = xi.segment<3>(3);
  const double sigma = xi(6);
  Sim3 T;
  T.s = std::exp(sigma);
  T.q = detail::quat_exp(omega);
  T.t = detail::sim3_calc_w(omega, sigma) * rho;
  return T;
}

inline Vec7 sim3_log(const Sim3& T) {
  const Vec3 omega = detail::quat_log(T.q);
  const double sigma = std::log(T.s);
  const Mat3 W = detail::sim3_calc_w(omega, sigma);
  Vec7 xi;
  xi.head<3>() = W.partialPivLu().solve(T.t);
  xi.segment<3>(3) = omega;
  xi(6) = sigma;
  return xi;
}

/// Distance between two transforms measured in the tangent space.
inline double sim3_error(const Sim3& a, const Sim3& b) {
  return sim3_log(a.inverse() * b).norm();
}

// ---------------------------------------------------------------------------
// Log-depth projection
// ---------------------------------------------------------------------------

struct LogDepthMeasurement {
  double u = 0.0;
  double v = 0.0;
  double log_z = 0.0;
};

inline LogDepthMeasurement project_log_depth(const Vec3& p, const CameraIntrinsics& K) {
  if (p.z() <= 0.0) throw BehindCameraError("project_log_depth: Z <= 0");
  return {K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy, std::log(p.z())};
}

inline Vec3 backproject_log_depth(const LogDepthMeasurement& m, const CameraIntrinsics& K) {
  const double z = std::exp(m.log_z);
  return {(m.u - K.cx) / K.fx * z, (m.v - K.cy) / K.fy * z, z};
}

/// d(u, v, log Z) / d(X, Y, Z).
inline Mat3 jacobian_wrt_point(const Vec3& p, const CameraIntrinsics& K) {
  if (p.z() <= 0.0) throw BehindCameraError("jacobian_wrt_point: Z <= 0");
  const double iz = 1.0 / p.z();
  Mat3 J;
  // clang-format off
  J << K.fx * iz,       0.0, -K.fx * p.x() * iz * iz,
             0.0, K.fy * iz, -K.fy * p.y() * iz * iz,
             0.0,       0.0,                      iz;
  // clang-format on
  return J;
}

/// Derivative of the full reprojection (u, v, log Z) with respect to a shared
/// focal length f. The source point is reconstructed from its pixel and depth,
/// so the result is the direct pixel-scaling term plus the chain-rule term
/// through the f-dependent back-projection.
inline Vec3 jacobian_wrt_focal(const Vec2& pixel_c, double z_c, const Sim3& T_kc,
                               const CameraIntrinsics& K) {
  const double f = K.fx;
  if (f <= 0.0) throw BehindCameraError("jacobian_wrt_focal: f <= 0");
  const Vec3 p_c(z_c * (pixel_c.x() - K.cx) / f, z_c * (pixel_c.y() - K.cy) / f, z_c);
  const Vec3 p_k = T_kc.apply(p_c);
  if (p_k.z() <= 0.0) throw BehindCameraError("jacobian_wrt_focal: transformed Z <= 0");

  const Vec3 direct(p_k.x() / p_k.z(), p_k.y() / p_k.z(), 0.0);
  const Vec3 dpc_df(-z_c * (pixel_c.x() - K.cx) / (f * f),
                    -z_c * (pixel_c.y() - K.cy) / (f * f), 0.0);
  const Vec3 dpk_df = T_kc.s * (T_kc.q * dpc_df);  // linear part of T_kc
  CameraIntrinsics Kf = K;
  Kf.fx = Kf.fy = f;
  return direct + jacobian_wrt_point(p_k, Kf) * dpk_df;
}

// ---------------------------------------------------------------------------
// Point covariance
// ---------------------------------------------------------------------------

/// Sigma_ck = J_pi R Sigma_c R^T J_pi^T, symmetrized against roundoff.
inline Mat3 propagate_covariance(const Mat3& sigma_c, const Mat3& R_kc, const Mat3& J_pi) {
  const Mat3 m = J_pi * R_kc * sigma_c * R_kc.transpose() * J_pi.transpose();
  return 0.5 * (m + m.transpose());
}

/// Closed-form least-squares Sim(3) fit: returns T with dst ~= T(src).
/// Requires >= 3 non-degenerate point pairs.
inline Sim3 umeyama_sim3(std::span<const Vec3> src, std::span<const Vec3> dst) {
  const size_t n = src.size();
  if (n < 3 || dst.size() != n)
    throw std::invalid_argument("umeyama_sim3: need >= 3 paired points");
  Vec3 mu_x = Vec3::Zero(), mu_y = Vec3::Zero();
  for (size_t i = 0; i < n; ++i) {
    mu_x += src[i];
    mu_y += dst[i];
  }
  mu_x /= static_cast<double>(n);
  mu_y /= static_cast<double>(n);

  Mat3 cross = Mat3::Zero();
  double var_x = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const Vec3 dx = src[i] - mu_x;
    cross += (dst[i] - mu_y) * dx.transpose();
    var_x += dx.squaredNorm();
  }
  cross /= static_cast<double>(n);
  var_x /= static_cast<double>(n);

  Eigen::JacobiSVD<Mat3> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 d = Vec3::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) d.z() = -1.0;
  const Mat3 R = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  const double scale = svd.singularValues().dot(d) / var_x;

  Sim3 T;
  T.s = scale;
  T.q = Quat(R).normalized();
  T.t = mu_y - scale * (R * mu_x);
  return T;
}

struct LocalCovarianceOptions {
  double sigma_min = 1e-3;       // isotropic fallback scale (scene units)
  double eigen_floor = 1e-12;    // degenerate-cluster detection threshold
  int min_neighbors = 4;
};

/// Sample covariance of the points within `radius` of `center`. Degenerate
/// neighborhoods (too few points or a near-singular cluster) get sigma_min^2*I
/// added so downstream whitening stays well-posed.
inline Mat3 estimate_local_covariance(std::span<const Vec3> points, const Vec3& center,
                                      double radius,
                                      const LocalCovarianceOptions& opt = {}) {
  const double r2 = radius * radius;
  Vec3 mean = Vec3::Zero();
  int n = 0;
  for (const Vec3& p : points) {
    if ((p - center).squaredNorm() <= r2) {
      mean += p;
      ++n;
    }
  }
  Mat3 cov = Mat3::Zero();
  if (n > 0) {
    mean /= n;
    for (const Vec3& p : points) {
      if ((p - center).squaredNorm() <= r2) {
        const Vec3 d = p - mean;
        cov += d * d.transpose();
      }
    }
    cov /= n;
  }
  bool degenerate = n < opt.min_neighbors;
  if (!degenerate) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    degenerate = es.eigenvalues().minCoeff() < opt.eigen_floor;
  }
  if (degenerate) cov += opt.sigma_min * opt.sigma_min * Mat3::Identity();
  return cov;
}

}  // namespace artcore
