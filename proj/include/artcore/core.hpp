#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace artcore {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec7 = Eigen::Matrix<double, 7, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat37 = Eigen::Matrix<double, 3, 7>;
using Quat = Eigen::Quaterniond;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// Point with non-positive depth reached a projective operation.
struct BehindCameraError : std::runtime_error {
  explicit BehindCameraError(const std::string& what) : std::runtime_error(what) {}
};

/// A provider could not produce its output (missing file, bad input set, ...).
struct ProviderError : std::runtime_error {
  explicit ProviderError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed configuration value or file.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  // clang-format off
  m <<   0.0, -v.z(),  v.y(),
       v.z(),    0.0, -v.x(),
      -v.y(),  v.x(),    0.0;
  // clang-format on
  return m;
}

/// splitmix64; used to derive independent RNG streams from a master seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace artcore
