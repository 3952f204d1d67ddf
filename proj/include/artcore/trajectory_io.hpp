#pragma once

#include "artcore/core.hpp"
#include "artcore/lie.hpp"

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace artcore {

struct TrajectoryEntry {
  double timestamp = 0.0;
  Sim3 pose;  // camera-to-world; TUM carries only the SE(3) part
};

using Trajectory = std::vector<TrajectoryEntry>;

/// TUM format: `timestamp tx ty tz qx qy qz qw`, '#' comments.
inline void write_tum_trajectory(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open trajectory for write: " + path);
  out << "# timestamp tx ty tz qx qy qz qw\n";
  out.precision(17);
  for (const auto& e : traj) {
    const Quat q = e.pose.q.normalized();
    out << e.timestamp << ' ' << e.pose.t.x() << ' ' << e.pose.t.y() << ' '
        << e.pose.t.z() << ' ' << q.x() << ' ' << q.y() << ' ' << q.z() << ' ' << q.w()
        << '\n';
  }
  if (!out) throw std::runtime_error("short trajectory write: " + path);
}

inline Trajectory read_tum_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trajectory: " + path);
  Trajectory traj;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    TrajectoryEntry e;
    double qx, qy, qz, qw;
    if (!(ls >> e.timestamp >> e.pose.t.x() >> e.pose.t.y() >> e.pose.t.z() >> qx >> qy >>
          qz >> qw))
      throw std::runtime_error("malformed TUM line in " + path + ": " + line);
    e.pose.q = Quat(qw, qx, qy, qz).normalized();
    traj.push_back(e);
  }
  return traj;
}

struct AlignmentResult {
  Sim3 alignment;  // maps estimated positions onto ground truth
  double ate_rmse = 0.0;
  int n_pairs = 0;
};

/// Associates by timestamp (window in seconds), aligns with a closed-form
/// Sim(3) fit, and reports the RMS translational residual.
inline AlignmentResult align_trajectories(const Trajectory& estimated,
                                          const Trajectory& ground_truth,
                                          double max_dt = 0.020) {
  std::vector<Vec3> src, dst;
  size_t j = 0;
  for (const auto& e : estimated) {
    while (j + 1 < ground_truth.size() &&
           std::abs(ground_truth[j + 1].timestamp - e.timestamp) <=
               std::abs(ground_truth[j].timestamp - e.timestamp))
      ++j;
    if (j < ground_truth.size() &&
        std::abs(ground_truth[j].timestamp - e.timestamp) <= max_dt) {
      src.push_back(e.pose.t);
      dst.push_back(ground_truth[j].pose.t);
    }
  }
  if (src.size() < 3)
    throw std::runtime_error("align_trajectories: need >= 3 associated pose pairs");

  AlignmentResult out;
  out.alignment = umeyama_sim3(src, dst);
  out.n_pairs = static_cast<int>(src.size());
  double sq = 0.0;
  for (size_t i = 0; i < src.size(); ++i)
    sq += (out.alignment.apply(src[i]) - dst[i]).squaredNorm();
  out.ate_rmse = std::sqrt(sq / static_cast<double>(src.size()));
  return out;
}

}  // namespace artcore
