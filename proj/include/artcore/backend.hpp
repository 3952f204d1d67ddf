#pragma once

#include "artcore/core.hpp"
#include "artcore/frontend.hpp"
#include "artcore/lie.hpp"
#include "artcore/pointmap.hpp"
#include "artcore/providers.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <vector>

namespace artcore {

struct GraphError : std::runtime_error {
  explicit GraphError(const std::string& what) : std::runtime_error(what) {}
};

enum class EdgeKind { Sequential, Loop };

inline const char* to_string(EdgeKind k) {
  return k == EdgeKind::Sequential ? "sequential" : "loop";
}

struct FactorGraphEdge {
  int i = -1;  // owner of the correspondences' frame_c side
  int j = -1;  // owner of the frame_k side
  CorrespondenceSet corrs;
  std::vector<double> conf;  // per-correspondence initial weight
  EdgeKind kind = EdgeKind::Sequential;
};

/// Keyframe nodes with absolute camera-to-world poses plus correspondence
/// edges. The first inserted node is the gauge anchor and never moves.
struct FactorGraph {
  std::map<int, Sim3> nodes;
  std::vector<FactorGraphEdge> edges;
  int anchor = -1;

  void add_node(int id, const Sim3& pose) {
    if (nodes.empty()) anchor = id;
    nodes[id] = pose;
  }

  bool connected() const {
    if (nodes.empty()) return true;
    std::set<int> seen{anchor};
    bool grew = true;
    while (grew) {
      grew = false;
      for (const auto& e : edges) {
        const bool has_i = seen.count(e.i), has_j = seen.count(e.j);
        if (has_i != has_j) {
          seen.insert(has_i ? e.j : e.i);
          grew = true;
        }
      }
    }
    return seen.size() == nodes.size();
  }
};

struct LoopDecision {
  bool detected = false;
  std::vector<int> selected;  // up to 3 keyframe ids
  std::map<int, double> scores;
  std::map<int, double> consistency;
};

struct BackendConfig {
  double loop_score_threshold = 0.005;
  int loop_min_gap = 10;         // keyframe-ordinal temporal gap, must exceed
  int loop_max_candidates = 23;  // N_a = min(23, N_c)
  int loop_min_candidates = 11;  // below this the loop module is bypassed
  double consistency_ratio = 0.15;
  double theta_max_deg = 2.0;
  double rho_max = 0.05;
  int gba_iters_keyframe = 5;
  int gba_iters_loop = 50;
  double gba_epsilon = 1e-8;  // on ||delta xi||_inf
  double gba_huber_delta = 1.345;
  int gba_max_corrs_per_edge = 800;
  double eps_c = 3.0;  // pixel threshold of the confidence formula
  double c_floor = 0.1;
  int n_conf_neighbors = 3;
};

// ---------------------------------------------------------------------------
// GBA residuals and Jacobians
// ---------------------------------------------------------------------------

/// Residual of point P_i (frame i coordinates) observed in frame j, against
/// a measured pixel and log-depth: r = [uv(P_hat_j) - p_obs; log Z_hat - log Z_obs].
inline Vec3 reprojection_residual(const Vec3& p_i, const Sim3& T_wi, const Sim3& T_wj,
                                  const CameraIntrinsics& K, const Vec2& pixel_obs,
                                  double log_z_obs) {
  const Vec3 p_j = T_wj.inverse().apply(T_wi.apply(p_i));
  if (p_j.z() <= 0.0) throw BehindCameraError("reprojection_residual: Z <= 0");
  const auto m = project_log_depth(p_j, K);
  return {m.u - pixel_obs.x(), m.v - pixel_obs.y(), m.log_z - log_z_obs};
}

/// Analytic derivative of the residual above with respect to
/// left-multiplicative Sim(3) increments on T_wi and T_wj. The two blocks are
/// exact negatives: a shared world motion applied to both poses produces
/// equal-and-opposite first-order contributions, which is the gauge freedom
/// the anchor removes.
inline std::pair<Mat37, Mat37> pose_pair_jacobians(const Vec3& p_i, const Sim3& T_wi,
                                                   const Sim3& T_wj,
                                                   const CameraIntrinsics& K) {
  const Vec3 p_w = T_wi.apply(p_i);
  const Sim3 T_jw = T_wj.inverse();
  const Vec3 p_j = T_jw.apply(p_w);
  if (p_j.z() <= 0.0) throw BehindCameraError("pose_pair_jacobians: Z <= 0");

  Mat37 world_block;
  world_block.block<3, 3>(0, 0) = Mat3::Identity();
  world_block.block<3, 3>(0, 3) = -skew(p_w);
  world_block.col(6) = p_w;
  const Mat3 lin_jw = T_jw.s * T_jw.rotation();
  const Mat37 d_i = jacobian_wrt_point(p_j, K) * (lin_jw * world_block);
  return {d_i, -d_i};
}

namespace detail {

struct GbaResidualRef {
  int src = -1, obs = -1;
  const Correspondence* corr = nullptr;
  bool forward = true;  // true: P_c observed in frame_k; false: the reverse
  double conf = 1.0;
};

inline void collect_gba_residuals(const FactorGraph& graph, int max_per_edge,
                                  std::vector<GbaResidualRef>& out) {
  for (const auto& e : graph.edges) {
    const int n = static_cast<int>(e.corrs.size());
    const int stride = std::max(1, (n + max_per_edge - 1) / max_per_edge);
    for (int m = 0; m < n; m += stride) {
      const Correspondence& c = e.corrs.items[m];
      const double conf = e.conf.empty() ? 1.0 : e.conf[m];
      if (c.p_c.z() > 0.0 && c.p_k.z() > 0.0) {
        out.push_back({e.i, e.j, &c, true, conf});
        out.push_back({e.j, e.i, &c, false, conf});
      }
    }
  }
}

}  // namespace detail

struct GbaStats {
  int iterations = 0;
  double initial_energy = 0.0;
  double final_energy = 0.0;
  double max_residual_px = 0.0;  // over all edge reprojections at the result
  bool converged = false;
};

/// Joint refinement of all keyframe poses against every edge's
/// correspondences, both directions per correspondence. The anchor stays
/// bit-identical; steps that do not decrease the objective are damped and
/// ultimately rejected.
inline GbaStats global_bundle_adjust(FactorGraph& graph, const CameraIntrinsics& K,
                                     int max_iters, double epsilon,
                                     const BackendConfig& cfg = {}) {
  if (!graph.connected()) throw GraphError("global_bundle_adjust: disconnected graph");
  if (graph.nodes.size() <= 1) return {};

  std::vector<detail::GbaResidualRef> residuals;
  collect_gba_residuals(graph, cfg.gba_max_corrs_per_edge, residuals);

  // State layout: every node except the anchor, in id order.
  std::map<int, int> index;
  int n_free = 0;
  for (const auto& [id, pose] : graph.nodes)
    if (id != graph.anchor) index[id] = n_free++;
  const int dim = 7 * n_free;

  auto eval = [&](const std::map<int, Sim3>& poses) {
    double energy = 0.0;
    for (const auto& ref : residuals) {
      const Correspondence& c = *ref.corr;
      const Vec3& p_src = ref.forward ? c.p_c : c.p_k;
      const Vec2& pix_obs = ref.forward ? c.pixel_k : c.pixel_c;
      const double z_obs = ref.forward ? c.p_k.z() : c.p_c.z();
      Vec3 r;
      try {
        r = reprojection_residual(p_src, poses.at(ref.src), poses.at(ref.obs), K, pix_obs,
                                  std::log(z_obs));
      } catch (const BehindCameraError&) {
        continue;
      }
      const double s = r.norm();
      energy += ref.conf * huber_weight(s, cfg.gba_huber_delta) * s * s;
    }
    return energy;
  };

  GbaStats stats;
  double energy = eval(graph.nodes);
  stats.initial_energy = energy;

  for (int iter = 0; iter < max_iters; ++iter) {
    stats.iterations = iter + 1;
    MatX H = MatX::Zero(dim, dim);
    VecX b = VecX::Zero(dim);
    for (const auto& ref : residuals) {
      const Correspondence& c = *ref.corr;
      const Vec3& p_src = ref.forward ? c.p_c : c.p_k;
      const Vec2& pix_obs = ref.forward ? c.pixel_k : c.pixel_c;
      const double z_obs = ref.forward ? c.p_k.z() : c.p_c.z();
      const Sim3& T_src = graph.nodes.at(ref.src);
      const Sim3& T_obs = graph.nodes.at(ref.obs);
      Vec3 r;
      Mat37 J_src, J_obs;
      try {
        r = reprojection_residual(p_src, T_src, T_obs, K, pix_obs, std::log(z_obs));
        std::tie(J_src, J_obs) = pose_pair_jacobians(p_src, T_src, T_obs, K);
      } catch (const BehindCameraError&) {
        continue;
      }
      const double w = ref.conf * huber_weight(r.norm(), cfg.gba_huber_delta);

      const int bi = ref.src == graph.anchor ? -1 : index.at(ref.src);
      const int bj = ref.obs == graph.anchor ? -1 : index.at(ref.obs);
      if (bi >= 0) {
        H.block<7, 7>(7 * bi, 7 * bi).noalias() += w * J_src.transpose() * J_src;
        b.segment<7>(7 * bi).noalias() += w * J_src.transpose() * r;
      }
      if (bj >= 0) {
        H.block<7, 7>(7 * bj, 7 * bj).noalias() += w * J_obs.transpose() * J_obs;
        b.segment<7>(7 * bj).noalias() += w * J_obs.transpose() * r;
      }
      if (bi >= 0 && bj >= 0) {
        const Eigen::Matrix<double, 7, 7> off = w * J_src.transpose() * J_obs;
        H.block<7, 7>(7 * bi, 7 * bj).noalias() += off;
        H.block<7, 7>(7 * bj, 7 * bi).noalias() += off.transpose();
      }
    }

    bool accepted = false;
    double step_inf = 0.0;
    for (double lambda = 0.0; lambda <= 1e-2;
         lambda = (lambda == 0.0 ? 1e-6 : 2.0 * lambda)) {
      MatX H_damped = H;
      if (lambda > 0.0) H_damped.diagonal().array() += lambda * H.trace() / dim;
      const VecX delta = H_damped.ldlt().solve(-b);
      if (!delta.allFinite()) continue;
      std::map<int, Sim3> candidate = graph.nodes;
      for (const auto& [id, idx] : index)
        candidate[id] = sim3_exp(delta.segment<7>(7 * idx)) * candidate[id];
      const double e_new = eval(candidate);
      if (e_new <= energy + 1e-15) {
        graph.nodes = std::move(candidate);
        energy = e_new;
        step_inf = delta.lpNorm<Eigen::Infinity>();
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    if (step_inf < epsilon) {
      stats.converged = true;
      break;
    }
  }

  stats.final_energy = energy;
  for (const auto& ref : residuals) {
    const Correspondence& c = *ref.corr;
    const Vec3& p_src = ref.forward ? c.p_c : c.p_k;
    const Vec2& pix_obs = ref.forward ? c.pixel_k : c.pixel_c;
    try {
      const Vec3 r = reprojection_residual(p_src, graph.nodes.at(ref.src),
                                           graph.nodes.at(ref.obs), K, pix_obs, 0.0);
      stats.max_residual_px = std::max(stats.max_residual_px, r.head<2>().norm());
    } catch (const BehindCameraError&) {
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Pointmap confidence
// ---------------------------------------------------------------------------

struct ConfidenceNeighbor {
  CorrespondenceSet corrs;  // frame_c = the frame under evaluation
  Sim3 T_jf;                // maps frame points into the neighbor keyframe j
};

/// Per-pixel confidence from the mean reprojection error against connected
/// keyframes: C = 1 when the error is within eps_c, then falls off as
/// 1/(e - eps_c + 1). Pixels observed by no neighbor get c_floor.
inline ScalarMap pointmap_confidence(int height, int width,
                                     const std::vector<ConfidenceNeighbor>& neighbors,
                                     const CameraIntrinsics& K, double eps_c,
                                     double c_floor) {
  ScalarMap err_sum(height, width, 0.0);
  ScalarMap err_count(height, width, 0.0);
  for (const auto& nb : neighbors) {
    for (const auto& c : nb.corrs.items) {
      const int x = static_cast<int>(c.pixel_c.x());
      const int y = static_cast<int>(c.pixel_c.y());
      if (x < 0 || x >= width || y < 0 || y >= height) continue;
      const Vec3 p_j = nb.T_jf.apply(c.p_c);
      if (p_j.z() <= 0.0) continue;
      const auto m = project_log_depth(p_j, K);
      err_sum.at(y, x) += (Vec2(m.u, m.v) - c.pixel_k).norm();
      err_count.at(y, x) += 1.0;
    }
  }
  ScalarMap conf(height, width, c_floor);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (err_count.at(y, x) > 0.0) {
        const double e_mean = err_sum.at(y, x) / err_count.at(y, x);
        conf.at(y, x) = e_mean <= eps_c ? 1.0 : 1.0 / (e_mean - eps_c + 1.0);
      }
  return conf;
}

// ---------------------------------------------------------------------------
// Backend: keyframe graph maintenance
// ---------------------------------------------------------------------------

struct BackendKeyframeResult {
  LoopDecision loop;
  GbaStats gba;
};

class Backend {
 public:
  Backend(const BackendConfig& cfg, const CameraIntrinsics& K) : cfg_(cfg), K_(K) {}

  const FactorGraph& graph() const { return graph_; }
  const std::vector<int>& keyframe_order() const { return kf_order_; }
  bool has_loop_closed() const { return loop_count_ > 0; }
  int loop_count() const { return loop_count_; }

  /// Registers a new keyframe, connects it (sequential edge, plus loop edges
  /// when detected), and refines the graph. `corrs_to_prev` may be empty for
  /// the first keyframe.
  BackendKeyframeResult add_keyframe(int id, const Sim3& T_w_init, const Frame& frame,
                                     const Pointmap& pm,
                                     const CorrespondenceSet& corrs_to_prev,
                                     const MatchingProvider& provider,
                                     bool loop_closure_enabled = true) {
    BackendKeyframeResult out;
    graph_.add_node(id, T_w_init);
    if (!kf_order_.empty()) {
      FactorGraphEdge e;
      e.i = id;
      e.j = kf_order_.back();
      e.corrs = corrs_to_prev;
      e.conf = conf_from_pointmap(pm, corrs_to_prev);
      e.kind = EdgeKind::Sequential;
      graph_.edges.push_back(std::move(e));
    }
    kf_frames_[id] = frame;
    kf_pointmaps_[id] = pm;

    if (loop_closure_enabled && kf_order_.size() > 1) {
      out.loop = update_graph(id, provider);
      if (out.loop.detected) ++loop_count_;
    }
    kf_order_.push_back(id);

    const int iters = out.loop.detected ? cfg_.gba_iters_loop : cfg_.gba_iters_keyframe;
    if (graph_.nodes.size() > 1)
      out.gba = global_bundle_adjust(graph_, K_, iters, cfg_.gba_epsilon, cfg_);
    return out;
  }

  /// Loop detection for a keyframe already inserted as a node: scores the
  /// history, applies the threshold and temporal-gap rules, verifies
  /// geometrically when enough candidates exist, and adds loop edges.
  LoopDecision update_graph(int query_id, const MatchingProvider& provider) {
    LoopDecision decision;
    std::vector<std::pair<double, int>> eligible;  // (score, id)
    for (size_t ord = 0; ord < kf_order_.size(); ++ord) {
      const int cand = kf_order_[ord];
      double score = 0.0;
      try {
        score = provider.retrieval_score(query_id, cand);
      } catch (const std::exception&) {
        continue;
      }
      decision.scores[cand] = score;
      const int gap = static_cast<int>(kf_order_.size()) - static_cast<int>(ord);
      if (score > cfg_.loop_score_threshold && gap > cfg_.loop_min_gap)
        eligible.push_back({score, cand});
    }
    if (eligible.empty()) return decision;
    std::sort(eligible.rbegin(), eligible.rend());

    const int n_c = static_cast<int>(eligible.size());
    const int n_a = std::min(cfg_.loop_max_candidates, n_c);
    std::vector<int> selected;
    if (n_a < cfg_.loop_min_candidates) {
      // Too few candidates for the loop module: connect the top scorers.
      for (int k = 0; k < std::min(3, n_c); ++k) selected.push_back(eligible[k].second);
    } else {
      std::vector<int> candidates;
      for (int k = 0; k < n_a; ++k) candidates.push_back(eligible[k].second);
      selected = geometric_verify(query_id, candidates, provider, &decision.consistency);
      if (selected.empty()) return decision;
    }

    decision.detected = true;
    decision.selected = selected;
    for (int cand : selected) {
      try {
        const MatchResult m = provider.match(kf_frames_.at(query_id), kf_frames_.at(cand));
        FactorGraphEdge e;
        e.i = query_id;
        e.j = cand;
        e.corrs = m.corrs;
        e.conf = conf_from_pointmap(m.pm_a, m.corrs);
        e.kind = EdgeKind::Loop;
        graph_.edges.push_back(std::move(e));
      } catch (const std::exception&) {
        // A failed loop edge is dropped; the sequential edge stands.
      }
    }
    return decision;
  }

  /// Ranks candidates by the fraction of geometrically consistent points in
  /// shared-frame pointmaps, after removing the provider's arbitrary gauge
  /// with a closed-form Sim(3) fit to the query's own camera-frame pointmap.
  std::vector<int> geometric_verify(int query_id, const std::vector<int>& candidates,
                                    const MatchingProvider& provider,
                                    std::map<int, double>* ratios_out = nullptr) {
    if (candidates.empty()) return {};
    std::vector<int> ids{query_id};
    ids.insert(ids.end(), candidates.begin(), candidates.end());
    std::vector<Pointmap> shared;
    try {
      shared = provider.multi_frame_pointmaps(ids);
    } catch (const std::exception&) {
      return {};
    }
    const Pointmap& pm_q = kf_pointmaps_.at(query_id);
    const Pointmap& shared_q = shared[0];

    std::vector<Vec3> src, dst;
    for (int y = 0; y < pm_q.height; ++y)
      for (int x = 0; x < pm_q.width; ++x)
        if (pm_q.is_valid(y, x) && shared_q.is_valid(y, x)) {
          src.push_back(shared_q.point(y, x));
          dst.push_back(pm_q.point(y, x));
        }
    if (src.size() < 3) return {};
    const Sim3 degauge = umeyama_sim3(src, dst);

    const double cos_max = std::cos(cfg_.theta_max_deg * M_PI / 180.0);
    std::vector<std::pair<double, int>> ranked;
    for (size_t k = 0; k < candidates.size(); ++k) {
      const Pointmap& pm_c = shared[k + 1];
      long total = 0, consistent = 0;
      for (int y = 0; y < pm_c.height; ++y)
        for (int x = 0; x < pm_c.width; ++x) {
          if (!pm_c.is_valid(y, x)) continue;
          ++total;
          const Vec3 p = degauge.apply(pm_c.point(y, x));
          if (p.z() <= 0.0) continue;
          const auto m = project_log_depth(p, K_);
          const int px = static_cast<int>(std::lround(m.u));
          const int py = static_cast<int>(std::lround(m.v));
          if (px < 0 || px >= pm_q.width || py < 0 || py >= pm_q.height) continue;
          if (!pm_q.is_valid(py, px)) continue;
          const Vec3& q = pm_q.point(py, px);
          const double cos_angle = p.normalized().dot(q.normalized());
          const double range_err = std::abs(p.norm() - q.norm()) / q.norm();
          if (cos_angle >= cos_max && range_err <= cfg_.rho_max) ++consistent;
        }
      const double ratio = total > 0 ? static_cast<double>(consistent) / total : 0.0;
      if (ratios_out) (*ratios_out)[candidates[k]] = ratio;
      if (ratio > cfg_.consistency_ratio) ranked.push_back({ratio, candidates[k]});
    }
    std::sort(ranked.rbegin(), ranked.rend());
    std::vector<int> out;
    for (size_t k = 0; k < ranked.size() && k < 3; ++k) out.push_back(ranked[k].second);
    return out;
  }

  /// Confidence map for a (keyframe or mapper) frame pointmap against its
  /// best-retrieval previous keyframes.
  ScalarMap confidence_for(const Frame& frame, const Pointmap& pm, const Sim3& T_wf,
                           const MatchingProvider& provider) const {
    std::vector<std::pair<double, int>> scored;
    for (int kf : kf_order_) {
      if (kf == frame.id) continue;
      double s = 0.0;
      try {
        s = provider.retrieval_score(frame.id, kf);
      } catch (const std::exception&) {
        continue;
      }
      scored.push_back({s, kf});
    }
    std::sort(scored.rbegin(), scored.rend());
    std::vector<ConfidenceNeighbor> neighbors;
    for (int k = 0; k < std::min<int>(cfg_.n_conf_neighbors, scored.size()); ++k) {
      const int kf = scored[k].second;
      try {
        ConfidenceNeighbor nb;
        nb.corrs = provider.match(frame, kf_frames_.at(kf)).corrs;
        nb.T_jf = graph_.nodes.at(kf).inverse() * T_wf;
        neighbors.push_back(std::move(nb));
      } catch (const std::exception&) {
      }
    }
    return pointmap_confidence(pm.height, pm.width, neighbors, K_, cfg_.eps_c,
                               cfg_.c_floor);
  }

  /// Immutable pose snapshot for readers on other threads.
  std::map<int, Sim3> pose_snapshot() const { return graph_.nodes; }

  /// Line-oriented dump: NODE id tx ty tz qx qy qz qw s / EDGE i j kind n.
  std::string dump() const {
    std::ostringstream out;
    out.precision(17);
    for (const auto& [id, T] : graph_.nodes) {
      const Quat q = T.q.normalized();
      out << "NODE " << id << ' ' << T.t.x() << ' ' << T.t.y() << ' ' << T.t.z() << ' '
          << q.x() << ' ' << q.y() << ' ' << q.z() << ' ' << q.w() << ' ' << T.s << '\n';
    }
    for (const auto& e : graph_.edges)
      out << "EDGE " << e.i << ' ' << e.j << ' ' << to_string(e.kind) << ' '
          << e.corrs.size() << '\n';
    return out.str();
  }

 private:
  static std::vector<double> conf_from_pointmap(const Pointmap& pm,
                                                const CorrespondenceSet& corrs) {
    std::vector<double> conf;
    conf.reserve(corrs.size());
    for (const auto& c : corrs.items) {
      const int x = static_cast<int>(c.pixel_c.x());
      const int y = static_cast<int>(c.pixel_c.y());
      if (x >= 0 && x < pm.width && y >= 0 && y < pm.height && pm.is_valid(y, x))
        conf.push_back(pm.conf(y, x));
      else
        conf.push_back(1.0);
    }
    return conf;
  }

  BackendConfig cfg_;
  CameraIntrinsics K_;
  FactorGraph graph_;
  std::vector<int> kf_order_;
  std::map<int, Frame> kf_frames_;
  std::map<int, Pointmap> kf_pointmaps_;
  int loop_count_ = 0;
};

}  // namespace artcore
