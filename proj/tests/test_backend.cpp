#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "artcore/backend.hpp"
#include "artcore/providers.hpp"
#include "bench_util.hpp"
#include "test_util.hpp"

using namespace artcore;
using namespace artcore::testutil;

namespace {

/// Retrieval stub with a fixed score for every pair; everything else fails.
class StubProvider : public MatchingProvider {
 public:
  explicit StubProvider(double score) : score_(score) {}
  MatchResult match(const Frame&, const Frame&) const override {
    throw ProviderError("stub");
  }
  double retrieval_score(int, int) const override { return score_; }
  std::vector<Pointmap> multi_frame_pointmaps(const std::vector<int>&) const override {
    throw ProviderError("stub");
  }
  double focal_estimate(const Frame&) const override { return 1.0; }

 private:
  double score_;
};

SyntheticSceneConfig circle_cfg(int n, std::uint64_t seed) {
  SyntheticSceneConfig cfg;
  cfg.frame_count = n;
  cfg.landmark_count = 200;
  cfg.width = cfg.height = 64;
  cfg.focal = 64.0;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("pose_pair_jacobians closed form at identity, optical axis") {
  const Sim3 I = Sim3::identity();
  const CameraIntrinsics K = CameraIntrinsics::with_focal(100.0, 64, 64);
  const Vec3 p(0.0, 0.0, 2.0);
  const auto [Ji, Jj] = pose_pair_jacobians(p, I, I, K);

  // J_pi at (0,0,2): diag(50, 50, 0.5); world block = [I | -skew(p) | p].
  Mat37 want;
  want.setZero();
  want(0, 0) = 50.0;
  want(1, 1) = 50.0;
  want(2, 2) = 0.5;
  want.block<3, 3>(0, 3) = Mat3::Zero();
  want(0, 4) = 50.0 * 2.0;   // u depends on rotation about y through X
  want(1, 3) = -50.0 * 2.0;  // v on rotation about x
  want(2, 6) = 0.5 * 2.0;    // log depth on scale
  CHECK((Ji - want).norm() < 1e-12);
  CHECK((Jj + want).norm() < 1e-12);
}

TEST_CASE("pose_pair_jacobians match finite differences") {
  std::mt19937_64 rng(3);
  int checked = 0;
  for (int trial = 0; trial < 1500 && checked < 1000; ++trial) {
    const CameraIntrinsics K = CameraIntrinsics::with_focal(80.0, 64, 64);
    const Sim3 T_wi = sim3_exp(random_tangent(rng, 0.6));
    const Sim3 T_wj = sim3_exp(random_tangent(rng, 0.6));
    const Vec3 p_i = random_vec3(rng, -0.5, 0.5) + Vec3(0, 0, 3.0);
    const Vec3 p_j = T_wj.inverse().apply(T_wi.apply(p_i));
    if (p_j.z() < 0.3) continue;
    ++checked;

    const auto [Ji, Jj] = pose_pair_jacobians(p_i, T_wi, T_wj, K);
    const Vec2 pix_obs(10.0, 12.0);
    auto residual = [&](const Sim3& A, const Sim3& B) {
      return reprojection_residual(p_i, A, B, K, pix_obs, 0.5);
    };
    for (int k = 0; k < 7; ++k) {
      Vec7 e = Vec7::Zero();
      const double h = 1e-6;
      e(k) = h;
      const Vec3 fd_i =
          (residual(sim3_exp(e) * T_wi, T_wj) - residual(sim3_exp(-e) * T_wi, T_wj)) /
          (2 * h);
      const Vec3 fd_j =
          (residual(T_wi, sim3_exp(e) * T_wj) - residual(T_wi, sim3_exp(-e) * T_wj)) /
          (2 * h);
      for (int row = 0; row < 3; ++row) {
        CHECK(rel_err(Ji(row, k), fd_i(row), 1e-4) < 1e-5);
        CHECK(rel_err(Jj(row, k), fd_j(row), 1e-4) < 1e-5);
      }
    }
  }
  CHECK(checked >= 1000);
}

TEST_CASE("shared gauge motion is in the Jacobian nullspace") {
  std::mt19937_64 rng(11);
  const CameraIntrinsics K = CameraIntrinsics::with_focal(80.0, 64, 64);
  const Sim3 I = Sim3::identity();
  for (int trial = 0; trial < 100; ++trial) {
    const Vec3 p_i = random_vec3(rng, -0.5, 0.5) + Vec3(0, 0, 3.0);
    const auto [Ji, Jj] = pose_pair_jacobians(p_i, I, I, K);
    const Vec7 g = random_tangent(rng, 1.0);
    // The two contributions are equal-and-opposite, so they cancel exactly.
    CHECK((Ji * g + Jj * g).norm() < 1e-12);

    // And the residual is invariant under the shared motion, not just to
    // first order.
    const Sim3 motion = sim3_exp(0.05 * g);
    const Vec3 r0 = reprojection_residual(p_i, I, I, K, Vec2(5, 5), 0.2);
    const Vec3 r1 =
        reprojection_residual(p_i, motion * I, motion * I, K, Vec2(5, 5), 0.2);
    CHECK((r1 - r0).norm() < 1e-9);
  }
}

TEST_CASE("two-node GBA recovers a perturbed pose") {
  SyntheticScene scene(circle_cfg(12, 7));
  const CameraIntrinsics& K = scene.intrinsics();
  const auto m = scene.match(scene.frames()[1], scene.frames()[0]);

  FactorGraph graph;
  graph.add_node(0, scene.gt_pose(0));
  const Sim3 true_pose_1 = scene.gt_pose(1);
  const Sim3 perturbed = sim3_exp((Vec7() << 0.05, -0.04, 0.06, 0.03, -0.02, 0.04, 0.03)
                                      .finished()) *
                         true_pose_1;
  graph.add_node(1, perturbed);
  FactorGraphEdge e;
  e.i = 1;
  e.j = 0;
  e.corrs = m.corrs;
  e.kind = EdgeKind::Sequential;
  graph.edges.push_back(e);

  const Sim3 anchor_before = graph.nodes.at(0);
  const auto stats = global_bundle_adjust(graph, K, 50, 1e-10);
  CHECK(stats.max_residual_px < 1e-8);
  CHECK(stats.final_energy <= stats.initial_energy);

  // Anchor bit-identical.
  CHECK(graph.nodes.at(0).t == anchor_before.t);
  CHECK(graph.nodes.at(0).s == anchor_before.s);
  CHECK(graph.nodes.at(0).q.coeffs() == anchor_before.q.coeffs());

  const Sim3 rel = graph.nodes.at(0).inverse() * graph.nodes.at(1);
  const Sim3 rel_true = scene.gt_pose(0).inverse() * true_pose_1;
  CHECK(sim3_error(rel, rel_true) < 1e-8);
}

TEST_CASE("GBA at zero residual is a fixed point") {
  SyntheticScene scene(circle_cfg(12, 9));
  FactorGraph graph;
  for (int i = 0; i < 3; ++i) graph.add_node(i, scene.gt_pose(i));
  for (int i = 1; i < 3; ++i) {
    FactorGraphEdge e;
    e.i = i;
    e.j = i - 1;
    e.corrs = scene.match(scene.frames()[i], scene.frames()[i - 1]).corrs;
    e.kind = EdgeKind::Sequential;
    graph.edges.push_back(e);
  }
  const std::map<int, Sim3> before = graph.nodes;
  global_bundle_adjust(graph, scene.intrinsics(), 20, 1e-10);
  for (const auto& [id, pose] : graph.nodes) {
    CHECK((pose.t - before.at(id).t).norm() < 1e-12);
    CHECK(std::abs(pose.s - before.at(id).s) < 1e-12);
  }
}

TEST_CASE("GBA rejects a disconnected graph") {
  FactorGraph graph;
  graph.add_node(0, Sim3::identity());
  graph.add_node(1, Sim3::identity());
  const CameraIntrinsics K = CameraIntrinsics::with_focal(64, 64, 64);
  CHECK_THROWS_AS(global_bundle_adjust(graph, K, 5, 1e-8), GraphError);
}

TEST_CASE("backend adds sequential edges and ignores weak retrieval") {
  SyntheticScene scene(circle_cfg(8, 13));
  const CameraIntrinsics& K = scene.intrinsics();

  // History of one keyframe: only the sequential edge, no loop.
  Backend backend({}, K);
  backend.add_keyframe(0, scene.gt_pose(0), scene.frames()[0], scene.pointmap(0), {},
                       scene);
  const auto r1 = backend.add_keyframe(
      1, scene.gt_pose(1), scene.frames()[1], scene.pointmap(1),
      scene.match(scene.frames()[1], scene.frames()[0]).corrs, scene);
  CHECK_FALSE(r1.loop.detected);
  CHECK(backend.graph().edges.size() == 1);
  CHECK(backend.graph().edges[0].kind == EdgeKind::Sequential);

  // Scores at the threshold never fire: the rule is strictly greater.
  StubProvider at_threshold(0.005);
  Backend backend2({}, K);
  for (int i = 0; i < 15; ++i) {
    CorrespondenceSet corrs;
    if (i > 0) corrs = scene.match(scene.frames()[1], scene.frames()[0]).corrs;
    const auto r = backend2.add_keyframe(100 + i, Sim3::identity(), scene.frames()[0],
                                         scene.pointmap(0), corrs, at_threshold, true);
    CHECK_FALSE(r.loop.detected);
  }
}

TEST_CASE("geometric verification accepts revisits and rejects disjoint views") {
  SyntheticScene scene(circle_cfg(60, 17));
  const CameraIntrinsics& K = scene.intrinsics();
  Backend backend({}, K);
  for (int i = 0; i < 60; ++i) {
    CorrespondenceSet corrs;
    if (i > 0) corrs = scene.match(scene.frames()[i], scene.frames()[i - 1]).corrs;
    backend.add_keyframe(i, scene.gt_pose(i), scene.frames()[i], scene.pointmap(i), corrs,
                         scene, false);
  }

  std::map<int, double> ratios;
  //

  // Self-verification: the query against itself is perfectly consistent.
  auto self = backend.geometric_verify(30, {30}, scene, &ratios);
  REQUIRE(self.size() == 1);
  CHECK(ratios.at(30) == 1.0);

  // A true revisit passes; the opposite side of the circle has nothing.
  ratios.clear();
  auto verified = backend.geometric_verify(59, {1, 30}, scene, &ratios);
  REQUIRE(verified.size() == 1);
  CHECK(verified[0] == 1);
  CHECK(ratios.at(1) > 0.15);
  CHECK(ratios.at(30) < 0.05);
}

TEST_CASE("loop detection on a revisiting circle selects old keyframes") {
  SyntheticScene scene(circle_cfg(60, 19));
  Backend backend({}, scene.intrinsics());
  bool any_loop = false;
  for (int i = 0; i < 60; ++i) {
    CorrespondenceSet corrs;
    if (i > 0) corrs = scene.match(scene.frames()[i], scene.frames()[i - 1]).corrs;
    const auto r = backend.add_keyframe(i, scene.gt_pose(i), scene.frames()[i],
                                        scene.pointmap(i), corrs, scene, true);
    if (r.loop.detected) {
      any_loop = true;
      bool any_old = false;
      for (int sel : r.loop.selected) any_old |= (i - sel) >= 10;
      CHECK(any_old);
    }
  }
  CHECK(any_loop);

  // Temporal-gap invariant: loop edges never connect close keyframes.
  for (const auto& e : backend.graph().edges)
    if (e.kind == EdgeKind::Loop) CHECK(std::abs(e.i - e.j) > 10);
}

TEST_CASE("confidence formula boundary and falloff") {
  const CameraIntrinsics K = CameraIntrinsics::with_focal(64.0, 64, 64);
  auto one_pixel_error = [&](double err) {
    // A single observed pixel displaced by exactly `err` from the projection.
    const Vec3 p(0.2, -0.1, 2.0);
    const auto m = project_log_depth(p, K);
    ConfidenceNeighbor nb;
    nb.T_jf = Sim3::identity();
    Correspondence c;
    c.pixel_c = Vec2(5, 7);
    c.p_c = p;
    c.pixel_k = Vec2(m.u + err, m.v);
    nb.corrs.items.push_back(c);
    const ScalarMap conf = pointmap_confidence(64, 64, {nb}, K, 3.0, 0.1);
    return conf.at(7, 5);
  };

  CHECK(one_pixel_error(3.0) == 1.0);
  CHECK(one_pixel_error(5.0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(one_pixel_error(0.0) == 1.0);

  // Non-increasing in the error, always in (0, 1].
  double prev = 1.0;
  for (double e = 0.0; e < 40.0; e += 0.5) {
    const double c = one_pixel_error(e);
    CHECK(c <= prev + 1e-15);
    CHECK(c > 0.0);
    CHECK(c <= 1.0);
    prev = c;
  }

  // Unobserved pixels sit at the floor.
  const ScalarMap empty_conf = pointmap_confidence(8, 8, {}, K, 3.0, 0.1);
  for (double v : empty_conf.data) CHECK(v == 0.1);
}

TEST_CASE("noiseless confidence is one wherever observed") {
  SyntheticScene scene(circle_cfg(12, 23));
  Backend backend({}, scene.intrinsics());
  for (int i = 0; i < 4; ++i) {
    CorrespondenceSet corrs;
    if (i > 0) corrs = scene.match(scene.frames()[i], scene.frames()[i - 1]).corrs;
    backend.add_keyframe(i, scene.gt_pose(i), scene.frames()[i], scene.pointmap(i), corrs,
                         scene, false);
  }
  const ScalarMap conf = backend.confidence_for(scene.frames()[4], scene.pointmap(4),
                                                scene.gt_pose(4), scene);
  int observed = 0;
  for (double v : conf.data) {
    if (v != 0.1) {
      CHECK(v == 1.0);
      ++observed;
    }
  }
  CHECK(observed > 500);
}

TEST_CASE("drift bench: loop closure beats the open chain") {
  const auto r = benchutil::run_drift_bench(1);
  CHECK(r.loop_edges >= 1);
  CHECK(r.min_loop_gap > 10);
  CHECK(r.ate_on < r.ate_off);
  CHECK(r.ate_off / r.ate_on >= 5.0);
  // Without loops GBA cannot improve on self-consistent drifted measurements.
  CHECK(r.ate_off <= r.ate_pre * 1.5);
}

TEST_CASE("graph dump lists nodes and edges") {
  SyntheticScene scene(circle_cfg(8, 29));
  Backend backend({}, scene.intrinsics());
  backend.add_keyframe(0, scene.gt_pose(0), scene.frames()[0], scene.pointmap(0), {},
                       scene);
  backend.add_keyframe(1, scene.gt_pose(1), scene.frames()[1], scene.pointmap(1),
                       scene.match(scene.frames()[1], scene.frames()[0]).corrs, scene);
  const std::string dump = backend.dump();
  CHECK(dump.find("NODE 0 ") != std::string::npos);
  CHECK(dump.find("NODE 1 ") != std::string::npos);
  CHECK(dump.find("EDGE 1 0 sequential ") != std::string::npos);
}
