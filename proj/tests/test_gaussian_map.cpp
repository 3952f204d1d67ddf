#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "artcore/gaussian_map.hpp"
#include "test_util.hpp"

#include <filesystem>
#include <random>

using namespace artcore;
using namespace artcore::testutil;

namespace {

/// Independent brute-force LoG response at one pixel: direct double-loop
/// convolution with the zero-mean discretized kernel.
double brute_force_log(const Image& im, int px, int py, double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  const int n = 2 * r + 1;
  std::vector<double> k(static_cast<size_t>(n) * n);
  double sum = 0.0;
  for (int y = -r; y <= r; ++y)
    for (int x = -r; x <= r; ++x) {
      const double q = (x * x + y * y) / (2.0 * sigma * sigma);
      const double v = (q - 1.0) / (M_PI * sigma * sigma) * std::exp(-q);
      k[(y + r) * n + (x + r)] = v;
      sum += v;
    }
  for (double& v : k) v -= sum / (n * n);

  double acc[3] = {0, 0, 0};
  auto reflect = [](int i, int size) {
    while (i < 0 || i >= size) {
      if (i < 0) i = -i - 1;
      if (i >= size) i = 2 * size - i - 1;
    }
    return i;
  };
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const int yy = reflect(py + dy, im.height), xx = reflect(px + dx, im.width);
      for (int c = 0; c < 3; ++c)
        acc[c] += k[(dy + r) * n + (dx + r)] * im.at(yy, xx, c);
    }
  return std::sqrt(acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]);
}

LevelInputs make_inputs(int h, int w, double focal) {
  LevelInputs in;
  in.image = Image::constant(h, w, 0.3, 0.4, 0.5);
  in.pointmap = Pointmap(h, w);
  in.confidence = ScalarMap(h, w, 1.0);
  in.K = CameraIntrinsics::with_focal(focal, w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      in.pointmap.set(y, x, Vec3((x - in.K.cx) / focal * 2.0, (y - in.K.cy) / focal * 2.0, 2.0),
                      1.f);
  return in;
}

}  // namespace

TEST_CASE("identical images give zero insertion probability") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Image im(24, 24);
  for (double& v : im.data) v = uni(rng);
  const InsertionMask mask = insertion_probability(im, im, 1.5, 0.1);
  for (double p : mask.prob.data) CHECK(p == 0.0);
  for (auto s : mask.selected) CHECK(s == 0);
}

TEST_CASE("step edge against a flat render activates the edge band") {
  Image target = Image::constant(32, 32, 0.5, 0.5, 0.5);
  for (int y = 0; y < 32; ++y)
    for (int x = 16; x < 32; ++x)
      for (int c = 0; c < 3; ++c) target.at(y, x, c) = 1.0;
  const Image rendered = Image::constant(32, 32, 0.5, 0.5, 0.5);

  const InsertionMask mask = insertion_probability(target, rendered, 1.5, 0.1);
  double band_max = 0.0;
  for (int y = 8; y < 24; ++y)
    for (int x = 14; x < 18; ++x) band_max = std::max(band_max, mask.prob.at(y, x));
  CHECK(band_max > 0.1);

  // Far from the edge the response vanishes.
  CHECK(mask.prob.at(16, 4) == doctest::Approx(0.0).epsilon(1e-9));

  // Against the brute-force convolution oracle (rendered response is 0).
  for (int x = 10; x < 22; ++x) {
    const double want = std::max(std::min(brute_force_log(target, x, 16, 1.5), 1.0), 0.0);
    CHECK(mask.prob.at(16, x) == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("saturated responses cancel through the clamp") {
  // Dark scale-matched blobs on white saturate the response at their centers
  // in both images; different blob darkness must not matter there.
  auto blob_image = [](double interior) {
    Image im = Image::constant(24, 24, 1.0, 1.0, 1.0);
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 24; ++x)
        if (std::hypot(x - 12.0, y - 12.0) <= 2.2)
          for (int c = 0; c < 3; ++c) im.at(y, x, c) = interior;
    return im;
  };
  const Image a = blob_image(0.0);
  const Image b = blob_image(0.12);
  REQUIRE(log_response(a, 1.5).at(12, 12) > 1.0);
  REQUIRE(log_response(b, 1.5).at(12, 12) > 1.0);
  const InsertionMask mask = insertion_probability(a, b, 1.5, 0.1);
  CHECK(mask.prob.at(12, 12) == 0.0);
}

TEST_CASE("insertion probability size mismatch") {
  CHECK_THROWS_AS(
      insertion_probability(Image(8, 8), Image(8, 9), 1.5, 0.1), std::invalid_argument);
}

TEST_CASE("base_scale formula") {
  CHECK(base_scale(2.0, 1.0, 100.0) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(base_scale(1.0, 0.25, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  // Response floor: s' = 1 / (2 sqrt(1e-4)) = 50.
  CHECK(base_scale(1.0, 0.0, 1.0) == doctest::Approx(50.0).epsilon(1e-12));
  // Clamp: responses above one behave like one.
  CHECK(base_scale(3.0, 7.5, 10.0) == base_scale(3.0, 1.0, 10.0));
}

TEST_CASE("init_primitive applies the level rules") {
  GaussianMap map;
  LevelInputs in = make_inputs(16, 16, 16.0);
  Sim3 T_wc = Sim3::identity();
  std::vector<Image> rendered;
  for (int l = 0, s = 16; l < 4; ++l, s = std::max(1, s / 2))
    rendered.push_back(Image::constant(s, s, 0, 0, 0));
  map.insert_from_frame(0, in, rendered, T_wc);  // calibrates the grid

  GaussianPrimitive p0 = map.init_primitive(8, 8, in, 0.5, 0, T_wc);
  CHECK(p0.alpha == doctest::Approx(0.2).epsilon(1e-12));
  const double d = in.pointmap.point(8, 8).norm();
  CHECK(p0.d_max == doctest::Approx(d).epsilon(1e-12));
  CHECK(p0.base_scale ==
        doctest::Approx(base_scale(d, 0.5, in.K.fx)).epsilon(1e-12));

  GaussianPrimitive p2 = map.init_primitive(8, 8, in, 0.5, 2, T_wc);
  CHECK(p2.d_max == doctest::Approx(d * 16.0).epsilon(1e-12));  // 2^(2*2)
  CHECK(p2.base_scale ==
        doctest::Approx(base_scale(d, 0.5, in.K.fx) * std::pow(1.4, 4)).epsilon(1e-12));

  // Fresh voxel, zero features, identity-initialized refiners.
  CHECK(p0.feature.isZero());
  CHECK((p0.scales - p0.base_scale * Vec3::Ones()).norm() < 1e-15);
  CHECK(p0.rotation.angularDistance(Quat::Identity()) < 1e-15);

  CHECK_THROWS_AS(map.init_primitive(0, 0, LevelInputs{in.image, Pointmap(16, 16),
                                                        in.confidence, in.K},
                                     0.5, 0, T_wc),
                  std::invalid_argument);
}

TEST_CASE("pyramid halves resolution per level and flat frames insert nothing") {
  LevelInputs in = make_inputs(64, 64, 64.0);
  LevelInputs l1 = downsample_level(in);
  LevelInputs l2 = downsample_level(l1);
  LevelInputs l3 = downsample_level(l2);
  CHECK(l1.image.width == 32);
  CHECK(l2.image.width == 16);
  CHECK(l3.image.width == 8);
  CHECK(l3.pointmap.height == 8);
  CHECK(l1.K.fx == doctest::Approx(32.0));

  // Constant color against a constant render: no structure, no primitives.
  GaussianMap map;
  std::vector<Image> rendered;
  for (int l = 0, s = 64; l < 4; ++l, s /= 2)
    rendered.push_back(Image::constant(s, s, 0.3, 0.4, 0.5));
  const auto masks = map.insert_from_frame(0, in, rendered, Sim3::identity());
  CHECK(map.primitives().empty());
  REQUIRE(masks.size() == 4);
  CHECK(masks[0].prob.width == 64);
  CHECK(masks[3].prob.width == 8);
}

TEST_CASE("downsampled pointmap averages only valid members") {
  LevelInputs in = make_inputs(4, 4, 4.0);
  // Invalidate three of the four pixels of the top-left block.
  in.pointmap.valid[in.pointmap.index(0, 1)] = 0;
  in.pointmap.valid[in.pointmap.index(1, 0)] = 0;
  in.pointmap.valid[in.pointmap.index(1, 1)] = 0;
  // A fully invalid block.
  in.pointmap.valid[in.pointmap.index(0, 2)] = 0;
  in.pointmap.valid[in.pointmap.index(0, 3)] = 0;
  in.pointmap.valid[in.pointmap.index(1, 2)] = 0;
  in.pointmap.valid[in.pointmap.index(1, 3)] = 0;

  const LevelInputs down = downsample_level(in);
  CHECK(down.pointmap.is_valid(0, 0));
  CHECK((down.pointmap.point(0, 0) - in.pointmap.point(0, 0)).norm() < 1e-15);
  CHECK_FALSE(down.pointmap.is_valid(0, 1));
}

TEST_CASE("lod_select branches and fade continuity") {
  std::vector<GaussianPrimitive> prims(1);
  prims[0].mu = Vec3(0, 0, 4.0);
  prims[0].d_max = 4.0;
  prims[0].alpha = 0.5;

  auto weight_at = [&](double dist, bool literal = false) {
    prims[0].mu = Vec3(0, 0, dist);
    const LodSelection sel = lod_select(prims, Vec3::Zero(), literal);
    return sel.indices.empty() ? -1.0 : sel.weights[0];
  };

  CHECK(weight_at(0.5 * 4.0) == 1.0);
  CHECK(weight_at(1.0 * 4.0) == 1.0);
  CHECK(weight_at(1.5 * 4.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(weight_at(2.0 * 4.0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(weight_at(2.5 * 4.0) == -1.0);  // excluded

  // Continuity at d_max from above and zero at the exclusion boundary.
  CHECK(weight_at(4.0 * (1.0 + 1e-9)) == doctest::Approx(1.0).epsilon(1e-6));

  // The literal formula grows with distance instead.
  CHECK(weight_at(1.25 * 4.0, true) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(weight_at(1.75 * 4.0, true) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("refiners are identity at initialization and normalize rotations") {
  ScaleRefiner sr(16, 11);
  RotationRefiner rr(16, 13);
  const VecX zero = VecX::Zero(32);
  CHECK((sr.refine(zero) - Vec3::Ones()).norm() < 1e-15);
  CHECK(rr.refine(zero).angularDistance(Quat::Identity()) < 1e-15);

  std::mt19937_64 rng(17);
  std::normal_distribution<double> gauss(0.0, 1.0);
  // Give the output layers non-trivial weights.
  sr.mlp.w2 = MatX::NullaryExpr(3, 32, [&]() { return 0.1 * gauss(rng); });
  rr.mlp.w2 = MatX::NullaryExpr(4, 32, [&]() { return 0.1 * gauss(rng); });
  for (int trial = 0; trial < 50; ++trial) {
    VecX f(32);
    for (int i = 0; i < 32; ++i) f(i) = gauss(rng);
    CHECK(std::abs(rr.refine(f).norm() - 1.0) < 1e-9);
    CHECK((sr.refine(f).array() > 0.0).all());
  }
  CHECK_THROWS_AS(sr.refine(VecX::Zero(7)), std::invalid_argument);
}

TEST_CASE("refiner parameter gradients match finite differences") {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> gauss(0.0, 1.0);
  ScaleRefiner sr(8, 29);
  RotationRefiner rr(8, 31);
  sr.mlp.w2 = MatX::NullaryExpr(3, 32, [&]() { return 0.2 * gauss(rng); });
  sr.mlp.b2 = VecX::NullaryExpr(3, [&]() { return 0.1 * gauss(rng); });
  rr.mlp.w2 = MatX::NullaryExpr(4, 32, [&]() { return 0.2 * gauss(rng); });
  rr.mlp.b2 = VecX::NullaryExpr(4, [&]() { return 0.1 * gauss(rng); });

  VecX f(16);
  for (int i = 0; i < 16; ++i) f(i) = gauss(rng);
  const Vec3 d_mult(0.7, -0.3, 0.4);
  const Vec4 d_quat(0.2, -0.5, 0.3, 0.6);

  auto loss_scale = [&]() { return d_mult.dot(sr.refine(f)); };
  auto loss_rot = [&]() {
    const Quat q = rr.refine(f);
    return d_quat.dot(Vec4(q.w(), q.x(), q.y(), q.z()));
  };

  const auto gs = sr.backward(f, d_mult);
  const auto gr = rr.backward(f, d_quat);

  const double h = 1e-6;
  int checked = 0;
  auto check_param = [&](double& param, double analytic, auto&& loss) {
    const double save = param;
    param = save + h;
    const double up = loss();
    param = save - h;
    const double dn = loss();
    param = save;
    CHECK(rel_err(analytic, (up - dn) / (2 * h), 1e-7) < 1e-4);
    ++checked;
  };

  for (int i = 0; i < 8; ++i) {
    check_param(sr.mlp.w1(i % 32, i % 16), gs.dw1(i % 32, i % 16), loss_scale);
    check_param(sr.mlp.w2(i % 3, i * 3 % 32), gs.dw2(i % 3, i * 3 % 32), loss_scale);
    check_param(sr.mlp.b1(i * 4 % 32), gs.db1(i * 4 % 32), loss_scale);
    check_param(sr.mlp.b2(i % 3), gs.db2(i % 3), loss_scale);
    check_param(rr.mlp.w1(i % 32, i % 16), gr.dw1(i % 32, i % 16), loss_rot);
    check_param(rr.mlp.w2(i % 4, i * 3 % 32), gr.dw2(i % 4, i * 3 % 32), loss_rot);
    check_param(rr.mlp.b1(i * 4 % 32), gr.db1(i * 4 % 32), loss_rot);
    check_param(rr.mlp.b2(i % 4), gr.db2(i % 4), loss_rot);
  }
  CHECK(checked == 64);
}

TEST_CASE("voxel keys are deterministic floors") {
  const double eps = 0.25;
  std::mt19937_64 rng(37);
  for (int i = 0; i < 200; ++i) {
    Vec3 mu = random_vec3(rng, -10.0, 10.0);
    // Snap to the cell center so the small shift below stays inside.
    for (int k = 0; k < 3; ++k) mu(k) = (std::floor(mu(k) / eps) + 0.5) * eps;
    const std::uint64_t key = VoxelGrid::key_of(mu, eps);
    const auto ix = static_cast<std::int64_t>(std::floor(mu.x() / eps));
    const auto iy = static_cast<std::int64_t>(std::floor(mu.y() / eps));
    const auto iz = static_cast<std::int64_t>(std::floor(mu.z() / eps));
    const std::uint64_t want =
        (static_cast<std::uint64_t>(ix + (1 << 20)) & 0x1fffff) |
        ((static_cast<std::uint64_t>(iy + (1 << 20)) & 0x1fffff) << 21) |
        ((static_cast<std::uint64_t>(iz + (1 << 20)) & 0x1fffff) << 42);
    CHECK(key == want);
    // Same cell, same key; the grid creates the voxel exactly once.
    VoxelGrid grid;
    grid.cell_size = eps;
    CHECK(grid.touch(mu, 4) == key);
    CHECK(grid.touch(mu + Vec3(0.9, 0.9, 0.9) * (eps * 0.049), 4) == key);
    CHECK(grid.features.size() == 1);
    CHECK(grid.features.at(key).isZero());
  }
}

TEST_CASE("insertion honors the threshold and the distance invariants") {
  // A textured target against an empty render forces insertions.
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  LevelInputs in = make_inputs(32, 32, 32.0);
  for (double& v : in.image.data) v = uni(rng);
  in.confidence = ScalarMap(32, 32, 0.8);

  GaussianMap map;
  std::vector<Image> rendered;
  for (int l = 0, s = 32; l < 4; ++l, s /= 2) rendered.push_back(Image(s, s));
  map.insert_from_frame(7, in, rendered, Sim3::identity());
  REQUIRE(!map.primitives().empty());

  for (const auto& rec : map.creation_log()) {
    CHECK(rec.p_a > map.config().tau_a);
    CHECK(rec.frame_id == 7);
  }
  for (const auto& p : map.primitives()) {
    const double d = (p.mu - Vec3::Zero()).norm();
    CHECK(p.d_max >= d * (1.0 - 1e-12));
    if (p.level == 0) CHECK(p.d_max == doctest::Approx(d).epsilon(1e-12));
    CHECK(p.alpha == doctest::Approx(0.2 * 0.8).epsilon(1e-12));
    CHECK(p.alpha > 0.0);
    CHECK(p.alpha <= 0.2);
    CHECK(p.voxel_id == VoxelGrid::key_of(p.mu, map.grid().cell_size));
  }
}

TEST_CASE("map export round-trips through import") {
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  LevelInputs in = make_inputs(32, 32, 32.0);
  for (double& v : in.image.data) v = uni(rng);
  GaussianMap map;
  std::vector<Image> rendered;
  for (int l = 0, s = 32; l < 4; ++l, s /= 2) rendered.push_back(Image(s, s));
  map.insert_from_frame(0, in, rendered, Sim3::identity());
  REQUIRE(map.primitives().size() > 10);

  const std::string path = "/tmp/artcore_test_map.adgs";
  map.export_map(path);
  const GaussianMap back = GaussianMap::import_map(path);
  REQUIRE(back.primitives().size() == map.primitives().size());
  CHECK(back.grid().cell_size == doctest::Approx(map.grid().cell_size).epsilon(1e-12));
  CHECK(back.grid().features.size() == map.grid().features.size());
  for (size_t i = 0; i < map.primitives().size(); ++i) {
    const auto& a = map.primitives()[i];
    const auto& b = back.primitives()[i];
    CHECK((a.mu.cast<float>() - b.mu.cast<float>()).norm() == 0.f);
    CHECK(static_cast<float>(a.alpha) == static_cast<float>(b.alpha));
    CHECK(a.level == b.level);
    CHECK(a.voxel_id == b.voxel_id);
    CHECK(static_cast<float>(a.d_max) == static_cast<float>(b.d_max));
  }
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".feat");
}
