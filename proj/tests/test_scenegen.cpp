#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "helpers.hpp"
#include "vita/scenegen.hpp"

using namespace vita;

namespace {

/// Even-odd ray casting against the transformed polygon.
bool ray_cast_inside(const std::vector<Eigen::Vector2d>& poly, double px, double py) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a.y() > py) != (b.y() > py) && px < (b.x() - a.x()) * (py - a.y()) / (b.y() - a.y()) + a.x()) in = !in;
  }
  return in;
}

ShapeSpec circle(double r) {
  ShapeSpec s;
  s.kind = ShapeKind::circle;
  s.radius = r;
  return s;
}

ShapeSpec rectangle(double w, double h) {
  ShapeSpec s;
  s.kind = ShapeKind::rectangle;
  s.width = w;
  s.height = h;
  return s;
}

}  // namespace

TEST_CASE("radius-1 circle") {
  auto m = rasterize_shape(circle(1.0), {16.0, 16.0, 0.0}, 32);
  CHECK(area(m) == 4);
  CHECK((m == m.rowwise().reverse()).all());
  CHECK((m == m.colwise().reverse()).all());
  CHECK((m == Mask(m.transpose())).all());
}

TEST_CASE("axis-aligned rectangle area") {
  for (auto [w, h] : {std::pair{10.0, 6.0}, {7.0, 13.0}, {1.0, 1.0}, {20.0, 3.0}}) {
    auto m = rasterize_shape(rectangle(w, h), {32.0, 30.0, 0.0}, 64);
    CHECK(area(m) == static_cast<Index>(w * h));
    auto b = bounding_box(m);
    CHECK(b.w == static_cast<Index>(w));
    CHECK(b.h == static_cast<Index>(h));
  }
}

TEST_CASE("convex polygon matches a ray-casting oracle") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    ShapeSpec s;
    s.kind = ShapeKind::polygon;
    const int n = 3 + trial % 5;
    const double r = 6 + 8 * u(rng);
    for (int k = 0; k < n; ++k) {
      // Points on a circle in angular order form a convex polygon.
      const double t = 2 * std::numbers::pi * (k + 0.6 * u(rng)) / n;
      s.vertices.emplace_back(r * std::cos(t), r * std::sin(t));
    }
    if (trial % 2 == 1) std::reverse(s.vertices.begin(), s.vertices.end());
    Placement at{24.3 + 10 * u(rng), 25.1 + 10 * u(rng), 6.0 * u(rng)};
    auto m = rasterize_shape(s, at, 64);
    std::vector<Eigen::Vector2d> poly;
    const double c = std::cos(at.angle), sn = std::sin(at.angle);
    for (const auto& v : s.vertices) poly.emplace_back(at.cx + c * v.x() - sn * v.y(), at.cy + sn * v.x() + c * v.y());
    Index mismatches = 0;
    for (Index y = 0; y < 64; ++y) {
      for (Index x = 0; x < 64; ++x) mismatches += (m(y, x) != 0) != ray_cast_inside(poly, x + 0.5, y + 0.5);
    }
    CHECK(mismatches == 0);
    CHECK(area(m) > 0);
  }
}

TEST_CASE("capsule covers its spine") {
  ShapeSpec s;
  s.kind = ShapeKind::capsule;
  s.radius = 2.0;
  s.length = 10.0;
  auto m = rasterize_shape(s, {32.0, 32.0, 0.0}, 64);
  for (Index x = 27; x < 37; ++x) CHECK(m(31, x) == 1);
  CHECK(m(31, 22) == 0);
  CHECK(m(36, 32) == 0);
}

TEST_CASE("rasterize contracts") {
  CHECK_THROWS_AS(rasterize_shape(circle(0.0), {8, 8, 0}, 16), GenerationError);
  CHECK_THROWS_AS(rasterize_shape(rectangle(3.0, 0.0), {8, 8, 0}, 16), GenerationError);
  ShapeSpec line;
  line.kind = ShapeKind::polygon;
  line.vertices = {{0, 0}, {1, 1}, {2, 2}};
  CHECK_THROWS_AS(rasterize_shape(line, {8, 8, 0}, 16), GenerationError);
  CHECK_THROWS_AS(rasterize_shape(circle(2.0), {20, 8, 0}, 16), ContractError);
  CHECK((rasterize_shape(circle(3.5), {7.2, 9.9, 0.4}, 16) == rasterize_shape(circle(3.5), {7.2, 9.9, 0.4}, 16)).all());
}

TEST_CASE("compute_masks cases") {
  auto a = rasterize_shape(circle(5.0), {16, 16, 0}, 32);
  SUBCASE("single instance is unoccluded") {
    auto v = compute_masks({a});
    CHECK((v.visible[0] == a).all());
    CHECK(area(v.occluded[0]) == 0);
    CHECK(occlusion_rate(a, v.occluded[0]) == 0.0);
  }
  SUBCASE("identical stacked shapes hide the bottom one") {
    auto v = compute_masks({a, a});
    CHECK(area(v.visible[0]) == 0);
    CHECK(occlusion_rate(a, v.occluded[0]) == 1.0);
    CHECK((v.visible[1] == a).all());
  }
  CHECK_THROWS_AS(compute_masks({}), ContractError);
  CHECK_THROWS_AS(compute_masks({a, Mask::Zero(8, 8)}), DimensionError);
}

TEST_CASE("compute_masks matches a per-pixel z-test") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<Mask> stack;
    for (int k = 0; k < 3; ++k) stack.push_back(vita::test::random_mask(24, 24, seed * 3 + k, 0.4));
    auto v = compute_masks(stack);
    bool ok = true;
    for (Index y = 0; y < 24; ++y) {
      for (Index x = 0; x < 24; ++x) {
        int top = -1;
        for (int k = 0; k < 3; ++k) {
          if (stack[k](y, x)) top = k;
        }
        for (int k = 0; k < 3; ++k) {
          ok = ok && (v.visible[k](y, x) == (k == top ? 1 : 0));
          ok = ok && (v.occluded[k](y, x) == (stack[k](y, x) && k != top ? 1 : 0));
        }
      }
    }
    CHECK(ok);
  }
}

TEST_CASE("occlusion bins") {
  CHECK(occlusion_bin(0.10) == OcclusionBin::low);
  CHECK(occlusion_bin(0.0) == OcclusionBin::low);
  CHECK(occlusion_bin(0.35) == OcclusionBin::medium);
  CHECK(occlusion_bin(0.20) == OcclusionBin::medium);
  CHECK(occlusion_bin(0.5) == OcclusionBin::high);
  CHECK(occlusion_bin(1.0) == OcclusionBin::high);
  CHECK_THROWS_AS(occlusion_bin(-0.01), ContractError);
  CHECK_THROWS_AS(occlusion_bin(1.01), ContractError);
  CHECK_THROWS_AS(occlusion_bin(std::nan("")), ContractError);
  CHECK(parse_occlusion_bin("medium") == OcclusionBin::medium);
  CHECK_THROWS_AS(parse_split("test"), ConfigError);
}

TEST_CASE("generated instances satisfy the record invariants") {
  const auto& d = vita::test::small_dataset();
  REQUIRE(d.scenes.size() == 8);
  for (const auto& s : d.scenes) {
    Mask covered = Mask::Zero(128, 128);
    for (const auto& r : s.instances) {
      CHECK((r.occluded == (r.amodal != 0 && r.visible == 0).cast<std::uint8_t>()).all());
      CHECK(((r.visible != 0 || r.occluded != 0) == (r.amodal != 0)).all());
      CHECK(area(r.amodal) == area(r.visible) + area(r.occluded));
      CHECK(r.occ_rate == occlusion_rate(r.amodal, r.occluded));
      CHECK(r.bin == occlusion_bin(r.occ_rate));
      CHECK(r.bbox == bounding_box(r.visible));
      CHECK(r.split == s.split);
      CHECK(((covered != 0) && (r.visible != 0)).count() == 0);
      covered = (covered != 0 || r.visible != 0).cast<std::uint8_t>();
    }
    bool fg_ok = true;
    for (Index y = 0; y < 128; ++y) {
      for (Index x = 0; x < 128; ++x) {
        const bool bg = s.image.at(x, y, 0) == 18 && s.image.at(x, y, 1) == 20 && s.image.at(x, y, 2) == 26;
        fg_ok = fg_ok && (bg == (covered(y, x) == 0));
      }
    }
    CHECK(fg_ok);
  }
}

TEST_CASE("train and val prototype pools are disjoint") {
  const auto lib = make_prototype_library(7, 64, 383.0 / 583.0, 256);
  std::set<int> train_ids, val_ids;
  for (const auto& p : lib) (p.pool == Split::train ? train_ids : val_ids).insert(p.prototype_id);
  CHECK_FALSE(train_ids.empty());
  CHECK_FALSE(val_ids.empty());

  std::set<int> used_train, used_val;
  for (const auto& s : vita::test::small_dataset().scenes) {
    for (const auto& r : s.instances) (s.split == Split::train ? used_train : used_val).insert(r.prototype_id);
  }
  for (int id : used_train) CHECK(used_val.count(id) == 0);
}

TEST_CASE("generation is deterministic and thread-count independent") {
  GenerateOptions o;
  o.scenes = 4;
  o.seed = 12;
  o.scene_side = 96;
  o.tolerance_pp = 100;
  const auto a = generate_dataset(o);
  o.threads = 3;
  const auto b = generate_dataset(o);
  REQUIRE(a.scenes.size() == b.scenes.size());
  for (std::size_t i = 0; i < a.scenes.size(); ++i) {
    CHECK(a.scenes[i].image == b.scenes[i].image);
    REQUIRE(a.scenes[i].instances.size() == b.scenes[i].instances.size());
    for (std::size_t k = 0; k < a.scenes[i].instances.size(); ++k) {
      CHECK((a.scenes[i].instances[k].amodal == b.scenes[i].instances[k].amodal).all());
    }
  }
}

TEST_CASE("generation contracts") {
  GenerateOptions o;
  o.scenes = 0;
  CHECK_THROWS_AS(generate_dataset(o), ConfigError);
  o = GenerateOptions{};
  o.scenes = 2;
  o.scene_side = 64;
  o.candidates = 1;
  o.max_retries = 0;
  o.tolerance_pp = 0.001;
  CHECK_THROWS_WITH_AS(generate_dataset(o), doctest::Contains("occlusion mix"), GenerationError);
}
