#include "vita/scenegen.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cmath>
#include <numbers>
#include <random>
#include <thread>

#include "vita/errors.hpp"
#include "vita/rng.hpp"

namespace vita {

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::polygon: return "polygon";
    case ShapeKind::capsule: return "capsule";
  }
  return "?";
}

std::string to_string(Split split) { return split == Split::train ? "train" : "val"; }

std::string to_string(OcclusionBin bin) {
  switch (bin) {
    case OcclusionBin::low: return "low";
    case OcclusionBin::medium: return "medium";
    case OcclusionBin::high: return "high";
  }
  return "?";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  throw ConfigError("unknown split '" + std::string(text) + "'");
}

OcclusionBin parse_occlusion_bin(std::string_view text) {
  if (text == "low") return OcclusionBin::low;
  if (text == "medium") return OcclusionBin::medium;
  if (text == "high") return OcclusionBin::high;
  throw ConfigError("unknown occlusion bin '" + std::string(text) + "'");
}

namespace {

double cross(const Eigen::Vector2d& a, const Eigen::Vector2d& b) { return a.x() * b.y() - a.y() * b.x(); }

double signed_area(const std::vector<Eigen::Vector2d>& v) {
  double s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) s += cross(v[i], v[(i + 1) % v.size()]);
  return 0.5 * s;
}

void check_spec(const ShapeSpec& spec) {
  auto bad = [&](const std::string& why) {
    throw GenerationError("degenerate " + to_string(spec.kind) + " (prototype " +
                          std::to_string(spec.prototype_id) + "): " + why);
  };
  switch (spec.kind) {
    case ShapeKind::circle:
      if (!(spec.radius > 0)) bad("radius must be positive");
      break;
    case ShapeKind::rectangle:
      if (!(spec.width > 0) || !(spec.height > 0)) bad("width and height must be positive");
      break;
    case ShapeKind::capsule:
      if (!(spec.radius > 0) || spec.length < 0) bad("radius must be positive");
      break;
    case ShapeKind::polygon:
      if (spec.vertices.size() < 3) bad("needs at least 3 vertices");
      if (std::abs(signed_area(spec.vertices)) <= 0) bad("zero area");
      break;
  }
}

double segment_distance2(const Eigen::Vector2d& p, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  const Eigen::Vector2d ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).squaredNorm();
}

}  // namespace

double ShapeSpec::extent() const {
  switch (kind) {
    case ShapeKind::circle: return radius;
    case ShapeKind::rectangle: return 0.5 * std::hypot(width, height);
    case ShapeKind::capsule: return 0.5 * length + radius;
    case ShapeKind::polygon: {
      double r = 0;
      for (const auto& v : vertices) r = std::max(r, v.norm());
      return r;
    }
  }
  return 0;
}

Mask rasterize_shape(const ShapeSpec& spec, const Placement& at, Index scene_side) {
  check_spec(spec);
  if (!(at.cx >= 0 && at.cx <= static_cast<double>(scene_side) && at.cy >= 0 &&
        at.cy <= static_cast<double>(scene_side))) {
    throw ContractError("placement (" + std::to_string(at.cx) + ", " + std::to_string(at.cy) +
                        ") lies outside the scene");
  }
  Mask m = Mask::Zero(scene_side, scene_side);
  const double e = spec.extent() + 1.0;
  const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(at.cx - e)));
  const Index x1 = std::min<Index>(scene_side - 1, static_cast<Index>(std::ceil(at.cx + e)));
  const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(at.cy - e)));
  const Index y1 = std::min<Index>(scene_side - 1, static_cast<Index>(std::ceil(at.cy + e)));
  const double c = std::cos(at.angle), s = std::sin(at.angle);
  const Eigen::Vector2d center(at.cx, at.cy);

  std::vector<Eigen::Vector2d> poly;
  if (spec.kind == ShapeKind::polygon) {
    for (const auto& v : spec.vertices) poly.emplace_back(center + Eigen::Vector2d(c * v.x() - s * v.y(), s * v.x() + c * v.y()));
    if (signed_area(poly) < 0) std::reverse(poly.begin(), poly.end());
  }
  const Eigen::Vector2d axis(c, s);
  const Eigen::Vector2d cap_a = center - 0.5 * spec.length * axis;
  const Eigen::Vector2d cap_b = center + 0.5 * spec.length * axis;

  for (Index y = y0; y <= y1; ++y) {
    for (Index x = x0; x <= x1; ++x) {
      const Eigen::Vector2d p(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
      const Eigen::Vector2d d = p - center;
      bool inside = false;
      switch (spec.kind) {
        case ShapeKind::circle:
          inside = d.squaredNorm() <= spec.radius * spec.radius;
          break;
        case ShapeKind::rectangle: {
          const double u = c * d.x() + s * d.y();
          const double v = -s * d.x() + c * d.y();
          inside = u >= -0.5 * spec.width && u < 0.5 * spec.width && v >= -0.5 * spec.height &&
                   v < 0.5 * spec.height;
          break;
        }
        case ShapeKind::capsule:
          inside = segment_distance2(p, cap_a, cap_b) <= spec.radius * spec.radius;
          break;
        case ShapeKind::polygon: {
          inside = true;
          for (std::size_t i = 0; i < poly.size() && inside; ++i) {
            inside = cross(poly[(i + 1) % poly.size()] - poly[i], p - poly[i]) >= 0;
          }
          break;
        }
      }
      if (inside) m(y, x) = 1;
    }
  }
  return m;
}

Visibility compute_masks(const std::vector<Mask>& amodal) {
  if (amodal.empty()) throw ContractError("compute_masks needs at least one instance");
  Visibility out;
  out.visible.resize(amodal.size());
  out.occluded.resize(amodal.size());
  Mask above = Mask::Zero(amodal[0].rows(), amodal[0].cols());
  for (std::size_t k = amodal.size(); k-- > 0;) {
    if (amodal[k].rows() != above.rows() || amodal[k].cols() != above.cols()) {
      throw DimensionError("compute_masks: masks differ in size");
    }
    out.visible[k] = (amodal[k] != 0 && above == 0).cast<std::uint8_t>();
    out.occluded[k] = (amodal[k] != 0 && above != 0).cast<std::uint8_t>();
    above = (above != 0 || amodal[k] != 0).cast<std::uint8_t>();
  }
  return out;
}

OcclusionBin occlusion_bin(double occ_rate) {
  if (!(occ_rate >= 0.0 && occ_rate <= 1.0)) {
    throw ContractError("occlusion rate " + std::to_string(occ_rate) + " outside [0, 1]");
  }
  if (occ_rate < 0.2) return OcclusionBin::low;
  if (occ_rate < 0.5) return OcclusionBin::medium;
  return OcclusionBin::high;
}

double occlusion_rate(const Mask& amodal, const Mask& occluded) {
  const Index a = area(amodal);
  if (a == 0) throw ContractError("occlusion rate of an empty amodal mask");
  return static_cast<double>(area(occluded)) / static_cast<double>(a);
}

std::size_t Dataset::instance_count() const {
  std::size_t n = 0;
  for (const auto& s : scenes) n += s.instances.size();
  return n;
}

double BinMix::operator[](OcclusionBin b) const {
  return b == OcclusionBin::low ? low : b == OcclusionBin::medium ? medium : high;
}

double BinMix::max_deviation(const BinMix& o) const {
  return std::max({std::abs(low - o.low), std::abs(medium - o.medium), std::abs(high - o.high)});
}

std::vector<ShapeSpec> make_prototype_library(std::uint64_t seed, int count, double split_ratio,
                                              Index scene_side) {
  if (count < 2) throw ConfigError("prototype library needs at least 2 entries");
  std::vector<ShapeSpec> lib;
  const double k = static_cast<double>(scene_side) / 256.0;
  for (int id = 0; id < count; ++id) {
    std::mt19937_64 rng(derive_seed(seed, "prototype." + std::to_string(id)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ShapeSpec s;
    s.prototype_id = id;
    s.kind = static_cast<ShapeKind>(id % 4);
    switch (s.kind) {
      case ShapeKind::circle:
        s.radius = k * (14 + 18 * u(rng));
        break;
      case ShapeKind::rectangle:
        s.width = std::round(k * (22 + 36 * u(rng)));
        s.height = std::round(k * (22 + 36 * u(rng)));
        break;
      case ShapeKind::capsule:
        s.length = k * (18 + 34 * u(rng));
        s.radius = k * (8 + 8 * u(rng));
        break;
      case ShapeKind::polygon: {
        const int n = 5 + static_cast<int>(u(rng) * 4);
        const double rx = k * (16 + 18 * u(rng)), ry = k * (16 + 18 * u(rng));
        std::vector<double> angles;
        for (int i = 0; i < n; ++i) angles.push_back((i + 0.3 + 0.4 * u(rng)) * 2 * std::numbers::pi / n);
        for (double a : angles) s.vertices.emplace_back(rx * std::cos(a), ry * std::sin(a));
        break;
      }
    }
    for (auto& ch : s.color) ch = static_cast<std::uint8_t>(70 + static_cast<int>(u(rng) * 186));
    s.texture_seed = rng();
    // Pool membership depends only on (seed, id).
    const double h = static_cast<double>(derive_seed(seed, "pool." + std::to_string(id)) >> 11) * 0x1.0p-53;
    s.pool = h < split_ratio ? Split::train : Split::val;
    lib.push_back(std::move(s));
  }
  // Both pools must be usable.
  auto has = [&](Split p) { return std::any_of(lib.begin(), lib.end(), [&](const ShapeSpec& s) { return s.pool == p; }); };
  if (!has(Split::train)) lib.front().pool = Split::train;
  if (!has(Split::val)) lib.back().pool = Split::val;
  return lib;
}

namespace {

constexpr std::array<std::uint8_t, 3> kBackground{18, 20, 26};

void paint(RgbImage& img, const Mask& m, const ShapeSpec& spec) {
  std::mt19937_64 rng(spec.texture_seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double freq = 0.15 + 0.5 * u(rng);
  const double phi = u(rng) * std::numbers::pi;
  const double phase = u(rng) * 2 * std::numbers::pi;
  const double cphi = std::cos(phi), sphi = std::sin(phi);
  for (Index y = 0; y < m.rows(); ++y) {
    for (Index x = 0; x < m.cols(); ++x) {
      if (!m(y, x)) continue;
      const double stripe = 0.8 + 0.2 * std::sin(freq * (x * cphi + y * sphi) + phase);
      for (int c = 0; c < 3; ++c) {
        const double v = std::round(spec.color[static_cast<std::size_t>(c)] * stripe);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(v, 40.0, 255.0));
      }
    }
  }
}

}  // namespace

SceneSample compose_scene(std::string scene_id, Split split, const std::vector<ShapeSpec>& shapes,
                          const std::vector<Placement>& placements, Index scene_side) {
  if (shapes.size() != placements.size() || shapes.empty()) {
    throw ContractError("compose_scene needs one placement per shape");
  }
  std::vector<Mask> amodal;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    amodal.push_back(rasterize_shape(shapes[i], placements[i], scene_side));
    if (area(amodal.back()) == 0) {
      throw GenerationError("prototype " + std::to_string(shapes[i].prototype_id) + " rasterized to no pixels");
    }
  }
  Visibility vis = compute_masks(amodal);

  SceneSample scene;
  scene.scene_id = std::move(scene_id);
  scene.split = split;
  scene.image = RgbImage(scene_side, scene_side);
  for (Index i = 0; i < scene_side * scene_side; ++i) {
    for (int c = 0; c < 3; ++c) scene.image.pixels[static_cast<std::size_t>(i * 3 + c)] = kBackground[static_cast<std::size_t>(c)];
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) paint(scene.image, amodal[i], shapes[i]);

  for (std::size_t i = 0; i < shapes.size(); ++i) {
    InstanceRecord r;
    r.instance_id = static_cast<int>(i);
    r.amodal = std::move(amodal[i]);
    r.visible = std::move(vis.visible[i]);
    r.occluded = std::move(vis.occluded[i]);
    r.bbox = bounding_box(r.visible);
    r.occ_rate = occlusion_rate(r.amodal, r.occluded);
    r.bin = occlusion_bin(r.occ_rate);
    r.split = split;
    r.prototype_id = shapes[i].prototype_id;
    scene.instances.push_back(std::move(r));
  }
  return scene;
}

namespace {

struct Layout {
  std::vector<ShapeSpec> shapes;
  std::vector<Placement> placements;
};

Layout sample_layout(std::uint64_t seed, const std::vector<const ShapeSpec*>& pool, const GenerateOptions& o) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  const double side = static_cast<double>(o.scene_side);
  const int n = o.min_objects + static_cast<int>(rng() % static_cast<std::uint64_t>(o.max_objects - o.min_objects + 1));
  const double spread = side * (0.08 + 0.32 * u(rng));
  const double ccx = side * (0.3 + 0.4 * u(rng)), ccy = side * (0.3 + 0.4 * u(rng));
  Layout out;
  for (int i = 0; i < n; ++i) {
    const ShapeSpec& s = *pool[rng() % pool.size()];
    const double e = std::min(s.extent(), 0.5 * side);
    Placement p;
    p.cx = std::clamp(ccx + spread * g(rng), e, side - e);
    p.cy = std::clamp(ccy + spread * g(rng), e, side - e);
    p.angle = u(rng) * 2 * std::numbers::pi;
    out.shapes.push_back(s);
    out.placements.push_back(p);
  }
  return out;
}

std::array<double, 3> bin_fractions(const SceneSample& s) {
  std::array<double, 3> f{0, 0, 0};
  for (const auto& r : s.instances) f[static_cast<std::size_t>(r.bin)] += 1;
  for (auto& v : f) v /= static_cast<double>(s.instances.size());
  return f;
}

SceneSample best_scene(std::size_t index, Split split, const std::vector<const ShapeSpec*>& pool,
                       const GenerateOptions& o, int candidates) {
  const std::uint64_t scene_seed = derive_seed(o.seed, static_cast<std::uint64_t>(index));
  const std::array<double, 3> target{o.target.low / 100, o.target.medium / 100, o.target.high / 100};
  char id[32];
  std::snprintf(id, sizeof id, "s%04zu", index);
  SceneSample best;
  double best_score = 0;
  for (int c = 0; c < candidates; ++c) {
    Layout l = sample_layout(derive_seed(scene_seed, static_cast<std::uint64_t>(c)), pool, o);
    SceneSample s = compose_scene(id, split, l.shapes, l.placements, o.scene_side);
    const auto f = bin_fractions(s);
    double score = 0;
    for (std::size_t b = 0; b < 3; ++b) score += std::abs(f[b] - target[b]);
    if (c == 0 || score < best_score) {
      best_score = score;
      best = std::move(s);
    }
  }
  return best;
}

}  // namespace

BinMix realized_mix(const Dataset& d) {
  std::array<double, 3> n{0, 0, 0};
  for (const auto& s : d.scenes) {
    for (const auto& r : s.instances) n[static_cast<std::size_t>(r.bin)] += 1;
  }
  const double total = n[0] + n[1] + n[2];
  if (total == 0) return {};
  return {100 * n[0] / total, 100 * n[1] / total, 100 * n[2] / total};
}

Dataset generate_dataset(const GenerateOptions& o) {
  if (o.scenes < 1) throw ConfigError("scenes must be >= 1");
  if (o.min_objects < 1 || o.max_objects < o.min_objects) throw ConfigError("invalid object count range");
  if (o.scene_side < 16) throw ConfigError("scene side must be >= 16");
  if (!(o.split_ratio >= 0 && o.split_ratio <= 1)) throw ConfigError("split ratio must lie in [0, 1]");
  if (o.candidates < 1) throw ConfigError("candidates must be >= 1");

  const auto library = make_prototype_library(o.seed, o.prototypes, o.split_ratio, o.scene_side);
  std::vector<const ShapeSpec*> pools[2];
  for (const auto& s : library) pools[static_cast<int>(s.pool)].push_back(&s);

  const auto n = static_cast<std::size_t>(o.scenes);
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * o.split_ratio));

  BinMix mix;
  int candidates = o.candidates;
  for (int attempt = 0; attempt <= o.max_retries; ++attempt, candidates *= 2) {
    Dataset d;
    d.scenes.resize(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        const Split split = i < n_train ? Split::train : Split::val;
        d.scenes[i] = best_scene(i, split, pools[static_cast<int>(split)], o, candidates);
      }
    };
    const int threads = std::max(1, std::min<int>(o.threads, static_cast<int>(n)));
    std::vector<std::thread> pool;
    for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    mix = realized_mix(d);
    if (mix.max_deviation(o.target) <= o.tolerance_pp) return d;
  }
  throw GenerationError("occlusion mix (" + std::to_string(mix.low) + ", " + std::to_string(mix.medium) +
                        ", " + std::to_string(mix.high) + ")% outside tolerance after " +
                        std::to_string(o.max_retries) + " retries");
}

}  // namespace vita
