#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "vita/image.hpp"

namespace vita {

enum class ShapeKind { circle, rectangle, polygon, capsule };
enum class Split { train, val };
enum class OcclusionBin { low, medium, high };

std::string to_string(ShapeKind kind);
std::string to_string(Split split);
std::string to_string(OcclusionBin bin);
Split parse_split(std::string_view text);
OcclusionBin parse_occlusion_bin(std::string_view text);

struct ShapeSpec {
  int prototype_id = 0;
  ShapeKind kind = ShapeKind::circle;
  double radius = 0;              // circle, capsule
  double width = 0, height = 0;   // rectangle
  double length = 0;              // capsule spine
  std::vector<Eigen::Vector2d> vertices;  // polygon, around the origin
  std::array<std::uint8_t, 3> color{128, 128, 128};
  std::uint64_t texture_seed = 0;
  Split pool = Split::train;

  /// Radius of a disc around the placement point that contains the shape.
  double extent() const;
};

struct Placement {
  double cx = 0, cy = 0;
  double angle = 0;  // radians
};

/// Filled raster of the shape, sampled at pixel centers.
Mask rasterize_shape(const ShapeSpec& spec, const Placement& at, Index scene_side);

struct Visibility {
  std::vector<Mask> visible;
  std::vector<Mask> occluded;
};

/// Painter's algorithm over amodal masks ordered bottom to top.
Visibility compute_masks(const std::vector<Mask>& amodal);

/// low [0, 0.2), medium [0.2, 0.5), high [0.5, 1].
OcclusionBin occlusion_bin(double occ_rate);
double occlusion_rate(const Mask& amodal, const Mask& occluded);

struct InstanceRecord {
  int instance_id = 0;
  Mask amodal, visible, occluded;
  BBox bbox;  // of the visible mask
  double occ_rate = 0;
  OcclusionBin bin = OcclusionBin::low;
  Split split = Split::train;
  int prototype_id = -1;

  /// Fully hidden instances stay annotated but cannot produce an RoI.
  bool excluded() const { return bbox.empty(); }
};

struct SceneSample {
  std::string scene_id;
  Split split = Split::train;
  RgbImage image;
  std::vector<InstanceRecord> instances;  // bottom to top
};

struct Dataset {
  std::vector<SceneSample> scenes;
  std::size_t instance_count() const;
};

/// Percentages per occlusion bin.
struct BinMix {
  double low = 0, medium = 0, high = 0;
  double operator[](OcclusionBin b) const;
  double max_deviation(const BinMix& other) const;
};

inline constexpr BinMix kTargetBinMix{43.50, 33.69, 22.81};

struct GenerateOptions {
  int scenes = 50;
  int min_objects = 8;
  int max_objects = 12;
  Index scene_side = 256;
  std::uint64_t seed = 0;
  double split_ratio = 383.0 / 583.0;
  BinMix target = kTargetBinMix;
  double tolerance_pp = 10.0;
  int candidates = 12;
  int max_retries = 3;
  int prototypes = 64;
  int threads = 1;
};

std::vector<ShapeSpec> make_prototype_library(std::uint64_t seed, int count, double split_ratio,
                                              Index scene_side);

/// Renders one scene from placed shapes (bottom to top) and annotates it.
SceneSample compose_scene(std::string scene_id, Split split, const std::vector<ShapeSpec>& shapes,
                          const std::vector<Placement>& placements, Index scene_side);

Dataset generate_dataset(const GenerateOptions& options);

BinMix realized_mix(const Dataset& dataset);

}  // namespace vita
