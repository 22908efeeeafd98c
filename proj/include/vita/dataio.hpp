#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vita/image.hpp"
#include "vita/scenegen.hpp"
#include "vita/tensor.hpp"

namespace vita {

/// Crop rectangle in scene pixels; [x, x + w) by [y, y + h).
struct Rect {
  Index x = 0, y = 0, w = 0, h = 0;
  bool contains(const BBox& b) const { return b.x >= x && b.y >= y && b.x + b.w <= x + w && b.y + b.h <= y + h; }
  bool operator==(const Rect&) const = default;
};

struct RoIInput {
  std::array<Plane, 3> image;  // RGB in [0, 1], side x side
  Mask visible;                // side x side
  BBox source_bbox;
  Rect crop;
  double scale_x = 1, scale_y = 1;  // crop pixels per RoI pixel
  Index side = 0;
};

/// Width and height times 1.2 about the center, rounded outward, clamped.
Rect enlarge_bbox(const BBox& bbox, Index scene_w, Index scene_h);

Plane resize_bilinear(const Plane& src, Index out_w, Index out_h);

/// Nearest-neighbour resample of a scene mask restricted to a rectangle.
Mask crop_mask(const Mask& mask, const Rect& r, Index side);

RoIInput extract_roi(const SceneSample& scene, const InstanceRecord& instance, Index side);

Mask paste_back(const Plane& prob, const RoIInput& roi, double threshold, Index scene_w, Index scene_h);

/// One model input with its ground truth, all in RoI space.
struct RoISample {
  std::string scene_id;
  int instance_id = 0;
  OcclusionBin bin = OcclusionBin::low;
  double occ_rate = 0;
  RoIInput roi;
  Mask amodal, occluded, visible;
};

/// RoIs for every non-excluded instance of a split, in dataset order.
std::vector<RoISample> build_roi_samples(const Dataset& dataset, Split split, Index side,
                                         std::size_t limit = 0);

/// [4, S, S] per sample: RGB mapped to [-1, 1], then the visible mask.
Tensor<float> input_batch(std::span<const RoISample> samples, std::span<const std::size_t> indices);
Tensor<float> amodal_batch(std::span<const RoISample> samples, std::span<const std::size_t> indices);
Tensor<float> occluded_batch(std::span<const RoISample> samples, std::span<const std::size_t> indices);

/// Channel `c` of a [N, C, S, S] tensor at batch position n.
Plane tensor_plane(const Tensor<float>& t, Index n, Index c = 0);

void write_dataset(const Dataset& dataset, const std::filesystem::path& root);
Dataset read_dataset(const std::filesystem::path& root);

std::string index_record(const SceneSample& scene, const InstanceRecord& r);

}  // namespace vita
