#include "vita/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <json.hpp>

#include "vita/errors.hpp"

namespace vita {

namespace {

Index floor_div(Index a, Index b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
Index ceil_div(Index a, Index b) { return -floor_div(-a, b); }

}  // namespace

Rect enlarge_bbox(const BBox& b, Index scene_w, Index scene_h) {
  // Exact integer form of [x - 0.1w, x + 1.1w).
  const Index x0 = std::max<Index>(0, floor_div(10 * b.x - b.w, 10));
  const Index y0 = std::max<Index>(0, floor_div(10 * b.y - b.h, 10));
  const Index x1 = std::min<Index>(scene_w, ceil_div(10 * b.x + 11 * b.w, 10));
  const Index y1 = std::min<Index>(scene_h, ceil_div(10 * b.y + 11 * b.h, 10));
  return {x0, y0, x1 - x0, y1 - y0};
}

Plane resize_bilinear(const Plane& src, Index out_w, Index out_h) {
  const Index in_w = src.cols(), in_h = src.rows();
  Plane out(out_h, out_w);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  for (Index y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
    const Index y0 = static_cast<Index>(fy);
    const Index y1 = std::min(y0 + 1, in_h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (Index x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
      const Index x0 = static_cast<Index>(fx);
      const Index x1 = std::min(x0 + 1, in_w - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = src(y0, x0) + wx * (src(y0, x1) - src(y0, x0));
      const double bottom = src(y1, x0) + wx * (src(y1, x1) - src(y1, x0));
      out(y, x) = static_cast<float>(top + wy * (bottom - top));
    }
  }
  return out;
}

Mask crop_mask(const Mask& mask, const Rect& r, Index side) {
  Mask out(side, side);
  for (Index y = 0; y < side; ++y) {
    const Index sy = r.y + std::min(r.h - 1, (2 * y + 1) * r.h / (2 * side));
    for (Index x = 0; x < side; ++x) {
      const Index sx = r.x + std::min(r.w - 1, (2 * x + 1) * r.w / (2 * side));
      out(y, x) = mask(sy, sx) ? 1 : 0;
    }
  }
  return out;
}

RoIInput extract_roi(const SceneSample& scene, const InstanceRecord& instance, Index side) {
  if (instance.excluded() || area(instance.visible) == 0) {
    throw ContractError("extract_roi: instance " + std::to_string(instance.instance_id) + " of " +
                        scene.scene_id + " has an empty visible mask");
  }
  if (side < 1) throw ContractError("extract_roi: side must be positive");
  const Index W = scene.image.width, H = scene.image.height;
  RoIInput roi;
  roi.side = side;
  roi.source_bbox = instance.bbox;
  roi.crop = enlarge_bbox(instance.bbox, W, H);
  roi.scale_x = static_cast<double>(roi.crop.w) / static_cast<double>(side);
  roi.scale_y = static_cast<double>(roi.crop.h) / static_cast<double>(side);
  for (int c = 0; c < 3; ++c) {
    Plane crop(roi.crop.h, roi.crop.w);
    for (Index y = 0; y < roi.crop.h; ++y) {
      for (Index x = 0; x < roi.crop.w; ++x) {
        crop(y, x) = static_cast<float>(scene.image.at(roi.crop.x + x, roi.crop.y + y, c)) / 255.0f;
      }
    }
    roi.image[static_cast<std::size_t>(c)] = resize_bilinear(crop, side, side);
  }
  roi.visible = crop_mask(instance.visible, roi.crop, side);
  return roi;
}

Mask paste_back(const Plane& prob, const RoIInput& roi, double threshold, Index scene_w, Index scene_h) {
  Mask out = Mask::Zero(scene_h, scene_w);
  const Plane local = resize_bilinear(prob, roi.crop.w, roi.crop.h);
  for (Index y = 0; y < roi.crop.h; ++y) {
    for (Index x = 0; x < roi.crop.w; ++x) {
      if (local(y, x) >= threshold) out(roi.crop.y + y, roi.crop.x + x) = 1;
    }
  }
  return out;
}

std::vector<RoISample> build_roi_samples(const Dataset& dataset, Split split, Index side, std::size_t limit) {
  std::vector<RoISample> out;
  for (const auto& scene : dataset.scenes) {
    if (scene.split != split) continue;
    for (const auto& r : scene.instances) {
      if (r.excluded()) continue;
      if (limit != 0 && out.size() == limit) return out;
      RoISample s;
      s.scene_id = scene.scene_id;
      s.instance_id = r.instance_id;
      s.bin = r.bin;
      s.occ_rate = r.occ_rate;
      s.roi = extract_roi(scene, r, side);
      s.amodal = crop_mask(r.amodal, s.roi.crop, side);
      s.occluded = crop_mask(r.occluded, s.roi.crop, side);
      s.visible = s.roi.visible;
      out.push_back(std::move(s));
    }
  }
  return out;
}

namespace {

Index common_side(std::span<const RoISample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("empty batch");
  const Index side = samples[indices[0]].roi.side;
  for (auto i : indices) {
    if (i >= samples.size()) throw ContractError("batch index out of range");
    if (samples[i].roi.side != side) throw DimensionError("batch samples differ in RoI side");
  }
  return side;
}

Tensor<float> mask_batch(std::span<const RoISample> samples, std::span<const std::size_t> indices,
                         Mask RoISample::*field) {
  const Index side = common_side(samples, indices);
  const auto n = static_cast<Index>(indices.size());
  Tensor<float> t(Shape{n, 1, side, side});
  float* dst = t.data();
  for (auto i : indices) {
    const Mask& m = samples[i].*field;
    for (Index k = 0; k < side * side; ++k) *dst++ = m.data()[k] ? 1.0f : 0.0f;
  }
  return t;
}

}  // namespace

Tensor<float> input_batch(std::span<const RoISample> samples, std::span<const std::size_t> indices) {
  const Index side = common_side(samples, indices);
  const auto n = static_cast<Index>(indices.size());
  Tensor<float> t(Shape{n, 4, side, side});
  float* dst = t.data();
  for (auto i : indices) {
    const auto& roi = samples[i].roi;
    for (const auto& plane : roi.image) {
      for (Index k = 0; k < side * side; ++k) *dst++ = 2.0f * plane.data()[k] - 1.0f;
    }
    for (Index k = 0; k < side * side; ++k) *dst++ = roi.visible.data()[k] ? 1.0f : 0.0f;
  }
  return t;
}

Tensor<float> amodal_batch(std::span<const RoISample> samples, std::span<const std::size_t> indices) {
  return mask_batch(samples, indices, &RoISample::amodal);
}

Tensor<float> occluded_batch(std::span<const RoISample> samples, std::span<const std::size_t> indices) {
  return mask_batch(samples, indices, &RoISample::occluded);
}

Plane tensor_plane(const Tensor<float>& t, Index n, Index c) {
  if (t.rank() != 4) throw DimensionError("tensor_plane expects [N,C,H,W], got " + shape_str(t.shape()));
  const Index C = t.dim(1), H = t.dim(2), W = t.dim(3);
  Plane p(H, W);
  std::copy_n(t.data() + (n * C + c) * H * W, H * W, p.data());
  return p;
}

std::string index_record(const SceneSample& scene, const InstanceRecord& r) {
  const std::string stem = "masks/" + scene.scene_id + "_" + std::to_string(r.instance_id);
  nlohmann::ordered_json j;
  j["scene_id"] = scene.scene_id;
  j["instance_id"] = r.instance_id;
  j["split"] = to_string(r.split);
  j["bbox"] = {r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h};
  j["occ_rate"] = r.occ_rate;
  j["occ_bin"] = to_string(r.bin);
  j["image"] = "scenes/" + scene.scene_id + ".ppm";
  j["visible"] = stem + "_v.pgm";
  j["amodal"] = stem + "_a.pgm";
  j["occluded"] = stem + "_o.pgm";
  return j.dump();
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "scenes");
  fs::create_directories(root / "masks");
  std::string index;
  for (const auto& scene : dataset.scenes) {
    write_ppm(root / "scenes" / (scene.scene_id + ".ppm"), scene.image);
    for (const auto& r : scene.instances) {
      const std::string stem = scene.scene_id + "_" + std::to_string(r.instance_id);
      write_pgm(root / "masks" / (stem + "_v.pgm"), r.visible);
      write_pgm(root / "masks" / (stem + "_a.pgm"), r.amodal);
      write_pgm(root / "masks" / (stem + "_o.pgm"), r.occluded);
      index += index_record(scene, r);
      index += '\n';
    }
  }
  write_file(root / "index.jsonl",
             std::span(reinterpret_cast<const std::uint8_t*>(index.data()), index.size()));
}

Dataset read_dataset(const std::filesystem::path& root) {
  const auto index_path = root / "index.jsonl";
  const auto bytes = read_file(index_path);
  const std::string text(bytes.begin(), bytes.end());

  Dataset d;
  std::map<std::string, std::size_t> scene_pos;
  std::size_t line_start = 0;
  int line_no = 0;
  while (line_start < text.size()) {
    std::size_t line_end = text.find('\n', line_start);
    if (line_end == std::string::npos) line_end = text.size();
    ++line_no;
    const std::string line = text.substr(line_start, line_end - line_start);
    auto fail = [&](const std::string& why) {
      throw FormatError(index_path.string() + ": line " + std::to_string(line_no) + " (byte offset " +
                        std::to_string(line_start) + "): " + why);
    };
    if (!line.empty()) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(index_path.string() + ": line " + std::to_string(line_no) + " (byte offset " +
                          std::to_string(line_start + (e.byte > 0 ? e.byte - 1 : 0)) + "): " + e.what());
      }
      InstanceRecord r;
      std::string scene_id;
      try {
        for (const char* key : {"scene_id", "instance_id", "split", "bbox", "occ_rate", "occ_bin", "image",
                                "visible", "amodal", "occluded"}) {
          if (!j.contains(key)) fail(std::string("missing key '") + key + "'");
        }
        scene_id = j.at("scene_id").get<std::string>();
        r.instance_id = j.at("instance_id").get<int>();
        r.split = parse_split(j.at("split").get<std::string>());
        const auto box = j.at("bbox").get<std::vector<Index>>();
        if (box.size() != 4) fail("bbox must have 4 entries");
        r.bbox = {box[0], box[1], box[2], box[3]};
        r.occ_rate = j.at("occ_rate").get<double>();
        r.bin = parse_occlusion_bin(j.at("occ_bin").get<std::string>());
      } catch (const nlohmann::json::exception& e) {
        fail(e.what());
      } catch (const ConfigError& e) {
        fail(e.what());
      }
      auto it = scene_pos.find(scene_id);
      if (it == scene_pos.end()) {
        SceneSample s;
        s.scene_id = scene_id;
        s.split = r.split;
        s.image = read_ppm(root / j.at("image").get<std::string>());
        it = scene_pos.emplace(scene_id, d.scenes.size()).first;
        d.scenes.push_back(std::move(s));
      }
      SceneSample& scene = d.scenes[it->second];
      if (scene.split != r.split) fail("scene " + scene_id + " mixes splits");
      r.visible = read_pgm(root / j.at("visible").get<std::string>());
      r.amodal = read_pgm(root / j.at("amodal").get<std::string>());
      r.occluded = read_pgm(root / j.at("occluded").get<std::string>());
      for (const Mask* m : {&r.visible, &r.amodal, &r.occluded}) {
        if (m->cols() != scene.image.width || m->rows() != scene.image.height) {
          fail("mask size does not match the scene image");
        }
      }
      if (!(bounding_box(r.visible) == r.bbox)) fail("bbox disagrees with the visible mask");
      scene.instances.push_back(std::move(r));
    }
    line_start = line_end + 1;
  }
  if (d.scenes.empty()) throw FormatError(index_path.string() + ": no instances at byte offset 0");
  return d;
}

}  // namespace vita
