#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vita/tensor.hpp"

namespace vita {

/// Binary mask, row-major, values in {0, 1}.
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// Single-channel float image, row-major.
using Plane = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct RgbImage {
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major

  RgbImage() = default;
  RgbImage(Index w, Index h) : width(w), height(h), pixels(static_cast<std::size_t>(w * h * 3), 0) {}

  std::uint8_t& at(Index x, Index y, int c) { return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
  std::uint8_t at(Index x, Index y, int c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  bool operator==(const RgbImage&) const = default;
};

/// Axis-aligned box; empty when w or h is zero.
struct BBox {
  Index x = 0, y = 0, w = 0, h = 0;
  bool empty() const { return w <= 0 || h <= 0; }
  bool contains(const BBox& o) const {
    return o.x >= x && o.y >= y && o.x + o.w <= x + w && o.y + o.h <= y + h;
  }
  bool operator==(const BBox&) const = default;
};

inline Index area(const Mask& m) { return (m != 0).count(); }

/// Tight bounding box of the set pixels; {0,0,0,0} for an empty mask.
BBox bounding_box(const Mask& m);

std::vector<std::uint8_t> encode_ppm(const RgbImage& image);
std::vector<std::uint8_t> encode_pgm(const Mask& mask);
RgbImage decode_ppm(std::span<const std::uint8_t> bytes, const std::string& source);
Mask decode_pgm(std::span<const std::uint8_t> bytes, const std::string& source);

void write_ppm(const std::filesystem::path& path, const RgbImage& image);
void write_pgm(const std::filesystem::path& path, const Mask& mask);
RgbImage read_ppm(const std::filesystem::path& path);
Mask read_pgm(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace vita
