#include "vita/image.hpp"

#include <cctype>
#include <fstream>
#include <iterator>

namespace vita {

BBox bounding_box(const Mask& m) {
  Index x0 = m.cols(), y0 = m.rows(), x1 = -1, y1 = -1;
  for (Index y = 0; y < m.rows(); ++y) {
    for (Index x = 0; x < m.cols(); ++x) {
      if (m(y, x) == 0) continue;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) return {};
  return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

namespace {

std::vector<std::uint8_t> header(const char* magic, Index w, Index h) {
  const std::string text = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  return {text.begin(), text.end()};
}

struct PnmHeader {
  Index width = 0;
  Index height = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_header(std::span<const std::uint8_t> bytes, const char* magic,
                       const std::string& source) {
  auto fail = [&](const std::string& what, std::size_t at) -> void {
    throw FormatError(source + ": " + what + " at byte offset " + std::to_string(at));
  };
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1]) {
    fail(std::string("expected magic ") + magic, 0);
  }
  std::size_t pos = 2;
  auto next_number = [&]() -> Index {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    Index v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1 << 24)) fail("header value too large", start);
      ++pos;
    }
    if (pos == start) fail("expected a header number", start);
    return v;
  };
  PnmHeader h;
  h.width = next_number();
  h.height = next_number();
  const std::size_t maxval_at = pos;
  const Index maxval = next_number();
  if (maxval != 255) fail("unsupported maxval " + std::to_string(maxval), maxval_at);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail("missing whitespace after header", pos);
  h.data_offset = pos + 1;
  return h;
}

}  // namespace

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
  auto out = header("P6", image.width, image.height);
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_pgm(const Mask& mask) {
  auto out = header("P5", mask.cols(), mask.rows());
  out.reserve(out.size() + static_cast<std::size_t>(mask.size()));
  for (Index i = 0; i < mask.size(); ++i) out.push_back(mask.data()[i] ? 255 : 0);
  return out;
}

RgbImage decode_ppm(std::span<const std::uint8_t> bytes, const std::string& source) {
  const auto h = parse_header(bytes, "P6", source);
  const auto need = static_cast<std::size_t>(h.width * h.height * 3);
  if (bytes.size() - h.data_offset != need) {
    throw FormatError(source + ": expected " + std::to_string(need) + " pixel bytes after header, found " +
                      std::to_string(bytes.size() - h.data_offset) + " at byte offset " +
                      std::to_string(h.data_offset));
  }
  RgbImage img(h.width, h.height);
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset), bytes.end(), img.pixels.begin());
  return img;
}

Mask decode_pgm(std::span<const std::uint8_t> bytes, const std::string& source) {
  const auto h = parse_header(bytes, "P5", source);
  const auto need = static_cast<std::size_t>(h.width * h.height);
  if (bytes.size() - h.data_offset != need) {
    throw FormatError(source + ": expected " + std::to_string(need) + " pixel bytes after header, found " +
                      std::to_string(bytes.size() - h.data_offset) + " at byte offset " +
                      std::to_string(h.data_offset));
  }
  Mask m(h.height, h.width);
  for (std::size_t i = 0; i < need; ++i) {
    const std::uint8_t v = bytes[h.data_offset + i];
    if (v != 0 && v != 255) {
      throw FormatError(source + ": mask pixel value " + std::to_string(v) +
                        " is not 0 or 255 at byte offset " + std::to_string(h.data_offset + i));
    }
    m.data()[i] = v ? 1 : 0;
  }
  return m;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) { write_file(path, encode_ppm(image)); }
void write_pgm(const std::filesystem::path& path, const Mask& mask) { write_file(path, encode_pgm(mask)); }
RgbImage read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path), path.string()); }
Mask read_pgm(const std::filesystem::path& path) { return decode_pgm(read_file(path), path.string()); }

}  // namespace vita
