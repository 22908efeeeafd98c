#include "vita/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace vita {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> data, std::string source)
      : data_(data), source_(std::move(source)) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("checkpoint " + source_ + ": " + what + " at byte offset " +
                      std::to_string(pos_));
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      fail(std::string("truncated while reading ") + what + " (need " + std::to_string(n) +
           " bytes, " + std::to_string(data_.size() - pos_) + " left)");
    }
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    auto s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::string str(const char* what) {
    const auto n = u32(what);
    auto s = take(n, what);
    return std::string(s.begin(), s.end());
  }

 private:
  std::span<const std::uint8_t> data_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelConfig& config,
                                            const ParameterSet<float>& params) {
  Writer w;
  w.bytes("VITA", 4);
  w.u32(kCheckpointVersion);
  w.str(config.to_json());
  w.u32(static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& e : params.entries()) {
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.tensor.rank()));
    for (Index d : e.tensor.shape()) w.u64(static_cast<std::uint64_t>(d));
    for (float v : e.tensor.values()) w.u32(std::bit_cast<std::uint32_t>(v));
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
  Reader r(bytes, source);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), "VITA", 4) != 0) {
    throw FormatError("checkpoint " + source + ": bad magic bytes at byte offset 0");
  }
  const auto version_at = r.offset();
  const auto version = r.u32("format version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint " + source + ": unsupported format version " +
                      std::to_string(version) + " at byte offset " + std::to_string(version_at));
  }
  Checkpoint ckpt;
  const auto config_at = r.offset();
  const std::string config_text = r.str("config");
  try {
    ckpt.config = ModelConfig::from_json(config_text);
  } catch (const std::exception& e) {
    throw FormatError("checkpoint " + source + ": invalid config at byte offset " +
                      std::to_string(config_at) + ": " + e.what());
  }
  const auto count = r.u32("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    NamedTensor<float> nt;
    nt.name = r.str("tensor name");
    const auto rank = r.u32("tensor rank");
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank) + " for " + nt.name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = r.u64("tensor dims");
      if (d > (1ULL << 40)) r.fail("implausible dimension for " + nt.name);
      shape.push_back(static_cast<Index>(d));
    }
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    auto raw = r.take(n * 4, "tensor values");
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[i * 4 + static_cast<std::size_t>(b)]) << (8 * b);
      values[i] = std::bit_cast<float>(bits);
    }
    nt.tensor = Tensor<float>(std::move(shape), std::move(values));
    ckpt.tensors.push_back(std::move(nt));
  }
  if (!r.done()) r.fail("trailing bytes after last tensor");
  return ckpt;
}

void save_checkpoint(const AmodalSegmenter<float>& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model.config(), model.parameters());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

void apply_checkpoint(const Checkpoint& ckpt, AmodalSegmenter<float>& model) {
  if (!(ckpt.config == model.config())) {
    throw ContractError("checkpoint config does not match the model");
  }
  const auto& entries = model.parameters().entries();
  if (entries.size() != ckpt.tensors.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                      " tensors, model expects " + std::to_string(entries.size()));
  }
  ParameterSet<float> incoming;
  for (const auto& t : ckpt.tensors) incoming.add(t.name, t.tensor, false);
  for (const auto& e : entries) {
    const auto* src = incoming.find(e.name);
    if (src == nullptr) throw FormatError("checkpoint is missing tensor " + e.name);
    if (src->tensor.shape() != e.tensor.shape()) {
      throw FormatError("checkpoint tensor " + e.name + " has shape " +
                        shape_str(src->tensor.shape()) + ", expected " + shape_str(e.tensor.shape()));
    }
  }
  model.copy_state_from(incoming);
}

AmodalSegmenter<float> load_checkpoint(const std::filesystem::path& path) {
  Checkpoint ckpt = read_checkpoint(path);
  AmodalSegmenter<float> model(ckpt.config);
  apply_checkpoint(ckpt, model);
  return model;
}

}  // namespace vita
