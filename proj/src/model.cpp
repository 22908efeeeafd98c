#include "vita/model.hpp"

#include <json.hpp>

#include <cstdio>
#include <random>

#include "vita/rng.hpp"

namespace vita {

using json = nlohmann::ordered_json;

std::string to_string(HeadKind kind) { return kind == HeadKind::single ? "single" : "dual"; }

HeadKind parse_head_kind(std::string_view text) {
  if (text == "single") return HeadKind::single;
  if (text == "dual") return HeadKind::dual;
  throw ConfigError("unknown head kind '" + std::string(text) + "' (expected single|dual)");
}

ModelConfig ModelConfig::toy(HeadKind kind) {
  ModelConfig c;
  c.head_kind = kind;
  return c;
}

ModelConfig ModelConfig::base(HeadKind kind) {
  ModelConfig c;
  c.image_side = 224;
  c.patch_size = 16;
  c.embed_dim = 768;
  c.depth = 12;
  c.heads = 12;
  c.decoder_schedule = {{512, 28}, {256, 56}, {128, 112}, {64, 224}};
  c.head_kind = kind;
  return c;
}

ModelConfig ModelConfig::preset(std::string_view name, HeadKind kind) {
  if (name == "toy") return toy(kind);
  if (name == "base") return base(kind);
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected toy|base)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (image_side <= 0 || patch_size <= 0 || embed_dim <= 0 || depth < 0 || heads <= 0 ||
      mlp_ratio <= 0) {
    fail("all sizes must be positive");
  }
  if (image_side % patch_size != 0) fail("image_side must be divisible by patch_size");
  if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
  if (decoder_schedule.size() != 4) fail("decoder_schedule must have exactly 4 stages");
  for (std::size_t i = 0; i < decoder_schedule.size(); ++i) {
    const auto& s = decoder_schedule[i];
    if (s.channels <= 0 || s.side <= 0) fail("decoder stages must be positive");
    if (i > 0 && s.side != 2 * decoder_schedule[i - 1].side) {
      fail("decoder stages after the first must double the spatial side");
    }
  }
  if (decoder_schedule.back().side != image_side) fail("final decoder side must equal image_side");
  if (head_hidden() <= 0) fail("final decoder stage needs at least 2 channels");
  if (head_kind == HeadKind::dual) {
    for (std::size_t i = 1; i < 4; ++i) {
      if (decoder_schedule[i].channels % 2 != 0) {
        fail("dual head halves stages 2-4; their channel counts must be even");
      }
    }
  }
}

std::string ModelConfig::to_json() const {
  json j;
  j["image_side"] = image_side;
  j["patch_size"] = patch_size;
  j["embed_dim"] = embed_dim;
  j["depth"] = depth;
  j["heads"] = heads;
  j["mlp_ratio"] = mlp_ratio;
  json sched = json::array();
  for (const auto& s : decoder_schedule) sched.push_back({s.channels, s.side});
  j["decoder_schedule"] = sched;
  j["head_kind"] = to_string(head_kind);
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.image_side = j.at("image_side").get<Index>();
    c.patch_size = j.at("patch_size").get<Index>();
    c.embed_dim = j.at("embed_dim").get<Index>();
    c.depth = j.at("depth").get<Index>();
    c.heads = j.at("heads").get<Index>();
    c.mlp_ratio = j.at("mlp_ratio").get<Index>();
    c.decoder_schedule.clear();
    for (const auto& s : j.at("decoder_schedule")) {
      c.decoder_schedule.push_back({s.at(0).get<Index>(), s.at(1).get<Index>()});
    }
    c.head_kind = parse_head_kind(j.at("head_kind").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

std::string ModelConfig::fingerprint() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json())));
  return buf;
}

template <typename S>
Tensor<S> adapt_input_weights(const Tensor<S>& rgb) {
  if (rgb.rank() != 4 || rgb.dim(1) != 3) {
    throw DimensionError("adapt_input_weights: expected [D,3,p,p], got " + shape_str(rgb.shape()));
  }
  const Index d = rgb.dim(0), plane = rgb.dim(2) * rgb.dim(3);
  Tensor<S> out({d, 4, rgb.dim(2), rgb.dim(3)});
  for (Index o = 0; o < d; ++o) {
    const S* src = rgb.data() + o * 3 * plane;
    S* dst = out.data() + o * 4 * plane;
    std::copy_n(src, 3 * plane, dst);
    for (Index j = 0; j < plane; ++j) {
      dst[3 * plane + j] = (src[j] + src[plane + j] + src[2 * plane + j]) / S(3);
    }
  }
  return out;
}

template <typename S>
Tensor<S> AmodalSegmenter<S>::weight(const std::string& name, Shape shape) {
  Tensor<S> t(std::move(shape));
  std::mt19937_64 rng(derive_seed(config_.seed, name));
  TruncatedNormal dist(0.02);
  for (Index i = 0; i < t.numel(); ++i) t.at(i) = static_cast<S>(dist(rng));
  return params_.add(name, t, true);
}

template <typename S>
Tensor<S> AmodalSegmenter<S>::zeros(const std::string& name, Shape shape) {
  return params_.add(name, Tensor<S>(std::move(shape), S(0)), true);
}

template <typename S>
Tensor<S> AmodalSegmenter<S>::ones(const std::string& name, Shape shape) {
  return params_.add(name, Tensor<S>(std::move(shape), S(1)), true);
}

template <typename S>
typename AmodalSegmenter<S>::BatchNormLayer AmodalSegmenter<S>::make_bn(const std::string& name, Index channels) {
  BatchNormLayer bn;
  bn.gamma = ones(name + ".gamma", {channels});
  bn.beta = zeros(name + ".beta", {channels});
  bn.stats = BatchNormState<S>::fresh(channels);
  params_.add(name + ".running_mean", bn.stats.running_mean, false);
  params_.add(name + ".running_var", bn.stats.running_var, false);
  return bn;
}

template <typename S>
typename AmodalSegmenter<S>::DecoderBlock AmodalSegmenter<S>::make_block(const std::string& name, Index in,
                                                         Index out, Index kernel, Index stride) {
  DecoderBlock b;
  b.up_kernel = kernel;
  b.up_stride = stride;
  b.up_w = weight(name + ".up.weight", {in, out, kernel, kernel});
  b.up_b = zeros(name + ".up.bias", {out});
  // No conv bias: the batch norm that follows removes any per-channel offset.
  b.conv_w = weight(name + ".conv.weight", {out, out, 3, 3});
  b.bn = make_bn(name + ".bn", out);
  return b;
}

template <typename S>
AmodalSegmenter<S>::AmodalSegmenter(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const Index d = config_.embed_dim, p = config_.patch_size;
  const Index hidden = d * config_.mlp_ratio;

  patch_w_ = weight("encoder.patch.weight", {d, 4, p, p});
  patch_b_ = zeros("encoder.patch.bias", {d});
  pos_embed_ = weight("encoder.pos_embed", {config_.tokens(), d});
  for (Index i = 0; i < config_.depth; ++i) {
    const std::string n = "encoder.block" + std::to_string(i);
    EncoderBlock blk;
    blk.ln1 = {ones(n + ".ln1.gamma", {d}), zeros(n + ".ln1.beta", {d})};
    blk.attn.qkv_w = weight(n + ".attn.qkv.weight", {d, 3 * d});
    blk.attn.qkv_b = zeros(n + ".attn.qkv.bias", {3 * d});
    blk.attn.out_w = weight(n + ".attn.out.weight", {d, d});
    blk.attn.out_b = zeros(n + ".attn.out.bias", {d});
    blk.ln2 = {ones(n + ".ln2.gamma", {d}), zeros(n + ".ln2.beta", {d})};
    blk.fc1 = {weight(n + ".mlp.fc1.weight", {d, hidden}), zeros(n + ".mlp.fc1.bias", {hidden})};
    blk.fc2 = {weight(n + ".mlp.fc2.weight", {hidden, d}), zeros(n + ".mlp.fc2.bias", {d})};
    blocks_.push_back(std::move(blk));
  }
  final_norm_ = {ones("encoder.norm.gamma", {d}), zeros("encoder.norm.beta", {d})};

  const auto& sched = config_.decoder_schedule;
  const Index first_side = sched[0].side;
  if (config_.head_kind == HeadKind::single) {
    Index in = d;
    for (std::size_t i = 0; i < 4; ++i) {
      const bool first = i == 0;
      amodal_branch_.push_back(make_block("decoder.block" + std::to_string(i), in,
                                          sched[i].channels, first ? first_side : 2,
                                          first ? 1 : 2));
      in = sched[i].channels;
    }
    const Index last = sched[3].channels;
    amodal_head_w1_ = weight("head.amodal.conv1.weight", {config_.head_hidden(), last, 3, 3});
    amodal_head_b1_ = zeros("head.amodal.conv1.bias", {config_.head_hidden()});
  } else {
    shared_.push_back(make_block("decoder.shared0", d, sched[0].channels, first_side, 1));
    shared_.push_back(make_block("decoder.shared1", sched[0].channels, sched[1].channels, 2, 2));
    const Index split = sched[1].channels / 2;
    for (const char* branch : {"amodal", "occluded"}) {
      const std::string n = std::string("decoder.") + branch;
      ChannelReduce reduce;
      reduce.w = weight(n + ".reduce.weight", {split, sched[1].channels, 1, 1});
      reduce.bn = make_bn(n + ".reduce.bn", split);
      std::vector<DecoderBlock> blocks;
      blocks.push_back(make_block(n + ".block0", split, sched[2].channels / 2, 2, 2));
      blocks.push_back(make_block(n + ".block1", sched[2].channels / 2, sched[3].channels / 2, 2, 2));
      if (std::string_view(branch) == "amodal") {
        amodal_reduce_ = std::move(reduce);
        amodal_branch_ = std::move(blocks);
      } else {
        occluded_reduce_ = std::move(reduce);
        occluded_branch_ = std::move(blocks);
      }
    }
    // Amodal head sees its own branch concatenated with the occluded branch.
    const Index concat = 2 * (sched[3].channels / 2);
    amodal_head_w1_ = weight("head.amodal.conv1.weight", {config_.head_hidden(), concat, 3, 3});
    amodal_head_b1_ = zeros("head.amodal.conv1.bias", {config_.head_hidden()});
    occluded_head_w_ = weight("head.occluded.conv.weight", {1, sched[3].channels / 2, 3, 3});
    occluded_head_b_ = zeros("head.occluded.conv.bias", {1});
  }
  amodal_head_w2_ = weight("head.amodal.conv2.weight", {1, config_.head_hidden(), 1, 1});
  amodal_head_b2_ = zeros("head.amodal.conv2.bias", {1});
}

template <typename S>
DecoderLayout AmodalSegmenter<S>::layout() const {
  DecoderLayout l;
  l.shared_blocks = static_cast<int>(shared_.size());
  l.amodal_branch_blocks = static_cast<int>(amodal_branch_.size());
  l.occluded_branch_blocks = static_cast<int>(occluded_branch_.size());
  l.amodal_head_convs = 2;
  l.occluded_head_convs = config_.head_kind == HeadKind::dual ? 1 : 0;
  return l;
}

template <typename S>
Tensor<S> AmodalSegmenter<S>::patch_embed(const Tensor<S>& input) const {
  if (input.rank() != 4 || input.dim(1) != 4) {
    throw ContractError("encoder expects a 4-channel [N,4,S,S] input, got " +
                        (input.defined() ? shape_str(input.shape()) : std::string("undefined")));
  }
  if (input.dim(2) != config_.image_side || input.dim(3) != config_.image_side) {
    throw DimensionError("encoder expects spatial side " + std::to_string(config_.image_side) +
                         ", got " + shape_str(input.shape()));
  }
  auto grid = conv2d(input, patch_w_, patch_b_, config_.patch_size, 0);
  return add(tokens_from_grid(grid), pos_embed_);
}

template <typename S>
FeatureVector<S> AmodalSegmenter<S>::encode(const Tensor<S>& input, StageTrace* trace) const {
  auto x = patch_embed(input);
  if (trace) trace->emplace_back("encoder.tokens", x.shape());
  for (const auto& blk : blocks_) {
    auto h = layer_norm(x, blk.ln1.gamma, blk.ln1.beta);
    x = add(x, multi_head_attention(h, blk.attn, config_.heads));
    h = layer_norm(x, blk.ln2.gamma, blk.ln2.beta);
    h = linear(gelu(linear(h, blk.fc1.w, blk.fc1.b)), blk.fc2.w, blk.fc2.b);
    x = add(x, h);
  }
  x = layer_norm(x, final_norm_.gamma, final_norm_.beta);
  FeatureVector<S> v{mean_tokens(x)};
  if (trace) trace->emplace_back("encoder.features", v.values.shape());
  return v;
}

template <typename S>
Tensor<S> AmodalSegmenter<S>::run_bn(const Tensor<S>& x, BatchNormLayer& bn, Mode mode) const {
  return batch_norm2d(x, bn.gamma, bn.beta, bn.stats, mode);
}

template <typename S>
Tensor<S> AmodalSegmenter<S>::run_block(const Tensor<S>& x, DecoderBlock& block, Mode mode) const {
  auto y = conv_transpose2d(x, block.up_w, block.up_b, block.up_stride, 0);
  y = conv2d(y, block.conv_w, Tensor<S>(), 1, 1);
  return relu(run_bn(y, block.bn, mode));
}

template <typename S>
Prediction<S> AmodalSegmenter<S>::decode(const FeatureVector<S>& features, Mode mode, StageTrace* trace) {
  const auto& v = features.values;
  if (v.rank() != 2 || v.dim(1) != config_.embed_dim) {
    throw ConfigError("decoder expects features [N," + std::to_string(config_.embed_dim) +
                      "], got " + shape_str(v.shape()));
  }
  auto note = [trace](const std::string& name, const Tensor<S>& t) {
    if (trace) trace->emplace_back(name, t.shape());
  };
  auto z = reshape(v, {v.dim(0), v.dim(1), 1, 1});
  note("decoder.input", z);

  Prediction<S> pred;
  if (config_.head_kind == HeadKind::single) {
    for (std::size_t i = 0; i < amodal_branch_.size(); ++i) {
      z = run_block(z, amodal_branch_[i], mode);
      note("decoder.block" + std::to_string(i), z);
    }
    auto h = relu(conv2d(z, amodal_head_w1_, amodal_head_b1_, 1, 1));
    note("head.amodal.hidden", h);
    pred.amodal = sigmoid(conv2d(h, amodal_head_w2_, amodal_head_b2_, 1, 0));
    note("head.amodal.output", pred.amodal);
    return pred;
  }

  for (std::size_t i = 0; i < shared_.size(); ++i) {
    z = run_block(z, shared_[i], mode);
    note("decoder.shared" + std::to_string(i), z);
  }
  auto a = relu(run_bn(conv2d(z, amodal_reduce_.w, Tensor<S>(), 1, 0), amodal_reduce_.bn, mode));
  auto o = relu(run_bn(conv2d(z, occluded_reduce_.w, Tensor<S>(), 1, 0), occluded_reduce_.bn, mode));
  note("decoder.amodal.reduce", a);
  note("decoder.occluded.reduce", o);
  for (std::size_t i = 0; i < amodal_branch_.size(); ++i) {
    a = run_block(a, amodal_branch_[i], mode);
    note("decoder.amodal.block" + std::to_string(i), a);
  }
  for (std::size_t i = 0; i < occluded_branch_.size(); ++i) {
    o = run_block(o, occluded_branch_[i], mode);
    note("decoder.occluded.block" + std::to_string(i), o);
  }
  auto joined = concat_channels(a, o);
  note("head.amodal.concat", joined);
  auto h = relu(conv2d(joined, amodal_head_w1_, amodal_head_b1_, 1, 1));
  note("head.amodal.hidden", h);
  pred.amodal = sigmoid(conv2d(h, amodal_head_w2_, amodal_head_b2_, 1, 0));
  note("head.amodal.output", pred.amodal);
  pred.occluded = sigmoid(conv2d(o, occluded_head_w_, occluded_head_b_, 1, 1));
  note("head.occluded.output", pred.occluded);
  return pred;
}

template <typename S>
Prediction<S> AmodalSegmenter<S>::forward(const Tensor<S>& input, Mode mode, StageTrace* trace) {
  return decode(encode(input, trace), mode, trace);
}

template <typename S>
void AmodalSegmenter<S>::load_rgb_patch_weights(const Tensor<S>& rgb_weights) {
  auto adapted = adapt_input_weights(rgb_weights);
  if (adapted.shape() != patch_w_.shape()) {
    throw DimensionError("load_rgb_patch_weights: adapted shape " + shape_str(adapted.shape()) +
                         " does not match " + shape_str(patch_w_.shape()));
  }
  std::copy_n(adapted.data(), adapted.numel(), patch_w_.data());
}

template <typename S>
void AmodalSegmenter<S>::copy_state_from(const ParameterSet<S>& other) {
  for (auto& e : params_.entries()) {
    const auto* src = other.find(e.name);
    if (src == nullptr) throw ContractError("copy_state_from: missing tensor " + e.name);
    if (src->tensor.shape() != e.tensor.shape()) {
      throw DimensionError("copy_state_from: shape mismatch for " + e.name);
    }
    Tensor<S> dst = e.tensor;
    std::copy_n(src->tensor.data(), dst.numel(), dst.data());
  }
}

template Tensor<float> adapt_input_weights(const Tensor<float>&);
template Tensor<double> adapt_input_weights(const Tensor<double>&);
template class AmodalSegmenter<float>;
template class AmodalSegmenter<double>;

}  // namespace vita
