#include <cstring>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include "cf/error.hpp"
#include "cf/model.hpp"

// Checkpoint format "CFCK", version 1, little-endian:
//   magic[4] u32_version u32_classes u32_split
//   u32_in_c u32_in_h u32_in_w u64_iteration u64_rng[4] u32_layer_count
//   then per layer: u32_kind u64_payload_len payload
// Payloads hold raw f64 parameter blocks; round-trips are bit-exact.

namespace cf {
namespace {

constexpr char kMagic[4] = {'C', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

enum LayerTag : std::uint32_t {
  kTagConv = 0,
  kTagDense = 1,
  kTagNorm = 2,
  kTagRelu = 3,
  kTagMaxPool = 4,
  kTagAvgPool = 5,
  kTagFlatten = 6,
};

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back((v >> (8 * i)) & 0xff);
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back((v >> (8 * i)) & 0xff);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    u64(bits);
  }
  void f64s(const std::vector<double>& vs) {
    for (double v : vs) f64(v);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_++]} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_++]} << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::vector<double> f64s(std::size_t count) {
    std::vector<double> out(count);
    for (double& v : out) v = f64();
    return out;
  }
  std::size_t pos() const { return pos_; }
  bool exhausted() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    }
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

void write_layer(Writer& out, const Layer& layer) {
  Writer payload;
  std::uint32_t tag = kTagRelu;
  if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
    tag = kTagConv;
    payload.u32(static_cast<std::uint32_t>(conv->out_channels));
    payload.u32(static_cast<std::uint32_t>(conv->in_channels));
    payload.u32(static_cast<std::uint32_t>(conv->kernel_h));
    payload.u32(static_cast<std::uint32_t>(conv->kernel_w));
    payload.u32(static_cast<std::uint32_t>(conv->stride));
    payload.u32(static_cast<std::uint32_t>(conv->padding));
    payload.u8(conv->has_bias ? 1 : 0);
    payload.f64s(conv->kernel);
    if (conv->has_bias) payload.f64s(conv->bias);
  } else if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
    tag = kTagDense;
    payload.u32(static_cast<std::uint32_t>(dense->in_features));
    payload.u32(static_cast<std::uint32_t>(dense->units));
    payload.f64s(dense->weight);
    payload.f64s(dense->bias);
  } else if (const auto* norm = std::get_if<ScaledNormLayer>(&layer)) {
    tag = kTagNorm;
    payload.u32(static_cast<std::uint32_t>(norm->channels));
    payload.f64(norm->momentum);
    payload.f64(norm->eps);
    payload.f64s(norm->gamma);
    payload.f64s(norm->beta);
    payload.f64s(norm->running_mean);
    payload.f64s(norm->running_var);
  } else if (const auto* pool = std::get_if<PoolLayer>(&layer)) {
    tag = pool->kind == PoolKind::kMax ? kTagMaxPool : kTagAvgPool;
    payload.u32(static_cast<std::uint32_t>(pool->window));
    payload.u32(static_cast<std::uint32_t>(pool->stride));
  } else if (std::holds_alternative<FlattenLayer>(layer)) {
    tag = kTagFlatten;
  }
  out.u32(tag);
  auto body = payload.take();
  out.u64(body.size());
  for (std::uint8_t b : body) out.u8(b);
}

Layer read_layer(Reader& in) {
  const std::uint32_t tag = in.u32();
  const std::uint64_t len = in.u64();
  const std::size_t start = in.pos();
  Layer layer;
  switch (tag) {
    case kTagConv: {
      ConvLayer conv;
      conv.out_channels = in.u32();
      conv.in_channels = in.u32();
      conv.kernel_h = in.u32();
      conv.kernel_w = in.u32();
      conv.stride = in.u32();
      conv.padding = in.u32();
      conv.has_bias = in.u8() != 0;
      conv.kernel = in.f64s(conv.out_channels * conv.in_channels *
                            conv.kernel_h * conv.kernel_w);
      if (conv.has_bias) conv.bias = in.f64s(conv.out_channels);
      layer = std::move(conv);
      break;
    }
    case kTagDense: {
      DenseLayer dense;
      dense.in_features = in.u32();
      dense.units = in.u32();
      dense.weight = in.f64s(dense.in_features * dense.units);
      dense.bias = in.f64s(dense.units);
      layer = std::move(dense);
      break;
    }
    case kTagNorm: {
      ScaledNormLayer norm;
      norm.channels = in.u32();
      norm.momentum = in.f64();
      norm.eps = in.f64();
      norm.gamma = in.f64s(norm.channels);
      norm.beta = in.f64s(norm.channels);
      norm.running_mean = in.f64s(norm.channels);
      norm.running_var = in.f64s(norm.channels);
      layer = std::move(norm);
      break;
    }
    case kTagRelu:
      layer = ReluLayer{};
      break;
    case kTagMaxPool:
    case kTagAvgPool: {
      PoolLayer pool;
      pool.kind = tag == kTagMaxPool ? PoolKind::kMax : PoolKind::kAvg;
      pool.window = in.u32();
      pool.stride = in.u32();
      layer = pool;
      break;
    }
    case kTagFlatten:
      layer = FlattenLayer{};
      break;
    default:
      throw FormatError("unknown layer tag " + std::to_string(tag));
  }
  if (in.pos() - start != len) {
    throw FormatError("layer record length mismatch");
  }
  return layer;
}

}  // namespace

std::vector<std::uint8_t> serialize(const Model& model) {
  Writer out;
  for (char c : kMagic) out.u8(static_cast<std::uint8_t>(c));
  out.u32(kVersion);
  out.u32(static_cast<std::uint32_t>(model.class_count));
  out.u32(static_cast<std::uint32_t>(model.split_index));
  out.u32(static_cast<std::uint32_t>(model.input.channels));
  out.u32(static_cast<std::uint32_t>(model.input.height));
  out.u32(static_cast<std::uint32_t>(model.input.width));
  out.u64(model.iteration);
  for (std::uint64_t word : model.rng_state) out.u64(word);
  out.u32(static_cast<std::uint32_t>(model.layers.size()));
  for (const Layer& layer : model.layers) write_layer(out, layer);
  return out.take();
}

Model deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(in.u8());
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic");
  }
  const std::uint32_t version = in.u32();
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  }
  Model model;
  model.class_count = in.u32();
  model.split_index = in.u32();
  model.input.channels = in.u32();
  model.input.height = in.u32();
  model.input.width = in.u32();
  model.iteration = in.u64();
  for (std::uint64_t& word : model.rng_state) word = in.u64();
  const std::uint32_t layer_count = in.u32();
  model.layers.reserve(layer_count);
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    model.layers.push_back(read_layer(in));
  }
  if (!in.exhausted()) {
    throw FormatError("trailing bytes after checkpoint payload");
  }
  return model;
}

void save(const Model& model, const std::string& path) {
  const auto bytes = serialize(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path);
}

Model load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace cf
