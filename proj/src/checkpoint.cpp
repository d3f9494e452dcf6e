#include "mmclip/checkpoint.hpp"

#include <string_view>

#include "mmclip/binary_io.hpp"

namespace mmclip {

namespace {

using Kind = CheckpointError::Kind;

[[noreturn]] void truncated() {
  throw CheckpointError(Kind::truncated, "checkpoint is truncated");
}

template <typename T>
T need(binary::Reader& r, bool (binary::Reader::*get)(T&)) {
  T v{};
  if (!(r.*get)(v)) truncated();
  return v;
}

}  // namespace

std::string encode_checkpoint(const Network& net, const BoundVectors* bounds) {
  binary::Writer w;
  w.bytes(std::string_view(kCheckpointMagic, 6));
  w.u8(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(net.input_shape().size()));
  for (std::size_t d : net.input_shape()) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(net.layers().size()));
  for (const LayerSpec& l : net.layers()) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.u8(static_cast<std::uint8_t>(l.activation));
    w.u8(l.clippable ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(l.units));
    w.u32(static_cast<std::uint32_t>(l.kernel));
    w.u32(static_cast<std::uint32_t>(l.padding));
  }
  for (std::size_t i = 0; i < net.layers().size(); ++i)
    for (const Tensor& p : net.params(i))
      for (double v : p.data()) w.f64(v);
  if (bounds) {
    bounds->check_compatible(net);
    w.u8(1);
    for (const Tensor& z : bounds->layers()) {
      w.u32(static_cast<std::uint32_t>(z.size()));
      for (double v : z.data()) w.f64(v);
    }
  } else {
    w.u8(0);
  }
  return w.data();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  binary::Reader r(bytes);
  std::string magic;
  if (!r.bytes(6, magic) || magic != std::string_view(kCheckpointMagic, 6))
    throw CheckpointError(Kind::not_a_checkpoint, "not a checkpoint (bad magic)");
  const auto version = need(r, &binary::Reader::u8);
  if (version != kCheckpointVersion)
    throw CheckpointError(Kind::version_mismatch,
                          "checkpoint version " + std::to_string(version) +
                              " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");

  const auto rank = need(r, &binary::Reader::u32);
  if (rank == 0 || rank > 8) throw CheckpointError(Kind::malformed, "bad input rank");
  Shape input;
  for (std::uint32_t i = 0; i < rank; ++i) input.push_back(need(r, &binary::Reader::u32));

  const auto count = need(r, &binary::Reader::u32);
  if (count == 0 || count > 4096) throw CheckpointError(Kind::malformed, "bad layer count");
  std::vector<LayerSpec> layers;
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerSpec l;
    const auto kind = need(r, &binary::Reader::u8);
    const auto act = need(r, &binary::Reader::u8);
    const auto clip = need(r, &binary::Reader::u8);
    if (kind > 4 || act > 1 || clip > 1)
      throw CheckpointError(Kind::malformed, "bad layer record " + std::to_string(i));
    l.kind = static_cast<LayerKind>(kind);
    l.activation = static_cast<Activation>(act);
    l.clippable = clip == 1;
    l.units = need(r, &binary::Reader::u32);
    l.kernel = need(r, &binary::Reader::u32);
    l.padding = need(r, &binary::Reader::u32);
    layers.push_back(l);
  }

  std::optional<Network> net;
  try {
    net.emplace(std::move(input), std::move(layers));
  } catch (const ShapeError& e) {
    throw CheckpointError(Kind::malformed, std::string("inconsistent layer table: ") + e.what());
  }
  if (r.remaining() < net->parameter_count() * 8) truncated();
  for (std::size_t i = 0; i < net->layers().size(); ++i)
    for (Tensor& p : net->params(i))
      for (double& v : p.data()) v = need(r, &binary::Reader::f64);

  Checkpoint ck{std::move(*net), std::nullopt};
  const auto has_bounds = need(r, &binary::Reader::u8);
  if (has_bounds > 1) throw CheckpointError(Kind::malformed, "bad bounds flag");
  if (has_bounds == 1) {
    std::vector<Tensor> z;
    for (std::size_t i = 0; i < ck.net.clippable_layers().size(); ++i) {
      const auto len = need(r, &binary::Reader::u32);
      if (len == 0 || r.remaining() < std::size_t{len} * 8) truncated();
      Tensor t(Shape{len});
      for (double& v : t.data()) v = need(r, &binary::Reader::f64);
      z.push_back(std::move(t));
    }
    try {
      BoundVectors bounds(std::move(z));
      bounds.check_compatible(ck.net);
      ck.bounds = std::move(bounds);
    } catch (const Error& e) {
      throw CheckpointError(Kind::malformed, std::string("bad bounds: ") + e.what());
    }
  }
  if (r.remaining() != 0)
    throw CheckpointError(Kind::malformed, "trailing bytes after checkpoint");
  return ck;
}

void save_checkpoint(const Network& net, const BoundVectors* bounds, const std::string& path) {
  try {
    binary::write_file(path, encode_checkpoint(net, bounds));
  } catch (const DataError& e) {
    throw CheckpointError(Kind::io, e.what());
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string bytes;
  try {
    bytes = binary::read_file(path);
  } catch (const DataError& e) {
    throw CheckpointError(Kind::io, e.what());
  }
  return decode_checkpoint(bytes);
}

}  // namespace mmclip
