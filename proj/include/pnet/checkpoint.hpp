#pragma once

// PNET1 checkpoint container.
//
//   "PNET1" | u32 version | u8 scalar width (4|8)
//   ModelConfig fields
//   u32 count, then per tensor: str name | u32 rank | u64 dims[rank] | LE scalars
//   Adam: u64 step | f64 beta1 beta2 eps base_lr decay | u64 period | moments
//   u64 epoch | u64 seed
//   u64 FNV-1a of everything above
//
// All integers and scalars little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pnet/binio.hpp"
#include "pnet/errors.hpp"
#include "pnet/model.hpp"

namespace pnet {

inline constexpr std::string_view kCheckpointMagic = "PNET1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  ModelConfig config;
  ModelParams<T> params;
  AdamState<T> adam;
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t seed = 0;

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline void write_config(ByteWriter& w, const ModelConfig& c) {
  for (auto ch : c.conv_channels) w.u64(ch);
  w.u64(c.dense_width);
  w.u64(c.num_subjects);
  w.u64(c.num_postures);
  w.f64(c.leaky_slope);
  for (auto d : c.conv_dropout) w.f64(d);
  w.f64(c.dense_dropout);
  w.f64(c.l2_sigma);
  w.u64(c.input_height);
  w.u64(c.input_width);
  w.u64(c.pool_stride);
  w.f64(c.bn_epsilon);
  w.f64(c.bn_momentum);
}

inline ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  for (auto& ch : c.conv_channels) ch = r.u64();
  c.dense_width = r.u64();
  c.num_subjects = r.u64();
  c.num_postures = r.u64();
  c.leaky_slope = r.f64();
  for (auto& d : c.conv_dropout) d = r.f64();
  c.dense_dropout = r.f64();
  c.l2_sigma = r.f64();
  c.input_height = r.u64();
  c.input_width = r.u64();
  c.pool_stride = r.u64();
  c.bn_epsilon = r.f64();
  c.bn_momentum = r.f64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint holds an invalid model config: ") + e.what());
  }
  return c;
}

template <typename T>
void write_tensor(ByteWriter& w, std::string_view name, const Tensor<T>& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.u64(d);
  for (auto v : t.data()) w.scalar(v);
}

template <typename T>
Tensor<T> read_tensor(ByteReader& r, std::string_view expected_name, const Shape& expected_shape) {
  const auto name = r.str(256);
  if (name != expected_name)
    throw LoadError("expected tensor '" + std::string(expected_name) + "', found '" + name + "'");
  const auto rank = r.u32();
  if (rank == 0 || rank > 8) throw LoadError("tensor '" + name + "' has invalid rank");
  Shape shape(rank);
  for (auto& d : shape) d = r.u64();
  if (shape != expected_shape)
    throw LoadError("tensor '" + name + "' shape " + shape_str(shape) + " does not match config " +
                    shape_str(expected_shape));
  const std::size_t n = shape_numel(shape);
  if (r.remaining() < n * sizeof(T)) throw LoadError("tensor '" + name + "' payload truncated");
  std::vector<T> data(n);
  for (auto& v : data) v = r.scalar<T>();
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
std::vector<std::string> all_tensor_names() {
  auto names = ModelParams<T>::trainable_names();
  for (std::size_t i = 1; i <= kConvBlocks; ++i) {
    names.push_back("bn" + std::to_string(i) + ".running_mean");
    names.push_back("bn" + std::to_string(i) + ".running_var");
  }
  return names;
}

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const Checkpoint<T>& ck) {
  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(sizeof(T)));
  detail::write_config(w, ck.config);

  const auto tensors = ck.params.all_tensors();
  const auto names = detail::all_tensor_names<T>();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) detail::write_tensor(w, names[i], *tensors[i]);

  const auto& a = ck.adam;
  w.u64(a.step);
  w.f64(a.beta1);
  w.f64(a.beta2);
  w.f64(a.epsilon);
  w.f64(a.base_lr);
  w.f64(a.decay);
  w.u64(a.decay_period);
  w.u32(static_cast<std::uint32_t>(a.m.size()));
  for (std::size_t i = 0; i < a.m.size(); ++i) {
    detail::write_tensor(w, "adam.m." + std::to_string(i), a.m[i]);
    detail::write_tensor(w, "adam.v." + std::to_string(i), a.v[i]);
  }
  w.u64(ck.epoch);
  w.u64(ck.seed);
  const auto sum = fnv1a(w.buffer());
  w.u64(sum);
  return w.take();
}

template <typename T>
Checkpoint<T> decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 8 ||
      bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw LoadError("not a PNET1 checkpoint (bad magic)");
  const auto body = bytes.substr(0, bytes.size() - 8);
  ByteReader tail(bytes.substr(bytes.size() - 8));
  if (tail.u64() != fnv1a(body)) throw LoadError("checkpoint checksum mismatch (truncated or corrupt)");

  ByteReader r(body);
  r.bytes(kCheckpointMagic.size());
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  const auto width = r.u8();
  if (width != sizeof(T))
    throw LoadError("checkpoint scalar width " + std::to_string(width) + " does not match " +
                    std::to_string(sizeof(T)));

  Checkpoint<T> ck;
  ck.config = detail::read_config(r);
  SeededRng shape_rng(0);
  ck.params = init_params<T>(ck.config, shape_rng);
  auto tensors = ck.params.all_tensors();
  const auto names = detail::all_tensor_names<T>();
  if (r.u32() != tensors.size()) throw LoadError("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i)
    *tensors[i] = detail::read_tensor<T>(r, names[i], tensors[i]->shape());

  auto& a = ck.adam;
  a.step = r.u64();
  a.beta1 = r.f64();
  a.beta2 = r.f64();
  a.epsilon = r.f64();
  a.base_lr = r.f64();
  a.decay = r.f64();
  a.decay_period = r.u64();
  const auto moments = r.u32();
  const auto shapes = ck.params.trainable_shapes();
  if (moments != 0 && moments != shapes.size()) throw LoadError("adam moment count mismatch");
  for (std::size_t i = 0; i < moments; ++i) {
    a.m.push_back(detail::read_tensor<T>(r, "adam.m." + std::to_string(i), shapes[i]));
    a.v.push_back(detail::read_tensor<T>(r, "adam.v." + std::to_string(i), shapes[i]));
  }
  ck.epoch = r.u64();
  ck.seed = r.u64();
  if (r.remaining() != 0) throw LoadError("trailing bytes in checkpoint");
  return ck;
}

template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(ck));
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file_bytes(path));
}

}  // namespace pnet
