#pragma once

// Binary model checkpoints.
//
// Layout (all integers and doubles little-endian):
//   "AETTAMLP"            8-byte magic
//   u32 version           currently 1
//   u32 flags             bit 0: batch norm present, bit 1: transductive BN inference
//   u64 input_dim, u64 class_count, u64 hidden_count, u64 width[hidden_count]
//   f64 dropout_rate[hidden_count]
//   per hidden layer: f64 W[in*out] (row-major), f64 b[out]
//                     and, with batch norm: f64 gamma, beta, running_mean,
//                     running_var [out each], f64 momentum, f64 eps
//   head: f64 W[in*K], f64 b[K]

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "aetta/nn.hpp"

namespace aetta::nn {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 8> kCheckpointMagic = {'A', 'E', 'T', 'T', 'A', 'M', 'L', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), bytes.size());
}

class Reader {
 public:
  explicit Reader(std::span<const char> buf) : buf_(buf) {}

  template <class T>
  T get() {
    if (pos_ + sizeof(T) > buf_.size()) throw CheckpointError("checkpoint truncated");
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, bytes.data(), sizeof(T));
    return v;
  }

  void get_doubles(std::span<double> dst) {
    for (double& d : dst) d = get<double>();
  }

  std::span<const char> take(std::size_t n) {
    if (pos_ + n > buf_.size()) throw CheckpointError("checkpoint truncated");
    auto s = buf_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::span<const char> buf_;
  std::size_t pos_ = 0;
};

inline void put_doubles(std::string& out, std::span<const double> v) {
  for (double d : v) put_le(out, d);
}

}  // namespace detail

inline std::string serialize(const MlpModel& m) {
  validate(m);
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  std::uint32_t flags = 0;
  if (m.has_batch_norm()) flags |= 1u;
  if (m.bn_inference == BnInference::Batch) flags |= 2u;
  detail::put_le<std::uint32_t>(out, flags);
  detail::put_le<std::uint64_t>(out, m.input_dim());
  detail::put_le<std::uint64_t>(out, m.class_count());
  detail::put_le<std::uint64_t>(out, m.hidden.size());
  for (const auto& h : m.hidden) detail::put_le<std::uint64_t>(out, h.out_dim());
  detail::put_doubles(out, m.dropout.rate_per_hidden_layer);
  for (std::size_t i = 0; i < m.hidden.size(); ++i) {
    detail::put_doubles(out, m.hidden[i].weights.data());
    detail::put_doubles(out, m.hidden[i].bias);
    if (m.has_batch_norm()) {
      const auto& bn = m.norms[i];
      detail::put_doubles(out, bn.gamma);
      detail::put_doubles(out, bn.beta);
      detail::put_doubles(out, bn.running_mean);
      detail::put_doubles(out, bn.running_var);
      detail::put_le(out, bn.momentum);
      detail::put_le(out, bn.eps);
    }
  }
  detail::put_doubles(out, m.head.weights.data());
  detail::put_doubles(out, m.head.bias);
  return out;
}

inline MlpModel deserialize(std::span<const char> bytes) {
  detail::Reader rd(bytes);
  auto magic = rd.take(kCheckpointMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) {
    throw CheckpointError("not a model checkpoint (bad magic)");
  }
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto flags = rd.get<std::uint32_t>();
  const auto input_dim = rd.get<std::uint64_t>();
  const auto class_count = rd.get<std::uint64_t>();
  const auto hidden_count = rd.get<std::uint64_t>();
  if (hidden_count > 1024 || input_dim > (1u << 24) || class_count > (1u << 24)) {
    throw CheckpointError("implausible checkpoint dimensions");
  }
  std::vector<std::size_t> widths(hidden_count);
  for (auto& w : widths) {
    w = rd.get<std::uint64_t>();
    if (w > (1u << 24)) throw CheckpointError("implausible hidden width");
  }
  MlpModel m;
  m.bn_inference = (flags & 2u) ? BnInference::Batch : BnInference::Running;
  m.dropout.rate_per_hidden_layer.resize(hidden_count);
  rd.get_doubles(m.dropout.rate_per_hidden_layer);
  std::size_t prev = input_dim;
  for (std::size_t i = 0; i < hidden_count; ++i) {
    DenseLayer d{Matrix(prev, widths[i]), std::vector<double>(widths[i])};
    rd.get_doubles(d.weights.data());
    rd.get_doubles(d.bias);
    m.hidden.push_back(std::move(d));
    if (flags & 1u) {
      BatchNormLayer bn(widths[i]);
      rd.get_doubles(bn.gamma);
      rd.get_doubles(bn.beta);
      rd.get_doubles(bn.running_mean);
      rd.get_doubles(bn.running_var);
      bn.momentum = rd.get<double>();
      bn.eps = rd.get<double>();
      m.norms.push_back(std::move(bn));
    }
    prev = widths[i];
  }
  m.head = DenseLayer{Matrix(prev, class_count), std::vector<double>(class_count)};
  rd.get_doubles(m.head.weights.data());
  rd.get_doubles(m.head.bias);
  if (!rd.at_end()) throw CheckpointError("trailing bytes after checkpoint");
  validate(m);
  return m;
}

inline void save_checkpoint(const MlpModel& m, const std::filesystem::path& path) {
  const auto bytes = serialize(m);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed: " + path.string());
}

inline MlpModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();
  return deserialize(bytes);
}

}  // namespace aetta::nn
