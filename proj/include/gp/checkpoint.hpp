#pragma once

#include <cstring>
#include <fstream>

#include "gp/trainer.hpp"

namespace gp {

// Self-describing binary container, little-endian, float32 payload.
// Layout: magic "GPCK", version byte, model description hash, seed, epochs,
// then the parameter streams in a fixed order (aggregator, hypernet,
// classifier, BN bank sorted by (node, bucket)).
inline constexpr uint8_t kCheckpointVersion = 1;

struct CheckpointMeta {
  uint64_t model_hash = 0;
  uint64_t seed = 0;
  uint32_t epochs_completed = 0;
};

namespace detail {

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

template <typename S>
void write_values(std::ostream& out, const std::vector<S>& v) {
  write_pod<uint64_t>(out, v.size());
  for (S x : v) write_pod<float>(out, float(x));
}

template <typename S>
void read_values(std::istream& in, std::vector<S>& v) {
  uint64_t n = read_pod<uint64_t>(in);
  if (n != v.size())
    throw std::runtime_error("checkpoint: parameter block size " + std::to_string(n) +
                             " does not match model (" + std::to_string(v.size()) + ")");
  for (auto& x : v) x = S(read_pod<float>(in));
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, Pipeline<S>& p, const CheckpointMeta& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
  out.write("GPCK", 4);
  detail::write_pod<uint8_t>(out, kCheckpointVersion);
  detail::write_pod<uint64_t>(out, meta.model_hash);
  detail::write_pod<uint64_t>(out, meta.seed);
  detail::write_pod<uint32_t>(out, meta.epochs_completed);
  for (auto& t : p.main_params()) detail::write_values(out, t.data());
  detail::write_pod<uint64_t>(out, p.bn_bank.size());
  for (auto& [key, st] : p.bn_bank) {
    detail::write_pod<int32_t>(out, key.first);
    detail::write_pod<int32_t>(out, key.second);
    detail::write_values(out, st.scale.data());
    detail::write_values(out, st.shift.data());
    detail::write_values(out, st.moving_mean);
    detail::write_values(out, st.moving_var);
    detail::write_pod<uint8_t>(out, st.calibrated ? 1 : 0);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

template <typename S>
CheckpointMeta load_checkpoint(const std::string& path, Pipeline<S>& p, uint64_t expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "GPCK", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  uint8_t version = detail::read_pod<uint8_t>(in);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(int(version)));
  CheckpointMeta meta;
  meta.model_hash = detail::read_pod<uint64_t>(in);
  if (meta.model_hash != expected_hash)
    throw std::runtime_error("checkpoint: model description hash mismatch (checkpoint " +
                             std::to_string(meta.model_hash) + ", current " +
                             std::to_string(expected_hash) + ")");
  meta.seed = detail::read_pod<uint64_t>(in);
  meta.epochs_completed = detail::read_pod<uint32_t>(in);
  for (auto& t : p.main_params()) detail::read_values(in, t.data());
  uint64_t bn_count = detail::read_pod<uint64_t>(in);
  if (bn_count != p.bn_bank.size())
    throw std::runtime_error("checkpoint: BN bank size mismatch");
  for (auto& [key, st] : p.bn_bank) {
    int32_t node = detail::read_pod<int32_t>(in);
    int32_t bucket = detail::read_pod<int32_t>(in);
    if (node != key.first || bucket != key.second)
      throw std::runtime_error("checkpoint: BN bank ordering mismatch");
    detail::read_values(in, st.scale.data());
    detail::read_values(in, st.shift.data());
    detail::read_values(in, st.moving_mean);
    detail::read_values(in, st.moving_var);
    st.calibrated = detail::read_pod<uint8_t>(in) != 0;
  }
  return meta;
}

}  // namespace gp
