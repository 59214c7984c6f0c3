#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tapl/metaloop.hpp"

namespace tapl::harness {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct TensorRecord {
  Shape shape;
  std::vector<double> values;

  bool operator==(const TensorRecord&) const = default;
};

// Binary layout, all integers and floats little-endian:
//   "TAPL", u16 version, u32 length + config text,
//   u32 tensor count, per tensor: u8 rank, rank x u32 dims, f64 values,
//   adam: u64 t, f64 beta1 beta2 eps, u32 count, per slot u32 n + n f64 (m then v),
//   u32 rng count, per rng: u32 + name, u32 + state text,
//   u64 iteration.
struct Checkpoint {
  std::string config;
  std::vector<TensorRecord> tensors;  // MetaParams::flat() order
  metaloop::AdamState adam;
  std::vector<std::pair<std::string, std::string>> rng_states;
  std::uint64_t iteration = 0;

  bool operator==(const Checkpoint&) const = default;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<TensorRecord> capture(const metaloop::MetaParams& params);
/// Values from `records` in the layout of `like`; shapes must agree.
metaloop::MetaParams restore(const metaloop::MetaParams& like, const std::vector<TensorRecord>& records);

const std::string& rng_state(const Checkpoint& ckpt, std::string_view name);

}  // namespace tapl::harness
