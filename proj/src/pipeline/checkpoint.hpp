#pragma once

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "encoder/encoder.hpp"
#include "numcore/tensor.hpp"

namespace dast::pipeline {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Named tensors plus string metadata. File layout (little-endian):
//   "DLCKPT1\0", u32 version, u32 tensor count,
//   per tensor: u16 name length, name, u32 rank, u64 dims…, f64 data…
//   u32 metadata count, per entry: u32 key length, key, u32 value length, value
//   u64 FNV-1a of every preceding byte
struct Checkpoint {
  std::vector<std::pair<std::string, nc::Tensor>> tensors;
  std::map<std::string, std::string> meta;

  const nc::Tensor* find(const std::string& name) const;
  const std::string& meta_at(const std::string& key) const;
  bool operator==(const Checkpoint& other) const;
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::vector<unsigned char> bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// Throws CheckpointError on any format problem; nothing is returned partially.
Checkpoint load_checkpoint(const std::string& path);

using VisitAll = std::function<void(const encoder::ParamVisitor&)>;

// Copies every visited parameter into the checkpoint.
void collect_params(Checkpoint& ckpt, const VisitAll& visit);
// Overwrites every visited parameter; names and shapes must match exactly.
void restore_params(const Checkpoint& ckpt, const VisitAll& visit);

}  // namespace dast::pipeline
