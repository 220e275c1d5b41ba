#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ipg/tensor.hpp"

namespace ipg {

// Binary container: magic "IPGCKPT1", u32 container version, u32 kind,
// key/value metadata, then named float64 tensors. All integers and floats are
// little-endian. See docs/formats.md for the byte-exact layout.
constexpr uint32_t kCheckpointVersion = 1;
constexpr uint32_t kPolicyCheckpointKind = 1;
constexpr uint32_t kSaeCheckpointKind = 2;

struct CheckpointPayload {
  uint32_t kind = 0;
  std::vector<std::pair<std::string, int64_t>> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  int64_t meta_value(const std::string& key) const;
};

void save_checkpoint(const std::string& path, const CheckpointPayload& payload);
CheckpointPayload load_checkpoint(const std::string& path);

// Row-major float32 activation matrix with provenance: magic "IPGACTS1",
// u32 version, u32 layer, u64 width, u64 row count, u64 source policy hash.
struct ActivationDump {
  int layer = 0;
  int64_t width = 0;
  uint64_t policy_hash = 0;
  std::vector<float> rows;  // count * width values

  int64_t count() const { return width == 0 ? 0 : static_cast<int64_t>(rows.size()) / width; }
};

void save_activations(const std::string& path, const ActivationDump& dump);
ActivationDump load_activations(const std::string& path);

}  // namespace ipg
