#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "matrix.hpp"

namespace nbr {

// Versioned self-describing tensor container. Layout (little-endian):
//   magic "NBRCKPT\0" | u32 version | u32 kind length | kind bytes
//   | u64 meta length | meta JSON bytes | u64 tensor count
//   | per tensor: u32 name length | name | u32 rows | u32 cols | doubles
// Round-trips bit-exactly; loads reject version or kind mismatches, short
// files, and trailing bytes.

inline constexpr uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
  std::string kind;
  nlohmann::json meta;
  std::map<std::string, Matrix> tensors;
};

void save_checkpoint_file(const std::string& path, const std::string& kind,
                          const nlohmann::json& meta,
                          const std::vector<std::pair<std::string, const Matrix*>>& tensors);

LoadedCheckpoint load_checkpoint_file(const std::string& path, const std::string& expected_kind);

}  // namespace nbr
