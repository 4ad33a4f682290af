#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctdg/nn.hpp"

namespace ctdg {

/// Raised for unreadable, truncated or otherwise malformed container files.
class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

enum class DType : uint8_t { f32 = 0, f64 = 1 };

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::f64;
  Tensor value;

  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

inline constexpr uint32_t kCheckpointVersion = 1;

// "CTDG" container: magic, u32 version, u32 entry count, then per entry a u16
// name length + UTF-8 name, dtype byte, rank byte, u32 extents and raw
// little-endian values.
std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> decode_checkpoint(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

/// Every parameter and buffer of the store, in registration order.
std::vector<CheckpointEntry> snapshot(const ParameterStore& store, DType dtype = DType::f64);
/// Copies matching entries into the store. Every store tensor must be
/// present with an identical shape.
void restore(ParameterStore& store, const std::vector<CheckpointEntry>& entries);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);

}  // namespace ctdg
