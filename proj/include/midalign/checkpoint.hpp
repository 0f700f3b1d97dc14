#pragma once

// Checkpoint array format.
//
//   bytes 0..7    magic "MIDALIGN"
//   bytes 8..15   manifest length N, unsigned 64-bit little-endian
//   next N bytes  manifest, UTF-8 JSON
//   remainder     payload: 32-bit little-endian floats, row-major, tensors
//                 concatenated in manifest order
//
// The manifest lists every tensor with name, shape, byte offset and byte
// length (offsets contiguous from 0), the payload size, an FNV-1a 64-bit hash
// of the payload and a free-form config snapshot.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace midalign::io {

struct TensorRecord {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
};

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  const TensorRecord& at(std::string_view name) const;
  const TensorRecord* find(std::string_view name) const;
};

std::string fnv1a64_hex(std::string_view bytes);

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin = "<memory>");

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Whole-file helpers shared by the writers of JSON, CSV and JSON-lines artifacts.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace midalign::io
