#include "midalign/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "midalign/errors.hpp"

namespace midalign::io {

namespace {

constexpr std::string_view kMagic = "MIDALIGN";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(std::string_view bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  }
  return v;
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, &f, sizeof bits);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_f32(std::string_view bytes, std::size_t at) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) {
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  }
  float f = 0;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

}  // namespace

std::int64_t TensorRecord::numel() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

const TensorRecord* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const TensorRecord& Checkpoint::at(std::string_view name) const {
  if (const auto* t = find(name)) return *t;
  throw FormatError("checkpoint has no tensor named '" + std::string(name) + "'");
}

std::string fnv1a64_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kHex[h & 0xF];
    h >>= 4;
  }
  return out;
}

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  std::string payload;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& t : checkpoint.tensors) {
    if (t.numel() != static_cast<std::int64_t>(t.data.size())) {
      throw FormatError("tensor '" + t.name + "' shape does not match its data length");
    }
    const auto offset = payload.size();
    for (float f : t.data) put_f32(payload, f);
    entries.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"offset", offset},
                       {"bytes", payload.size() - offset}});
  }
  nlohmann::json manifest = {{"format", "midalign-checkpoint"},
                             {"version", 1},
                             {"tensors", entries},
                             {"payload_bytes", payload.size()},
                             {"hash", "fnv1a64:" + fnv1a64_hex(payload)},
                             {"config", checkpoint.config}};
  const std::string text = manifest.dump();
  std::string out(kMagic);
  put_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != kMagic) {
    throw FormatError(origin + ": not a midalign checkpoint (bad magic)");
  }
  const auto manifest_len = get_u64(bytes, 8);
  if (manifest_len > bytes.size() - 16) throw FormatError(origin + ": truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": manifest is not valid JSON: " + e.what());
  }
  const std::string_view payload = bytes.substr(16 + manifest_len);
  try {
    if (manifest.at("payload_bytes").get<std::size_t>() != payload.size()) {
      throw FormatError(origin + ": payload length does not match manifest");
    }
    const std::string expected = manifest.at("hash").get<std::string>();
    if (expected != "fnv1a64:" + fnv1a64_hex(payload)) {
      throw FormatError(origin + ": payload hash mismatch");
    }
    Checkpoint ckpt;
    ckpt.config = manifest.value("config", nlohmann::json::object());
    std::size_t cursor = 0;
    for (const auto& e : manifest.at("tensors")) {
      TensorRecord t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto len = e.at("bytes").get<std::size_t>();
      if (offset != cursor) {
        throw FormatError(origin + ": tensor '" + t.name + "' offset is not contiguous");
      }
      if (len != static_cast<std::size_t>(t.numel()) * 4 || offset + len > payload.size()) {
        throw FormatError(origin + ": tensor '" + t.name + "' byte length disagrees with shape");
      }
      t.data.resize(static_cast<std::size_t>(t.numel()));
      for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = get_f32(payload, offset + 4 * i);
      cursor = offset + len;
      ckpt.tensors.push_back(std::move(t));
    }
    if (cursor != payload.size()) throw FormatError(origin + ": trailing bytes after last tensor");
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": malformed manifest: " + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

}  // namespace midalign::io
