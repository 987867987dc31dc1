#pragma once

#include "uika/common.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace uika::io {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Raw tensor files: little-endian float32 payload at `path`, JSON sidecar at
// `path + ".json"` holding {dtype, shape, layout}.

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> values;
};

void write_tensor(const fs::path& path, const std::vector<std::int64_t>& shape, std::span<const float> values);
Tensor read_tensor(const fs::path& path);

// ---------------------------------------------------------------------------
// PNG (8-bit). Colors are quantized with round-to-nearest after clamping.

void write_png(const fs::path& path, const Image& image);
void write_png_gray(const fs::path& path, int width, int height, std::span<const std::uint8_t> pixels);
Image read_png(const fs::path& path);
std::vector<std::uint8_t> read_png_gray(const fs::path& path, int& width, int& height);

// ---------------------------------------------------------------------------
// Binary asset container shared by model, avatar and checkpoint files:
//   8-byte magic | uint64 header length | UTF-8 JSON header | float32 blocks.
// Block offsets in the header are relative to the start of the payload.

class BlobWriter {
 public:
  /// Appends a float32 block and records {offset, count, shape} under `name`.
  void add(const std::string& name, std::span<const float> values, const std::vector<std::int64_t>& shape);
  void add_u32(const std::string& name, std::span<const std::uint32_t> values);

  /// Serializes to `path` atomically; `header` receives a "blocks" entry.
  void write(const fs::path& path, const std::array<char, 8>& magic, json header) const;

 private:
  std::vector<char> payload_;
  json blocks_ = json::object();
};

class BlobReader {
 public:
  BlobReader(const fs::path& path, const std::array<char, 8>& expected_magic);

  const json& header() const { return header_; }
  bool has(const std::string& name) const;
  std::vector<float> floats(const std::string& name) const;
  std::vector<std::uint32_t> u32(const std::string& name) const;
  std::vector<std::int64_t> shape(const std::string& name) const;

 private:
  const json& block(const std::string& name) const;

  fs::path path_;
  json header_;
  std::vector<char> payload_;
};

std::array<char, 8> magic(const char (&text)[8]);

// ---------------------------------------------------------------------------

std::vector<char> read_file(const fs::path& path);
/// Writes via a temporary sibling and rename.
void write_file_atomic(const fs::path& path, std::span<const char> bytes);
void write_text_atomic(const fs::path& path, const std::string& text);
json read_json(const fs::path& path);

/// FNV-1a 64-bit digest rendered as 16 hex characters.
std::string fnv1a64_hex(std::span<const char> bytes);
std::string file_hash(const fs::path& path);

template <typename Scalar>
std::vector<float> to_f32(const Scalar* data, std::size_t n) {
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(data[i]);
  return out;
}

}  // namespace uika::io
