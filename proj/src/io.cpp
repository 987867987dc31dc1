#include "uika/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "asset formats assume a little-endian host");

namespace uika::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

std::uint8_t quantize(double v) {
  if (!(v > 0.0)) return 0;  // also maps NaN to 0
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

void write_png_raw(const fs::path& path, int width, int height, int color_type,
                   std::span<const std::uint8_t> pixels, int channels) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    FilePtr f = open_file(tmp, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw IoError("png encode failed for " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    // Pin zlib settings so byte output is reproducible.
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
      png_write_row(png, const_cast<png_bytep>(pixels.data() + std::size_t(y) * width * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  fs::rename(tmp, path);
}

std::vector<std::uint8_t> read_png_raw(const fs::path& path, int& width, int& height, int channels) {
  FilePtr f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("png decode failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (channels == 3 && (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA))
    png_set_gray_to_rgb(png);
  if (channels == 1 && (color_type == PNG_COLOR_TYPE_RGB || color_type == PNG_COLOR_TYPE_RGB_ALPHA))
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  if (static_cast<int>(png_get_channels(png, info)) != channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("unexpected channel count in " + path.string());
  }
  out.resize(std::size_t(width) * height * channels);
  for (int y = 0; y < height; ++y) png_read_row(png, out.data() + std::size_t(y) * width * channels, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace

std::array<char, 8> magic(const char (&text)[8]) {
  std::array<char, 8> m{};
  std::memcpy(m.data(), text, 7);
  m[7] = '\0';
  return m;
}

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<char> bytes(size);
  in.read(bytes.data(), static_cast<std::streamsize>(size));
  if (!in) throw IoError("short read on " + path.string());
  return bytes;
}

void write_file_atomic(const fs::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const char>(text.data(), text.size()));
}

json read_json(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string fnv1a64_hex(std::span<const char> bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : bytes) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const fs::path& path) { return fnv1a64_hex(read_file(path)); }

void write_tensor(const fs::path& path, const std::vector<std::int64_t>& shape, std::span<const float> values) {
  std::int64_t count = 1;
  for (auto d : shape) count *= d;
  require(count == static_cast<std::int64_t>(values.size()), "tensor shape does not match value count");
  write_file_atomic(path, std::span<const char>(reinterpret_cast<const char*>(values.data()), values.size() * 4));
  json side = {{"dtype", "float32"}, {"shape", shape}, {"layout", "row-major"}};
  fs::path sidecar = path;
  sidecar += ".json";
  write_text_atomic(sidecar, side.dump());
}

Tensor read_tensor(const fs::path& path) {
  fs::path sidecar = path;
  sidecar += ".json";
  const json side = read_json(sidecar);
  if (side.value("dtype", "") != "float32" || side.value("layout", "") != "row-major")
    throw FormatError(sidecar.string() + ": expected float32 row-major tensor");
  Tensor t;
  t.shape = side.at("shape").get<std::vector<std::int64_t>>();
  std::int64_t count = 1;
  for (auto d : t.shape) count *= d;
  const auto bytes = read_file(path);
  if (static_cast<std::int64_t>(bytes.size()) != count * 4)
    throw FormatError(path.string() + ": payload size " + std::to_string(bytes.size()) + " does not match shape");
  t.values.resize(static_cast<std::size_t>(count));
  std::memcpy(t.values.data(), bytes.data(), bytes.size());
  return t;
}

void write_png(const fs::path& path, const Image& image) {
  std::vector<std::uint8_t> px(image.data.size());
  std::transform(image.data.begin(), image.data.end(), px.begin(), quantize);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_png_raw(path, image.width, image.height, PNG_COLOR_TYPE_RGB, px, 3);
}

void write_png_gray(const fs::path& path, int width, int height, std::span<const std::uint8_t> pixels) {
  require(pixels.size() == std::size_t(width) * height, "gray png size mismatch");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_png_raw(path, width, height, PNG_COLOR_TYPE_GRAY, pixels, 1);
}

Image read_png(const fs::path& path) {
  int w = 0, h = 0;
  const auto px = read_png_raw(path, w, h, 3);
  Image img(w, h);
  for (std::size_t i = 0; i < px.size(); ++i) img.data[i] = px[i] / 255.0;
  return img;
}

std::vector<std::uint8_t> read_png_gray(const fs::path& path, int& width, int& height) {
  return read_png_raw(path, width, height, 1);
}

// ---------------------------------------------------------------------------

void BlobWriter::add(const std::string& name, std::span<const float> values, const std::vector<std::int64_t>& shape) {
  const std::size_t offset = payload_.size();
  payload_.resize(offset + values.size() * 4);
  std::memcpy(payload_.data() + offset, values.data(), values.size() * 4);
  blocks_[name] = {{"offset", offset}, {"count", values.size()}, {"shape", shape}, {"dtype", "float32"}};
}

void BlobWriter::add_u32(const std::string& name, std::span<const std::uint32_t> values) {
  const std::size_t offset = payload_.size();
  payload_.resize(offset + values.size() * 4);
  std::memcpy(payload_.data() + offset, values.data(), values.size() * 4);
  blocks_[name] = {{"offset", offset},
                   {"count", values.size()},
                   {"shape", std::vector<std::int64_t>{static_cast<std::int64_t>(values.size())}},
                   {"dtype", "uint32"}};
}

void BlobWriter::write(const fs::path& path, const std::array<char, 8>& magic_bytes, json header) const {
  header["blocks"] = blocks_;
  header["payload_bytes"] = payload_.size();
  const std::string text = header.dump();
  std::vector<char> out;
  out.reserve(16 + text.size() + payload_.size());
  out.insert(out.end(), magic_bytes.begin(), magic_bytes.end());
  const std::uint64_t len = text.size();
  const char* len_bytes = reinterpret_cast<const char*>(&len);
  out.insert(out.end(), len_bytes, len_bytes + 8);
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload_.begin(), payload_.end());
  write_file_atomic(path, out);
}

BlobReader::BlobReader(const fs::path& path, const std::array<char, 8>& expected_magic) : path_(path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 16) throw FormatError(path.string() + ": truncated file (" + std::to_string(bytes.size()) + " bytes)");
  if (!std::equal(expected_magic.begin(), expected_magic.end(), bytes.begin())) {
    std::string found;
    for (int i = 0; i < 8; ++i) {
      const unsigned char c = static_cast<unsigned char>(bytes[i]);
      if (c >= 32 && c < 127) {
        found += static_cast<char>(c);
      } else {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "\\x%02x", c);
        found += buf;
      }
    }
    throw FormatError(path.string() + ": bad magic '" + found + "'");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  if (16 + len > bytes.size()) throw FormatError(path.string() + ": truncated header");
  try {
    header_ = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": corrupt header: " + e.what());
  }
  payload_.assign(bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len), bytes.end());
  const auto expected = header_.value("payload_bytes", std::size_t{0});
  if (payload_.size() < expected)
    throw FormatError(path.string() + ": truncated payload (" + std::to_string(payload_.size()) + " of " +
                      std::to_string(expected) + " bytes)");
}

bool BlobReader::has(const std::string& name) const {
  return header_.contains("blocks") && header_["blocks"].contains(name);
}

const json& BlobReader::block(const std::string& name) const {
  if (!has(name)) throw FormatError(path_.string() + ": missing block '" + name + "'");
  return header_["blocks"][name];
}

std::vector<float> BlobReader::floats(const std::string& name) const {
  const json& b = block(name);
  const auto offset = b.at("offset").get<std::size_t>();
  const auto count = b.at("count").get<std::size_t>();
  if (offset + count * 4 > payload_.size()) throw FormatError(path_.string() + ": block '" + name + "' out of range");
  std::vector<float> out(count);
  std::memcpy(out.data(), payload_.data() + offset, count * 4);
  return out;
}

std::vector<std::uint32_t> BlobReader::u32(const std::string& name) const {
  const json& b = block(name);
  const auto offset = b.at("offset").get<std::size_t>();
  const auto count = b.at("count").get<std::size_t>();
  if (offset + count * 4 > payload_.size()) throw FormatError(path_.string() + ": block '" + name + "' out of range");
  std::vector<std::uint32_t> out(count);
  std::memcpy(out.data(), payload_.data() + offset, count * 4);
  return out;
}

std::vector<std::int64_t> BlobReader::shape(const std::string& name) const {
  return block(name).at("shape").get<std::vector<std::int64_t>>();
}

}  // namespace uika::io
