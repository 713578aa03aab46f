#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "anatembed/common.hpp"

// PET1 tensor container: "PET1" magic, u8 dtype (1 = f32, 2 = u8), u8 rank,
// rank little-endian u64 extents, then the row-major payload, also little
// endian. Writes go to a temp file in the same directory followed by an
// atomic rename, so readers never observe a half-written tensor.

namespace anatembed::io {

constexpr uint8_t kDtypeF32 = 1;
constexpr uint8_t kDtypeU8 = 2;

namespace detail {

inline void put_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back((char)((v >> (8 * i)) & 0xFF));
}

inline uint64_t get_u64_le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= (uint64_t)p[i] << (8 * i);
  return v;
}

inline void write_file_atomic(const std::string& path, const std::string& head,
                              const void* payload, size_t payload_bytes) {
  std::filesystem::path target(path);
  if (target.has_parent_path())
    std::filesystem::create_directories(target.parent_path());
  std::string tmp = path + ".tmp";
  std::FILE* f = std::fopen(tmp.c_str(), "wb");
  require(f != nullptr, "io: cannot open ", tmp, " for writing");
  bool ok = std::fwrite(head.data(), 1, head.size(), f) == head.size();
  if (ok && payload_bytes)
    ok = std::fwrite(payload, 1, payload_bytes, f) == payload_bytes;
  ok = (std::fclose(f) == 0) && ok;
  if (!ok) {
    std::remove(tmp.c_str());
    fail("io: short write to ", tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) {
    std::remove(tmp.c_str());
    fail("io: rename ", tmp, " -> ", path, " failed: ", ec.message());
  }
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  require(f != nullptr, "io: cannot open ", path);
  std::fseek(f, 0, SEEK_END);
  long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<unsigned char> buf((size_t)sz);
  size_t got = sz ? std::fread(buf.data(), 1, (size_t)sz, f) : 0;
  std::fclose(f);
  require(got == (size_t)sz, "io: short read from ", path);
  return buf;
}

inline std::string pet_header(uint8_t dtype, const Shape& shape) {
  std::string head = "PET1";
  head.push_back((char)dtype);
  head.push_back((char)shape.size());
  for (int64_t e : shape) {
    require(e >= 0, "io: negative extent in shape ", shape_str(shape));
    put_u64_le(head, (uint64_t)e);
  }
  return head;
}

struct PetHeader {
  uint8_t dtype;
  Shape shape;
  size_t payload_offset;
};

inline PetHeader parse_pet_header(const std::vector<unsigned char>& buf,
                                  const std::string& path) {
  require(buf.size() >= 6, "io: ", path, " too short for a PET1 header");
  require(std::memcmp(buf.data(), "PET1", 4) == 0, "io: ", path,
          " does not start with PET1 magic");
  PetHeader h;
  h.dtype = buf[4];
  require(h.dtype == kDtypeF32 || h.dtype == kDtypeU8, "io: ", path,
          " has unknown dtype ", (int)h.dtype);
  uint8_t rank = buf[5];
  require(buf.size() >= 6 + (size_t)rank * 8, "io: ", path,
          " truncated extent table");
  for (int i = 0; i < rank; ++i)
    h.shape.push_back((int64_t)get_u64_le(buf.data() + 6 + (size_t)i * 8));
  h.payload_offset = 6 + (size_t)rank * 8;
  return h;
}

}  // namespace detail

inline void write_pet(const std::string& path, const Shape& shape,
                      const std::vector<float>& values) {
  require((int64_t)values.size() == numel(shape), "io: write_pet value count ",
          values.size(), " does not match shape ", shape_str(shape));
  static_assert(std::endian::native == std::endian::little,
                "payload serialization assumes a little-endian host");
  detail::write_file_atomic(path, detail::pet_header(kDtypeF32, shape),
                            values.data(), values.size() * sizeof(float));
}

inline void write_pet(const std::string& path, const Shape& shape,
                      const std::vector<uint8_t>& values) {
  require((int64_t)values.size() == numel(shape), "io: write_pet value count ",
          values.size(), " does not match shape ", shape_str(shape));
  detail::write_file_atomic(path, detail::pet_header(kDtypeU8, shape),
                            values.data(), values.size());
}

inline std::pair<Shape, std::vector<float>> read_pet_f32(const std::string& path) {
  auto buf = detail::read_file(path);
  auto h = detail::parse_pet_header(buf, path);
  require(h.dtype == kDtypeF32, "io: ", path, " holds dtype ", (int)h.dtype,
          ", expected f32");
  size_t n = (size_t)numel(h.shape);
  require(buf.size() == h.payload_offset + n * sizeof(float), "io: ", path,
          " payload size mismatch for shape ", shape_str(h.shape));
  std::vector<float> values(n);
  std::memcpy(values.data(), buf.data() + h.payload_offset, n * sizeof(float));
  return {std::move(h.shape), std::move(values)};
}

inline std::pair<Shape, std::vector<uint8_t>> read_pet_u8(const std::string& path) {
  auto buf = detail::read_file(path);
  auto h = detail::parse_pet_header(buf, path);
  require(h.dtype == kDtypeU8, "io: ", path, " holds dtype ", (int)h.dtype,
          ", expected u8");
  size_t n = (size_t)numel(h.shape);
  require(buf.size() == h.payload_offset + n, "io: ", path,
          " payload size mismatch for shape ", shape_str(h.shape));
  std::vector<uint8_t> values(buf.begin() + (long)h.payload_offset, buf.end());
  return {std::move(h.shape), std::move(values)};
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
  detail::write_file_atomic(path, text, nullptr, 0);
}

inline std::string read_text(const std::string& path) {
  auto buf = detail::read_file(path);
  return std::string(buf.begin(), buf.end());
}

}  // namespace anatembed::io
