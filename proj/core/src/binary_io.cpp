// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include "binary_io.hpp"

#include <bit>
#include <cstring>
#include <limits>

#include "lmort/error.hpp"

namespace lmort::detail {
namespace {

template <typename UInt>
void store_le(std::uint8_t* out, UInt value) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    out[i] = static_cast<std::uint8_t>(value >> (8 * i));
  }
}

template <typename UInt>
UInt load_le(const std::uint8_t* in) {
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    value |= static_cast<UInt>(in[i]) << (8 * i);
  }
  return value;
}

}  // namespace

BinaryWriter::BinaryWriter(const std::filesystem::path& path, std::string_view what)
    : path_(path), what_(what), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) {
    throw DataError("cannot open " + what_ + " for writing: " + path_.string());
  }
}

void BinaryWriter::bytes(const void* data, std::size_t size) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out_) {
    throw DataError("write failed for " + what_ + ": " + path_.string());
  }
  written_ += size;
}

void BinaryWriter::magic(std::string_view four_chars) { bytes(four_chars.data(), 4); }

void BinaryWriter::u8(std::uint8_t value) { bytes(&value, 1); }

void BinaryWriter::u16(std::uint16_t value) {
  std::uint8_t buf[2];
  store_le(buf, value);
  bytes(buf, sizeof buf);
}

void BinaryWriter::u32(std::uint32_t value) {
  std::uint8_t buf[4];
  store_le(buf, value);
  bytes(buf, sizeof buf);
}

void BinaryWriter::u64(std::uint64_t value) {
  std::uint8_t buf[8];
  store_le(buf, value);
  bytes(buf, sizeof buf);
}

void BinaryWriter::f32(float value) { u32(std::bit_cast<std::uint32_t>(value)); }

void BinaryWriter::f64(double value) { u64(std::bit_cast<std::uint64_t>(value)); }

void BinaryWriter::string16(std::string_view text) {
  if (text.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw FormatError("string longer than 65535 bytes in " + what_);
  }
  u16(static_cast<std::uint16_t>(text.size()));
  bytes(text.data(), text.size());
}

void BinaryWriter::f32_array(std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    bytes(values.data(), values.size_bytes());
  } else {
    for (float v : values) f32(v);
  }
}

void BinaryWriter::f64_array(std::span<const double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    bytes(values.data(), values.size_bytes());
  } else {
    for (double v : values) f64(v);
  }
}

std::uint64_t BinaryWriter::finish() {
  out_.flush();
  out_.close();
  if (out_.fail()) {
    throw DataError("failed to finalize " + what_ + ": " + path_.string());
  }
  return written_;
}

BinaryReader::BinaryReader(const std::filesystem::path& path, std::string_view what)
    : path_(path), what_(what) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) {
    throw DataError("cannot open " + what_ + ": " + path_.string());
  }
  const auto size = static_cast<std::size_t>(in.tellg());
  data_.resize(size);
  in.seekg(0);
  if (size > 0 && !in.read(reinterpret_cast<char*>(data_.data()), static_cast<std::streamsize>(size))) {
    throw DataError("read failed for " + what_ + ": " + path_.string());
  }
}

void BinaryReader::fail(const std::string& message) const {
  throw FormatError(message + ": " + path_.string());
}

const std::uint8_t* BinaryReader::take(std::size_t size) {
  if (size > remaining()) {
    fail("unexpected end of " + what_);
  }
  const std::uint8_t* p = data_.data() + pos_;
  pos_ += size;
  return p;
}

void BinaryReader::expect_magic(std::string_view four_chars, std::string_view expected_name) {
  if (remaining() < 4 || std::memcmp(data_.data() + pos_, four_chars.data(), 4) != 0) {
    fail("not an " + std::string(expected_name) + " file");
  }
  pos_ += 4;
}

std::uint8_t BinaryReader::u8() { return *take(1); }
std::uint16_t BinaryReader::u16() { return load_le<std::uint16_t>(take(2)); }
std::uint32_t BinaryReader::u32() { return load_le<std::uint32_t>(take(4)); }
std::uint64_t BinaryReader::u64() { return load_le<std::uint64_t>(take(8)); }
float BinaryReader::f32() { return std::bit_cast<float>(u32()); }
double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

std::string BinaryReader::string16() {
  const std::uint16_t len = u16();
  const std::uint8_t* p = take(len);
  return std::string(reinterpret_cast<const char*>(p), len);
}

void BinaryReader::f32_array(std::span<float> out) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), take(out.size_bytes()), out.size_bytes());
  } else {
    for (float& v : out) v = f32();
  }
}

void BinaryReader::f64_array(std::span<double> out) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), take(out.size_bytes()), out.size_bytes());
  } else {
    for (double& v : out) v = f64();
  }
}

}  // namespace lmort::detail
