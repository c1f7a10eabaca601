// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lmort::detail {

// Little-endian writer. Every file format in the toolkit goes through here.
class BinaryWriter {
 public:
  BinaryWriter(const std::filesystem::path& path, std::string_view what);

  void bytes(const void* data, std::size_t size);
  void magic(std::string_view four_chars);
  void u8(std::uint8_t value);
  void u16(std::uint16_t value);
  void u32(std::uint32_t value);
  void u64(std::uint64_t value);
  void f32(float value);
  void f64(double value);
  // u16 length prefix followed by the raw bytes.
  void string16(std::string_view text);
  void f32_array(std::span<const float> values);
  void f64_array(std::span<const double> values);

  // Flushes and closes; returns total bytes written.
  std::uint64_t finish();

 private:
  std::filesystem::path path_;
  std::string what_;
  std::ofstream out_;
  std::uint64_t written_ = 0;
};

// Reads the whole file up front; all accessors throw FormatError on truncation.
class BinaryReader {
 public:
  BinaryReader(const std::filesystem::path& path, std::string_view what);

  // Throws FormatError("not an <expected_name> file") on mismatch.
  void expect_magic(std::string_view four_chars, std::string_view expected_name);
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string string16();
  void f32_array(std::span<float> out);
  void f64_array(std::span<double> out);

  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  const std::filesystem::path& path() const { return path_; }

  [[noreturn]] void fail(const std::string& message) const;

 private:
  const std::uint8_t* take(std::size_t size);

  std::filesystem::path path_;
  std::string what_;
  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace lmort::detail
