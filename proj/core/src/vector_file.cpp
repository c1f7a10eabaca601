// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstring>

#include "binary_io.hpp"
#include "lmort/error.hpp"
#include "lmort/retrieval.hpp"

namespace lmort {
namespace {

constexpr std::string_view kVectorMagic = "VEC1";

}  // namespace

bool operator==(const VectorSet& a, const VectorSet& b) {
  return a.ids == b.ids && a.rows.rows() == b.rows.rows() && a.rows.cols() == b.rows.cols() &&
         std::memcmp(a.rows.data(), b.rows.data(), sizeof(float) * static_cast<std::size_t>(a.rows.size())) == 0;
}

void write_vectors(const VectorSet& vectors, const std::filesystem::path& path) {
  if (static_cast<Eigen::Index>(vectors.ids.size()) != vectors.rows.rows()) {
    throw FormatError("vector set has " + std::to_string(vectors.ids.size()) + " ids but " +
                      std::to_string(vectors.rows.rows()) + " rows");
  }
  detail::BinaryWriter out(path, "vector file");
  out.magic(kVectorMagic);
  out.u32(static_cast<std::uint32_t>(vectors.rows.cols()));
  out.u64(vectors.ids.size());
  for (const auto& id : vectors.ids) out.string16(id);
  out.f32_array(std::span<const float>(vectors.rows.data(), static_cast<std::size_t>(vectors.rows.size())));
  out.finish();
}

VectorSet read_vectors(const std::filesystem::path& path) {
  detail::BinaryReader in(path, "vector file");
  in.expect_magic(kVectorMagic, "VEC1 vector");
  const std::uint32_t d = in.u32();
  const std::uint64_t count = in.u64();
  VectorSet vectors;
  for (std::uint64_t i = 0; i < count; ++i) {
    vectors.ids.push_back(in.string16());
  }
  if (count * d * sizeof(float) != in.remaining()) {
    in.fail("unexpected end of vector file");
  }
  vectors.rows.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(d));
  in.f32_array(std::span<float>(vectors.rows.data(), static_cast<std::size_t>(vectors.rows.size())));
  return vectors;
}

}  // namespace lmort
