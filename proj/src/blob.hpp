// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>

#include "tensor.hpp"

namespace can::blob {

enum class ElemType : uint8_t { f64 = 0, f32 = 1 };

// Wire layout: "CANT" magic, u8 version, u8 element type (0=f64, 1=f32),
// u8 ndim, ndim little-endian u32 dims, then raw little-endian elements in
// row-major order. No padding anywhere.
inline constexpr uint8_t kFormatVersion = 1;

void write(const std::filesystem::path& path, const Tensor& t, ElemType elem = ElemType::f64);
Tensor read(const std::filesystem::path& path);

std::vector<uint8_t> encode(const Tensor& t, ElemType elem = ElemType::f64);
Tensor decode(std::span<const uint8_t> bytes);

} // namespace can::blob
