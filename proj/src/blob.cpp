// SPDX-License-Identifier: Apache-2.0

#include "blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace can::blob {

static_assert(std::endian::native == std::endian::little,
              "blob codec assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'A', 'N', 'T'};

template <typename T>
void append_raw(std::vector<uint8_t>& out, const T& v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take_raw(std::span<const uint8_t>& bytes) {
    require(bytes.size() >= sizeof(T), ErrorKind::format, "blob truncated");
    T v;
    std::memcpy(&v, bytes.data(), sizeof(T));
    bytes = bytes.subspan(sizeof(T));
    return v;
}

} // namespace

std::vector<uint8_t> encode(const Tensor& t, ElemType elem) {
    require(t.ndim() <= 255, ErrorKind::invalid_argument, "blob: rank exceeds 255");
    std::vector<uint8_t> out;
    out.reserve(7 + 4 * static_cast<size_t>(t.ndim()) +
                static_cast<size_t>(t.numel()) * (elem == ElemType::f64 ? 8 : 4));
    out.insert(out.end(), kMagic, kMagic + 4);
    out.push_back(kFormatVersion);
    out.push_back(static_cast<uint8_t>(elem));
    out.push_back(static_cast<uint8_t>(t.ndim()));
    for (int64_t d : t.shape()) {
        require(d <= std::numeric_limits<uint32_t>::max(), ErrorKind::invalid_argument,
                "blob: dimension exceeds u32");
        append_raw(out, static_cast<uint32_t>(d));
    }
    if (elem == ElemType::f64) {
        for (int64_t i = 0; i < t.numel(); ++i) {
            append_raw(out, t[i]);
        }
    } else {
        for (int64_t i = 0; i < t.numel(); ++i) {
            append_raw(out, static_cast<float>(t[i]));
        }
    }
    return out;
}

Tensor decode(std::span<const uint8_t> bytes) {
    require(bytes.size() >= 7, ErrorKind::format, "blob: header truncated");
    require(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::format,
            "blob: bad magic, not a CANT tensor");
    bytes = bytes.subspan(4);
    const uint8_t version = take_raw<uint8_t>(bytes);
    require(version == kFormatVersion, ErrorKind::format,
            "blob: unsupported format version " + std::to_string(version));
    const uint8_t elem_code = take_raw<uint8_t>(bytes);
    require(elem_code <= 1, ErrorKind::format,
            "blob: unknown element type " + std::to_string(elem_code));
    const uint8_t ndim = take_raw<uint8_t>(bytes);

    std::vector<int64_t> shape(ndim);
    int64_t numel = 1;
    for (auto& d : shape) {
        d = take_raw<uint32_t>(bytes);
        numel *= d;
    }
    const size_t elem_size = elem_code == 0 ? 8 : 4;
    require(bytes.size() == static_cast<size_t>(numel) * elem_size, ErrorKind::format,
            "blob: payload size does not match dims");

    std::vector<double> data(static_cast<size_t>(numel));
    if (elem_code == 0) {
        std::memcpy(data.data(), bytes.data(), bytes.size());
    } else {
        for (int64_t i = 0; i < numel; ++i) {
            float f;
            std::memcpy(&f, bytes.data() + static_cast<size_t>(i) * 4, 4);
            data[static_cast<size_t>(i)] = static_cast<double>(f);
        }
    }
    return Tensor(std::move(shape), std::move(data));
}

void write(const std::filesystem::path& path, const Tensor& t, ElemType elem) {
    const auto bytes = encode(t, elem);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), ErrorKind::io, "cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    require(f.good(), ErrorKind::io, "write failed: " + path.string());
}

Tensor read(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    require(f.good(), ErrorKind::io, "cannot open: " + path.string());
    const auto size = static_cast<size_t>(f.tellg());
    f.seekg(0);
    std::vector<uint8_t> bytes(size);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    require(f.good(), ErrorKind::io, "read failed: " + path.string());
    return decode(bytes);
}

} // namespace can::blob
