#pragma once

// Portable binary array format used for images, labels, parameter trees,
// prototype dumps and matching matrices.
//
// Array record (all integers little-endian):
//   magic    4 bytes  "DCSA"
//   version  u8       1
//   dtype    u8       1=u8 2=i32 3=f32 4=f64
//   ndim     u8
//   reserved u8       0
//   dims     ndim x u64
//   payload  prod(dims) elements, row-major
//
// Named tensor bundle:
//   magic    4 bytes  "DCSB"
//   version  u8       1, then 3 reserved bytes
//   meta     u32 length + UTF-8 text (free-form, JSON by convention)
//   count    u32
//   entries  count x (u32 name length, name bytes, array record)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "ducisc/errors.hpp"

namespace ducisc {

enum class DType : std::uint8_t { U8 = 1, I32 = 2, F32 = 3, F64 = 4 };

template <class T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, std::uint8_t>) return DType::U8;
    else if constexpr (std::is_same_v<T, std::int32_t>) return DType::I32;
    else if constexpr (std::is_same_v<T, float>) return DType::F32;
    else {
        static_assert(std::is_same_v<T, double>, "unsupported element type");
        return DType::F64;
    }
}

inline std::size_t dtype_size(DType t) {
    switch (t) {
        case DType::U8: return 1;
        case DType::I32: return 4;
        case DType::F32: return 4;
        case DType::F64: return 8;
    }
    throw FormatError("unknown dtype code " + std::to_string(static_cast<int>(t)));
}

template <class T>
struct NdArray {
    std::vector<std::uint64_t> shape;
    std::vector<T> data;

    std::uint64_t count() const {
        std::uint64_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }
};

namespace detail {

template <class T>
T byteswap_value(T v) {
    if constexpr (sizeof(T) == 1 || std::endian::native == std::endian::little) {
        return v;
    } else {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
        return v;
    }
}

template <class T>
void put(std::ostream& os, T v) {
    v = byteswap_value(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError("truncated array stream");
    return byteswap_value(v);
}

template <class Src, class Dst>
void convert_payload(std::istream& is, std::uint64_t n, std::vector<Dst>& out) {
    std::vector<Src> raw(n);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(Src)));
    if (!is) throw FormatError("truncated array payload");
    out.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) out[i] = static_cast<Dst>(byteswap_value(raw[i]));
}

inline std::ifstream open_in(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) throw MissingFileError("missing file: " + p.string());
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot open " + p.string());
    return is;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + p.string());
    return os;
}

}  // namespace detail

template <class T>
void write_array(std::ostream& os, const NdArray<T>& a) {
    if (a.shape.size() > 255) throw ValidationError("too many dimensions");
    if (a.count() != a.data.size()) throw InternalError("array payload does not match its shape");
    os.write("DCSA", 4);
    detail::put<std::uint8_t>(os, 1);
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(a.shape.size()));
    detail::put<std::uint8_t>(os, 0);
    for (auto s : a.shape) detail::put<std::uint64_t>(os, s);
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(a.data.data()),
                 static_cast<std::streamsize>(a.data.size() * sizeof(T)));
    } else {
        for (const T& v : a.data) detail::put<T>(os, v);
    }
    if (!os) throw IoError("array write failed");
}

// Reads any stored dtype and converts to T.
template <class T>
NdArray<T> read_array(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DCSA", 4) != 0) throw FormatError("bad array magic");
    if (detail::get<std::uint8_t>(is) != 1) throw FormatError("unsupported array version");
    const auto code = static_cast<DType>(detail::get<std::uint8_t>(is));
    const auto ndim = detail::get<std::uint8_t>(is);
    detail::get<std::uint8_t>(is);
    NdArray<T> a;
    a.shape.resize(ndim);
    for (auto& s : a.shape) s = detail::get<std::uint64_t>(is);
    const auto n = a.count();
    switch (code) {
        case DType::U8: detail::convert_payload<std::uint8_t>(is, n, a.data); break;
        case DType::I32: detail::convert_payload<std::int32_t>(is, n, a.data); break;
        case DType::F32: detail::convert_payload<float>(is, n, a.data); break;
        case DType::F64: detail::convert_payload<double>(is, n, a.data); break;
        default: throw FormatError("unknown dtype code " + std::to_string(static_cast<int>(code)));
    }
    return a;
}

template <class T>
void save_array(const std::filesystem::path& p, const NdArray<T>& a) {
    auto os = detail::open_out(p);
    write_array(os, a);
}

template <class T>
NdArray<T> load_array(const std::filesystem::path& p) {
    auto is = detail::open_in(p);
    return read_array<T>(is);
}

// Ordered collection of named arrays plus a metadata string.
template <class T>
struct TensorBundle {
    std::string meta;
    std::vector<std::pair<std::string, NdArray<T>>> entries;

    const NdArray<T>* find(const std::string& name) const {
        for (const auto& [k, v] : entries)
            if (k == name) return &v;
        return nullptr;
    }
};

template <class T>
void save_bundle(const std::filesystem::path& p, const TensorBundle<T>& b) {
    auto os = detail::open_out(p);
    os.write("DCSB", 4);
    detail::put<std::uint8_t>(os, 1);
    for (int i = 0; i < 3; ++i) detail::put<std::uint8_t>(os, 0);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(b.meta.size()));
    os.write(b.meta.data(), static_cast<std::streamsize>(b.meta.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(b.entries.size()));
    for (const auto& [name, arr] : b.entries) {
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_array(os, arr);
    }
    if (!os) throw IoError("bundle write failed: " + p.string());
}

template <class T>
TensorBundle<T> load_bundle(const std::filesystem::path& p) {
    auto is = detail::open_in(p);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DCSB", 4) != 0) throw FormatError("bad bundle magic: " + p.string());
    if (detail::get<std::uint8_t>(is) != 1) throw FormatError("unsupported bundle version");
    for (int i = 0; i < 3; ++i) detail::get<std::uint8_t>(is);
    TensorBundle<T> b;
    b.meta.resize(detail::get<std::uint32_t>(is));
    is.read(b.meta.data(), static_cast<std::streamsize>(b.meta.size()));
    const auto count = detail::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(detail::get<std::uint32_t>(is), '\0');
        is.read(name.data(), static_cast<std::streamsize>(name.size()));
        if (!is) throw FormatError("truncated bundle entry name");
        b.entries.emplace_back(std::move(name), read_array<T>(is));
    }
    return b;
}

}  // namespace ducisc
