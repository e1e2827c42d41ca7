// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <rayvis/image.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

namespace rayvis::detail {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

inline void put_u32(std::string &out, std::uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.append(buf, 4);
}

inline void put_f32(std::string &out, float v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.append(buf, 4);
}

inline void put_f64(std::string &out, double v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.append(buf, 8);
}

/// Sequential reader over a byte buffer; throws FormatError on truncation.
class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    void expect_magic(std::string_view magic) {
        if (bytes_.substr(0, magic.size()) != magic)
            throw FormatError(what_ + ": bad magic, expected \"" + std::string(magic) + "\"");
        pos_ = magic.size();
    }

    std::uint32_t u32() { return get<std::uint32_t>(); }
    float f32() { return get<float>(); }
    double f64() { return get<double>(); }

    std::size_t remaining() const { return bytes_.size() - pos_; }

    void expect_end() const {
        if (remaining() != 0)
            throw FormatError(what_ + ": " + std::to_string(remaining()) + " trailing bytes");
    }

private:
    template <class T> T get() {
        if (remaining() < sizeof(T))
            throw FormatError(what_ + ": truncated file");
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string_view bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

} // namespace rayvis::detail
