#pragma once

// Little-endian primitives shared by the SSGF and SSGM formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssg/error.hpp"

namespace ssg::binary {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

class Writer {
public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void f32(float v) { raw(&v, sizeof v); }
    void f32s(std::span<const float> v) { raw(v.data(), v.size_bytes()); }

    const std::vector<char>& buffer() const { return buf_; }

private:
    void raw(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}

    std::string bytes(std::size_t n, const char* what) {
        std::string s(n, '\0');
        raw(s.data(), n, what);
        return s;
    }
    std::uint8_t u8(const char* what) {
        std::uint8_t v;
        raw(&v, 1, what);
        return v;
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        raw(&v, 4, what);
        return v;
    }
    void f32s(std::span<float> out, const char* what) { raw(out.data(), out.size_bytes(), what); }

    bool at_eof() { return in_.peek() == std::char_traits<char>::eof(); }

private:
    void raw(void* p, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw FormatError(std::string("truncated input while reading ") + what);
    }
    std::istream& in_;
};

}  // namespace ssg::binary
