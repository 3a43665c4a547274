#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tadlab/common.hpp"

namespace tadlab {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are not supported");

uint32_t crc32(std::span<const uint8_t> bytes, uint32_t seed = 0);

// Append-only byte buffer for the binary container formats.
class ByteWriter {
public:
    void u16(uint16_t v) { raw(&v, 2); }
    void u32(uint32_t v) { raw(&v, 4); }
    void f32(float v) { raw(&v, 4); }
    void f32s(std::span<const float> v) { raw(v.data(), v.size() * 4); }
    void str(std::string_view s) {
        u16(uint16_t(s.size()));
        raw(s.data(), s.size());
    }
    void bytes(std::string_view s) { raw(s.data(), s.size()); }

    const std::vector<uint8_t>& data() const { return buf_; }
    size_t size() const { return buf_.size(); }

private:
    void raw(const void* p, size_t n) {
        size_t at = buf_.size();
        buf_.resize(at + n);
        std::memcpy(buf_.data() + at, p, n);
    }
    std::vector<uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const uint8_t> bytes) : bytes_(bytes) {}

    uint16_t u16() { return read<uint16_t>(); }
    uint32_t u32() { return read<uint32_t>(); }
    float f32() { return read<float>(); }
    std::vector<float> f32s(size_t n) {
        need(n * 4);
        std::vector<float> v(n);
        std::memcpy(v.data(), bytes_.data() + pos_, n * 4);
        pos_ += n * 4;
        return v;
    }
    std::string str() {
        size_t n = u16();
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    size_t pos() const { return pos_; }
    size_t remaining() const { return bytes_.size() - pos_; }
    std::span<const uint8_t> slice(size_t begin, size_t end) const {
        return bytes_.subspan(begin, end - begin);
    }

private:
    template <class T>
    T read() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(size_t n) {
        if (remaining() < n) throw IoError(IoError::Kind::truncated, "truncated payload");
    }
    std::span<const uint8_t> bytes_;
    size_t pos_ = 0;
};

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);
std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace tadlab
