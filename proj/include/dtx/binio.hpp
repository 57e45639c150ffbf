#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dtx/common.hpp"

namespace dtx {

// Little-endian binary stream helpers. Host is assumed little-endian
// (asserted at startup by the CLI); payloads are f32 on disk.
class BinWriter {
public:
    explicit BinWriter(const std::string& path)
        : f_(path, std::ios::binary | std::ios::trunc) {
        check(f_.good(), ErrorKind::data, "cannot open for write: " + path);
        path_ = path;
    }

    void magic(const char m[4]) { f_.write(m, 4); }
    void u16(uint16_t v) { raw(&v, 2); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }
    void f32s(const double* p, size_t n) {
        std::vector<float> buf(n);
        for (size_t i = 0; i < n; ++i) buf[i] = static_cast<float>(p[i]);
        raw(buf.data(), n * 4);
    }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void raw(const void* p, size_t n) { f_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

    void close() {
        f_.close();
        check(!f_.fail(), ErrorKind::data, "write failed: " + path_);
    }

private:
    std::ofstream f_;
    std::string path_;
};

class BinReader {
public:
    explicit BinReader(const std::string& path)
        : f_(path, std::ios::binary) {
        check(f_.good(), ErrorKind::data, "cannot open for read: " + path);
        path_ = path;
    }

    void expect_magic(const char m[4]) {
        char got[4] = {0, 0, 0, 0};
        f_.read(got, 4);
        if (f_.gcount() != 4 || std::memcmp(got, m, 4) != 0)
            throw FileFormatError(FormatError::bad_magic,
                                  path_ + ": bad magic (expected " + std::string(m, 4) + ")");
    }
    void expect_version(uint32_t want) {
        uint32_t v = u32();
        if (v != want)
            throw FileFormatError(FormatError::bad_version,
                                  path_ + ": unsupported version");
    }
    uint16_t u16() { uint16_t v; raw(&v, 2); return v; }
    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    float f32() { float v; raw(&v, 4); return v; }
    void f32s(double* p, size_t n) {
        std::vector<float> buf(n);
        raw(buf.data(), n * 4);
        for (size_t i = 0; i < n; ++i) p[i] = buf[i];
    }
    std::string str() {
        uint32_t n = u32();
        check(n <= (1u << 26), ErrorKind::data, path_ + ": unreasonable string length");
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
    void raw(void* p, size_t n) {
        f_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(f_.gcount()) != n)
            throw FileFormatError(FormatError::truncated, path_ + ": truncated payload");
    }
    bool at_eof() {
        return f_.peek() == std::char_traits<char>::eof();
    }

private:
    std::ifstream f_;
    std::string path_;
};

}  // namespace dtx
