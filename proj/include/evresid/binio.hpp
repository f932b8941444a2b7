#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace evresid {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Little-endian binary writers/readers. The build targets little-endian
// hosts; a static check keeps that assumption visible.
static_assert(sizeof(float) == 4 && sizeof(double) == 8);

class BinWriter {
public:
    explicit BinWriter(const std::string& path) : os_(path, std::ios::binary) {
        if (!os_) throw IoError("cannot open for writing: " + path);
        path_ = path;
    }

    void bytes(const void* p, size_t n) { os_.write(static_cast<const char*>(p), std::streamsize(n)); }
    void magic(const char m[4]) { bytes(m, 4); }
    template <typename T>
    void pod(T v) { bytes(&v, sizeof(T)); }

    void f32_array(const float* p, size_t n) { bytes(p, n * 4); }

    void close() {
        os_.flush();
        if (!os_) throw IoError("write failed: " + path_);
        os_.close();
    }

private:
    std::ofstream os_;
    std::string path_;
};

class BinReader {
public:
    explicit BinReader(const std::string& path) : is_(path, std::ios::binary) {
        if (!is_) throw IoError("cannot open: " + path);
        path_ = path;
    }

    size_t offset() const { return offset_; }
    const std::string& path() const { return path_; }

    void bytes(void* p, size_t n) {
        is_.read(static_cast<char*>(p), std::streamsize(n));
        if (size_t(is_.gcount()) != n)
            throw FormatError(path_ + ": truncated at byte offset " + std::to_string(offset_));
        offset_ += n;
    }
    template <typename T>
    T pod() {
        T v;
        bytes(&v, sizeof(T));
        return v;
    }
    void expect_magic(const char m[4]) {
        char got[4];
        bytes(got, 4);
        if (std::memcmp(got, m, 4) != 0)
            throw FormatError(path_ + ": bad magic at byte offset 0, expected '" +
                              std::string(m, 4) + "'");
    }
    bool at_eof() {
        is_.peek();
        return is_.eof();
    }

private:
    std::ifstream is_;
    std::string path_;
    size_t offset_ = 0;
};

} // namespace evresid
