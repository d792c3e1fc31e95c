#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>

#include "emargin/errors.hpp"

// Little-endian binary primitives and whole-file IO shared by the on-disk
// container formats (batch files, checkpoints).

namespace emargin::bytes {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline void put_f32(std::string& out, float v) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline void put_i32(std::string& out, std::int32_t v) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
}

// Sequential view over a byte buffer; every read names what it was after so
// truncation errors point at the offending field.
class ByteReader {
public:
    ByteReader(std::string bytes, std::string path)
        : bytes_(std::move(bytes)), path_(std::move(path)) {}

    std::string take(std::size_t n, const char* what) {
        if (pos_ + n > bytes_.size()) {
            throw FormatError(path_ + ": truncated while reading " + what);
        }
        std::string chunk = bytes_.substr(pos_, n);
        pos_ += n;
        return chunk;
    }

    std::uint32_t take_u32(const char* what) {
        const std::string b = take(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) {
            v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
        }
        return v;
    }

    std::uint64_t take_u64(const char* what) {
        const std::string b = take(8, what);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) {
            v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
        }
        return v;
    }

    float take_f32(const char* what) { return std::bit_cast<float>(take_u32(what)); }
    std::int32_t take_i32(const char* what) {
        return std::bit_cast<std::int32_t>(take_u32(what));
    }

    bool exhausted() const { return pos_ == bytes_.size(); }
    const std::string& path() const { return path_; }

private:
    std::string bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

inline std::string slurp_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

// Writes via a sibling temp file and renames into place, so readers never
// observe a half-written file.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open " + tmp + " for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw IoError("write to " + tmp + " failed");
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw IoError("rename " + tmp + " -> " + path + " failed");
    }
}

}  // namespace emargin::bytes
