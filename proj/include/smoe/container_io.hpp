#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>

#include "smoe/heatgen.hpp"
#include "smoe/xxhash64.hpp"

static_assert(std::endian::native == std::endian::little,
              "file containers are little-endian; bulk IO assumes a little-endian host");

namespace smoe {

// Serializer that checksums every byte as it goes out, so a trailing digest
// can be emitted without a second pass over the file.
struct HashedWriter {
    std::ofstream out;
    Xxhash64 hash;
    int64_t offset = 0;

    explicit HashedWriter(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw std::runtime_error("cannot open for writing: " + path);
    }
    void bytes(const void* p, size_t n) {
        out.write(static_cast<const char*>(p), std::streamsize(n));
        hash.update(p, n);
        offset += int64_t(n);
    }
    void u32(uint32_t v) { bytes(&v, 4); }
    void u64(uint64_t v) { bytes(&v, 8); }
    void f32(float v) { bytes(&v, 4); }
    void finish() {
        uint64_t digest = hash.digest();
        out.write(reinterpret_cast<const char*>(&digest), 8);
        if (!out) throw std::runtime_error("write failed");
        out.close();
    }
};

struct HashedReader {
    std::ifstream in;
    Xxhash64 hash;
    int64_t offset = 0;

    explicit HashedReader(const std::string& path) : in(path, std::ios::binary) {
        if (!in) throw std::runtime_error("cannot open for reading: " + path);
    }
    void bytes(void* p, size_t n) {
        int64_t at = offset;
        in.read(static_cast<char*>(p), std::streamsize(n));
        if (size_t(in.gcount()) != n) throw FormatError("unexpected end of file", at);
        hash.update(p, n);
        offset += int64_t(n);
    }
    uint32_t u32() {
        uint32_t v;
        bytes(&v, 4);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        bytes(&v, 8);
        return v;
    }
    // The stored digest itself is not part of the hashed span.
    uint64_t trailing_digest() {
        int64_t at = offset;
        uint64_t v;
        in.read(reinterpret_cast<char*>(&v), 8);
        if (in.gcount() != 8) throw FormatError("unexpected end of file", at);
        offset += 8;
        return v;
    }
    // Digest check shared by all containers: reads the trailing u64 and
    // compares it against everything hashed so far.
    void verify_trailing_digest() {
        uint64_t computed = hash.digest();
        int64_t digest_at = offset;
        uint64_t stored = trailing_digest();
        if (stored != computed) throw FormatError("checksum mismatch, file is corrupt", digest_at);
    }
};

}  // namespace smoe
