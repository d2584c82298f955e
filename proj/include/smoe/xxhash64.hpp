#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>

namespace smoe {

// Canonical XXH64 (seed 0 unless stated otherwise), implemented from the
// published algorithm. Used as the dataset payload checksum; streaming so
// large files can be hashed while they are written.
class Xxhash64 {
public:
    explicit Xxhash64(uint64_t seed = 0) { reset(seed); }

    void reset(uint64_t seed = 0) {
        acc_[0] = seed + kPrime1 + kPrime2;
        acc_[1] = seed + kPrime2;
        acc_[2] = seed;
        acc_[3] = seed - kPrime1;
        seed_ = seed;
        total_ = 0;
        buffered_ = 0;
    }

    void update(const void* data, size_t len) {
        const uint8_t* p = static_cast<const uint8_t*>(data);
        total_ += len;
        if (buffered_ > 0) {
            const size_t take = len < 32 - buffered_ ? len : 32 - buffered_;
            std::memcpy(buffer_ + buffered_, p, take);
            buffered_ += take;
            p += take;
            len -= take;
            if (buffered_ == 32) {
                consume_block(buffer_);
                buffered_ = 0;
            }
        }
        while (len >= 32) {
            consume_block(p);
            p += 32;
            len -= 32;
        }
        if (len > 0) {
            std::memcpy(buffer_, p, len);
            buffered_ = len;
        }
    }

    uint64_t digest() const {
        uint64_t h;
        if (total_ >= 32) {
            h = rotl(acc_[0], 1) + rotl(acc_[1], 7) + rotl(acc_[2], 12) + rotl(acc_[3], 18);
            h = merge_round(h, acc_[0]);
            h = merge_round(h, acc_[1]);
            h = merge_round(h, acc_[2]);
            h = merge_round(h, acc_[3]);
        } else {
            h = seed_ + kPrime5;
        }
        h += total_;

        const uint8_t* p = buffer_;
        size_t len = buffered_;
        while (len >= 8) {
            h ^= round(0, read64(p));
            h = rotl(h, 27) * kPrime1 + kPrime4;
            p += 8;
            len -= 8;
        }
        if (len >= 4) {
            h ^= uint64_t(read32(p)) * kPrime1;
            h = rotl(h, 23) * kPrime2 + kPrime3;
            p += 4;
            len -= 4;
        }
        while (len > 0) {
            h ^= uint64_t(*p) * kPrime5;
            h = rotl(h, 11) * kPrime1;
            ++p;
            --len;
        }

        h ^= h >> 33;
        h *= kPrime2;
        h ^= h >> 29;
        h *= kPrime3;
        h ^= h >> 32;
        return h;
    }

    static uint64_t hash(const void* data, size_t len, uint64_t seed = 0) {
        Xxhash64 x(seed);
        x.update(data, len);
        return x.digest();
    }

private:
    static constexpr uint64_t kPrime1 = 0x9E3779B185EBCA87ULL;
    static constexpr uint64_t kPrime2 = 0xC2B2AE3D27D4EB4FULL;
    static constexpr uint64_t kPrime3 = 0x165667B19E3779F9ULL;
    static constexpr uint64_t kPrime4 = 0x85EBCA77C2B2AE63ULL;
    static constexpr uint64_t kPrime5 = 0x27D4EB2F165667C5ULL;

    static uint64_t rotl(uint64_t v, int bits) { return (v << bits) | (v >> (64 - bits)); }

    static uint64_t read64(const uint8_t* p) {
        uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];  // little-endian
        return v;
    }

    static uint32_t read32(const uint8_t* p) {
        return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
    }

    static uint64_t round(uint64_t acc, uint64_t input) {
        acc += input * kPrime2;
        acc = rotl(acc, 31);
        return acc * kPrime1;
    }

    static uint64_t merge_round(uint64_t h, uint64_t acc) {
        h ^= round(0, acc);
        return h * kPrime1 + kPrime4;
    }

    void consume_block(const uint8_t* p) {
        acc_[0] = round(acc_[0], read64(p));
        acc_[1] = round(acc_[1], read64(p + 8));
        acc_[2] = round(acc_[2], read64(p + 16));
        acc_[3] = round(acc_[3], read64(p + 24));
    }

    uint64_t acc_[4];
    uint64_t seed_ = 0;
    uint64_t total_ = 0;
    uint8_t buffer_[32];
    size_t buffered_ = 0;
};

}  // namespace smoe
