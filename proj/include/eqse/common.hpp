#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, FNV hashing and
// little-endian binary I/O used by every file format in the project.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace eqse {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto exit codes (see tools/eqse.cpp):
//   ConfigError -> 2, DataError -> 3, NumericError -> 4, IoError -> 5.
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 has a standard-specified sequence; the
// distribution helpers below are hand-rolled so that draws are identical on
// every platform (std::normal_distribution is implementation-defined).
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed), seed_mix_(splitmix64(seed)) {}

    uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t randint(uint64_t n) { return gen_() % n; }

    /// Standard normal via Box-Muller (cached pair).
    double normal() {
        if (has_cache_) {
            has_cache_ = false;
            return cache_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cache_ = r * std::sin(a);
        has_cache_ = true;
        return r * std::cos(a);
    }

    /// Child stream for a named purpose; independent of draw order elsewhere.
    Rng derive(const std::string& tag) const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : tag) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return Rng(splitmix64(seed_mix_ ^ h));
    }

    static Rng seeded(uint64_t root, const std::string& tag) { return Rng(root).derive(tag); }

private:
    std::mt19937_64 gen_;
    uint64_t seed_mix_ = 0;
    double cache_ = 0.0;
    bool has_cache_ = false;
};

/// Deterministic child seed from a root seed and a tag string.
inline uint64_t derive_seed(uint64_t root, const std::string& tag) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(splitmix64(root) ^ h);
}

// ---------------------------------------------------------------------------
// FNV-1a 64-bit hashing, used for artifact fingerprints and stage caching.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

inline std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file for hashing: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        std::streamsize got = in.gcount();
        if (got > 0) h = fnv1a64(buf, static_cast<size_t>(got), h);
    }
    return hash_hex(h);
}

inline std::string hash_bytes(const std::string& bytes) {
    return hash_hex(fnv1a64(bytes.data(), bytes.size()));
}

// ---------------------------------------------------------------------------
// Little-endian binary I/O (explicit byte packing, endian-agnostic).
// ---------------------------------------------------------------------------

struct ByteWriter {
    std::string bytes;

    void u8(uint8_t v) { bytes.push_back(static_cast<char>(v)); }
    void u16(uint16_t v) {
        u8(static_cast<uint8_t>(v & 0xff));
        u8(static_cast<uint8_t>(v >> 8));
    }
    void u32(uint32_t v) {
        u16(static_cast<uint16_t>(v & 0xffff));
        u16(static_cast<uint16_t>(v >> 16));
    }
    void i16(int16_t v) { u16(static_cast<uint16_t>(v)); }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void raw(const void* p, size_t n) { bytes.append(static_cast<const char*>(p), n); }
    void str(const std::string& s) { bytes.append(s); }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + path);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed: " + path);
    }
};

struct ByteReader {
    std::string bytes;
    size_t pos = 0;

    static ByteReader from_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open for reading: " + path);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ByteReader{ss.str(), 0};
    }

    void need(size_t n) const {
        if (pos + n > bytes.size()) throw IoError("truncated file: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos));
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(bytes[pos++]);
    }
    uint16_t u16() {
        uint16_t lo = u8(), hi = u8();
        return static_cast<uint16_t>(lo | (hi << 8));
    }
    uint32_t u32() {
        uint32_t lo = u16(), hi = u16();
        return lo | (hi << 16);
    }
    int16_t i16() { return static_cast<int16_t>(u16()); }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
    bool eof() const { return pos >= bytes.size(); }
};

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

inline LogLevel& log_level() {
    static LogLevel level = LogLevel::quiet;
    return level;
}

inline void log_info(const std::string& msg) {
    if (log_level() >= LogLevel::info) std::fprintf(stderr, "%s\n", msg.c_str());
}

inline void log_debug(const std::string& msg) {
    if (log_level() >= LogLevel::debug) std::fprintf(stderr, "%s\n", msg.c_str());
}

} // namespace eqse
