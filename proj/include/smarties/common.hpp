#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace smarties {

// Bad or inconsistent user-supplied data (files, configs, manifests).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// A checked runtime invariant failed (non-finite values, broken contract).
struct InvariantError : std::runtime_error {
    explicit InvariantError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Little-endian byte encoding. All file formats in this project are
// little-endian regardless of host order.
// ---------------------------------------------------------------------------

inline bool host_is_little_endian() {
    const uint16_t probe = 1;
    uint8_t b;
    std::memcpy(&b, &probe, 1);
    return b == 1;
}

inline void put_bytes_le(std::string& out, const void* src, size_t n) {
    const uint8_t* p = static_cast<const uint8_t*>(src);
    if (host_is_little_endian()) {
        out.append(reinterpret_cast<const char*>(p), n);
    } else {
        for (size_t i = 0; i < n; ++i) out.push_back(static_cast<char>(p[n - 1 - i]));
    }
}

inline void put_u16(std::string& out, uint16_t v) { put_bytes_le(out, &v, 2); }
inline void put_u32(std::string& out, uint32_t v) { put_bytes_le(out, &v, 4); }
inline void put_u64(std::string& out, uint64_t v) { put_bytes_le(out, &v, 8); }
inline void put_f32(std::string& out, float v) { put_bytes_le(out, &v, 4); }
inline void put_f64(std::string& out, double v) { put_bytes_le(out, &v, 8); }

// Cursor over a byte buffer; every read is bounds-checked and errors name
// the offending offset.
class ByteReader {
  public:
    ByteReader(const void* data, size_t size)
        : p_(static_cast<const uint8_t*>(data)), size_(size) {}
    explicit ByteReader(const std::string& buf) : ByteReader(buf.data(), buf.size()) {}

    size_t offset() const { return off_; }
    size_t remaining() const { return size_ - off_; }
    bool done() const { return off_ == size_; }

    void raw(void* dst, size_t n) {
        if (off_ + n > size_)
            throw DataError("truncated payload at offset " + std::to_string(off_) +
                            " (need " + std::to_string(n) + " bytes, have " +
                            std::to_string(size_ - off_) + ")");
        uint8_t* d = static_cast<uint8_t*>(dst);
        if (host_is_little_endian()) {
            std::memcpy(d, p_ + off_, n);
        } else {
            for (size_t i = 0; i < n; ++i) d[i] = p_[off_ + n - 1 - i];
        }
        off_ += n;
    }

    uint16_t u16() { uint16_t v; raw(&v, 2); return v; }
    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    float f32() { float v; raw(&v, 4); return v; }
    double f64() { double v; raw(&v, 8); return v; }

    std::string bytes(size_t n) {
        if (off_ + n > size_)
            throw DataError("truncated payload at offset " + std::to_string(off_));
        std::string s(reinterpret_cast<const char*>(p_ + off_), n);
        off_ += n;
        return s;
    }

  private:
    const uint8_t* p_;
    size_t size_;
    size_t off_ = 0;
};

// ---------------------------------------------------------------------------
// base64 (standard alphabet, '=' padding) for feature-cache vectors.
// ---------------------------------------------------------------------------

inline std::string base64_encode(const void* data, size_t n) {
    static const char* tab = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    const uint8_t* p = static_cast<const uint8_t*>(data);
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= n; i += 3) {
        uint32_t v = (uint32_t(p[i]) << 16) | (uint32_t(p[i + 1]) << 8) | p[i + 2];
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back(tab[v & 63]);
    }
    if (i + 1 == n) {
        uint32_t v = uint32_t(p[i]) << 16;
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out += "==";
    } else if (i + 2 == n) {
        uint32_t v = (uint32_t(p[i]) << 16) | (uint32_t(p[i + 1]) << 8);
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<uint8_t> base64_decode(std::string_view s) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<uint8_t> out;
    out.reserve(s.size() / 4 * 3);
    uint32_t acc = 0;
    int bits = 0;
    for (char c : s) {
        if (c == '=') break;
        int v = val(c);
        if (v < 0) throw DataError("invalid base64 character");
        acc = (acc << 6) | uint32_t(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(uint8_t((acc >> bits) & 0xff));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Worker pool cap. SMARTIES_THREADS bounds the number of threads used by
// embarrassingly parallel loops (scene generation, feature extraction).
// ---------------------------------------------------------------------------

inline int max_workers() {
    if (const char* env = std::getenv("SMARTIES_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : int(hc);
}

// Runs fn(i) for i in [0, n). Only used where iterations are independent and
// write to disjoint outputs, so the schedule cannot affect results.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
    int workers = std::min(max_workers(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (int i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace smarties
