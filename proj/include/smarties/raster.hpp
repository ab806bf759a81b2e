#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "smarties/common.hpp"
#include "smarties/spectral.hpp"

namespace smarties {

// W x H x C image with per-band wavelength metadata; the unit of all file
// I/O. Pixels are band-sequential, row-major within a band. Values live as
// doubles in memory and as f32 in SSR files.
struct SceneRaster {
    int width = 0;
    int height = 0;
    std::vector<SpectralRange> bands;
    std::vector<double> pixels;

    int band_count() const { return int(bands.size()); }
    size_t pixels_per_band() const { return size_t(width) * size_t(height); }

    double& at(int band, int y, int x) {
        return pixels[(size_t(band) * size_t(height) + size_t(y)) * size_t(width) + size_t(x)];
    }
    double at(int band, int y, int x) const {
        return pixels[(size_t(band) * size_t(height) + size_t(y)) * size_t(width) + size_t(x)];
    }

    void validate() const {
        if (width <= 0 || height <= 0 || bands.empty())
            throw DataError("scene raster: empty dimensions");
        if (pixels.size() != size_t(band_count()) * pixels_per_band())
            throw DataError("scene raster: pixel count does not match W*H*C");
        for (const auto& b : bands)
            if (!b.valid()) throw DataError("scene raster: invalid band range");
    }
};

// ---------------------------------------------------------------------------
// SSR: "SSR1" magic | u16 version=1 | u16 reserved=0 | u32 W | u32 H | u32 C
// | C x (f32 lambda_min_nm, f32 lambda_max_nm) | C*W*H f32 pixels,
// band-sequential, row-major. Little-endian throughout.
// ---------------------------------------------------------------------------

inline std::string encode_ssr(const SceneRaster& r) {
    r.validate();
    std::string out;
    out.reserve(24 + r.bands.size() * 8 + r.pixels.size() * 4);
    out += "SSR1";
    put_u16(out, 1);
    put_u16(out, 0);
    put_u32(out, uint32_t(r.width));
    put_u32(out, uint32_t(r.height));
    put_u32(out, uint32_t(r.band_count()));
    for (const auto& b : r.bands) {
        put_f32(out, float(b.lambda_min_nm));
        put_f32(out, float(b.lambda_max_nm));
    }
    for (double v : r.pixels) put_f32(out, float(v));
    return out;
}

inline SceneRaster decode_ssr(const std::string& buf) {
    if (buf.size() < 4 || buf.compare(0, 4, "SSR1") != 0)
        throw DataError("bad SSR magic at offset 0");
    ByteReader rd(buf.data() + 4, buf.size() - 4);
    const uint16_t version = rd.u16();
    if (version != 1)
        throw DataError("unsupported SSR version " + std::to_string(version));
    rd.u16();  // reserved
    SceneRaster r;
    r.width = int(rd.u32());
    r.height = int(rd.u32());
    const uint32_t c = rd.u32();
    r.bands.resize(c);
    for (auto& b : r.bands) {
        b.lambda_min_nm = double(rd.f32());
        b.lambda_max_nm = double(rd.f32());
    }
    r.pixels.resize(size_t(c) * size_t(r.width) * size_t(r.height));
    for (auto& v : r.pixels) v = double(rd.f32());
    if (!rd.done()) throw DataError("trailing bytes after SSR payload");
    r.validate();
    return r;
}

inline void write_ssr(const SceneRaster& r, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    const std::string buf = encode_ssr(r);
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw DataError("short write: " + path);
}

inline SceneRaster read_ssr(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open SSR file: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_ssr(buf);
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Harmonization (percentile clip-and-scale, then standardization, per band).
// ---------------------------------------------------------------------------

// Percentile q in [0,1] by linear interpolation between order statistics at
// rank (n-1)*q, over the given values.
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw DataError("percentile of empty sample");
    const double rank = double(sorted.size() - 1) * q;
    const size_t lo = size_t(std::floor(rank));
    const double frac = rank - double(lo);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

// Pooled per-band stats over a set of rasters from one sensor.
inline std::vector<HarmonizeStats> compute_stats(const std::vector<SceneRaster>& rasters) {
    if (rasters.empty()) throw DataError("compute_stats: no rasters");
    const int c = rasters[0].band_count();
    for (const auto& r : rasters)
        if (r.band_count() != c) throw DataError("compute_stats: band count differs across rasters");
    std::vector<HarmonizeStats> stats(size_t(c));
    std::vector<double> pool;
    for (int b = 0; b < c; ++b) {
        pool.clear();
        for (const auto& r : rasters) {
            const double* src = r.pixels.data() + size_t(b) * r.pixels_per_band();
            pool.insert(pool.end(), src, src + r.pixels_per_band());
        }
        std::sort(pool.begin(), pool.end());
        HarmonizeStats& s = stats[size_t(b)];
        s.p1 = percentile_sorted(pool, 0.01);
        s.p99 = percentile_sorted(pool, 0.99);
        if (!(s.p1 < s.p99))
            throw DataError("compute_stats: constant band " + std::to_string(b) +
                            " (p1 == p99)");
        double sum = 0;
        for (double v : pool) {
            const double scaled = (std::clamp(v, s.p1, s.p99) - s.p1) / (s.p99 - s.p1);
            sum += scaled;
        }
        s.mean = sum / double(pool.size());
        double var = 0;
        for (double v : pool) {
            const double scaled = (std::clamp(v, s.p1, s.p99) - s.p1) / (s.p99 - s.p1);
            var += (scaled - s.mean) * (scaled - s.mean);
        }
        s.std = std::sqrt(var / double(pool.size()));
        if (!(s.std > 0)) throw DataError("compute_stats: zero variance in band " + std::to_string(b));
    }
    return stats;
}

inline SceneRaster harmonize(const SceneRaster& r, const std::vector<HarmonizeStats>& stats) {
    if (int(stats.size()) != r.band_count())
        throw DataError("harmonize: stats count does not match raster band count");
    SceneRaster out = r;
    for (int b = 0; b < r.band_count(); ++b) {
        const HarmonizeStats& s = stats[size_t(b)];
        double* px = out.pixels.data() + size_t(b) * out.pixels_per_band();
        for (size_t i = 0; i < out.pixels_per_band(); ++i) {
            const double scaled = (std::clamp(px[i], s.p1, s.p99) - s.p1) / (s.p99 - s.p1);
            px[i] = (scaled - s.mean) / s.std;
        }
    }
    return out;
}

// Inverse of harmonize on the non-clipped interior (values at or beyond the
// percentile clip are unrecoverable by construction).
inline SceneRaster harmonize_inverse(const SceneRaster& r, const std::vector<HarmonizeStats>& stats) {
    if (int(stats.size()) != r.band_count())
        throw DataError("harmonize_inverse: stats count does not match raster band count");
    SceneRaster out = r;
    for (int b = 0; b < r.band_count(); ++b) {
        const HarmonizeStats& s = stats[size_t(b)];
        double* px = out.pixels.data() + size_t(b) * out.pixels_per_band();
        for (size_t i = 0; i < out.pixels_per_band(); ++i)
            px[i] = (px[i] * s.std + s.mean) * (s.p99 - s.p1) + s.p1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pair manifest: JSON-lines of co-registered scene pairs.
// ---------------------------------------------------------------------------

struct PairRecord {
    std::string path_a;
    std::string sensor_a;
    std::string path_b;
    std::string sensor_b;
    std::string scene_id;
    std::optional<int> label;
};

using PairManifest = std::vector<PairRecord>;

inline PairManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();
    PairManifest out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        detail::reject_unknown_keys(
            j, {"path_a", "sensor_a", "path_b", "sensor_b", "scene_id", "label"},
            path + ":" + std::to_string(line_no));
        PairRecord rec;
        try {
            rec.path_a = (base / j.at("path_a").get<std::string>()).string();
            rec.sensor_a = j.at("sensor_a").get<std::string>();
            rec.path_b = (base / j.at("path_b").get<std::string>()).string();
            rec.sensor_b = j.at("sensor_b").get<std::string>();
            rec.scene_id = j.at("scene_id").get<std::string>();
        } catch (const std::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (j.contains("label")) rec.label = j["label"].get<int>();
        out.push_back(std::move(rec));
    }
    if (out.empty()) throw DataError("manifest is empty: " + path);
    return out;
}

inline void save_manifest(const PairManifest& manifest, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path);
    for (const auto& rec : manifest) {
        json j;
        j["path_a"] = rec.path_a;
        j["sensor_a"] = rec.sensor_a;
        j["path_b"] = rec.path_b;
        j["sensor_b"] = rec.sensor_b;
        j["scene_id"] = rec.scene_id;
        if (rec.label) j["label"] = *rec.label;
        out << j.dump() << "\n";
    }
}

}  // namespace smarties
