#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "smarties/common.hpp"
#include "smarties/rng.hpp"
#include "smarties/tensor.hpp"

namespace smarties {

using json = nlohmann::ordered_json;

// A contiguous wavelength interval in nanometers.
struct SpectralRange {
    double lambda_min_nm = 0;
    double lambda_max_nm = 0;

    bool valid() const {
        return std::isfinite(lambda_min_nm) && std::isfinite(lambda_max_nm) &&
               lambda_min_nm > 0 && lambda_min_nm < lambda_max_nm;
    }
    double center_nm() const { return (lambda_min_nm + lambda_max_nm) / 2.0; }

    friend bool operator==(const SpectralRange& a, const SpectralRange& b) {
        return a.lambda_min_nm == b.lambda_min_nm && a.lambda_max_nm == b.lambda_max_nm;
    }
};

inline double center_nm(const SpectralRange& r) {
    if (!r.valid()) throw DataError("invalid spectral range");
    return r.center_nm();
}

// Percentile clip-and-scale plus standardization parameters for one band.
// p1/p99 are percentiles of the raw values; mean/std are computed on the
// clipped-and-scaled values.
struct HarmonizeStats {
    double p1 = 0;
    double p99 = 1;
    double mean = 0;
    double std = 1;
};

struct SensorBand {
    std::string id;
    SpectralRange range;
};

struct SensorSpec {
    std::string name;
    std::vector<SensorBand> bands;
    std::optional<std::vector<HarmonizeStats>> stats;

    int band_count() const { return int(bands.size()); }

    void validate() const {
        if (name.empty()) throw DataError("sensor spec: empty name");
        if (bands.empty()) throw DataError("sensor spec '" + name + "': no bands");
        for (const auto& b : bands)
            if (!b.range.valid())
                throw DataError("sensor spec '" + name + "': band '" + b.id +
                                "' has an invalid wavelength range");
        for (size_t i = 0; i < bands.size(); ++i)
            for (size_t j = i + 1; j < bands.size(); ++j)
                if (bands[i].id == bands[j].id)
                    throw DataError("sensor spec '" + name + "': duplicate band id '" +
                                    bands[i].id + "'");
        if (stats && stats->size() != bands.size())
            throw DataError("sensor spec '" + name + "': stats count does not match band count");
    }
};

enum class ResolveMode { Exact, Interpolated, Extrapolated };

inline const char* to_string(ResolveMode m) {
    switch (m) {
        case ResolveMode::Exact: return "Exact";
        case ResolveMode::Interpolated: return "Interpolated";
        case ResolveMode::Extrapolated: return "Extrapolated";
    }
    return "?";
}

enum class ResolvePolicy { ExactOnly, Interpolate, Nearest };

// How one band maps onto projection layers: weighted terms over layer ids.
struct BandResolution {
    ResolveMode mode = ResolveMode::Exact;
    std::vector<std::pair<int, double>> terms;  // (layer id, weight), weights sum to 1

    bool extrapolated() const { return mode == ResolveMode::Extrapolated; }
};

// One spectral range with its projection (patch pixels -> embedding) and
// reprojection (embedding -> patch pixels) linear maps. Ids are 1-based in
// registration order and are rendered as f_<id> / r_<id>.
template <class T>
struct ProjectionLayerT {
    int id = 0;
    SpectralRange range;
    TensorT<T> proj_w;    // [D, S^2]
    TensorT<T> proj_b;    // [D]
    TensorT<T> reproj_w;  // [S^2, D]
    TensorT<T> reproj_b;  // [S^2]
};

// The paired sets of per-spectral-range linear maps, plus the registry of
// sensors that were registered into them. Immutable after setup; registration
// is single-writer.
template <class T>
class ProjectionBankT {
  public:
    ProjectionBankT() = default;
    ProjectionBankT(int embed_dim, int patch_side, int c_max)
        : embed_dim_(embed_dim), patch_side_(patch_side), c_max_(c_max) {
        if (embed_dim <= 0 || patch_side <= 0 || c_max <= 0)
            throw DataError("projection bank: dimensions must be positive");
    }

    int embed_dim() const { return embed_dim_; }
    int patch_side() const { return patch_side_; }
    int patch_pixels() const { return patch_side_ * patch_side_; }
    int c_max() const { return c_max_; }
    bool empty() const { return layers_.empty(); }
    int layer_count() const { return int(layers_.size()); }

    const std::vector<ProjectionLayerT<T>>& layers() const { return layers_; }
    const ProjectionLayerT<T>& layer(int id) const {
        if (id < 1 || id > layer_count()) throw DataError("unknown projection layer id");
        return layers_[size_t(id - 1)];
    }
    ProjectionLayerT<T>& layer_mut(int id) { return layers_[size_t(id - 1)]; }

    const std::map<std::string, SensorSpec>& sensors() const { return sensors_; }
    bool has_sensor(const std::string& name) const { return sensors_.count(name) != 0; }
    const SensorSpec& sensor(const std::string& name) const {
        auto it = sensors_.find(name);
        if (it == sensors_.end()) throw DataError("sensor '" + name + "' is not registered");
        return it->second;
    }

    // Registers a sensor: each band whose range exactly matches a layer that
    // existed before this call reuses it; every other band gets a fresh layer
    // pair. Two bands of the same new sensor never share a layer even when
    // their ranges coincide (Sentinel-1 VV/VH style polarization pairs stay
    // separate).
    void register_sensor(const SensorSpec& spec, Rng& rng) {
        spec.validate();
        if (sensors_.count(spec.name))
            throw DataError("sensor '" + spec.name + "' is already registered");
        if (spec.band_count() > c_max_)
            throw DataError("sensor '" + spec.name + "' has " + std::to_string(spec.band_count()) +
                            " bands, more than the bank's C_max of " + std::to_string(c_max_));
        const int preexisting = layer_count();
        std::vector<int> assignment;
        assignment.reserve(spec.bands.size());
        for (const auto& band : spec.bands) {
            int reuse = 0;
            for (int id = 1; id <= preexisting; ++id)
                if (layers_[size_t(id - 1)].range == band.range) {
                    reuse = id;
                    break;
                }
            assignment.push_back(reuse != 0 ? reuse : add_layer(band.range, rng));
        }
        sensors_.emplace(spec.name, spec);
        assignments_.emplace(spec.name, std::move(assignment));
    }

    // Per-band layer ids recorded at registration time.
    const std::vector<int>& assignment(const std::string& name) const {
        auto it = assignments_.find(name);
        if (it == assignments_.end()) throw DataError("sensor '" + name + "' is not registered");
        return it->second;
    }

    // Exact resolutions for a seen sensor, from the recorded assignment.
    std::vector<BandResolution> resolutions_for(const std::string& name) const {
        std::vector<BandResolution> out;
        for (int id : assignment(name))
            out.push_back(BandResolution{ResolveMode::Exact, {{id, 1.0}}});
        return out;
    }

    void restore_registered(const SensorSpec& spec, std::vector<int> assignment) {
        sensors_.emplace(spec.name, spec);
        assignments_.emplace(spec.name, std::move(assignment));
    }

    int add_layer(const SpectralRange& range, Rng& rng) {
        if (!range.valid()) throw DataError("projection layer: invalid spectral range");
        ProjectionLayerT<T> l;
        l.id = layer_count() + 1;
        l.range = range;
        const int s2 = patch_pixels();
        const double bound = 1.0 / std::sqrt(double(s2));
        l.proj_w = TensorT<T>({embed_dim_, s2}, true);
        rng.fill_uniform(l.proj_w.values(), -bound, bound);
        l.proj_b = TensorT<T>({embed_dim_}, true);
        l.reproj_w = TensorT<T>({s2, embed_dim_}, true);
        rng.fill_uniform(l.reproj_w.values(), -bound, bound);
        l.reproj_b = TensorT<T>({s2}, true);
        layers_.push_back(std::move(l));
        return layer_count();
    }

    std::vector<TensorT<T>> parameters() const {
        std::vector<TensorT<T>> out;
        for (const auto& l : layers_) {
            out.push_back(l.proj_w);
            out.push_back(l.proj_b);
            out.push_back(l.reproj_w);
            out.push_back(l.reproj_b);
        }
        return out;
    }

  private:
    int embed_dim_ = 0;
    int patch_side_ = 0;
    int c_max_ = 0;
    std::vector<ProjectionLayerT<T>> layers_;
    std::map<std::string, SensorSpec> sensors_;
    std::map<std::string, std::vector<int>> assignments_;
};

using ProjectionBank = ProjectionBankT<double>;

// Maps a query range onto bank layers.
//
// Exact range matches win under every policy. Otherwise `Interpolate`
// brackets the query's central wavelength between the two nearest layer
// centers and weights them by normalized center distance; a center outside
// the bank's center span falls back to the single nearest layer, flagged
// Extrapolated (callers should surface a warning -- extrapolation transfers
// poorly). `Nearest` always takes the single closest-center layer,
// unflagged. Ties prefer the lower-wavelength layer, then the lower id.
template <class T>
BandResolution resolve_band(const SpectralRange& range, const ProjectionBankT<T>& bank,
                            ResolvePolicy policy) {
    if (!range.valid()) throw DataError("resolve_band: invalid spectral range");
    if (bank.empty()) throw DataError("resolve_band: empty projection bank");

    for (const auto& l : bank.layers())
        if (l.range == range) return BandResolution{ResolveMode::Exact, {{l.id, 1.0}}};

    if (policy == ResolvePolicy::ExactOnly)
        throw DataError("resolve_band: no exact projection layer for range [" +
                        std::to_string(range.lambda_min_nm) + ", " +
                        std::to_string(range.lambda_max_nm) + "] nm under exact_only policy");

    const double c = range.center_nm();
    auto nearest_layer = [&]() {
        int best = 0;
        double best_dist = 0, best_center = 0;
        for (const auto& l : bank.layers()) {
            const double lc = l.range.center_nm();
            const double dist = std::abs(lc - c);
            if (best == 0 || dist < best_dist ||
                (dist == best_dist && lc < best_center)) {
                best = l.id;
                best_dist = dist;
                best_center = lc;
            }
        }
        return best;
    };

    if (policy == ResolvePolicy::Nearest)
        return BandResolution{ResolveMode::Exact, {{nearest_layer(), 1.0}}};

    double c_min = 0, c_max = 0;
    for (const auto& l : bank.layers()) {
        const double lc = l.range.center_nm();
        if (l.id == 1 || lc < c_min) c_min = lc;
        if (l.id == 1 || lc > c_max) c_max = lc;
    }
    if (c < c_min || c > c_max)
        return BandResolution{ResolveMode::Extrapolated, {{nearest_layer(), 1.0}}};

    // Bracket by layer centers: lo = greatest center <= c, hi = least center
    // >= c (distinct layers; equal-center duplicates collapse to lowest id).
    int lo = 0, hi = 0;
    double lo_c = 0, hi_c = 0;
    for (const auto& l : bank.layers()) {
        const double lc = l.range.center_nm();
        if (lc <= c && (lo == 0 || lc > lo_c)) {
            lo = l.id;
            lo_c = lc;
        }
        if (lc >= c && (hi == 0 || lc < hi_c)) {
            hi = l.id;
            hi_c = lc;
        }
    }
    if (lo == hi) {
        // Query sits exactly on one layer's center; partner with the next
        // center on the high side (or low side at the top of the span).
        int other = 0;
        double other_c = 0;
        for (const auto& l : bank.layers()) {
            const double lc = l.range.center_nm();
            if (l.id == lo) continue;
            if (lc > c && (other == 0 || lc < other_c)) {
                other = l.id;
                other_c = lc;
            }
        }
        if (other != 0) return BandResolution{ResolveMode::Interpolated, {{lo, 1.0}, {other, 0.0}}};
        for (const auto& l : bank.layers()) {
            const double lc = l.range.center_nm();
            if (l.id == lo) continue;
            if (lc < c && (other == 0 || lc > other_c)) {
                other = l.id;
                other_c = lc;
            }
        }
        if (other == 0)  // single-layer bank with c on its center
            return BandResolution{ResolveMode::Extrapolated, {{lo, 1.0}}};
        return BandResolution{ResolveMode::Interpolated, {{other, 0.0}, {lo, 1.0}}};
    }
    const double span = hi_c - lo_c;
    const double w_lo = (hi_c - c) / span;
    const double w_hi = (c - lo_c) / span;
    return BandResolution{ResolveMode::Interpolated, {{lo, w_lo}, {hi, w_hi}}};
}

// ---------------------------------------------------------------------------
// Sensor spec JSON (External interface: {"name", "bands":[{"id",
// "lambda_min_nm", "lambda_max_nm"}], optional "stats").
// ---------------------------------------------------------------------------

namespace detail {

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw DataError("unknown key '" + it.key() + "' in " + where);
    }
}

}  // namespace detail

inline SensorSpec sensor_spec_from_json(const json& j) {
    if (!j.is_object()) throw DataError("sensor spec: expected a JSON object");
    detail::reject_unknown_keys(j, {"name", "bands", "stats"}, "sensor spec");
    SensorSpec spec;
    if (!j.contains("name") || !j["name"].is_string())
        throw DataError("sensor spec: missing string 'name'");
    spec.name = j["name"].get<std::string>();
    if (!j.contains("bands") || !j["bands"].is_array())
        throw DataError("sensor spec: missing array 'bands'");
    for (const auto& bj : j["bands"]) {
        detail::reject_unknown_keys(bj, {"id", "lambda_min_nm", "lambda_max_nm"}, "sensor band");
        SensorBand b;
        if (!bj.contains("id") || !bj.contains("lambda_min_nm") || !bj.contains("lambda_max_nm"))
            throw DataError("sensor band: need 'id', 'lambda_min_nm', 'lambda_max_nm'");
        b.id = bj["id"].get<std::string>();
        b.range.lambda_min_nm = bj["lambda_min_nm"].get<double>();
        b.range.lambda_max_nm = bj["lambda_max_nm"].get<double>();
        spec.bands.push_back(std::move(b));
    }
    if (j.contains("stats")) {
        std::vector<HarmonizeStats> stats;
        for (const auto& sj : j["stats"]) {
            detail::reject_unknown_keys(sj, {"p1", "p99", "mean", "std"}, "band stats");
            HarmonizeStats s;
            s.p1 = sj.at("p1").get<double>();
            s.p99 = sj.at("p99").get<double>();
            s.mean = sj.at("mean").get<double>();
            s.std = sj.at("std").get<double>();
            if (!(s.p1 < s.p99) || !(s.std > 0))
                throw DataError("band stats: require p1 < p99 and std > 0");
            stats.push_back(s);
        }
        spec.stats = std::move(stats);
    }
    spec.validate();
    return spec;
}

inline json sensor_spec_to_json(const SensorSpec& spec) {
    json j;
    j["name"] = spec.name;
    j["bands"] = json::array();
    for (const auto& b : spec.bands)
        j["bands"].push_back({{"id", b.id},
                              {"lambda_min_nm", b.range.lambda_min_nm},
                              {"lambda_max_nm", b.range.lambda_max_nm}});
    if (spec.stats) {
        j["stats"] = json::array();
        for (const auto& s : *spec.stats)
            j["stats"].push_back({{"p1", s.p1}, {"p99", s.p99}, {"mean", s.mean}, {"std", s.std}});
    }
    return j;
}

inline SensorSpec load_sensor_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open sensor spec file: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw DataError("cannot parse sensor spec '" + path + "': " + e.what());
    }
    return sensor_spec_from_json(j);
}

inline void save_sensor_spec(const SensorSpec& spec, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write sensor spec file: " + path);
    out << sensor_spec_to_json(spec).dump(2) << "\n";
}

}  // namespace smarties
