#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "smarties/raster.hpp"
#include "smarties/rng.hpp"
#include "smarties/spectral.hpp"
#include "smarties/tokenizer.hpp"

namespace smarties {

// Synthetic co-registered scene pairs. Each scene is a latent material map
// (blobby regions from thresholded smoothed noise); each material carries a
// smooth spectral signature, piecewise-linear over log-wavelength so optical
// and microwave bands both get non-degenerate values. A sensor's band value
// is the signature averaged over the band's wavelength interval, plus
// band noise. All sensors render the same latent map, which is what makes
// the pairs co-registered by construction.
struct SyntheticParams {
    int width = 64;
    int height = 64;
    double noise_sigma = 0.02;       // per-pixel band noise after rendering
    double brightness_jitter = 0.0;  // per-scene log-normal illumination factor
    int coarse_grid = 5;             // latent noise resolution before upsampling
    double min_dominance = 0.45;     // area share of the dominant material
    int signature_knots = 32;
    uint64_t world_seed = 1;         // materials depend only on this
};

struct SceneLatent {
    int width = 0;
    int height = 0;
    std::vector<int> material;  // row-major material index per pixel
    int label = 0;              // dominant material
    double brightness = 1.0;
};

class SyntheticWorld {
  public:
    SyntheticWorld(int class_count, const SyntheticParams& params)
        : params_(params), class_count_(class_count) {
        if (class_count < 1) throw DataError("synthetic world: need at least one material");
        Rng world(params.world_seed);
        Rng mat_rng = world.split("materials");
        const int k = params.signature_knots;
        knots_u_.resize(size_t(k));
        // log10(lambda/nm) from deep violet to well past microwave.
        const double u_lo = 2.4, u_hi = 8.0;
        for (int i = 0; i < k; ++i)
            knots_u_[size_t(i)] = u_lo + (u_hi - u_lo) * double(i) / double(k - 1);
        signatures_.resize(size_t(class_count));
        for (int m = 0; m < class_count; ++m) {
            Rng r = mat_rng.split(uint64_t(m));
            auto& sig = signatures_[size_t(m)];
            sig.resize(size_t(k));
            for (auto& v : sig) v = r.uniform(0.1, 0.9);
        }
    }

    int class_count() const { return class_count_; }
    const SyntheticParams& params() const { return params_; }

    // Mean of material m's signature over a wavelength interval (analytic
    // integral of the piecewise-linear curve in log10-wavelength).
    double band_response(int m, const SpectralRange& range) const {
        const double u1 = std::log10(range.lambda_min_nm);
        const double u2 = std::log10(range.lambda_max_nm);
        const auto& sig = signatures_[size_t(m)];
        auto value_at = [&](double u) {
            if (u <= knots_u_.front()) return sig.front();
            if (u >= knots_u_.back()) return sig.back();
            const size_t hi = size_t(std::upper_bound(knots_u_.begin(), knots_u_.end(), u) -
                                     knots_u_.begin());
            const double t = (u - knots_u_[hi - 1]) / (knots_u_[hi] - knots_u_[hi - 1]);
            return sig[hi - 1] * (1.0 - t) + sig[hi] * t;
        };
        // Trapezoid over every knot interval intersecting [u1, u2]; the
        // integrand is linear inside each, so this is exact.
        double integral = 0;
        double prev_u = u1, prev_v = value_at(u1);
        for (double ku : knots_u_) {
            if (ku <= u1 || ku >= u2) continue;
            const double kv = value_at(ku);
            integral += 0.5 * (prev_v + kv) * (ku - prev_u);
            prev_u = ku;
            prev_v = kv;
        }
        integral += 0.5 * (prev_v + value_at(u2)) * (u2 - prev_u);
        return integral / (u2 - u1);
    }

    SceneLatent make_latent(Rng scene_rng) const {
        const int w = params_.width, h = params_.height;
        SceneLatent scene;
        scene.width = w;
        scene.height = h;

        // Smooth scalar field: coarse white noise upsampled bicubically.
        const int g = params_.coarse_grid;
        SceneRaster coarse;
        coarse.width = g;
        coarse.height = g;
        coarse.bands = {SpectralRange{1.0, 2.0}};
        coarse.pixels.resize(size_t(g) * size_t(g));
        Rng field_rng = scene_rng.split("field");
        field_rng.fill_uniform(coarse.pixels, 0.0, 1.0);
        const SceneRaster field = resize_bicubic(coarse, w, h);

        // Material shares: one dominant class, the rest bounded away from it.
        Rng share_rng = scene_rng.split("shares");
        scene.label = int(share_rng.uniform_int(uint64_t(class_count_)));
        std::vector<double> shares(size_t(class_count_), 0.0);
        if (class_count_ == 1) {
            shares[0] = 1.0;
        } else {
            const double dom = share_rng.uniform(params_.min_dominance,
                                                 std::min(0.95, params_.min_dominance + 0.25));
            double rest = 0;
            for (int m = 0; m < class_count_; ++m)
                if (m != scene.label) {
                    shares[size_t(m)] = share_rng.uniform(0.5, 1.5);
                    rest += shares[size_t(m)];
                }
            for (int m = 0; m < class_count_; ++m)
                if (m != scene.label) shares[size_t(m)] *= (1.0 - dom) / rest;
            shares[size_t(scene.label)] = dom;
        }

        // Rank thresholds turn shares into exact area fractions.
        std::vector<double> sorted(field.pixels);
        std::sort(sorted.begin(), sorted.end());
        std::vector<double> cut(size_t(class_count_) - 1);
        double acc = 0;
        for (int m = 0; m + 1 < class_count_; ++m) {
            acc += shares[size_t(m)];
            const size_t rank = std::min(sorted.size() - 1, size_t(acc * double(sorted.size())));
            cut[size_t(m)] = sorted[rank];
        }
        scene.material.resize(field.pixels.size());
        for (size_t i = 0; i < field.pixels.size(); ++i) {
            int m = 0;
            while (m + 1 < class_count_ && field.pixels[i] >= cut[size_t(m)]) ++m;
            scene.material[i] = m;
        }

        // Re-derive the label from actual pixel counts; rank thresholds can
        // shift shares by a pixel or two.
        std::vector<int> counts(size_t(class_count_), 0);
        for (int m : scene.material) counts[size_t(m)]++;
        scene.label = int(std::max_element(counts.begin(), counts.end()) - counts.begin());

        if (params_.brightness_jitter > 0) {
            Rng bright_rng = scene_rng.split("brightness");
            scene.brightness = std::exp(params_.brightness_jitter * bright_rng.normal());
        }
        return scene;
    }

    SceneRaster render(const SceneLatent& scene, const SensorSpec& spec, Rng scene_rng) const {
        SceneRaster r;
        r.width = scene.width;
        r.height = scene.height;
        for (const auto& b : spec.bands) r.bands.push_back(b.range);
        r.pixels.resize(size_t(spec.band_count()) * r.pixels_per_band());
        Rng noise_rng = scene_rng.split("render").split(spec.name);
        std::vector<double> response(size_t(class_count_));
        for (int b = 0; b < spec.band_count(); ++b) {
            for (int m = 0; m < class_count_; ++m)
                response[size_t(m)] = band_response(m, spec.bands[size_t(b)].range);
            double* px = r.pixels.data() + size_t(b) * r.pixels_per_band();
            for (size_t i = 0; i < r.pixels_per_band(); ++i)
                px[i] = scene.brightness * response[size_t(scene.material[i])] +
                        params_.noise_sigma * noise_rng.normal();
        }
        return r;
    }

  private:
    SyntheticParams params_;
    int class_count_;
    std::vector<double> knots_u_;
    std::vector<std::vector<double>> signatures_;
};

// Generates n scenes rendered by both sensors (one shared file when the two
// specs are the same sensor), writes SSR files plus manifest.jsonl into
// out_dir, and returns the manifest with paths resolved.
inline PairManifest gen_synthetic_pairs(const std::string& out_dir, int n_scenes,
                                        const SensorSpec& sensor_a, const SensorSpec& sensor_b,
                                        int class_count, const SyntheticParams& params, Rng rng) {
    namespace fs = std::filesystem;
    sensor_a.validate();
    sensor_b.validate();
    fs::create_directories(out_dir);
    SyntheticWorld world(class_count, params);
    PairManifest manifest(size_t(n_scenes));
    const bool same_sensor = sensor_a.name == sensor_b.name;

    parallel_for(n_scenes, [&](int i) {
        char name[64];
        std::snprintf(name, sizeof(name), "scene_%05d", i);
        Rng scene_rng = rng.split("scene").split(uint64_t(i));
        const SceneLatent latent = world.make_latent(scene_rng);
        const SceneRaster ra = world.render(latent, sensor_a, scene_rng);
        const std::string file_a = std::string(name) + "_a.ssr";
        write_ssr(ra, (fs::path(out_dir) / file_a).string());
        std::string file_b = file_a;
        if (!same_sensor) {
            const SceneRaster rb = world.render(latent, sensor_b, scene_rng);
            file_b = std::string(name) + "_b.ssr";
            write_ssr(rb, (fs::path(out_dir) / file_b).string());
        }
        PairRecord rec;
        rec.path_a = file_a;
        rec.sensor_a = sensor_a.name;
        rec.path_b = file_b;
        rec.sensor_b = sensor_b.name;
        rec.scene_id = name;
        rec.label = latent.label;
        manifest[size_t(i)] = std::move(rec);
    });

    save_manifest(manifest, (fs::path(out_dir) / "manifest.jsonl").string());
    // Reload so returned paths are resolved the same way any consumer sees them.
    return load_manifest((fs::path(out_dir) / "manifest.jsonl").string());
}

}  // namespace smarties
