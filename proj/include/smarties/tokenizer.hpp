#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "smarties/raster.hpp"
#include "smarties/spectral.hpp"
#include "smarties/tensor.hpp"

namespace smarties {

// ---------------------------------------------------------------------------
// Bicubic resize (Keys kernel, a = -0.5), pixel-center aligned, edge clamped.
// ---------------------------------------------------------------------------

namespace detail {

inline double cubic_weight(double t) {
    const double a = -0.5;
    const double x = std::abs(t);
    if (x <= 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
    if (x < 2.0) return a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a;
    return 0.0;
}

inline void resize_band_bicubic(const double* src, int sw, int sh, double* dst, int dw, int dh) {
    const double sx_scale = double(sw) / double(dw);
    const double sy_scale = double(sh) / double(dh);
    for (int oy = 0; oy < dh; ++oy) {
        const double sy = (double(oy) + 0.5) * sy_scale - 0.5;
        const int by = int(std::floor(sy));
        double wy[4];
        for (int k = 0; k < 4; ++k) wy[k] = cubic_weight(sy - double(by - 1 + k));
        for (int ox = 0; ox < dw; ++ox) {
            const double sx = (double(ox) + 0.5) * sx_scale - 0.5;
            const int bx = int(std::floor(sx));
            double wx[4];
            for (int k = 0; k < 4; ++k) wx[k] = cubic_weight(sx - double(bx - 1 + k));
            double acc = 0;
            for (int ky = 0; ky < 4; ++ky) {
                const int y = std::clamp(by - 1 + ky, 0, sh - 1);
                double row = 0;
                for (int kx = 0; kx < 4; ++kx) {
                    const int x = std::clamp(bx - 1 + kx, 0, sw - 1);
                    row += wx[kx] * src[size_t(y) * size_t(sw) + size_t(x)];
                }
                acc += wy[ky] * row;
            }
            dst[size_t(oy) * size_t(dw) + size_t(ox)] = acc;
        }
    }
}

}  // namespace detail

inline SceneRaster resize_bicubic(const SceneRaster& r, int w, int h) {
    if (w <= 0 || h <= 0) throw DataError("resize: non-positive target size");
    if (r.width == w && r.height == h) return r;
    SceneRaster out;
    out.width = w;
    out.height = h;
    out.bands = r.bands;
    out.pixels.resize(size_t(r.band_count()) * size_t(w) * size_t(h));
    for (int b = 0; b < r.band_count(); ++b)
        detail::resize_band_bicubic(r.pixels.data() + size_t(b) * r.pixels_per_band(), r.width,
                                    r.height, out.pixels.data() + size_t(b) * size_t(w) * size_t(h),
                                    w, h);
    return out;
}

// ---------------------------------------------------------------------------
// PatchGrid: the raster resized to the model input and cut into
// non-overlapping S x S tiles. Within a patch the layout is band-major: all
// S^2 pixels of band 0 (row-major), then band 1, and so on. Reprojection
// targets must match this order bit for bit.
// ---------------------------------------------------------------------------

struct PatchGrid {
    int n_w = 0;
    int n_h = 0;
    int patch_side = 0;
    int band_count = 0;
    std::string sensor;
    std::vector<double> patches;  // [n_w*n_h][S^2 * C], patch p = iy*n_w + ix

    int patch_count() const { return n_w * n_h; }
    int patch_len() const { return patch_side * patch_side * band_count; }
    const double* patch(int p) const { return patches.data() + size_t(p) * size_t(patch_len()); }
    double* patch(int p) { return patches.data() + size_t(p) * size_t(patch_len()); }
};

inline PatchGrid patchify(const SceneRaster& raster, int patch_side, int target_w, int target_h,
                          const std::string& sensor_name = "") {
    raster.validate();
    if (patch_side <= 0 || target_w % patch_side != 0 || target_h % patch_side != 0)
        throw DataError("patchify: patch side " + std::to_string(patch_side) +
                        " does not divide input size " + std::to_string(target_w) + "x" +
                        std::to_string(target_h));
    const SceneRaster resized = resize_bicubic(raster, target_w, target_h);
    PatchGrid g;
    g.n_w = target_w / patch_side;
    g.n_h = target_h / patch_side;
    g.patch_side = patch_side;
    g.band_count = resized.band_count();
    g.sensor = sensor_name;
    g.patches.resize(size_t(g.patch_count()) * size_t(g.patch_len()));
    const int s2 = patch_side * patch_side;
    for (int iy = 0; iy < g.n_h; ++iy)
        for (int ix = 0; ix < g.n_w; ++ix) {
            double* dst = g.patch(iy * g.n_w + ix);
            for (int b = 0; b < g.band_count; ++b)
                for (int py = 0; py < patch_side; ++py)
                    for (int px = 0; px < patch_side; ++px)
                        dst[b * s2 + py * patch_side + px] =
                            resized.at(b, iy * patch_side + py, ix * patch_side + px);
        }
    return g;
}

// ---------------------------------------------------------------------------
// Token grid with per-position source-sensor provenance.
// ---------------------------------------------------------------------------

template <class T>
struct TokenGridT {
    int n_w = 0;
    int n_h = 0;
    TensorT<T> tokens;                    // [n_w*n_h, D]
    std::vector<std::string> provenance;  // source sensor per position

    int position_count() const { return n_w * n_h; }
};

using TokenGrid = TokenGridT<double>;

namespace detail {

template <class T>
void check_resolutions(const ProjectionBankT<T>& bank,
                       const std::vector<BandResolution>& resolutions, int band_count) {
    if (int(resolutions.size()) != band_count)
        throw DataError("projection: need one band resolution per band");
    for (const auto& res : resolutions) {
        if (res.terms.empty()) throw DataError("projection: empty band resolution");
        for (const auto& [id, w] : res.terms) {
            (void)w;
            if (id < 1 || id > bank.layer_count())
                throw DataError("projection: resolution references layer " + std::to_string(id) +
                                " missing from bank");
        }
    }
}

}  // namespace detail

// Spectrum-aware projection of a patch grid: per band, a weighted combination
// of that band's projection layers applied to the band's S^2 pixel block; the
// per-band embeddings are averaged and scaled by C_max, i.e. the token is
// (C_max / C_a) * sum_bands. Positional encoding is NOT added here.
template <class T>
TokenGridT<T> project(const PatchGrid& grid, const ProjectionBankT<T>& bank,
                      const std::vector<BandResolution>& resolutions) {
    detail::check_resolutions(bank, resolutions, grid.band_count);
    if (grid.patch_side != bank.patch_side())
        throw DataError("projection: patch side differs from bank");
    const int n_p = grid.patch_count();
    const int d = bank.embed_dim();
    const int s2 = bank.patch_pixels();
    const T out_scale = T(double(bank.c_max()) / double(grid.band_count));

    std::vector<T> value(size_t(n_p) * size_t(d), T(0));
    std::vector<detail::NodePtr<T>> parents;
    struct Term {
        int band;
        double weight;
        detail::NodePtr<T> w;
        detail::NodePtr<T> b;
    };
    auto terms = std::make_shared<std::vector<Term>>();
    for (int band = 0; band < grid.band_count; ++band)
        for (const auto& [id, w] : resolutions[size_t(band)].terms) {
            const auto& layer = bank.layer(id);
            terms->push_back({band, w, layer.proj_w.node(), layer.proj_b.node()});
            parents.push_back(layer.proj_w.node());
            parents.push_back(layer.proj_b.node());
        }

    auto pixels = std::make_shared<std::vector<double>>(grid.patches);
    const int patch_len = grid.patch_len();
    for (const auto& t : *terms) {
        const T tw = T(t.weight) * out_scale;
        if (tw == T(0)) continue;
        for (int p = 0; p < n_p; ++p) {
            const double* x = pixels->data() + size_t(p) * size_t(patch_len) + size_t(t.band) * size_t(s2);
            T* out = value.data() + size_t(p) * size_t(d);
            const T* wm = t.w->value.data();
            const T* bv = t.b->value.data();
            for (int o = 0; o < d; ++o) {
                const T* wr = wm + size_t(o) * size_t(s2);
                T acc = bv[o];
                for (int i = 0; i < s2; ++i) acc += wr[i] * T(x[i]);
                out[o] += tw * acc;
            }
        }
    }

    TokenGridT<T> tg;
    tg.n_w = grid.n_w;
    tg.n_h = grid.n_h;
    tg.provenance.assign(size_t(n_p), grid.sensor);
    tg.tokens = detail::make_op<T>(
        {n_p, d}, std::move(value), parents,
        [terms, pixels, n_p, d, s2, patch_len, out_scale](const TensorNode<T>& out) {
            for (const auto& t : *terms) {
                const T tw = T(t.weight) * out_scale;
                if (tw == T(0)) continue;
                const bool want_w = t.w->requires_grad;
                const bool want_b = t.b->requires_grad;
                if (!want_w && !want_b) continue;
                for (int p = 0; p < n_p; ++p) {
                    const double* x =
                        pixels->data() + size_t(p) * size_t(patch_len) + size_t(t.band) * size_t(s2);
                    const T* g = out.grad.data() + size_t(p) * size_t(d);
                    for (int o = 0; o < d; ++o) {
                        const T go = tw * g[o];
                        if (go == T(0)) continue;
                        if (want_b) t.b->grad[size_t(o)] += go;
                        if (want_w) {
                            T* dw = t.w->grad.data() + size_t(o) * size_t(s2);
                            for (int i = 0; i < s2; ++i) dw[i] += go * T(x[i]);
                        }
                    }
                }
            }
        });
    return tg;
}

// Spectrum-aware reconstruction: maps each decoded token back to per-band
// S^2 pixel blocks via the bands' reprojection layers, concatenated in band
// order (same band-major layout as PatchGrid).
template <class T>
TensorT<T> reproject_rows(const TensorT<T>& decoded, const ProjectionBankT<T>& bank,
                          const std::vector<BandResolution>& resolutions, int band_count) {
    detail::check_resolutions(bank, resolutions, band_count);
    if (decoded.ndim() != 2) throw DataError("reproject: decoded tokens must be 2-D");
    const int n = decoded.dim(0);
    const int dd = decoded.dim(1);
    const int s2 = bank.patch_pixels();
    for (const auto& res : resolutions)
        for (const auto& [id, w] : res.terms) {
            (void)w;
            if (bank.layer(id).reproj_w.dim(1) != dd)
                throw DataError("reproject: token dim does not match reprojection layers");
        }

    const int out_len = s2 * band_count;
    std::vector<T> value(size_t(n) * size_t(out_len), T(0));
    std::vector<detail::NodePtr<T>> parents{decoded.node()};
    struct Term {
        int band;
        double weight;
        detail::NodePtr<T> w;
        detail::NodePtr<T> b;
    };
    auto terms = std::make_shared<std::vector<Term>>();
    for (int band = 0; band < band_count; ++band)
        for (const auto& [id, w] : resolutions[size_t(band)].terms) {
            const auto& layer = bank.layer(id);
            terms->push_back({band, w, layer.reproj_w.node(), layer.reproj_b.node()});
            parents.push_back(layer.reproj_w.node());
            parents.push_back(layer.reproj_b.node());
        }

    auto ptok = decoded.node();
    for (const auto& t : *terms) {
        const T tw = T(t.weight);
        if (tw == T(0)) continue;
        for (int r = 0; r < n; ++r) {
            const T* tok = ptok->value.data() + size_t(r) * size_t(dd);
            T* out = value.data() + size_t(r) * size_t(out_len) + size_t(t.band) * size_t(s2);
            const T* wm = t.w->value.data();
            const T* bv = t.b->value.data();
            for (int i = 0; i < s2; ++i) {
                const T* wr = wm + size_t(i) * size_t(dd);
                T acc = bv[i];
                for (int o = 0; o < dd; ++o) acc += wr[o] * tok[o];
                out[i] += tw * acc;
            }
        }
    }

    return detail::make_op<T>(
        {n, out_len}, std::move(value), parents,
        [terms, ptok, n, dd, s2, out_len](const TensorNode<T>& out) {
            for (const auto& t : *terms) {
                const T tw = T(t.weight);
                if (tw == T(0)) continue;
                const bool want_w = t.w->requires_grad;
                const bool want_b = t.b->requires_grad;
                const bool want_tok = ptok->requires_grad;
                for (int r = 0; r < n; ++r) {
                    const T* g = out.grad.data() + size_t(r) * size_t(out_len) + size_t(t.band) * size_t(s2);
                    const T* tok = ptok->value.data() + size_t(r) * size_t(dd);
                    T* dtok = want_tok ? ptok->grad.data() + size_t(r) * size_t(dd) : nullptr;
                    for (int i = 0; i < s2; ++i) {
                        const T gi = tw * g[i];
                        if (gi == T(0)) continue;
                        if (want_b) t.b->grad[size_t(i)] += gi;
                        const T* wr = t.w->value.data() + size_t(i) * size_t(dd);
                        if (want_w) {
                            T* dw = t.w->grad.data() + size_t(i) * size_t(dd);
                            for (int o = 0; o < dd; ++o) dw[o] += gi * tok[o];
                        }
                        if (want_tok)
                            for (int o = 0; o < dd; ++o) dtok[o] += gi * wr[o];
                    }
                }
            }
        });
}

// Single-token reconstruction to a flat band-major pixel patch.
template <class T>
std::vector<double> reproject(const std::vector<T>& token, const ProjectionBankT<T>& bank,
                              const std::vector<BandResolution>& resolutions, int band_count) {
    NoGradGuard ng;
    TensorT<T> row = TensorT<T>::from({1, int(token.size())}, token);
    TensorT<T> out = reproject_rows(row, bank, resolutions, band_count);
    std::vector<double> res(out.size());
    for (size_t i = 0; i < res.size(); ++i) res[i] = double(out.data()[i]);
    return res;
}

}  // namespace smarties
