#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "smarties/mixup.hpp"
#include "smarties/rng.hpp"
#include "smarties/spectral.hpp"
#include "smarties/tensor.hpp"
#include "smarties/tokenizer.hpp"

namespace smarties {

struct ModelConfig {
    int embed_dim = 32;
    int depth = 2;
    int heads = 2;
    int decoder_dim = 32;
    int decoder_depth = 1;
    int decoder_heads = 2;
    int patch_side = 8;
    int input_w = 64;
    int input_h = 64;
    double mask_ratio = 0.75;
    double mixup_ratio = 0.5;  // fraction of token positions exchanged between the two streams
    int c_max = 12;
    uint64_t seed = 0;

    int n_w() const { return input_w / patch_side; }
    int n_h() const { return input_h / patch_side; }
    int patch_count() const { return n_w() * n_h(); }

    void validate() const {
        if (embed_dim <= 0 || decoder_dim <= 0 || depth < 0 || decoder_depth < 0)
            throw DataError("model config: non-positive dimensions");
        if (heads <= 0 || embed_dim % heads != 0)
            throw DataError("model config: embed_dim must divide by heads");
        if (decoder_heads <= 0 || decoder_dim % decoder_heads != 0)
            throw DataError("model config: decoder_dim must divide by decoder_heads");
        if (patch_side <= 0 || input_w % patch_side != 0 || input_h % patch_side != 0)
            throw DataError("model config: patch side must divide the input size");
        if (embed_dim % 4 != 0 || decoder_dim % 4 != 0)
            throw DataError("model config: embedding dims must be divisible by 4 for positional encoding");
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
            throw DataError("model config: mask ratio must be in (0, 1)");
        if (!(mixup_ratio >= 0.0 && mixup_ratio <= 1.0))
            throw DataError("model config: mixup ratio must be in [0, 1]");
        if (c_max <= 0) throw DataError("model config: c_max must be positive");
    }
};

// ---------------------------------------------------------------------------
// 2-D sinusoidal positional table: half the channels encode the row index,
// half the column; each half holds sin then cos at dim/4 geometric
// frequencies (base 10000). Deterministic in the grid size; no interpolation
// between grid sizes. The [CLS] position uses an all-zero vector.
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> sincos_position_table(int n_w, int n_h, int dim) {
    if (dim % 4 != 0) throw DataError("positional encoding dim must be divisible by 4");
    const int q = dim / 4;
    TensorT<T> table({n_w * n_h, dim}, false);
    for (int iy = 0; iy < n_h; ++iy)
        for (int ix = 0; ix < n_w; ++ix) {
            T* row = table.data() + size_t(iy * n_w + ix) * size_t(dim);
            for (int k = 0; k < q; ++k) {
                const double omega = 1.0 / std::pow(10000.0, double(k) / double(q));
                row[k] = T(std::sin(double(iy) * omega));
                row[q + k] = T(std::cos(double(iy) * omega));
                row[2 * q + k] = T(std::sin(double(ix) * omega));
                row[3 * q + k] = T(std::cos(double(ix) * omega));
            }
        }
    return table;
}

// ---------------------------------------------------------------------------
// Random masking
// ---------------------------------------------------------------------------

struct MaskPlan {
    std::vector<int> ids_keep;
    std::vector<int> ids_mask;

    int total() const { return int(ids_keep.size() + ids_mask.size()); }

    static MaskPlan keep_all(int n) {
        MaskPlan p;
        p.ids_keep.resize(size_t(n));
        for (int i = 0; i < n; ++i) p.ids_keep[size_t(i)] = i;
        return p;
    }

    void validate(int n) const {
        std::vector<uint8_t> seen(size_t(n), 0);
        if (total() != n) throw DataError("mask plan does not cover the grid");
        for (int i : ids_keep) seen.at(size_t(i))++;
        for (int i : ids_mask) seen.at(size_t(i))++;
        for (uint8_t s : seen)
            if (s != 1) throw DataError("mask plan indices are not a partition");
    }
};

// Uniform permutation; the first round(R * n) positions are masked. Id lists
// are kept sorted so downstream gather order is canonical.
inline MaskPlan sample_mask(int n_positions, double mask_ratio, Rng& rng) {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
        throw DataError("mask ratio must be in (0, 1)");
    const int n_masked = int(std::llround(mask_ratio * double(n_positions)));
    std::vector<int> perm = rng.permutation(n_positions);
    MaskPlan plan;
    plan.ids_mask.assign(perm.begin(), perm.begin() + n_masked);
    plan.ids_keep.assign(perm.begin() + n_masked, perm.end());
    std::sort(plan.ids_mask.begin(), plan.ids_mask.end());
    std::sort(plan.ids_keep.begin(), plan.ids_keep.end());
    return plan;
}

// ---------------------------------------------------------------------------
// Transformer blocks (pre-norm, GELU MLP with 4x hidden ratio)
// ---------------------------------------------------------------------------

template <class T>
struct TransformerBlockT {
    TensorT<T> ln1_g, ln1_b;
    TensorT<T> w_q, b_q, w_k, w_v, b_v, w_out, b_out;
    TensorT<T> ln2_g, ln2_b;
    TensorT<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;

    void init(int dim, Rng& rng) {
        auto uniform_fan_in = [&rng](std::vector<int> shape, int fan_in) {
            TensorT<T> t(std::move(shape), true);
            const double bound = 1.0 / std::sqrt(double(fan_in));
            rng.fill_uniform(t.values(), -bound, bound);
            return t;
        };
        ln1_g = TensorT<T>::constant({dim}, T(1));
        ln1_g.node()->requires_grad = true;
        ln1_b = TensorT<T>({dim}, true);
        w_q = uniform_fan_in({dim, dim}, dim);
        b_q = TensorT<T>({dim}, true);
        w_k = uniform_fan_in({dim, dim}, dim);
        w_v = uniform_fan_in({dim, dim}, dim);
        b_v = TensorT<T>({dim}, true);
        w_out = uniform_fan_in({dim, dim}, dim);
        b_out = TensorT<T>({dim}, true);
        ln2_g = TensorT<T>::constant({dim}, T(1));
        ln2_g.node()->requires_grad = true;
        ln2_b = TensorT<T>({dim}, true);
        mlp_w1 = uniform_fan_in({4 * dim, dim}, dim);
        mlp_b1 = TensorT<T>({4 * dim}, true);
        mlp_w2 = uniform_fan_in({dim, 4 * dim}, 4 * dim);
        mlp_b2 = TensorT<T>({dim}, true);
    }

    TensorT<T> forward(const TensorT<T>& x, int heads) const {
        TensorT<T> h = add(x, multi_head_attention(layer_norm(x, ln1_g, ln1_b), w_q, b_q, w_k, w_v,
                                                   b_v, w_out, b_out, heads));
        return add(h, linear(gelu(linear(layer_norm(h, ln2_g, ln2_b), mlp_w1, mlp_b1)), mlp_w2, mlp_b2));
    }

    void collect(std::vector<std::pair<std::string, TensorT<T>>>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".ln1.g", ln1_g);
        out.emplace_back(prefix + ".ln1.b", ln1_b);
        out.emplace_back(prefix + ".attn.w_q", w_q);
        out.emplace_back(prefix + ".attn.b_q", b_q);
        out.emplace_back(prefix + ".attn.w_k", w_k);
        out.emplace_back(prefix + ".attn.w_v", w_v);
        out.emplace_back(prefix + ".attn.b_v", b_v);
        out.emplace_back(prefix + ".attn.w_out", w_out);
        out.emplace_back(prefix + ".attn.b_out", b_out);
        out.emplace_back(prefix + ".ln2.g", ln2_g);
        out.emplace_back(prefix + ".ln2.b", ln2_b);
        out.emplace_back(prefix + ".mlp.w1", mlp_w1);
        out.emplace_back(prefix + ".mlp.b1", mlp_b1);
        out.emplace_back(prefix + ".mlp.w2", mlp_w2);
        out.emplace_back(prefix + ".mlp.b2", mlp_b2);
    }
};

// ---------------------------------------------------------------------------
// Encoder-decoder model. Positional tables are deterministic functions of the
// grid size and are not parameters.
// ---------------------------------------------------------------------------

template <class T>
struct MaeModelT {
    ModelConfig cfg;
    std::vector<TransformerBlockT<T>> encoder;
    std::vector<TransformerBlockT<T>> decoder;
    TensorT<T> cls_emb;     // [D]
    TensorT<T> mask_emb;    // [decoder_dim]
    TensorT<T> adapter_w;   // [decoder_dim, D]
    TensorT<T> adapter_b;   // [decoder_dim]
    TensorT<T> enc_norm_g, enc_norm_b;
    TensorT<T> dec_norm_g, dec_norm_b;

    static MaeModelT init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        MaeModelT m;
        m.cfg = cfg;
        m.encoder.resize(size_t(cfg.depth));
        for (auto& blk : m.encoder) blk.init(cfg.embed_dim, rng);
        m.decoder.resize(size_t(cfg.decoder_depth));
        for (auto& blk : m.decoder) blk.init(cfg.decoder_dim, rng);
        m.cls_emb = TensorT<T>({cfg.embed_dim}, true);
        rng.fill_normal(m.cls_emb.values(), 0.0, 0.02);
        m.mask_emb = TensorT<T>({cfg.decoder_dim}, true);
        rng.fill_normal(m.mask_emb.values(), 0.0, 0.02);
        m.adapter_w = TensorT<T>({cfg.decoder_dim, cfg.embed_dim}, true);
        const double bound = 1.0 / std::sqrt(double(cfg.embed_dim));
        rng.fill_uniform(m.adapter_w.values(), -bound, bound);
        m.adapter_b = TensorT<T>({cfg.decoder_dim}, true);
        m.enc_norm_g = TensorT<T>::constant({cfg.embed_dim}, T(1));
        m.enc_norm_g.node()->requires_grad = true;
        m.enc_norm_b = TensorT<T>({cfg.embed_dim}, true);
        m.dec_norm_g = TensorT<T>::constant({cfg.decoder_dim}, T(1));
        m.dec_norm_g.node()->requires_grad = true;
        m.dec_norm_b = TensorT<T>({cfg.decoder_dim}, true);
        return m;
    }

    std::vector<std::pair<std::string, TensorT<T>>> named_parameters() const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        for (size_t i = 0; i < encoder.size(); ++i) encoder[i].collect(out, "enc." + std::to_string(i));
        for (size_t i = 0; i < decoder.size(); ++i) decoder[i].collect(out, "dec." + std::to_string(i));
        out.emplace_back("cls_emb", cls_emb);
        out.emplace_back("mask_emb", mask_emb);
        out.emplace_back("adapter.w", adapter_w);
        out.emplace_back("adapter.b", adapter_b);
        out.emplace_back("enc_norm.g", enc_norm_g);
        out.emplace_back("enc_norm.b", enc_norm_b);
        out.emplace_back("dec_norm.g", dec_norm_g);
        out.emplace_back("dec_norm.b", dec_norm_b);
        return out;
    }

    std::vector<TensorT<T>> parameters() const {
        std::vector<TensorT<T>> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }
};

using MaeModel = MaeModelT<double>;

// ---------------------------------------------------------------------------
// Encode / decode
// ---------------------------------------------------------------------------

// Adds encoder PE to the kept tokens, prepends [CLS] (zero positional
// vector), runs the encoder blocks and the final norm. The two mixed streams
// of a pair are each encoded in their own pass with shared weights.
template <class T>
TensorT<T> encode(const TokenGridT<T>& grid, const MaskPlan& plan, const MaeModelT<T>& m) {
    const int n_p = grid.position_count();
    plan.validate(n_p);
    TensorT<T> pe = sincos_position_table<T>(grid.n_w, grid.n_h, m.cfg.embed_dim);
    TensorT<T> x = add(gather_rows(grid.tokens, plan.ids_keep), gather_rows(pe, plan.ids_keep));
    x = concat_rows(fill_rows(m.cls_emb, 1, {0}), x);
    for (const auto& blk : m.encoder) x = blk.forward(x, m.cfg.heads);
    x = layer_norm(x, m.enc_norm_g, m.enc_norm_b);
    require_finite(x, "encoder activations");
    return x;  // [(kept + 1), D], row 0 is [CLS]
}

// Adapts latents to the decoder width, scatters kept tokens back to their
// grid positions, fills masked positions with the [MASK] embedding, adds
// decoder PE, runs the decoder and drops [CLS].
template <class T>
TensorT<T> decode(const TensorT<T>& latents, const MaskPlan& plan, const MaeModelT<T>& m,
                  int n_w, int n_h) {
    const int n_p = n_w * n_h;
    plan.validate(n_p);
    if (latents.dim(0) != int(plan.ids_keep.size()) + 1)
        throw DataError("decode: latent count inconsistent with mask plan");
    TensorT<T> adapted = linear(latents, m.adapter_w, m.adapter_b);
    TensorT<T> cls_row = gather_rows(adapted, {0});
    std::vector<int> token_rows(plan.ids_keep.size());
    for (size_t i = 0; i < token_rows.size(); ++i) token_rows[i] = int(i) + 1;
    TensorT<T> kept = gather_rows(adapted, token_rows);
    TensorT<T> grid = add(scatter_rows(kept, plan.ids_keep, n_p),
                          fill_rows(m.mask_emb, n_p, plan.ids_mask));
    grid = add(grid, sincos_position_table<T>(n_w, n_h, m.cfg.decoder_dim));
    TensorT<T> x = concat_rows(cls_row, grid);
    for (const auto& blk : m.decoder) x = blk.forward(x, m.cfg.decoder_heads);
    x = layer_norm(x, m.dec_norm_g, m.dec_norm_b);
    std::vector<int> drop_cls(size_t(n_p));
    for (int i = 0; i < n_p; ++i) drop_cls[size_t(i)] = i + 1;
    return gather_rows(x, drop_cls);  // [n_p, decoder_dim]
}

// ---------------------------------------------------------------------------
// Masked reconstruction loss
// ---------------------------------------------------------------------------

struct StreamLossReport {
    int masked_tokens = 0;
    double loss = 0;  // mean over masked tokens of per-token pixel MSE
};

// One mixed stream's loss: every masked position is reprojected through its
// source sensor (known from mixup provenance) and compared against that
// sensor's original patch pixels. Per-token error is the mean over the
// token's own S^2*C pixels, so sensors with more bands do not dominate;
// the stream loss is the mean of per-token errors over masked tokens.
template <class T>
TensorT<T> masked_stream_loss(const TensorT<T>& decoded, const MaskPlan& plan,
                              const std::vector<std::string>& provenance,
                              const std::map<std::string, const PatchGrid*>& targets,
                              const ProjectionBankT<T>& bank, StreamLossReport* report = nullptr) {
    const int masked_count = int(plan.ids_mask.size());
    if (masked_count == 0) throw DataError("masked_stream_loss: empty mask");
    TensorT<T> total = TensorT<T>::scalar(T(0));
    for (const auto& [sensor, grid] : targets) {
        std::vector<int> group;
        for (int p : plan.ids_mask) {
            if (provenance.at(size_t(p)).empty())
                throw DataError("masked_stream_loss: missing provenance at position " +
                                std::to_string(p));
            if (provenance[size_t(p)] == sensor) group.push_back(p);
        }
        if (group.empty()) continue;
        const std::vector<BandResolution> res = bank.resolutions_for(sensor);
        TensorT<T> recon = reproject_rows(gather_rows(decoded, group), bank, res, grid->band_count);
        TensorT<T> target({int(group.size()), grid->patch_len()}, false);
        for (size_t j = 0; j < group.size(); ++j) {
            const double* src = grid->patch(group[j]);
            for (int i = 0; i < grid->patch_len(); ++i)
                target.data()[j * size_t(grid->patch_len()) + size_t(i)] = T(src[i]);
        }
        TensorT<T> diff = sub(recon, target);
        total = add(total, sum_all(mean_rows(mul(diff, diff))));
    }
    TensorT<T> loss = scale(total, T(1) / T(masked_count));
    if (report) {
        report->masked_tokens = masked_count;
        report->loss = double(loss.item());
    }
    return loss;
}

template <class T>
struct PairForwardT {
    TensorT<T> loss;
    StreamLossReport stream_a, stream_b;
    // Mean per-masked-token pixel MSE across both streams.
    double masked_mse() const {
        const int n = stream_a.masked_tokens + stream_b.masked_tokens;
        return (stream_a.loss * stream_a.masked_tokens + stream_b.loss * stream_b.masked_tokens) /
               std::max(1, n);
    }
};

// Full pretraining forward for one co-registered pair: project both streams,
// cross-sensor mixup, independent masking, encode/decode each mixed stream
// with shared weights, reconstruct. Total loss is the sum of the two stream
// losses.
template <class T>
PairForwardT<T> forward_pair(const PatchGrid& grid_a, const PatchGrid& grid_b,
                             const MaeModelT<T>& model, const ProjectionBankT<T>& bank,
                             const MixMask& mix_mask, const MaskPlan& plan_a,
                             const MaskPlan& plan_b) {
    if (grid_a.n_w != grid_b.n_w || grid_a.n_h != grid_b.n_h)
        throw DataError("forward_pair: pair grids differ in size");
    TokenGridT<T> tokens_a = project(grid_a, bank, bank.resolutions_for(grid_a.sensor));
    TokenGridT<T> tokens_b = project(grid_b, bank, bank.resolutions_for(grid_b.sensor));
    auto [mixed_a, mixed_b] = mix(tokens_a, tokens_b, mix_mask);

    std::map<std::string, const PatchGrid*> targets{{grid_a.sensor, &grid_a},
                                                    {grid_b.sensor, &grid_b}};
    PairForwardT<T> out;
    TensorT<T> dec_a = decode(encode(mixed_a, plan_a, model), plan_a, model, grid_a.n_w, grid_a.n_h);
    TensorT<T> loss_a =
        masked_stream_loss(dec_a, plan_a, mixed_a.provenance, targets, bank, &out.stream_a);
    TensorT<T> dec_b = decode(encode(mixed_b, plan_b, model), plan_b, model, grid_b.n_w, grid_b.n_h);
    TensorT<T> loss_b =
        masked_stream_loss(dec_b, plan_b, mixed_b.provenance, targets, bank, &out.stream_b);
    out.loss = add(loss_a, loss_b);
    return out;
}

}  // namespace smarties
