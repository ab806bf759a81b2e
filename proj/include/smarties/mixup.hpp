#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "smarties/rng.hpp"
#include "smarties/tensor.hpp"
#include "smarties/tokenizer.hpp"

namespace smarties {

// Binary position mask broadcast along the embedding dimension. Fixed-count
// sampling: exactly round(ratio * N) ones, placed by seeded permutation, so a
// stated ratio is exact per sample rather than just in expectation.
struct MixMask {
    int n_w = 0;
    int n_h = 0;
    double ratio = 0;
    std::vector<uint8_t> m;  // 1 = first stream keeps its own token

    int position_count() const { return n_w * n_h; }
    int popcount() const {
        int c = 0;
        for (uint8_t v : m) c += v;
        return c;
    }
    MixMask complement() const {
        MixMask out = *this;
        out.ratio = 1.0 - ratio;
        for (auto& v : out.m) v = v ? 0 : 1;
        return out;
    }
};

inline MixMask sample_mix_mask(int n_w, int n_h, double ratio, Rng& rng) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw DataError("mix mask ratio must be in [0, 1]");
    MixMask mask;
    mask.n_w = n_w;
    mask.n_h = n_h;
    mask.ratio = ratio;
    const int n = n_w * n_h;
    const int ones = int(std::llround(ratio * double(n)));
    mask.m.assign(size_t(n), 0);
    std::vector<int> perm = rng.permutation(n);
    for (int i = 0; i < ones; ++i) mask.m[size_t(perm[size_t(i)])] = 1;
    return mask;
}

// Row-wise selection between two equally shaped token matrices: rows where
// the mask is 1 come verbatim from `a`, the rest from `b`. Gradients route to
// whichever source supplied the row.
template <class T>
TensorT<T> select_rows(const TensorT<T>& a, const TensorT<T>& b, const std::vector<uint8_t>& m) {
    detail::check(a.shape() == b.shape() && a.ndim() == 2, "select_rows: shape mismatch");
    detail::check(int(m.size()) == a.dim(0), "select_rows: mask length mismatch");
    const int n = a.dim(0), d = a.dim(1);
    std::vector<T> v(a.size());
    for (int r = 0; r < n; ++r) {
        const T* src = (m[size_t(r)] ? a.data() : b.data()) + size_t(r) * size_t(d);
        std::copy_n(src, size_t(d), v.data() + size_t(r) * size_t(d));
    }
    auto pa = a.node(), pb = b.node();
    auto mask = std::make_shared<std::vector<uint8_t>>(m);
    return detail::make_op<T>(a.shape(), std::move(v), {pa, pb},
                              [pa, pb, mask, n, d](const TensorNode<T>& out) {
                                  for (int r = 0; r < n; ++r) {
                                      auto& p = (*mask)[size_t(r)] ? pa : pb;
                                      if (!p->requires_grad) continue;
                                      const T* src = out.grad.data() + size_t(r) * size_t(d);
                                      T* dst = p->grad.data() + size_t(r) * size_t(d);
                                      for (int i = 0; i < d; ++i) dst[i] += src[i];
                                  }
                              });
}

// Cross-sensor token mixup: the mixed stream keeps stream-a tokens where the
// mask is 1 and takes stream-b tokens elsewhere; the mirrored stream does the
// opposite, so no token is lost. Provenance follows the tokens.
template <class T>
std::pair<TokenGridT<T>, TokenGridT<T>> mix(const TokenGridT<T>& ta, const TokenGridT<T>& tb,
                                            const MixMask& mask) {
    if (ta.n_w != tb.n_w || ta.n_h != tb.n_h || ta.tokens.shape() != tb.tokens.shape())
        throw DataError("mix: token grid shapes differ");
    if (mask.n_w != ta.n_w || mask.n_h != ta.n_h)
        throw DataError("mix: mask shape differs from token grids");
    TokenGridT<T> mixed_a, mixed_b;
    mixed_a.n_w = mixed_b.n_w = ta.n_w;
    mixed_a.n_h = mixed_b.n_h = ta.n_h;
    mixed_a.tokens = select_rows(ta.tokens, tb.tokens, mask.m);
    const MixMask inv = mask.complement();
    mixed_b.tokens = select_rows(ta.tokens, tb.tokens, inv.m);
    mixed_a.provenance.resize(size_t(mask.position_count()));
    mixed_b.provenance.resize(size_t(mask.position_count()));
    for (int p = 0; p < mask.position_count(); ++p) {
        mixed_a.provenance[size_t(p)] = mask.m[size_t(p)] ? ta.provenance[size_t(p)] : tb.provenance[size_t(p)];
        mixed_b.provenance[size_t(p)] = mask.m[size_t(p)] ? tb.provenance[size_t(p)] : ta.provenance[size_t(p)];
    }
    return {std::move(mixed_a), std::move(mixed_b)};
}

}  // namespace smarties
