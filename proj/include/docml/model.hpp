#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "docml/docmodel.hpp"
#include "docml/geometry.hpp"
#include "docml/masking.hpp"
#include "docml/rng.hpp"
#include "docml/tensor.hpp"

namespace docml {

struct ModelConfig {
    int layers = 4;
    int heads = 4;
    int hidden = 128;   // D
    int ffn_inner = 512;
    int max_seq = 64;   // L
    int channels = 3, image_h = 64, image_w = 64, patch = 16;
    int text_vocab = 1000;
    int image_vocab = 512;
    double alpha = 32.0; // attention stabilization divisor
    int rel1d_buckets = 32, rel1d_max_distance = 128;
    int rel2d_buckets = 64, rel2d_max_distance = 1000;
    bool tie_mlm = false;

    PatchGrid grid() const { return make_patch_grid(image_h, image_w, patch); }
    int patch_count() const { return grid().patch_count(); }
    int seq_total() const { return max_seq + patch_count(); }
    EncodeConfig encode_config() const { return {max_seq, channels, image_h, image_w, patch}; }

    void validate() const {
        if (layers < 0 || heads < 1 || hidden < 1 || ffn_inner < 1 || max_seq < 2)
            throw ConfigError("model: non-positive dimension");
        if (hidden % heads != 0)
            throw ConfigError("model: hidden size not divisible by head count");
        if (alpha <= 0.0)
            throw ConfigError("model: alpha must be positive");
        if (rel1d_buckets < 4 || rel1d_buckets % 2 != 0 || rel2d_buckets < 4 || rel2d_buckets % 2 != 0)
            throw ConfigError("model: relative bias bucket counts must be even and >= 4");
        if (rel1d_max_distance <= 0 || rel2d_max_distance <= 0)
            throw ConfigError("model: relative bias max distance must be positive");
        if (text_vocab <= Vocabulary::kReserved)
            throw ConfigError("model: text vocab too small");
        grid(); // throws on bad image/patch combination
    }

    static ModelConfig desk() { return {}; }
    static ModelConfig base() {
        ModelConfig c;
        c.layers = 12; c.heads = 12; c.hidden = 768; c.ffn_inner = 3072;
        c.max_seq = 512; c.image_h = 224; c.image_w = 224; c.patch = 16;
        return c;
    }
    static ModelConfig large() {
        ModelConfig c;
        c.layers = 24; c.heads = 16; c.hidden = 1024; c.ffn_inner = 4096;
        c.max_seq = 512; c.image_h = 224; c.image_w = 224; c.patch = 16;
        return c;
    }
};

// Sign-aware log bucketing of a relative offset: half the buckets per sign,
// exact buckets for small |delta|, logarithmic up to max_distance, saturating
// beyond.
inline int relative_bucket_1d(int delta, int buckets, int max_distance) {
    const int half = buckets / 2;
    int bucket = 0;
    int pos = delta;
    if (pos > 0)
        bucket += half;
    else
        pos = -pos;
    const int max_exact = half / 2;
    if (pos < max_exact)
        return bucket + pos;
    const double v = max_exact + std::log(double(pos) / max_exact) /
                                     std::log(double(max_distance) / max_exact) * (half - max_exact);
    return bucket + std::min(int(v), half - 1);
}

enum class ParamKind { Weight, Bias, LnGain, BiasTable };

template <class S>
struct LayerParams {
    Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor<S> wq, wk, wv, wo;
    Tensor<S> bq, bk, bv, bo;
    Tensor<S> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

template <class S>
struct Parameters {
    Tensor<S> word_emb;                    // vocab x D
    Tensor<S> pos1d;                       // L x D
    Tensor<S> x_tab, y_tab, w_tab, h_tab;  // (kNormRange+1) x D
    Tensor<S> patch_proj_w;                // (P*P*C) x D
    Tensor<S> patch_proj_b;                // 1 x D
    Tensor<S> patch_pos;                   // M x D
    Tensor<S> mask_patch;                  // 1 x D
    Tensor<S> rel1d, rel2dx, rel2dy;       // heads x buckets
    std::vector<LayerParams<S>> layers;
    Tensor<S> mlm_w, mlm_b;                // D x vocab (empty when tied), 1 x vocab
    Tensor<S> mim_w, mim_b;                // D x image_vocab, 1 x image_vocab
    Tensor<S> wpa_w1, wpa_b1, wpa_w2, wpa_b2; // D x D, 1 x D, D x 1, 1 x 1

    static Parameters shaped(const ModelConfig& cfg) {
        cfg.validate();
        const int D = cfg.hidden, F = cfg.ffn_inner, M = cfg.patch_count();
        Parameters p;
        p.word_emb = Tensor<S>(cfg.text_vocab, D);
        p.pos1d = Tensor<S>(cfg.max_seq, D);
        p.x_tab = Tensor<S>(kNormRange + 1, D);
        p.y_tab = Tensor<S>(kNormRange + 1, D);
        p.w_tab = Tensor<S>(kNormRange + 1, D);
        p.h_tab = Tensor<S>(kNormRange + 1, D);
        p.patch_proj_w = Tensor<S>(cfg.patch * cfg.patch * cfg.channels, D);
        p.patch_proj_b = Tensor<S>(1, D);
        p.patch_pos = Tensor<S>(M, D);
        p.mask_patch = Tensor<S>(1, D);
        p.rel1d = Tensor<S>(cfg.heads, cfg.rel1d_buckets);
        p.rel2dx = Tensor<S>(cfg.heads, cfg.rel2d_buckets);
        p.rel2dy = Tensor<S>(cfg.heads, cfg.rel2d_buckets);
        p.layers.resize(std::size_t(cfg.layers));
        for (auto& l : p.layers) {
            l.ln1_g = Tensor<S>(1, D); l.ln1_b = Tensor<S>(1, D);
            l.ln2_g = Tensor<S>(1, D); l.ln2_b = Tensor<S>(1, D);
            l.wq = Tensor<S>(D, D); l.wk = Tensor<S>(D, D);
            l.wv = Tensor<S>(D, D); l.wo = Tensor<S>(D, D);
            l.bq = Tensor<S>(1, D); l.bk = Tensor<S>(1, D);
            l.bv = Tensor<S>(1, D); l.bo = Tensor<S>(1, D);
            l.ffn_w1 = Tensor<S>(D, F); l.ffn_b1 = Tensor<S>(1, F);
            l.ffn_w2 = Tensor<S>(F, D); l.ffn_b2 = Tensor<S>(1, D);
        }
        if (!cfg.tie_mlm)
            p.mlm_w = Tensor<S>(D, cfg.text_vocab);
        p.mlm_b = Tensor<S>(1, cfg.text_vocab);
        p.mim_w = Tensor<S>(D, cfg.image_vocab);
        p.mim_b = Tensor<S>(1, cfg.image_vocab);
        p.wpa_w1 = Tensor<S>(D, D);
        p.wpa_b1 = Tensor<S>(1, D);
        p.wpa_w2 = Tensor<S>(D, 1);
        p.wpa_b2 = Tensor<S>(1, 1);
        return p;
    }

    static Parameters init(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.02) {
        Parameters p = shaped(cfg);
        Rng rng(mix_seed(seed, 0xd0c1));
        p.for_each([&](const std::string&, Tensor<S>& t, ParamKind kind) {
            switch (kind) {
            case ParamKind::Weight:
                for (auto& v : t.data)
                    v = S(rng.gauss() * scale);
                break;
            case ParamKind::LnGain:
                for (auto& v : t.data)
                    v = S(1);
                break;
            case ParamKind::Bias:
            case ParamKind::BiasTable:
                break; // zero
            }
        });
        return p;
    }

    template <class F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <class F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

private:
    template <class Self, class F>
    static void visit(Self& s, F& f) {
        auto emit = [&](const char* name, auto& t, ParamKind k) {
            if (!t.empty())
                f(std::string(name), t, k);
        };
        emit("embed.word", s.word_emb, ParamKind::Weight);
        emit("embed.pos1d", s.pos1d, ParamKind::Weight);
        emit("embed.x", s.x_tab, ParamKind::Weight);
        emit("embed.y", s.y_tab, ParamKind::Weight);
        emit("embed.w", s.w_tab, ParamKind::Weight);
        emit("embed.h", s.h_tab, ParamKind::Weight);
        emit("patch.proj_w", s.patch_proj_w, ParamKind::Weight);
        emit("patch.proj_b", s.patch_proj_b, ParamKind::Bias);
        emit("patch.pos", s.patch_pos, ParamKind::Weight);
        emit("patch.mask", s.mask_patch, ParamKind::Weight);
        emit("rel.1d", s.rel1d, ParamKind::BiasTable);
        emit("rel.2dx", s.rel2dx, ParamKind::BiasTable);
        emit("rel.2dy", s.rel2dy, ParamKind::BiasTable);
        for (std::size_t i = 0; i < s.layers.size(); ++i) {
            auto& l = s.layers[i];
            const std::string pre = "layer" + std::to_string(i) + ".";
            auto leaf = [&](const char* name, auto& t, ParamKind k) {
                if (!t.empty())
                    f(pre + name, t, k);
            };
            leaf("ln1_g", l.ln1_g, ParamKind::LnGain);
            leaf("ln1_b", l.ln1_b, ParamKind::Bias);
            leaf("wq", l.wq, ParamKind::Weight);
            leaf("bq", l.bq, ParamKind::Bias);
            leaf("wk", l.wk, ParamKind::Weight);
            leaf("bk", l.bk, ParamKind::Bias);
            leaf("wv", l.wv, ParamKind::Weight);
            leaf("bv", l.bv, ParamKind::Bias);
            leaf("wo", l.wo, ParamKind::Weight);
            leaf("bo", l.bo, ParamKind::Bias);
            leaf("ln2_g", l.ln2_g, ParamKind::LnGain);
            leaf("ln2_b", l.ln2_b, ParamKind::Bias);
            leaf("ffn_w1", l.ffn_w1, ParamKind::Weight);
            leaf("ffn_b1", l.ffn_b1, ParamKind::Bias);
            leaf("ffn_w2", l.ffn_w2, ParamKind::Weight);
            leaf("ffn_b2", l.ffn_b2, ParamKind::Bias);
        }
        emit("head.mlm_w", s.mlm_w, ParamKind::Weight);
        emit("head.mlm_b", s.mlm_b, ParamKind::Bias);
        emit("head.mim_w", s.mim_w, ParamKind::Weight);
        emit("head.mim_b", s.mim_b, ParamKind::Bias);
        emit("head.wpa_w1", s.wpa_w1, ParamKind::Weight);
        emit("head.wpa_b1", s.wpa_b1, ParamKind::Bias);
        emit("head.wpa_w2", s.wpa_w2, ParamKind::Weight);
        emit("head.wpa_b2", s.wpa_b2, ParamKind::Bias);
    }
};

// Bucket index matrices, shared across layers and heads. Depends only on
// positions and boxes, so it can be cached per document.
struct BiasIndex {
    int n = 0;
    std::vector<std::int32_t> b1d, b2dx, b2dy; // n*n each
};

inline BiasIndex build_bias_index(const EncodedInput& enc, const ModelConfig& cfg) {
    const int L = enc.seq_len(), M = enc.patch_count(), n = L + M;
    BiasIndex idx;
    idx.n = n;
    idx.b1d.resize(std::size_t(n) * n);
    idx.b2dx.resize(std::size_t(n) * n);
    idx.b2dy.resize(std::size_t(n) * n);
    std::vector<int> pos(n), cx(n), cy(n);
    for (int i = 0; i < n; ++i) {
        // 1D positions are modality-local indices; boxes are segment boxes
        // for text and cell extents for patches.
        const NormBox& b = i < L ? enc.token_boxes[i] : enc.patch_boxes[i - L];
        pos[i] = i < L ? i : i - L;
        cx[i] = b.center_x();
        cy[i] = b.center_y();
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const std::size_t o = std::size_t(i) * n + j;
            idx.b1d[o] = relative_bucket_1d(pos[j] - pos[i], cfg.rel1d_buckets, cfg.rel1d_max_distance);
            idx.b2dx[o] = relative_bucket_1d(cx[j] - cx[i], cfg.rel2d_buckets, cfg.rel2d_max_distance);
            idx.b2dy[o] = relative_bucket_1d(cy[j] - cy[i], cfg.rel2d_buckets, cfg.rel2d_max_distance);
        }
    return idx;
}

// Materialized per-head bias matrix (true-logit units).
template <class S>
Tensor<S> attention_bias_matrix(const Parameters<S>& p, const BiasIndex& idx, int head) {
    Tensor<S> b(idx.n, idx.n);
    for (int i = 0; i < idx.n; ++i)
        for (int j = 0; j < idx.n; ++j) {
            const std::size_t o = std::size_t(i) * idx.n + j;
            b.at(i, j) = p.rel1d.at(head, idx.b1d[o]) + p.rel2dx.at(head, idx.b2dx[o]) +
                         p.rel2dy.at(head, idx.b2dy[o]);
        }
    return b;
}

// One stabilized attention row: weights = softmax over unmasked keys of
//   (q . k_j)/sqrt(d) + bias_j
// computed as softmax(((q/(alpha*sqrt(d))) . k_j + bias_j/alpha - rowmax) * alpha),
// which is algebraically the same but cannot overflow. Returns false and
// zeroes the row when every key is masked.
template <class S>
bool stabilized_attention_row(const S* q, const Tensor<S>& keys, int col0, int dh,
                              const std::uint8_t* key_mask, int n_keys, S alpha,
                              const S* bias_row, S* out) {
    const S inv = S(1) / (alpha * S(std::sqrt(double(dh))));
    S maxv = S(0);
    bool any = false;
    for (int j = 0; j < n_keys; ++j) {
        if (key_mask && !key_mask[j]) {
            out[j] = S(0);
            continue;
        }
        const S* kr = keys.row(j) + col0;
        S acc = S(0);
        for (int c = 0; c < dh; ++c)
            acc += q[c] * kr[c];
        acc *= inv;
        if (bias_row)
            acc += bias_row[j] / alpha;
        out[j] = acc;
        if (!any || acc > maxv) {
            maxv = acc;
            any = true;
        }
    }
    if (!any)
        return false;
    S sum = S(0);
    for (int j = 0; j < n_keys; ++j) {
        if (key_mask && !key_mask[j])
            continue;
        out[j] = std::exp((out[j] - maxv) * alpha);
        sum += out[j];
    }
    const S norm = S(1) / sum;
    for (int j = 0; j < n_keys; ++j)
        if (!key_mask || key_mask[j])
            out[j] *= norm;
    return true;
}

inline constexpr double kLnEps = 1e-5;

template <class S>
void layer_norm_forward(const Tensor<S>& x, const Tensor<S>& g, const Tensor<S>& b, Tensor<S>& xhat,
                        std::vector<S>& istd, Tensor<S>& out) {
    const int D = x.cols;
    for (int r = 0; r < x.rows; ++r) {
        const S* xr = x.row(r);
        S mean = S(0);
        for (int i = 0; i < D; ++i)
            mean += xr[i];
        mean /= S(D);
        S var = S(0);
        for (int i = 0; i < D; ++i) {
            const S d = xr[i] - mean;
            var += d * d;
        }
        var /= S(D);
        const S is = S(1) / std::sqrt(var + S(kLnEps));
        istd[std::size_t(r)] = is;
        S* hr = xhat.row(r);
        S* yr = out.row(r);
        for (int i = 0; i < D; ++i) {
            hr[i] = (xr[i] - mean) * is;
            yr[i] = g.data[i] * hr[i] + b.data[i];
        }
    }
}

template <class S>
void layer_norm_backward(const Tensor<S>& dy, const Tensor<S>& xhat, const std::vector<S>& istd,
                         const Tensor<S>& g, Tensor<S>& dg, Tensor<S>& db, Tensor<S>& dx_acc) {
    const int D = dy.cols;
    std::vector<S> dxhat(static_cast<std::size_t>(D));
    for (int r = 0; r < dy.rows; ++r) {
        const S* dyr = dy.row(r);
        const S* hr = xhat.row(r);
        S m1 = S(0), m2 = S(0);
        for (int i = 0; i < D; ++i) {
            dxhat[std::size_t(i)] = dyr[i] * g.data[i];
            dg.data[i] += dyr[i] * hr[i];
            db.data[i] += dyr[i];
            m1 += dxhat[std::size_t(i)];
            m2 += dxhat[std::size_t(i)] * hr[i];
        }
        m1 /= S(D);
        m2 /= S(D);
        S* dxr = dx_acc.row(r);
        const S is = istd[std::size_t(r)];
        for (int i = 0; i < D; ++i)
            dxr[i] += is * (dxhat[std::size_t(i)] - m1 - hr[i] * m2);
    }
}

template <class S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + S(std::erf(double(x) * M_SQRT1_2)));
}

template <class S>
S gelu_grad(S x) {
    const double phi = std::exp(-0.5 * double(x) * double(x)) / std::sqrt(2.0 * M_PI);
    const double Phi = 0.5 * (1.0 + std::erf(double(x) * M_SQRT1_2));
    return S(Phi + double(x) * phi);
}

template <class S>
struct LayerTrace {
    Tensor<S> x_in;                 // N x D
    Tensor<S> ln1_xhat, ln1_out;    // N x D
    std::vector<S> ln1_istd;        // N
    Tensor<S> q, k, v;              // N x D
    Tensor<S> attn;                 // (heads*N) x N
    Tensor<S> ctx;                  // N x D
    Tensor<S> x_mid;                // N x D
    Tensor<S> ln2_xhat, ln2_out;    // N x D
    std::vector<S> ln2_istd;        // N
    Tensor<S> ffn_pre, ffn_act;     // N x F
};

// Contextual output plus everything the backward pass needs.
template <class S>
struct EncodeResult {
    Tensor<S> embedded;             // N x D input to layer 0
    std::vector<LayerTrace<S>> layers;
    Tensor<S> out;                  // N x D
    BiasIndex bias;
    std::vector<std::uint8_t> key_mask;     // N
    std::vector<int> corrupted_ids;         // L
    std::vector<std::uint8_t> patch_masked; // M
};

template <class S>
void apply_plan_to_ids(const EncodedInput& enc, const MaskingPlan* plan, std::vector<int>& ids,
                       std::vector<std::uint8_t>& patch_masked) {
    ids = enc.token_ids;
    patch_masked.assign(std::size_t(enc.patch_count()), 0);
    if (!plan)
        return;
    for (std::size_t i = 0; i < plan->masked_text.size(); ++i) {
        const int pos = plan->masked_text[i];
        switch (plan->text_replacements[i]) {
        case Replacement::Mask:
            ids[std::size_t(pos)] = Vocabulary::kMask;
            break;
        case Replacement::Random:
            ids[std::size_t(pos)] = plan->random_ids[i];
            break;
        case Replacement::Keep:
            break;
        }
    }
    for (int k : plan->masked_patches)
        patch_masked[std::size_t(k)] = 1;
}

// Text embedding: word + 1D position + segment-box layout terms
// x(x0) + x(x1) + y(y0) + y(y1) + w(x1-x0) + h(y1-y0).
template <class S>
void embed_text_rows(const EncodedInput& enc, const std::vector<int>& ids, const Parameters<S>& p,
                     const ModelConfig& cfg, Tensor<S>& out) {
    const int D = cfg.hidden;
    for (int pos = 0; pos < enc.seq_len(); ++pos) {
        const int id = ids[std::size_t(pos)];
        if (id < 0 || id >= cfg.text_vocab)
            throw DataError("embed_text: token id " + std::to_string(id) + " out of range");
        const NormBox& b = enc.token_boxes[std::size_t(pos)];
        const S* rows[8] = {p.word_emb.row(id),   p.pos1d.row(pos),      p.x_tab.row(b.x0),
                            p.x_tab.row(b.x1),    p.y_tab.row(b.y0),     p.y_tab.row(b.y1),
                            p.w_tab.row(b.width()), p.h_tab.row(b.height())};
        S* o = out.row(pos);
        for (int c = 0; c < D; ++c) {
            S acc = S(0);
            for (const S* r : rows)
                acc += r[c];
            o[c] = acc;
        }
    }
}

template <class S>
Tensor<S> embed_text(const EncodedInput& enc, const Parameters<S>& p, const ModelConfig& cfg) {
    Tensor<S> out(enc.seq_len(), cfg.hidden);
    embed_text_rows(enc, enc.token_ids, p, cfg, out);
    return out;
}

// Patch embedding: shared linear projection of the flattened patch
// (pixel values scaled to [0,1]) plus the 1D patch position embedding.
// Masked patches use the learned mask embedding instead of the projection.
template <class S>
void embed_patch_rows(const EncodedInput& enc, const std::vector<std::uint8_t>& patch_masked,
                      const Parameters<S>& p, const ModelConfig& cfg, Tensor<S>& out, int row0) {
    const int D = cfg.hidden, M = enc.patch_count();
    const int flat = cfg.patch * cfg.patch * cfg.channels;
    for (int m = 0; m < M; ++m) {
        S* o = out.row(row0 + m);
        const S* posr = p.patch_pos.row(m);
        if (!patch_masked.empty() && patch_masked[std::size_t(m)]) {
            const S* mr = p.mask_patch.row(0);
            for (int c = 0; c < D; ++c)
                o[c] = mr[c] + posr[c];
            continue;
        }
        const auto& px = enc.patch_pixels[std::size_t(m)];
        if (int(px.size()) != flat)
            throw DataError("embed_patches: patch size mismatch");
        const S* bias = p.patch_proj_b.row(0);
        for (int c = 0; c < D; ++c)
            o[c] = bias[c] + posr[c];
        for (int i = 0; i < flat; ++i) {
            const S v = S(px[std::size_t(i)]) / S(255);
            if (v == S(0))
                continue;
            const S* wr = p.patch_proj_w.row(i);
            for (int c = 0; c < D; ++c)
                o[c] += v * wr[c];
        }
    }
}

template <class S>
Tensor<S> embed_patches(const EncodedInput& enc, const Parameters<S>& p, const ModelConfig& cfg) {
    Tensor<S> out(enc.patch_count(), cfg.hidden);
    embed_patch_rows(enc, {}, p, cfg, out, 0);
    return out;
}

// Full encoder forward: concatenated [text | patches] through pre-norm
// Transformer layers with per-head additive relative bias and stabilized
// attention. With zero layers the output equals the embedded input.
template <class S>
EncodeResult<S> encode(const EncodedInput& enc, const MaskingPlan* plan, const Parameters<S>& p,
                       const ModelConfig& cfg, const BiasIndex* cached_bias = nullptr) {
    cfg.validate();
    const int L = enc.seq_len(), M = enc.patch_count(), N = L + M;
    const int D = cfg.hidden, H = cfg.heads, dh = D / H, F = cfg.ffn_inner;
    if (L != cfg.max_seq || M != cfg.patch_count())
        throw ConfigError("encode: input shaped for a different config");

    EncodeResult<S> t;
    apply_plan_to_ids<S>(enc, plan, t.corrupted_ids, t.patch_masked);
    t.bias = cached_bias ? *cached_bias : build_bias_index(enc, cfg);
    t.key_mask.resize(std::size_t(N));
    for (int i = 0; i < L; ++i)
        t.key_mask[std::size_t(i)] = enc.attention_flags[std::size_t(i)];
    for (int m = 0; m < M; ++m)
        t.key_mask[std::size_t(L + m)] = 1;

    t.embedded = Tensor<S>(N, D);
    embed_text_rows(enc, t.corrupted_ids, p, cfg, t.embedded);
    embed_patch_rows(enc, t.patch_masked, p, cfg, t.embedded, L);

    const S alpha = S(cfg.alpha);
    Tensor<S> x = t.embedded;
    t.layers.resize(std::size_t(cfg.layers));
    std::vector<S> bias_row(static_cast<std::size_t>(N));
    for (int li = 0; li < cfg.layers; ++li) {
        auto& lt = t.layers[std::size_t(li)];
        const auto& lp = p.layers[std::size_t(li)];
        lt.x_in = x;
        lt.ln1_xhat = Tensor<S>(N, D);
        lt.ln1_out = Tensor<S>(N, D);
        lt.ln1_istd.resize(std::size_t(N));
        layer_norm_forward(lt.x_in, lp.ln1_g, lp.ln1_b, lt.ln1_xhat, lt.ln1_istd, lt.ln1_out);

        lt.q = Tensor<S>(N, D);
        lt.k = Tensor<S>(N, D);
        lt.v = Tensor<S>(N, D);
        matmul(lt.ln1_out, lp.wq, lt.q);
        matmul(lt.ln1_out, lp.wk, lt.k);
        matmul(lt.ln1_out, lp.wv, lt.v);
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < D; ++c) {
                lt.q.at(i, c) += lp.bq.data[std::size_t(c)];
                lt.k.at(i, c) += lp.bk.data[std::size_t(c)];
                lt.v.at(i, c) += lp.bv.data[std::size_t(c)];
            }

        lt.attn = Tensor<S>(H * N, N);
        lt.ctx = Tensor<S>(N, D);
        for (int h = 0; h < H; ++h) {
            const int col0 = h * dh;
            const S* t1d = p.rel1d.row(h);
            const S* t2x = p.rel2dx.row(h);
            const S* t2y = p.rel2dy.row(h);
            for (int i = 0; i < N; ++i) {
                const std::size_t base = std::size_t(i) * N;
                for (int j = 0; j < N; ++j) {
                    const std::size_t o = base + j;
                    bias_row[std::size_t(j)] =
                        t1d[t.bias.b1d[o]] + t2x[t.bias.b2dx[o]] + t2y[t.bias.b2dy[o]];
                }
                S* arow = lt.attn.row(h * N + i);
                stabilized_attention_row(lt.q.row(i) + col0, lt.k, col0, dh, t.key_mask.data(), N,
                                         alpha, bias_row.data(), arow);
                S* crow = lt.ctx.row(i) + col0;
                for (int c = 0; c < dh; ++c)
                    crow[c] = S(0);
                for (int j = 0; j < N; ++j) {
                    const S a = arow[j];
                    if (a == S(0))
                        continue;
                    const S* vr = lt.v.row(j) + col0;
                    for (int c = 0; c < dh; ++c)
                        crow[c] += a * vr[c];
                }
            }
        }

        lt.x_mid = lt.x_in;
        matmul(lt.ctx, lp.wo, lt.x_mid, /*accumulate=*/true);
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < D; ++c)
                lt.x_mid.at(i, c) += lp.bo.data[std::size_t(c)];

        lt.ln2_xhat = Tensor<S>(N, D);
        lt.ln2_out = Tensor<S>(N, D);
        lt.ln2_istd.resize(std::size_t(N));
        layer_norm_forward(lt.x_mid, lp.ln2_g, lp.ln2_b, lt.ln2_xhat, lt.ln2_istd, lt.ln2_out);

        lt.ffn_pre = Tensor<S>(N, F);
        matmul(lt.ln2_out, lp.ffn_w1, lt.ffn_pre);
        lt.ffn_act = Tensor<S>(N, F);
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < F; ++c) {
                const S pre = lt.ffn_pre.at(i, c) + lp.ffn_b1.data[std::size_t(c)];
                lt.ffn_pre.at(i, c) = pre;
                lt.ffn_act.at(i, c) = gelu(pre);
            }

        x = lt.x_mid;
        matmul(lt.ffn_act, lp.ffn_w2, x, /*accumulate=*/true);
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < D; ++c)
                x.at(i, c) += lp.ffn_b2.data[std::size_t(c)];
    }
    t.out = std::move(x);
    if (!t.out.finite())
        throw NumericError("encode: non-finite activations");
    return t;
}

// Backpropagate d_out through the encoder and embeddings, accumulating into
// grads (which must be shaped like p).
template <class S>
void encode_backward(const EncodedInput& enc, const Parameters<S>& p, const ModelConfig& cfg,
                     const EncodeResult<S>& t, const Tensor<S>& d_out, Parameters<S>& grads) {
    const int L = enc.seq_len(), M = enc.patch_count(), N = L + M;
    const int D = cfg.hidden, H = cfg.heads, dh = D / H, F = cfg.ffn_inner;
    const S inv_sqrt_dh = S(1) / S(std::sqrt(double(dh)));

    Tensor<S> dx = d_out;
    std::vector<S> da(static_cast<std::size_t>(N)), dz(static_cast<std::size_t>(N));
    for (int li = cfg.layers - 1; li >= 0; --li) {
        const auto& lt = t.layers[std::size_t(li)];
        const auto& lp = p.layers[std::size_t(li)];
        auto& lg = grads.layers[std::size_t(li)];

        // FFN branch: x_out = x_mid + gelu(ln2(x_mid) W1 + b1) W2 + b2
        Tensor<S> d_act(N, F);
        matmul_bt(dx, lp.ffn_w2, d_act);
        matmul_at_acc(lt.ffn_act, dx, lg.ffn_w2);
        rowsum_acc(dx, lg.ffn_b2);
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < F; ++c)
                d_act.at(i, c) *= gelu_grad(lt.ffn_pre.at(i, c));
        rowsum_acc(d_act, lg.ffn_b1);
        Tensor<S> d_ln2(N, D);
        matmul_bt(d_act, lp.ffn_w1, d_ln2);
        matmul_at_acc(lt.ln2_out, d_act, lg.ffn_w1);
        // dx currently holds d(x_out); residual passes it to x_mid, plus the
        // LN2 path.
        layer_norm_backward(d_ln2, lt.ln2_xhat, lt.ln2_istd, lp.ln2_g, lg.ln2_g, lg.ln2_b, dx);

        // Attention branch: x_mid = x_in + ctx Wo + bo
        Tensor<S> d_ctx(N, D);
        matmul_bt(dx, lp.wo, d_ctx);
        matmul_at_acc(lt.ctx, dx, lg.wo);
        rowsum_acc(dx, lg.bo);

        Tensor<S> dq(N, D), dk(N, D), dv(N, D);
        for (int h = 0; h < H; ++h) {
            const int col0 = h * dh;
            S* g1d = grads.rel1d.row(h);
            S* g2x = grads.rel2dx.row(h);
            S* g2y = grads.rel2dy.row(h);
            for (int i = 0; i < N; ++i) {
                const S* arow = lt.attn.row(h * N + i);
                const S* dctx_row = d_ctx.row(i) + col0;
                S dot = S(0);
                for (int j = 0; j < N; ++j) {
                    if (arow[j] == S(0)) {
                        da[std::size_t(j)] = S(0);
                        continue;
                    }
                    const S* vr = lt.v.row(j) + col0;
                    S acc = S(0);
                    for (int c = 0; c < dh; ++c) {
                        acc += dctx_row[c] * vr[c];
                    }
                    da[std::size_t(j)] = acc;
                    dot += acc * arow[j];
                    S* dvr = dv.row(j) + col0;
                    for (int c = 0; c < dh; ++c)
                        dvr[c] += arow[j] * dctx_row[c];
                }
                const std::size_t base = std::size_t(i) * N;
                const S* qrow = lt.q.row(i) + col0;
                S* dqrow = dq.row(i) + col0;
                for (int j = 0; j < N; ++j) {
                    const S a = arow[j];
                    if (a == S(0))
                        continue;
                    const S dzj = a * (da[std::size_t(j)] - dot);
                    if (dzj == S(0))
                        continue;
                    const std::size_t o = base + j;
                    g1d[t.bias.b1d[o]] += dzj;
                    g2x[t.bias.b2dx[o]] += dzj;
                    g2y[t.bias.b2dy[o]] += dzj;
                    const S* krow = lt.k.row(j) + col0;
                    S* dkrow = dk.row(j) + col0;
                    const S scaled = dzj * inv_sqrt_dh;
                    for (int c = 0; c < dh; ++c) {
                        dqrow[c] += scaled * krow[c];
                        dkrow[c] += scaled * qrow[c];
                    }
                }
            }
        }

        Tensor<S> d_ln1(N, D);
        matmul_bt(dq, lp.wq, d_ln1);
        matmul_bt(dk, lp.wk, d_ln1, /*accumulate=*/true);
        matmul_bt(dv, lp.wv, d_ln1, /*accumulate=*/true);
        matmul_at_acc(lt.ln1_out, dq, lg.wq);
        matmul_at_acc(lt.ln1_out, dk, lg.wk);
        matmul_at_acc(lt.ln1_out, dv, lg.wv);
        rowsum_acc(dq, lg.bq);
        rowsum_acc(dk, lg.bk);
        rowsum_acc(dv, lg.bv);
        layer_norm_backward(d_ln1, lt.ln1_xhat, lt.ln1_istd, lp.ln1_g, lg.ln1_g, lg.ln1_b, dx);
        // dx now carries d(x_in) for the next layer down
    }

    // embedding backward
    const int flat = cfg.patch * cfg.patch * cfg.channels;
    for (int pos = 0; pos < L; ++pos) {
        const S* d = dx.row(pos);
        const int id = t.corrupted_ids[std::size_t(pos)];
        const NormBox& b = enc.token_boxes[std::size_t(pos)];
        S* rows[8] = {grads.word_emb.row(id),     grads.pos1d.row(pos),
                      grads.x_tab.row(b.x0),      grads.x_tab.row(b.x1),
                      grads.y_tab.row(b.y0),      grads.y_tab.row(b.y1),
                      grads.w_tab.row(b.width()), grads.h_tab.row(b.height())};
        for (S* r : rows)
            for (int c = 0; c < D; ++c)
                r[c] += d[c];
    }
    for (int m = 0; m < M; ++m) {
        const S* d = dx.row(L + m);
        S* dpos = grads.patch_pos.row(m);
        for (int c = 0; c < D; ++c)
            dpos[c] += d[c];
        if (!t.patch_masked.empty() && t.patch_masked[std::size_t(m)]) {
            S* dm = grads.mask_patch.row(0);
            for (int c = 0; c < D; ++c)
                dm[c] += d[c];
        } else {
            const auto& px = enc.patch_pixels[std::size_t(m)];
            S* db = grads.patch_proj_b.row(0);
            for (int c = 0; c < D; ++c)
                db[c] += d[c];
            for (int i = 0; i < flat; ++i) {
                const S v = S(px[std::size_t(i)]) / S(255);
                if (v == S(0))
                    continue;
                S* dw = grads.patch_proj_w.row(i);
                for (int c = 0; c < D; ++c)
                    dw[c] += v * d[c];
            }
        }
    }
}

} // namespace docml
