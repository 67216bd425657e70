#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "docml/gradcheck.hpp"
#include "docml/model.hpp"
#include "docml/checkpoint.hpp"
#include "docml/objectives.hpp"

using namespace docml;

namespace {

// independent piecewise reference for the sign-aware log bucketing
int bucket_reference(int delta, int buckets, int max_distance) {
    const int per_sign = buckets / 2;
    const int exact = per_sign / 2;
    const int offset = delta > 0 ? per_sign : 0;
    const double mag = std::abs(double(delta));
    if (mag < exact)
        return offset + int(mag);
    const double frac = std::log(mag / exact) / std::log(double(max_distance) / exact);
    const int log_idx = int(exact + frac * (per_sign - exact));
    return offset + std::min(log_idx, per_sign - 1);
}

EncodedInput fixture_enc() {
    return encode_document(gradcheck_document(), gradcheck_config().encode_config(),
                           gradcheck_vocabulary());
}

// plain softmax(q.k/sqrt(d) + bias) without the stabilized rewrite
template <class S>
std::vector<S> naive_softmax_row(const std::vector<S>& q, const Tensor<S>& keys, int dh,
                                 const std::vector<std::uint8_t>& mask, const S* bias) {
    const int n = keys.rows;
    std::vector<S> z(std::size_t(n), S(0)), out(std::size_t(n), S(0));
    S denom = S(0);
    for (int j = 0; j < n; ++j) {
        if (!mask[std::size_t(j)])
            continue;
        S acc = S(0);
        for (int c = 0; c < dh; ++c)
            acc += q[std::size_t(c)] * keys.at(j, c);
        z[std::size_t(j)] = acc / S(std::sqrt(double(dh))) + (bias ? bias[j] : S(0));
        denom += std::exp(z[std::size_t(j)]);
    }
    for (int j = 0; j < n; ++j)
        if (mask[std::size_t(j)])
            out[std::size_t(j)] = std::exp(z[std::size_t(j)]) / denom;
    return out;
}

} // namespace

TEST_CASE("relative bucket basics") {
    CHECK(relative_bucket_1d(0, 32, 128) == 0);
    // only a function of the delta, so shifting both indices changes nothing
    for (int i = -40; i <= 40; i += 7)
        CHECK(relative_bucket_1d(17 - 4, 32, 128) == relative_bucket_1d((17 + i) - (4 + i), 32, 128));
    // log region merges far deltas, exact region does not
    CHECK(relative_bucket_1d(64, 32, 128) == relative_bucket_1d(65, 32, 128));
    CHECK(relative_bucket_1d(1, 32, 128) != relative_bucket_1d(2, 32, 128));
    // saturation beyond max_distance
    CHECK(relative_bucket_1d(128, 32, 128) == relative_bucket_1d(4000, 32, 128));
    CHECK(relative_bucket_1d(-128, 32, 128) == relative_bucket_1d(-4000, 32, 128));
}

TEST_CASE("relative bucket matches the reference over [-128,128]") {
    for (const auto [buckets, maxd] : {std::pair{32, 128}, std::pair{64, 1000}, std::pair{8, 32}}) {
        std::set<int> seen;
        int prev_pos = -1, prev_neg = -1;
        for (int d = -maxd; d <= maxd; ++d) {
            const int got = relative_bucket_1d(d, buckets, maxd);
            CHECK(got == bucket_reference(d, buckets, maxd));
            CHECK(got >= 0);
            CHECK(got < buckets);
            seen.insert(got);
            // monotone in |delta| on each side
            if (d >= 0) {
                if (prev_pos >= 0)
                    CHECK(got >= prev_pos);
                prev_pos = got;
            } else {
                if (prev_neg >= 0)
                    CHECK(got <= prev_neg);
                prev_neg = got;
            }
        }
        // signs live in disjoint halves
        for (int d = 1; d <= maxd; ++d)
            CHECK(relative_bucket_1d(d, buckets, maxd) >= buckets / 2);
        for (int d = -maxd; d <= 0; ++d)
            CHECK(relative_bucket_1d(d, buckets, maxd) < buckets / 2);
    }
}

TEST_CASE("attention bias matrix structure") {
    const ModelConfig cfg = gradcheck_config();
    const EncodedInput enc = fixture_enc();
    const BiasIndex idx = build_bias_index(enc, cfg);

    Parameters<double> p = Parameters<double>::shaped(cfg); // all zero
    const Tensor<double> zero_bias = attention_bias_matrix(p, idx, 0);
    for (double v : zero_bias.data)
        CHECK(v == 0.0);

    // i == j uses bucket(0) in all three tables
    p.rel1d.at(1, relative_bucket_1d(0, cfg.rel1d_buckets, cfg.rel1d_max_distance)) = 1.0;
    p.rel2dx.at(1, relative_bucket_1d(0, cfg.rel2d_buckets, cfg.rel2d_max_distance)) = 2.0;
    p.rel2dy.at(1, relative_bucket_1d(0, cfg.rel2d_buckets, cfg.rel2d_max_distance)) = 4.0;
    const Tensor<double> diag_bias = attention_bias_matrix(p, idx, 1);
    for (int i = 0; i < idx.n; ++i)
        CHECK(diag_bias.at(i, i) == 7.0);

    // two patches in the same grid column share their x-center: zero x-delta
    const int L = enc.seq_len();
    const std::size_t same_col = std::size_t(L) * idx.n + (L + 2); // patch 0 vs patch 2 on a 2x2 grid
    CHECK(enc.patch_boxes[0].center_x() == enc.patch_boxes[2].center_x());
    CHECK(idx.b2dx[same_col] == relative_bucket_1d(0, cfg.rel2d_buckets, cfg.rel2d_max_distance));

    // bias depends on boxes and positions only, not token identity
    EncodedInput enc2 = enc;
    enc2.token_ids[1] = Vocabulary::kUnk;
    const BiasIndex idx2 = build_bias_index(enc2, cfg);
    CHECK(idx2.b1d == idx.b1d);
    CHECK(idx2.b2dx == idx.b2dx);
    CHECK(idx2.b2dy == idx.b2dy);
}

TEST_CASE("stabilized attention: uniform for zero scores") {
    const int n = 7, dh = 4;
    Tensor<double> keys(n, dh);
    std::vector<double> q(dh, 0.0);
    std::vector<std::uint8_t> mask(n, 1);
    std::vector<double> out(n);
    const bool ok = stabilized_attention_row(q.data(), keys, 0, dh, mask.data(), n, 32.0, static_cast<const double*>(nullptr),
                                             out.data());
    CHECK(ok);
    for (double v : out)
        CHECK(v == doctest::Approx(1.0 / n).epsilon(1e-12));
}

TEST_CASE("stabilized attention matches naive softmax in double") {
    for (int dh : {4, 8, 16}) {
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            Rng rng(mix_seed(seed, std::uint64_t(dh)));
            const int n = 12;
            Tensor<double> keys(n, dh);
            for (auto& v : keys.data)
                v = rng.uniform_real() * 10.0 - 5.0;
            std::vector<double> q(static_cast<std::size_t>(dh));
            for (auto& v : q)
                v = rng.uniform_real() * 10.0 - 5.0;
            std::vector<std::uint8_t> mask(std::size_t(n), 1);
            mask[3] = 0; // one masked key
            std::vector<double> bias(static_cast<std::size_t>(n));
            for (auto& v : bias)
                v = rng.uniform_real() - 0.5;
            std::vector<double> got(static_cast<std::size_t>(n));
            stabilized_attention_row(q.data(), keys, 0, dh, mask.data(), n, 32.0, bias.data(),
                                     got.data());
            const auto want = naive_softmax_row(q, keys, dh, mask, bias.data());
            double sum = 0;
            for (int j = 0; j < n; ++j) {
                CHECK(std::abs(got[std::size_t(j)] - want[std::size_t(j)]) <= 1e-6);
                sum += got[std::size_t(j)];
            }
            CHECK(std::abs(sum - 1.0) <= 1e-6);
            CHECK(got[3] == 0.0);
        }
    }
}

TEST_CASE("stabilized attention tracks a stable softmax up to |entries| = 50") {
    // direct exponentiation overflows here, so the reference subtracts the max
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(mix_seed(0x50, seed));
        const int n = 10, dh = 8;
        Tensor<double> keys(n, dh);
        for (auto& v : keys.data)
            v = rng.uniform_real() * 100.0 - 50.0;
        std::vector<double> q(static_cast<std::size_t>(dh));
        for (auto& v : q)
            v = rng.uniform_real() * 100.0 - 50.0;
        std::vector<std::uint8_t> mask(std::size_t(n), 1);
        std::vector<double> got(static_cast<std::size_t>(n));
        stabilized_attention_row(q.data(), keys, 0, dh, mask.data(), n, 32.0,
                                 static_cast<const double*>(nullptr), got.data());
        std::vector<double> z(static_cast<std::size_t>(n));
        double maxz = -1e300;
        for (int j = 0; j < n; ++j) {
            double acc = 0;
            for (int c = 0; c < dh; ++c)
                acc += q[std::size_t(c)] * keys.at(j, c);
            z[std::size_t(j)] = acc / std::sqrt(double(dh));
            maxz = std::max(maxz, z[std::size_t(j)]);
        }
        double denom = 0;
        for (int j = 0; j < n; ++j)
            denom += std::exp(z[std::size_t(j)] - maxz);
        int want_arg = 0, got_arg = 0;
        for (int j = 0; j < n; ++j) {
            const double want = std::exp(z[std::size_t(j)] - maxz) / denom;
            CHECK(std::abs(got[std::size_t(j)] - want) <= 1e-6);
            if (z[std::size_t(j)] > z[std::size_t(want_arg)])
                want_arg = j;
            if (got[std::size_t(j)] > got[std::size_t(got_arg)])
                got_arg = j;
        }
        CHECK(got_arg == want_arg); // argmax agreement always
    }
}

TEST_CASE("stabilized attention stays finite where naive float softmax overflows") {
    const int n = 4, dh = 4;
    Tensor<float> keys(n, dh);
    std::vector<float> q(static_cast<std::size_t>(dh));
    for (int c = 0; c < dh; ++c)
        q[std::size_t(c)] = 1000.0f;
    for (int j = 0; j < n; ++j)
        for (int c = 0; c < dh; ++c)
            keys.at(j, c) = float(j + 1) * 0.1f;
    std::vector<std::uint8_t> mask(std::size_t(n), 1);

    // naive: exp of the raw scores overflows float to inf -> nan weights
    bool naive_finite = true;
    float denom = 0.0f;
    std::vector<float> z(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
        float acc = 0.0f;
        for (int c = 0; c < dh; ++c)
            acc += q[std::size_t(c)] * keys.at(j, c);
        z[std::size_t(j)] = acc / std::sqrt(float(dh));
        denom += std::exp(z[std::size_t(j)]);
    }
    for (int j = 0; j < n; ++j)
        naive_finite = naive_finite && std::isfinite(std::exp(z[std::size_t(j)]) / denom);
    CHECK(!naive_finite);

    std::vector<float> out(static_cast<std::size_t>(n));
    stabilized_attention_row(q.data(), keys, 0, dh, mask.data(), n, 32.0f, static_cast<const float*>(nullptr), out.data());
    float sum = 0.0f;
    for (float v : out) {
        CHECK(std::isfinite(v));
        sum += v;
    }
    CHECK(sum == doctest::Approx(1.0f).epsilon(1e-5));
}

TEST_CASE("all-masked key rows come back flagged and zeroed") {
    const int n = 3, dh = 2;
    Tensor<double> keys(n, dh);
    std::vector<double> q(std::size_t(dh), 1.0);
    std::vector<std::uint8_t> mask(std::size_t(n), 0);
    std::vector<double> out(std::size_t(n), 42.0);
    CHECK(!stabilized_attention_row(q.data(), keys, 0, dh, mask.data(), n, 32.0, static_cast<const double*>(nullptr), out.data()));
    for (double v : out)
        CHECK(v == 0.0);
}

TEST_CASE("embedding components") {
    const ModelConfig cfg = gradcheck_config();
    const EncodedInput enc = fixture_enc();

    SUBCASE("zero tables give a zero text embedding") {
        Parameters<double> p = Parameters<double>::shaped(cfg);
        const Tensor<double> e = embed_text(enc, p, cfg);
        for (double v : e.data)
            CHECK(v == 0.0);
    }
    SUBCASE("tokens of one segment share the layout component") {
        Parameters<double> p = Parameters<double>::shaped(cfg);
        // layout tables random, word/pos zero -> rows reduce to layout terms
        Rng rng(3);
        for (Tensor<double>* t : {&p.x_tab, &p.y_tab, &p.w_tab, &p.h_tab})
            for (auto& v : t->data)
                v = rng.gauss();
        const Tensor<double> e = embed_text(enc, p, cfg);
        // words 0 and 1 share segment 0
        for (int c = 0; c < cfg.hidden; ++c)
            CHECK(e.at(1, c) == e.at(2, c));
    }
    SUBCASE("pad rows follow the zero-box convention") {
        Parameters<double> p = Parameters<double>::init(cfg, 5);
        const int pad_pos = cfg.max_seq - 1;
        REQUIRE(enc.token_ids[std::size_t(pad_pos)] == Vocabulary::kPad);
        const Tensor<double> e = embed_text(enc, p, cfg);
        for (int c = 0; c < cfg.hidden; ++c) {
            const double want = p.word_emb.at(Vocabulary::kPad, c) + p.pos1d.at(pad_pos, c) +
                                2.0 * p.x_tab.at(0, c) + 2.0 * p.y_tab.at(0, c) + p.w_tab.at(0, c) +
                                p.h_tab.at(0, c);
            CHECK(e.at(pad_pos, c) == doctest::Approx(want).epsilon(1e-12));
        }
    }
    SUBCASE("zero image with zero bias leaves only patch position embeddings") {
        Parameters<double> p = Parameters<double>::init(cfg, 6);
        p.patch_proj_b.zero();
        EncodedInput black = enc;
        for (auto& px : black.patch_pixels)
            std::fill(px.begin(), px.end(), std::uint8_t(0));
        const Tensor<double> e = embed_patches(black, p, cfg);
        REQUIRE(e.rows == cfg.patch_count());
        for (int m = 0; m < e.rows; ++m)
            for (int c = 0; c < cfg.hidden; ++c)
                CHECK(e.at(m, c) == p.patch_pos.at(m, c));
    }
    SUBCASE("identical patches differ only by position embedding") {
        Parameters<double> p = Parameters<double>::init(cfg, 7);
        EncodedInput flat = enc;
        for (auto& px : flat.patch_pixels)
            px = flat.patch_pixels[0];
        const Tensor<double> e = embed_patches(flat, p, cfg);
        for (int m = 1; m < e.rows; ++m)
            for (int c = 0; c < cfg.hidden; ++c)
                CHECK(e.at(m, c) - p.patch_pos.at(m, c) ==
                      doctest::Approx(e.at(0, c) - p.patch_pos.at(0, c)).epsilon(1e-12));
    }
}

TEST_CASE("encode shape law and zero-layer identity") {
    ModelConfig cfg = gradcheck_config();
    const EncodedInput enc = fixture_enc();
    Parameters<double> p = Parameters<double>::init(cfg, 1);
    const EncodeResult<double> r = encode(enc, nullptr, p, cfg);
    CHECK(r.out.rows == cfg.max_seq + cfg.patch_count());
    CHECK(r.out.cols == cfg.hidden);

    ModelConfig flat_cfg = cfg;
    flat_cfg.layers = 0;
    Parameters<double> p0 = Parameters<double>::init(flat_cfg, 1);
    const EncodeResult<double> r0 = encode(enc, nullptr, p0, flat_cfg);
    CHECK(r0.out == r0.embedded);
}

TEST_CASE("attention rows over unmasked keys sum to one") {
    const ModelConfig cfg = gradcheck_config();
    const EncodedInput enc = fixture_enc();
    Parameters<double> p = Parameters<double>::init(cfg, 2);
    const EncodeResult<double> r = encode(enc, nullptr, p, cfg);
    const int N = cfg.max_seq + cfg.patch_count();
    for (const auto& lt : r.layers)
        for (int h = 0; h < cfg.heads; ++h)
            for (int i = 0; i < N; ++i) {
                double sum = 0;
                for (int j = 0; j < N; ++j)
                    sum += lt.attn.at(h * N + i, j);
                CHECK(std::abs(sum - 1.0) < 1e-6);
            }
}

TEST_CASE("pad token content never reaches unmasked positions") {
    const ModelConfig cfg = gradcheck_config();
    const EncodedInput enc = fixture_enc();
    Parameters<double> p = Parameters<double>::init(cfg, 3);
    const EncodeResult<double> a = encode(enc, nullptr, p, cfg);

    EncodedInput mutated = enc;
    const int pad_pos = cfg.max_seq - 1;
    REQUIRE(mutated.attention_flags[std::size_t(pad_pos)] == 0);
    mutated.token_ids[std::size_t(pad_pos)] = Vocabulary::kUnk; // different id, still padding
    const EncodeResult<double> b = encode(mutated, nullptr, p, cfg);

    for (int i = 0; i < a.out.rows; ++i) {
        if (i == pad_pos)
            continue;
        for (int c = 0; c < a.out.cols; ++c)
            CHECK(a.out.at(i, c) == b.out.at(i, c));
    }
}

TEST_CASE("encode is deterministic") {
    const ModelConfig cfg = gradcheck_config();
    const EncodedInput enc = fixture_enc();
    Parameters<double> p = Parameters<double>::init(cfg, 4);
    const EncodeResult<double> a = encode(enc, nullptr, p, cfg);
    const EncodeResult<double> b = encode(enc, nullptr, p, cfg);
    CHECK(a.out == b.out);
}

TEST_CASE("masked patches use the learned mask embedding") {
    const ModelConfig cfg = gradcheck_config();
    const EncodedInput enc = fixture_enc();
    Parameters<double> p = Parameters<double>::init(cfg, 8);
    MaskingPlan plan;
    plan.masked_patches = {1};
    plan.mim_targets = {0};
    plan.wpa.assign(std::size_t(cfg.max_seq), kWpaNone);
    for (int pos = 0; pos < cfg.max_seq; ++pos)
        if (enc.is_real_token(pos))
            plan.wpa[std::size_t(pos)] = kWpaAligned;
    const EncodeResult<double> r = encode(enc, &plan, p, cfg);
    const int row = cfg.max_seq + 1;
    for (int c = 0; c < cfg.hidden; ++c)
        CHECK(r.embedded.at(row, c) == p.mask_patch.at(0, c) + p.patch_pos.at(1, c));
}

TEST_CASE("masked text positions keep their original layout box") {
    const ModelConfig cfg = gradcheck_config();
    const EncodedInput enc = fixture_enc();
    Parameters<double> p = Parameters<double>::init(cfg, 12);
    MaskingPlan plan;
    plan.masked_text = {2};
    plan.text_replacements = {Replacement::Mask};
    plan.random_ids = {-1};
    std::vector<std::uint8_t> real(std::size_t(cfg.max_seq), 0);
    for (int pos = 0; pos < cfg.max_seq; ++pos)
        real[std::size_t(pos)] = enc.is_real_token(pos);
    plan.wpa = build_wpa_labels(enc.incidence, real, plan.masked_text, plan.masked_patches);

    const EncodeResult<double> r = encode(enc, &plan, p, cfg);
    CHECK(r.corrupted_ids[2] == Vocabulary::kMask);
    const NormBox& b = enc.token_boxes[2]; // unchanged by masking
    for (int c = 0; c < cfg.hidden; ++c) {
        const double want = p.word_emb.at(Vocabulary::kMask, c) + p.pos1d.at(2, c) +
                            p.x_tab.at(b.x0, c) + p.x_tab.at(b.x1, c) + p.y_tab.at(b.y0, c) +
                            p.y_tab.at(b.y1, c) + p.w_tab.at(b.width(), c) +
                            p.h_tab.at(b.height(), c);
        CHECK(r.embedded.at(2, c) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("encoder backward matches finite differences on sampled entries") {
    const ModelConfig cfg = gradcheck_config();
    const EncodedInput enc = fixture_enc();
    Parameters<double> p = Parameters<double>::init(cfg, 9, 0.05);

    // scalar probe: L = sum(R . out) with fixed random R
    const int N = cfg.max_seq + cfg.patch_count();
    Tensor<double> probe(N, cfg.hidden);
    Rng rng(17);
    for (auto& v : probe.data)
        v = rng.gauss();

    auto eval = [&] {
        const EncodeResult<double> r = encode(enc, nullptr, p, cfg);
        double acc = 0;
        for (std::size_t i = 0; i < r.out.size(); ++i)
            acc += probe.data[i] * r.out.data[i];
        return acc;
    };

    Parameters<double> grads = Parameters<double>::shaped(cfg);
    const EncodeResult<double> r = encode(enc, nullptr, p, cfg);
    encode_backward(enc, p, cfg, r, probe, grads);

    ParamRefs<double> prefs = collect_refs<double>(p);
    ParamRefs<double> grefs = collect_refs<double>(grads);
    const double h = 1e-5;
    for (std::size_t gi = 0; gi < prefs.size(); ++gi) {
        Tensor<double>& t = *prefs[gi].second;
        if (prefs[gi].first.rfind("head.", 0) == 0)
            continue; // pretraining heads do not feed this probe
        Rng pick(mix_seed(0x5a5a, gi));
        for (int s = 0; s < 12; ++s) {
            const std::size_t j = pick.uniform(t.size());
            const double keep = t.data[j];
            t.data[j] = keep + h;
            const double lp = eval();
            t.data[j] = keep - h;
            const double lm = eval();
            t.data[j] = keep;
            const double numeric = (lp - lm) / (2 * h);
            const double analytic = grefs[gi].second->data[j];
            const double rel = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            INFO(prefs[gi].first, " entry ", j, " analytic=", analytic, " numeric=", numeric);
            CHECK(rel < 1e-5);
        }
    }
}
