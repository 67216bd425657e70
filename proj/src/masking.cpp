#include "docml/masking.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace docml {

void MaskingConfig::validate() const {
    if (text_ratio < 0.0 || text_ratio > 1.0 || image_ratio < 0.0 || image_ratio > 1.0)
        throw ConfigError("masking: ratios must lie in [0,1]");
    if (span_lambda <= 0.0)
        throw ConfigError("masking: span_lambda must be positive");
    if (span_max < 1)
        throw ConfigError("masking: span_max must be >= 1");
    if (min_block_patches < 1)
        throw ConfigError("masking: min_block_patches must be >= 1");
    if (block_aspect_min <= 0.0 || block_aspect_max < block_aspect_min)
        throw ConfigError("masking: block aspect range must be positive and ordered");
    if (std::abs(block_aspect_min * block_aspect_max - 1.0) > 1e-6)
        throw ConfigError("masking: block aspect range must be reciprocal-symmetric");
    if (mask_prob < 0 || random_prob < 0 || keep_prob < 0 ||
        std::abs(mask_prob + random_prob + keep_prob - 1.0) > 1e-9)
        throw ConfigError("masking: replacement probabilities must be non-negative and sum to 1");
}

bool MaskingPlan::text_masked(int pos) const {
    return std::binary_search(masked_text.begin(), masked_text.end(), pos);
}

bool MaskingPlan::patch_masked(int k) const {
    return std::binary_search(masked_patches.begin(), masked_patches.end(), k);
}

std::vector<int> sample_text_spans(int n_maskable, const MaskingConfig& cfg, Rng& rng) {
    const int n = n_maskable;
    const int budget = int(std::floor(cfg.text_ratio * n + 0.5));
    std::vector<std::uint8_t> masked(std::size_t(std::max(n, 0)), 0);
    int count = 0;
    std::vector<int> unmasked;
    while (count < budget) {
        unmasked.clear();
        for (int i = 0; i < n; ++i)
            if (!masked[i])
                unmasked.push_back(i);
        if (unmasked.empty())
            break;
        const int len = std::clamp(rng.poisson(cfg.span_lambda), 1, cfg.span_max);
        const int start = unmasked[rng.uniform(unmasked.size())];
        for (int p = start; p < std::min(start + len, n); ++p) {
            if (!masked[p]) {
                masked[p] = 1;
                ++count;
            }
        }
    }
    std::vector<int> out;
    out.reserve(std::size_t(count));
    for (int i = 0; i < n; ++i)
        if (masked[i])
            out.push_back(i);
    return out;
}

namespace {

bool block_feasible(const PatchGrid& g, const MaskingConfig& cfg) {
    for (int bh = 1; bh <= g.rows; ++bh)
        for (int bw = 1; bw <= g.cols; ++bw) {
            const double aspect = double(bh) / bw;
            if (bh * bw >= cfg.min_block_patches && aspect >= cfg.block_aspect_min - 1e-12 &&
                aspect <= cfg.block_aspect_max + 1e-12)
                return true;
        }
    return false;
}

} // namespace

std::vector<int> sample_image_blocks(const PatchGrid& g, const MaskingConfig& cfg, Rng& rng,
                                     std::vector<BlockRect>* blocks_out) {
    const int M = g.patch_count();
    // Ceiling keeps the masked fraction at or above image_ratio on every draw.
    const int target = int(std::ceil(cfg.image_ratio * M - 1e-12));
    if (target <= 0)
        return {};
    if (!block_feasible(g, cfg))
        throw ConfigError("masking: no admissible block of " + std::to_string(cfg.min_block_patches) +
                          " patches fits a " + std::to_string(g.rows) + "x" + std::to_string(g.cols) +
                          " grid");

    std::vector<std::uint8_t> masked(std::size_t(M), 0);
    int count = 0;
    long attempts = 0;
    const double log_lo = std::log(cfg.block_aspect_min), log_hi = std::log(cfg.block_aspect_max);
    while (count < target) {
        if (++attempts > 100000)
            throw ConfigError("masking: block sampling stalled");
        const int remaining = target - count;
        const int area_hi = std::max(cfg.min_block_patches, remaining);
        const int area = cfg.min_block_patches +
                         int(rng.uniform(std::uint64_t(area_hi - cfg.min_block_patches + 1)));
        const double aspect = std::exp(log_lo + rng.uniform_real() * (log_hi - log_lo));
        const int bh = std::max(1, int(std::lround(std::sqrt(area * aspect))));
        const int bw = std::max(1, int(std::lround(std::sqrt(area / aspect))));
        if (bh > g.rows || bw > g.cols || bh * bw < cfg.min_block_patches)
            continue;
        const int r0 = int(rng.uniform(std::uint64_t(g.rows - bh + 1)));
        const int c0 = int(rng.uniform(std::uint64_t(g.cols - bw + 1)));
        if (blocks_out)
            blocks_out->push_back({r0, c0, bh, bw});
        for (int r = r0; r < r0 + bh; ++r)
            for (int c = c0; c < c0 + bw; ++c) {
                const int k = r * g.cols + c;
                if (!masked[k]) {
                    masked[k] = 1;
                    ++count;
                }
            }
    }
    std::vector<int> out;
    out.reserve(std::size_t(count));
    for (int k = 0; k < M; ++k)
        if (masked[k])
            out.push_back(k);
    return out;
}

std::vector<std::int8_t> build_wpa_labels(const std::vector<std::vector<int>>& incidence,
                                          const std::vector<std::uint8_t>& real_token,
                                          const std::vector<int>& masked_text,
                                          const std::vector<int>& masked_patches) {
    const int L = int(real_token.size());
    std::vector<std::int8_t> labels(std::size_t(L), kWpaNone);
    for (int pos = 0; pos < L; ++pos) {
        if (!real_token[pos])
            continue;
        if (std::binary_search(masked_text.begin(), masked_text.end(), pos))
            continue;
        bool aligned = true;
        for (int k : incidence[pos])
            if (std::binary_search(masked_patches.begin(), masked_patches.end(), k)) {
                aligned = false;
                break;
            }
        labels[pos] = aligned ? kWpaAligned : kWpaUnaligned;
    }
    return labels;
}

MaskingPlan build_plan(const EncodedInput& enc, const MaskingConfig& cfg, int text_vocab,
                       int image_vocab, Rng& rng) {
    cfg.validate();
    MaskingPlan plan;

    // maskable = real word tokens; [CLS]/[SEP]/[PAD] are never masked
    std::vector<int> maskable;
    std::vector<std::uint8_t> real(std::size_t(enc.seq_len()), 0);
    for (int pos = 0; pos < enc.seq_len(); ++pos)
        if (enc.is_real_token(pos)) {
            maskable.push_back(pos);
            real[pos] = 1;
        }

    for (int ord : sample_text_spans(int(maskable.size()), cfg, rng))
        plan.masked_text.push_back(maskable[ord]);

    const int n_regular = text_vocab - Vocabulary::kReserved;
    for (std::size_t i = 0; i < plan.masked_text.size(); ++i) {
        const double u = rng.uniform_real();
        Replacement r = Replacement::Keep;
        int rid = -1;
        if (u < cfg.mask_prob) {
            r = Replacement::Mask;
        } else if (u < cfg.mask_prob + cfg.random_prob && n_regular > 0) {
            r = Replacement::Random;
            rid = Vocabulary::kReserved + int(rng.uniform(std::uint64_t(n_regular)));
        } else if (u < cfg.mask_prob + cfg.random_prob) {
            r = Replacement::Mask; // no regular ids to draw from
        }
        plan.text_replacements.push_back(r);
        plan.random_ids.push_back(rid);
    }

    plan.masked_patches = sample_image_blocks(enc.grid, cfg, rng);

    const std::vector<int> all_targets =
        tokenize_image(enc.patch_pixels, 3, enc.grid.patch_size, image_vocab);
    for (int k : plan.masked_patches)
        plan.mim_targets.push_back(all_targets[std::size_t(k)]);

    plan.wpa = build_wpa_labels(enc.incidence, real, plan.masked_text, plan.masked_patches);
    return plan;
}

} // namespace docml
