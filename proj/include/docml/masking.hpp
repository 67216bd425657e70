#pragma once

#include <cstdint>
#include <vector>

#include "docml/docmodel.hpp"
#include "docml/rng.hpp"

namespace docml {

struct MaskingConfig {
    double text_ratio = 0.30;
    double span_lambda = 3.0;
    int span_max = 10;
    double image_ratio = 0.40;
    int min_block_patches = 4;
    double block_aspect_min = 0.3;
    double block_aspect_max = 1.0 / 0.3;
    double mask_prob = 0.8; // replacement policy for masked text positions
    double random_prob = 0.1;
    double keep_prob = 0.1;

    void validate() const;
};

enum class Replacement : std::uint8_t { Mask, Random, Keep };

// wpa label values per token position
inline constexpr std::int8_t kWpaNone = -1;
inline constexpr std::int8_t kWpaUnaligned = 0;
inline constexpr std::int8_t kWpaAligned = 1;

struct MaskingPlan {
    std::vector<int> masked_text;       // sorted token positions (real tokens only)
    std::vector<Replacement> text_replacements; // aligned with masked_text
    std::vector<int> random_ids;        // aligned with masked_text; valid when Random
    std::vector<int> masked_patches;    // sorted patch indices
    std::vector<int> mim_targets;       // aligned with masked_patches
    std::vector<std::int8_t> wpa;       // length L; kWpaNone outside the label domain

    bool text_masked(int pos) const;
    bool patch_masked(int k) const;
    bool empty() const { return masked_text.empty() && masked_patches.empty(); }
};

// Poisson span masking over n_maskable positions. Spans are drawn with
// length ~ Poisson(span_lambda) clamped to [1, span_max] and placed at a
// uniformly random currently-unmasked start until the masked count reaches
// round(text_ratio * n); the last span may overshoot. Returns sorted
// positions in [0, n_maskable).
std::vector<int> sample_text_spans(int n_maskable, const MaskingConfig& cfg, Rng& rng);

struct BlockRect {
    int r0 = 0, c0 = 0, rows = 0, cols = 0;
};

// Blockwise patch masking: rectangular blocks of area >= min_block_patches
// with aspect in [block_aspect_min, block_aspect_max] until the masked count
// reaches ceil(image_ratio * M). Returns sorted patch indices; if blocks_out
// is given, every sampled block is appended to it.
std::vector<int> sample_image_blocks(const PatchGrid& g, const MaskingConfig& cfg, Rng& rng,
                                     std::vector<BlockRect>* blocks_out = nullptr);

// Aligned/unaligned labels. A real text token not in masked_text is aligned
// iff none of its incident patches is masked; a token with empty incidence
// is aligned by vacuity. Masked text tokens and non-real positions get
// kWpaNone.
std::vector<std::int8_t> build_wpa_labels(const std::vector<std::vector<int>>& incidence,
                                          const std::vector<std::uint8_t>& real_token,
                                          const std::vector<int>& masked_text,
                                          const std::vector<int>& masked_patches);

// Compose the full plan for one encoded document: text spans, replacement
// draws (mask/random/keep), image blocks, MIM targets from the stand-in
// tokenizer, and WPA labels. Layout boxes are never altered.
MaskingPlan build_plan(const EncodedInput& enc, const MaskingConfig& cfg, int text_vocab,
                       int image_vocab, Rng& rng);

} // namespace docml
