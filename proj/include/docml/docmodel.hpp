#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "docml/geometry.hpp"
#include "docml/rng.hpp"

namespace docml {

// Planar byte raster, layout [channel][y][x].
struct RasterImage {
    int channels = 0, height = 0, width = 0;
    std::vector<std::uint8_t> pixels;

    static RasterImage filled(int c, int h, int w, std::uint8_t value);
    std::uint8_t at(int c, int y, int x) const {
        return pixels[(std::size_t(c) * height + y) * width + x];
    }
    std::uint8_t& at(int c, int y, int x) {
        return pixels[(std::size_t(c) * height + y) * width + x];
    }
    bool operator==(const RasterImage&) const = default;
};

struct AnswerSpan {
    int start_word = 0;
    int end_word = 0; // inclusive
    bool operator==(const AnswerSpan&) const = default;
};

struct DocLabels {
    std::optional<std::vector<int>> word_classes;
    std::optional<int> doc_class;
    std::optional<AnswerSpan> answer_span;
    bool operator==(const DocLabels&) const = default;
};

struct DocumentRecord {
    std::string id;
    std::vector<std::string> words;
    std::vector<PixelBox> boxes;      // one per word, in image pixels
    std::vector<int> segment_ids;     // one per word
    RasterImage image;
    DocLabels labels;
    bool operator==(const DocumentRecord&) const = default;
};

// Word-level token vocabulary with reserved control ids.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kCls = 1;
    static constexpr int kSep = 2;
    static constexpr int kMask = 3;
    static constexpr int kUnk = 4;
    static constexpr int kReserved = 5;

    Vocabulary();

    // Frequency-ranked vocabulary over the corpus words (ties broken
    // lexicographically), capped at max_size entries including reserved ids.
    static Vocabulary build(const std::vector<DocumentRecord>& docs, int max_size);

    int add(const std::string& token); // idempotent
    int id_of(const std::string& token) const; // kUnk when absent
    const std::string& token_of(int id) const;
    int size() const { return int(tokens_.size()); }
    bool has_regular_tokens() const { return size() > kReserved; }

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

// ---- image files ----------------------------------------------------------

// Reads either binary PPM (P6, maxval 255) or the raw LFIMG1 tensor format
// ("LFIMG1" magic, then C,H,W as u32 little-endian, then planar bytes).
RasterImage read_image(const std::string& path);
void write_image_ppm(const RasterImage& img, const std::string& path);
void write_image_lfimg(const RasterImage& img, const std::string& path);

// Nearest-neighbour resize; source pixel = floor(dst * src_dim / dst_dim).
RasterImage resize_nearest(const RasterImage& img, int out_h, int out_w);

// ---- encoding -------------------------------------------------------------

struct EncodeConfig {
    int max_seq = 64;   // L, includes [CLS]/[SEP]/[PAD]
    int channels = 3;   // C
    int image_h = 64;   // H
    int image_w = 64;   // W
    int patch = 16;     // P
};

// Fixed-length model input. Token 0 is [CLS]; a [SEP] terminates real
// tokens; remaining slots are [PAD] with all-zero boxes. Patch pixels are
// flattened [channel][py][px], row-major within each plane.
struct EncodedInput {
    std::vector<int> token_ids;                        // L
    std::vector<NormBox> token_boxes;                  // L, segment-level
    std::vector<std::uint8_t> attention_flags;         // L, 1 through [SEP]
    std::vector<int> word_index;                       // L, -1 for specials
    std::vector<std::vector<std::uint8_t>> patch_pixels; // M x (C*P*P)
    std::vector<NormBox> patch_boxes;                  // M cell extents
    std::vector<std::vector<int>> incidence;           // L, per-word patches
    PatchGrid grid;

    int seq_len() const { return int(token_ids.size()); }
    int patch_count() const { return int(patch_pixels.size()); }
    bool is_real_token(int pos) const { return word_index[pos] >= 0; }
};

EncodedInput encode_document(const DocumentRecord& d, const EncodeConfig& cfg, const Vocabulary& v);

// Deterministic stand-in image tokenizer: per patch, quantize each channel
// mean to q = cbrt(image_vocab) uniform levels and pack the levels into one
// id (first channel most significant). image_vocab must be a perfect cube
// q^3 with q >= 2.
std::vector<int> tokenize_image(const std::vector<std::vector<std::uint8_t>>& patch_pixels,
                                int channels, int patch, int image_vocab);

// ---- synthetic corpus -----------------------------------------------------

struct GeneratorStyle {
    int page_w = 256, page_h = 256;
    int margin = 8;
    int min_segments = 1, max_segments = 8;
    int min_words = 1, max_words = 12;
    int n_entity_types = 3; // token classes: O plus B-k/I-k per type
    int n_doc_classes = 4;
    int words_per_pool = 12;
    bool emit_labels = true;

    int n_token_classes() const { return 1 + 2 * n_entity_types; }
};

// Token class ids follow a fixed BIO scheme: 0 = "O", 2k+1 = "B-k",
// 2k+2 = "I-k".
std::string tag_of_class(int label_id);
int class_of_tag(const std::string& tag);

DocumentRecord generate_document(std::uint64_t seed, const GeneratorStyle& style = {});

// ---- corpus files ---------------------------------------------------------

// JSON-lines corpus: one record per line with fields
// {id, words[], boxes[[x0,y0,x1,y1]], segment_ids[], image, labels?};
// the image field is a path relative to the corpus file. write_corpus puts
// image files in "<stem>_images/" next to the corpus file.
void write_corpus(const std::vector<DocumentRecord>& docs, const std::string& path,
                  bool ppm_images = false);
std::vector<DocumentRecord> read_corpus(const std::string& path);

} // namespace docml
