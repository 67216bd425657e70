#include "docml/docmodel.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace docml {

RasterImage RasterImage::filled(int c, int h, int w, std::uint8_t value) {
    RasterImage img;
    img.channels = c;
    img.height = h;
    img.width = w;
    img.pixels.assign(std::size_t(c) * h * w, value);
    return img;
}

// ---- Vocabulary -------------------------------------------------------------

Vocabulary::Vocabulary() {
    for (const char* t : {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"})
        add(t);
}

Vocabulary Vocabulary::build(const std::vector<DocumentRecord>& docs, int max_size) {
    std::map<std::string, long> freq;
    for (const auto& d : docs)
        for (const auto& w : d.words)
            ++freq[w];
    std::vector<std::pair<std::string, long>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second)
            return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, n] : ranked) {
        if (v.size() >= max_size)
            break;
        v.add(tok);
    }
    return v;
}

int Vocabulary::add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end())
        return it->second;
    const int id = int(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
}

int Vocabulary::id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
    if (id < 0 || id >= size())
        throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
    return tokens_[id];
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("vocabulary: cannot write " + path);
    for (const auto& t : tokens_)
        out << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("vocabulary: cannot read " + path);
    Vocabulary v;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno <= kReserved) {
            if (line != v.tokens_[lineno - 1])
                throw DataError("vocabulary: reserved token mismatch at line " + std::to_string(lineno));
            continue;
        }
        v.add(line);
    }
    if (lineno < kReserved)
        throw DataError("vocabulary: truncated file " + path);
    return v;
}

// ---- image files ------------------------------------------------------------

namespace {

constexpr char kImgMagic[6] = {'L', 'F', 'I', 'M', 'G', '1'};

void put_u32le(std::ostream& out, std::uint32_t v) {
    char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
    out.write(b, 4);
}

std::uint32_t get_u32le(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
}

int ppm_token(std::istream& in) {
    // whitespace/comment-tolerant integer scan for the PPM header
    int c = in.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n')
                c = in.get();
        c = in.get();
    }
    int val = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
        val = val * 10 + (c - '0');
        any = true;
        c = in.get();
    }
    if (!any)
        throw DataError("ppm: malformed header");
    return val;
}

RasterImage read_ppm(std::istream& in, const std::string& path) {
    const int w = ppm_token(in);
    const int h = ppm_token(in);
    const int maxval = ppm_token(in);
    if (maxval != 255)
        throw DataError("ppm: unsupported maxval in " + path);
    RasterImage img = RasterImage::filled(3, h, w, 0);
    std::vector<std::uint8_t> row(std::size_t(w) * 3);
    for (int y = 0; y < h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
        if (!in)
            throw DataError("ppm: truncated pixel data in " + path);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = row[std::size_t(x) * 3 + c];
    }
    return img;
}

} // namespace

RasterImage read_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("image: cannot read " + path);
    char magic[6] = {};
    in.read(magic, 2);
    if (!in)
        throw DataError("image: truncated file " + path);
    if (magic[0] == 'P' && magic[1] == '6')
        return read_ppm(in, path);
    in.read(magic + 2, 4);
    if (in && std::equal(magic, magic + 6, kImgMagic)) {
        const int c = int(get_u32le(in));
        const int h = int(get_u32le(in));
        const int w = int(get_u32le(in));
        if (c <= 0 || h <= 0 || w <= 0 || c > 16)
            throw DataError("image: bad LFIMG1 header in " + path);
        RasterImage img = RasterImage::filled(c, h, w, 0);
        in.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
        if (!in)
            throw DataError("image: truncated LFIMG1 data in " + path);
        return img;
    }
    throw DataError("image: unknown format in " + path);
}

void write_image_ppm(const RasterImage& img, const std::string& path) {
    if (img.channels != 3)
        throw DataError("ppm: only 3-channel images supported");
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("image: cannot write " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<std::uint8_t> row(std::size_t(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                row[std::size_t(x) * 3 + c] = img.at(c, y, x);
        out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
}

void write_image_lfimg(const RasterImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("image: cannot write " + path);
    out.write(kImgMagic, 6);
    put_u32le(out, std::uint32_t(img.channels));
    put_u32le(out, std::uint32_t(img.height));
    put_u32le(out, std::uint32_t(img.width));
    out.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
}

RasterImage resize_nearest(const RasterImage& img, int out_h, int out_w) {
    RasterImage out = RasterImage::filled(img.channels, out_h, out_w, 0);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < out_h; ++y) {
            const int sy = int((long long)y * img.height / out_h);
            for (int x = 0; x < out_w; ++x) {
                const int sx = int((long long)x * img.width / out_w);
                out.at(c, y, x) = img.at(c, sy, sx);
            }
        }
    return out;
}

// ---- encoding ---------------------------------------------------------------

EncodedInput encode_document(const DocumentRecord& d, const EncodeConfig& cfg, const Vocabulary& v) {
    if (!v.has_regular_tokens())
        throw ConfigError("encode_document: vocabulary has no regular tokens");
    if (d.words.size() != d.boxes.size() || d.words.size() != d.segment_ids.size())
        throw DataError("encode_document: words/boxes/segment_ids length mismatch in " + d.id);
    if (d.image.channels != cfg.channels)
        throw DataError("encode_document: image of " + d.id + " has " +
                        std::to_string(d.image.channels) + " channels, expected " +
                        std::to_string(cfg.channels));

    const int L = cfg.max_seq;
    if (L < 2)
        throw ConfigError("encode_document: max_seq must be at least 2");

    // Words in a segment share one box: the union of member boxes.
    std::map<int, PixelBox> seg_union;
    for (std::size_t i = 0; i < d.words.size(); ++i) {
        auto [it, fresh] = seg_union.emplace(d.segment_ids[i], d.boxes[i]);
        if (!fresh)
            it->second = it->second.united(d.boxes[i]);
    }
    std::map<int, NormBox> seg_norm;
    for (const auto& [seg, box] : seg_union)
        seg_norm[seg] = normalize_box(box, d.image.width, d.image.height);

    EncodedInput enc;
    enc.grid = make_patch_grid(cfg.image_h, cfg.image_w, cfg.patch);
    enc.token_ids.assign(L, Vocabulary::kPad);
    enc.token_boxes.assign(L, NormBox{});
    enc.attention_flags.assign(L, 0);
    enc.word_index.assign(L, -1);
    enc.incidence.resize(L);

    const int n_words = std::min<int>(int(d.words.size()), L - 2); // truncate, keep earliest
    enc.token_ids[0] = Vocabulary::kCls;
    enc.attention_flags[0] = 1;
    for (int i = 0; i < n_words; ++i) {
        const int pos = 1 + i;
        enc.token_ids[pos] = v.id_of(d.words[i]);
        enc.token_boxes[pos] = seg_norm.at(d.segment_ids[i]);
        enc.attention_flags[pos] = 1;
        enc.word_index[pos] = i;
        // incidence uses the word's own box, not the shared segment box
        const NormBox wb = normalize_box(d.boxes[i], d.image.width, d.image.height);
        enc.incidence[pos] = word_patches(wb, enc.grid);
    }
    enc.token_ids[1 + n_words] = Vocabulary::kSep;
    enc.attention_flags[1 + n_words] = 1;

    const RasterImage resized = resize_nearest(d.image, cfg.image_h, cfg.image_w);
    const int M = enc.grid.patch_count();
    const int P = cfg.patch;
    enc.patch_pixels.resize(M);
    enc.patch_boxes.resize(M);
    for (int k = 0; k < M; ++k) {
        const int r = k / enc.grid.cols, c = k % enc.grid.cols;
        auto& px = enc.patch_pixels[k];
        px.resize(std::size_t(cfg.channels) * P * P);
        std::size_t o = 0;
        for (int ch = 0; ch < cfg.channels; ++ch)
            for (int py = 0; py < P; ++py)
                for (int pxx = 0; pxx < P; ++pxx)
                    px[o++] = resized.at(ch, r * P + py, c * P + pxx);
        enc.patch_boxes[k] = patch_cell_box(enc.grid, k);
    }
    return enc;
}

std::vector<int> tokenize_image(const std::vector<std::vector<std::uint8_t>>& patch_pixels,
                                int channels, int patch, int image_vocab) {
    if (channels != 3)
        throw ConfigError("tokenize_image: stand-in tokenizer requires 3 channels");
    int q = 2;
    while (q * q * q < image_vocab)
        ++q;
    if (q * q * q != image_vocab || image_vocab < 8)
        throw ConfigError("tokenize_image: image vocab " + std::to_string(image_vocab) +
                          " is not a perfect cube of an integer >= 2");
    const long long area = (long long)patch * patch;
    std::vector<int> out;
    out.reserve(patch_pixels.size());
    for (const auto& px : patch_pixels) {
        if ((long long)px.size() != area * channels)
            throw DataError("tokenize_image: patch size mismatch");
        int id = 0;
        for (int c = 0; c < channels; ++c) {
            long long sum = 0;
            for (long long i = 0; i < area; ++i)
                sum += px[std::size_t(c) * area + i];
            // floor(mean * q / 256), exact in integers; never reaches q
            const int level = int(sum * q / (256 * area));
            id = id * q + level;
        }
        out.push_back(id);
    }
    return out;
}

// ---- synthetic corpus ---------------------------------------------------------

std::string tag_of_class(int label_id) {
    if (label_id < 0)
        throw DataError("tag_of_class: negative label");
    if (label_id == 0)
        return "O";
    const int k = (label_id - 1) / 2;
    return ((label_id - 1) % 2 == 0 ? "B-" : "I-") + std::to_string(k);
}

int class_of_tag(const std::string& tag) {
    if (tag == "O")
        return 0;
    if (tag.size() >= 3 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') {
        const int k = std::stoi(tag.substr(2));
        return 1 + 2 * k + (tag[0] == 'I' ? 1 : 0);
    }
    throw DataError("class_of_tag: malformed tag '" + tag + "'");
}

namespace {

std::uint32_t fnv1a(const std::string& s) {
    std::uint32_t h = 2166136261u;
    for (unsigned char c : s) {
        h ^= c;
        h *= 16777619u;
    }
    return h;
}

void fill_rect(RasterImage& img, const PixelBox& b, std::uint8_t r, std::uint8_t g, std::uint8_t bl) {
    const std::uint8_t rgb[3] = {r, g, bl};
    for (int c = 0; c < 3; ++c)
        for (int y = b.y0; y < b.y1; ++y)
            for (int x = b.x0; x < b.x1; ++x)
                img.at(c, y, x) = rgb[c];
}

} // namespace

DocumentRecord generate_document(std::uint64_t seed, const GeneratorStyle& style) {
    Rng rng(mix_seed(seed, 0x5eedd0c5));
    DocumentRecord d;
    d.id = "doc-" + std::to_string(seed);
    d.image = RasterImage::filled(3, style.page_h, style.page_w, 255);

    const int doc_class = int(rng.uniform(std::uint64_t(style.n_doc_classes)));
    const int n_segments =
        style.min_segments + int(rng.uniform(std::uint64_t(style.max_segments - style.min_segments + 1)));

    std::vector<int> word_classes;
    int y = style.margin;
    for (int seg = 0; seg < n_segments; ++seg) {
        const int word_h = 10 + int(rng.uniform(6));
        if (y + word_h > style.page_h - style.margin)
            break;
        int n_words, entity = -1;
        if (seg == 0) {
            n_words = 1; // class marker segment
        } else {
            n_words = style.min_words + int(rng.uniform(std::uint64_t(style.max_words - style.min_words + 1)));
            entity = int(rng.uniform(std::uint64_t(style.n_entity_types + 1))) - 1; // -1 = background
        }
        int x = style.margin;
        for (int j = 0; j < n_words; ++j) {
            const int word_w = 12 + int(rng.uniform(18));
            if (x + word_w > style.page_w - style.margin) {
                x = style.margin;
                y += word_h + 2;
                if (y + word_h > style.page_h - style.margin)
                    break;
            }
            std::string word;
            int cls = 0;
            const int pool = int(rng.uniform(std::uint64_t(style.words_per_pool)));
            if (seg == 0) {
                word = "class" + std::to_string(doc_class);
            } else if (entity < 0) {
                word = "o-w" + std::to_string(pool);
            } else if (j == 0) {
                word = "b" + std::to_string(entity) + "-w" + std::to_string(pool);
                cls = 1 + 2 * entity;
            } else {
                word = "i" + std::to_string(entity) + "-w" + std::to_string(pool);
                cls = 2 + 2 * entity;
            }
            const PixelBox box{x, y, x + word_w, y + word_h};
            const std::uint32_t h = fnv1a(word);
            fill_rect(d.image, box, std::uint8_t((h >> 16) % 200), std::uint8_t((h >> 8) % 200),
                      std::uint8_t(h % 200));
            d.words.push_back(word);
            d.boxes.push_back(box);
            d.segment_ids.push_back(seg);
            word_classes.push_back(cls);
            x += word_w + 4;
        }
        y += word_h + 6;
    }

    if (style.emit_labels) {
        d.labels.word_classes = word_classes;
        d.labels.doc_class = doc_class;
        const int n = int(d.words.size());
        const int start = int(rng.uniform(std::uint64_t(n)));
        const int len = 1 + int(rng.uniform(std::uint64_t(std::min(4, n - start))));
        d.labels.answer_span = AnswerSpan{start, start + len - 1};
    }
    return d;
}

// ---- corpus files --------------------------------------------------------------

void write_corpus(const std::vector<DocumentRecord>& docs, const std::string& path, bool ppm_images) {
    const fs::path corpus_path(path);
    const fs::path dir = corpus_path.parent_path();
    const std::string img_dirname = corpus_path.stem().string() + "_images";
    fs::create_directories(dir.empty() ? fs::path(img_dirname) : dir / img_dirname);

    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("corpus: cannot write " + path);
    for (const auto& d : docs) {
        const std::string ext = ppm_images ? ".ppm" : ".lfimg";
        const std::string rel = img_dirname + "/" + d.id + ext;
        const fs::path img_path = dir.empty() ? fs::path(rel) : dir / rel;
        if (ppm_images)
            write_image_ppm(d.image, img_path.string());
        else
            write_image_lfimg(d.image, img_path.string());

        json rec;
        rec["id"] = d.id;
        rec["words"] = d.words;
        json boxes = json::array();
        for (const auto& b : d.boxes)
            boxes.push_back({b.x0, b.y0, b.x1, b.y1});
        rec["boxes"] = std::move(boxes);
        rec["segment_ids"] = d.segment_ids;
        rec["image"] = rel;
        if (d.labels.word_classes || d.labels.doc_class || d.labels.answer_span) {
            json lab = json::object();
            if (d.labels.word_classes)
                lab["word_classes"] = *d.labels.word_classes;
            if (d.labels.doc_class)
                lab["doc_class"] = *d.labels.doc_class;
            if (d.labels.answer_span)
                lab["answer_span"] = {d.labels.answer_span->start_word, d.labels.answer_span->end_word};
            rec["labels"] = std::move(lab);
        }
        out << rec.dump() << '\n';
    }
}

std::vector<DocumentRecord> read_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("corpus: cannot read " + path);
    const fs::path dir = fs::path(path).parent_path();

    std::vector<DocumentRecord> docs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("corpus: parse error at line " + std::to_string(lineno) + ": " + e.what());
        }
        try {
            DocumentRecord d;
            d.id = rec.at("id").get<std::string>();
            d.words = rec.at("words").get<std::vector<std::string>>();
            for (const auto& b : rec.at("boxes"))
                d.boxes.push_back({b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(),
                                   b.at(3).get<int>()});
            d.segment_ids = rec.at("segment_ids").get<std::vector<int>>();
            if (d.words.size() != d.boxes.size() || d.words.size() != d.segment_ids.size())
                throw DataError("words/boxes/segment_ids length mismatch");
            const std::string rel = rec.at("image").get<std::string>();
            const fs::path img_path = dir.empty() ? fs::path(rel) : dir / rel;
            d.image = read_image(img_path.string());
            if (rec.contains("labels")) {
                const auto& lab = rec["labels"];
                if (lab.contains("word_classes"))
                    d.labels.word_classes = lab["word_classes"].get<std::vector<int>>();
                if (lab.contains("doc_class"))
                    d.labels.doc_class = lab["doc_class"].get<int>();
                if (lab.contains("answer_span"))
                    d.labels.answer_span =
                        AnswerSpan{lab["answer_span"].at(0).get<int>(), lab["answer_span"].at(1).get<int>()};
            }
            docs.push_back(std::move(d));
        } catch (const json::exception& e) {
            throw DataError("corpus: parse error at line " + std::to_string(lineno) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError("corpus: line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return docs;
}

} // namespace docml
