#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "docml/heads.hpp"
#include "docml/model.hpp"
#include "docml/tensor.hpp"

namespace docml {

// Named view over any for_each-able parameter set; the fixed visitation
// order doubles as the deterministic reduction/update order.
template <class S>
using ParamRefs = std::vector<std::pair<std::string, Tensor<S>*>>;

template <class S, class P>
ParamRefs<S> collect_refs(P& params) {
    ParamRefs<S> refs;
    params.for_each([&](const std::string& name, Tensor<S>& t, ParamKind) { refs.emplace_back(name, &t); });
    return refs;
}

inline void model_config_to_json(const ModelConfig& c, nlohmann::json& j) {
    j["layers"] = c.layers;
    j["heads"] = c.heads;
    j["hidden"] = c.hidden;
    j["ffn_inner"] = c.ffn_inner;
    j["max_seq"] = c.max_seq;
    j["channels"] = c.channels;
    j["image_h"] = c.image_h;
    j["image_w"] = c.image_w;
    j["patch"] = c.patch;
    j["text_vocab"] = c.text_vocab;
    j["image_vocab"] = c.image_vocab;
    j["alpha"] = c.alpha;
    j["rel1d_buckets"] = c.rel1d_buckets;
    j["rel1d_max_distance"] = c.rel1d_max_distance;
    j["rel2d_buckets"] = c.rel2d_buckets;
    j["rel2d_max_distance"] = c.rel2d_max_distance;
    j["tie_mlm"] = c.tie_mlm;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.ffn_inner = j.at("ffn_inner").get<int>();
    c.max_seq = j.at("max_seq").get<int>();
    c.channels = j.at("channels").get<int>();
    c.image_h = j.at("image_h").get<int>();
    c.image_w = j.at("image_w").get<int>();
    c.patch = j.at("patch").get<int>();
    c.text_vocab = j.at("text_vocab").get<int>();
    c.image_vocab = j.at("image_vocab").get<int>();
    c.alpha = j.at("alpha").get<double>();
    c.rel1d_buckets = j.at("rel1d_buckets").get<int>();
    c.rel1d_max_distance = j.at("rel1d_max_distance").get<int>();
    c.rel2d_buckets = j.at("rel2d_buckets").get<int>();
    c.rel2d_max_distance = j.at("rel2d_max_distance").get<int>();
    c.tie_mlm = j.at("tie_mlm").get<bool>();
    return c;
}

inline void task_head_config_to_json(const TaskHeadConfig& c, nlohmann::json& j) {
    j["kind"] = to_string(c.kind);
    j["classes"] = c.classes;
    j["shape"] = c.shape == HeadShape::Linear ? "linear" : "mlp";
    j["qa_max_span"] = c.qa_max_span;
}

inline TaskHeadConfig task_head_config_from_json(const nlohmann::json& j) {
    TaskHeadConfig c;
    c.kind = task_kind_of(j.at("kind").get<std::string>());
    c.classes = j.at("classes").get<int>();
    c.shape = j.at("shape").get<std::string>() == "mlp" ? HeadShape::Mlp : HeadShape::Linear;
    c.qa_max_span = j.at("qa_max_span").get<int>();
    return c;
}

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
    out.write(b, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
    put_u32(out, std::uint32_t(v & 0xffffffffu));
    put_u32(out, std::uint32_t(v >> 32));
}

inline std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
}

inline std::uint64_t get_u64(std::istream& in) {
    const std::uint64_t lo = get_u32(in);
    const std::uint64_t hi = get_u32(in);
    return lo | hi << 32;
}

template <class S>
void put_scalar(std::ostream& out, S v) {
    if constexpr (sizeof(S) == 4) {
        put_u32(out, std::bit_cast<std::uint32_t>(float(v)));
    } else {
        put_u64(out, std::bit_cast<std::uint64_t>(double(v)));
    }
}

template <class S>
S get_scalar(std::istream& in) {
    if constexpr (sizeof(S) == 4) {
        return std::bit_cast<float>(get_u32(in));
    } else {
        return std::bit_cast<double>(get_u64(in));
    }
}

} // namespace detail

inline constexpr char kCkptMagic[8] = {'L', 'L', 'V', '3', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

// Little-endian container: magic, version, scalar width in bits (32, or 64
// in gradcheck / high-precision mode), a JSON config block, then named
// tensors with explicit shapes. Round trips are bit-exact.
template <class S>
void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const ParamRefs<S>& refs) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("checkpoint: cannot write " + path);
    out.write(kCkptMagic, 8);
    detail::put_u32(out, kCkptVersion);
    detail::put_u32(out, sizeof(S) * 8);
    const std::string cfg = config.dump();
    detail::put_u64(out, cfg.size());
    out.write(cfg.data(), std::streamsize(cfg.size()));
    detail::put_u64(out, refs.size());
    for (const auto& [name, t] : refs) {
        detail::put_u32(out, std::uint32_t(name.size()));
        out.write(name.data(), std::streamsize(name.size()));
        detail::put_u64(out, std::uint64_t(t->rows));
        detail::put_u64(out, std::uint64_t(t->cols));
        for (S v : t->data)
            detail::put_scalar(out, v);
    }
    if (!out)
        throw DataError("checkpoint: write failed for " + path);
}

// Read only the header and config block of a checkpoint.
inline nlohmann::json read_checkpoint_config(const std::string& path,
                                             std::uint32_t* bits_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("checkpoint: cannot read " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, kCkptMagic))
        throw DataError("checkpoint: bad magic in " + path);
    if (detail::get_u32(in) != kCkptVersion)
        throw DataError("checkpoint: unsupported version in " + path);
    const std::uint32_t bits = detail::get_u32(in);
    if (bits_out)
        *bits_out = bits;
    const std::uint64_t cfg_len = detail::get_u64(in);
    std::string cfg(cfg_len, '\0');
    in.read(cfg.data(), std::streamsize(cfg_len));
    if (!in)
        throw DataError("checkpoint: truncated config block in " + path);
    try {
        return nlohmann::json::parse(cfg);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint: bad config block in " + path + ": " + e.what());
    }
}

// Reads the config block and loads every listed tensor into the matching
// ref; names, shapes and scalar width must all agree.
template <class S>
nlohmann::json load_checkpoint(const std::string& path, const ParamRefs<S>& refs) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("checkpoint: cannot read " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, kCkptMagic))
        throw DataError("checkpoint: bad magic in " + path);
    if (detail::get_u32(in) != kCkptVersion)
        throw DataError("checkpoint: unsupported version in " + path);
    const std::uint32_t bits = detail::get_u32(in);
    if (bits != sizeof(S) * 8)
        throw ConfigError("checkpoint: " + path + " stores " + std::to_string(bits) +
                          "-bit scalars, expected " + std::to_string(sizeof(S) * 8));
    const std::uint64_t cfg_len = detail::get_u64(in);
    std::string cfg(cfg_len, '\0');
    in.read(cfg.data(), std::streamsize(cfg_len));
    nlohmann::json config;
    try {
        config = nlohmann::json::parse(cfg);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint: bad config block in " + path + ": " + e.what());
    }

    std::map<std::string, Tensor<S>*> by_name;
    for (const auto& [name, t] : refs)
        by_name[name] = t;
    const std::uint64_t count = detail::get_u64(in);
    std::size_t loaded = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::get_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), std::streamsize(name_len));
        const int rows = int(detail::get_u64(in));
        const int cols = int(detail::get_u64(in));
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw DataError("checkpoint: unexpected tensor '" + name + "' in " + path);
        Tensor<S>* t = it->second;
        if (t->rows != rows || t->cols != cols)
            throw DataError("checkpoint: shape mismatch for '" + name + "' in " + path);
        for (auto& v : t->data)
            v = detail::get_scalar<S>(in);
        ++loaded;
        if (!in)
            throw DataError("checkpoint: truncated data in " + path);
    }
    if (loaded != refs.size())
        throw DataError("checkpoint: " + path + " is missing tensors");
    return config;
}

} // namespace docml
