#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "docml/error.hpp"

namespace docml {

struct EvalReport {
    std::string metric;
    double value = 0.0;          // in [0, 1]
    long support_gold = 0;       // gold entities / labels / questions
    long support_pred = 0;
    long support_matched = 0;
};

// Typed entity span decoded from BIO tags, [start, end] token range.
struct Entity {
    std::string type;
    int start = 0, end = 0;
    auto operator<=>(const Entity&) const = default;
};

// Decode maximal BIO segments. "B-X" starts an entity, "I-X" continues one
// of the same type or starts a new one otherwise, "O" closes. Any other tag
// is a parse error.
std::vector<Entity> decode_bio(const std::vector<std::string>& tags);

// Entity-level F1: an entity matches iff type and exact boundaries match.
// F1 = 2PR/(P+R), defined as 0 when P+R = 0.
EvalReport entity_f1(const std::vector<std::vector<std::string>>& gold,
                     const std::vector<std::vector<std::string>>& pred);

EvalReport accuracy(const std::vector<int>& gold, const std::vector<int>& pred);

// Standard Levenshtein distance with unit insert/delete/substitute costs.
int levenshtein(std::string_view a, std::string_view b);

// Average Normalized Levenshtein Similarity. Per question the score is the
// maximum over gold answers of 1 - lev/max(len) on lowercased, trimmed
// strings, zeroed below tau.
EvalReport anls(const std::vector<std::string>& preds,
                const std::vector<std::vector<std::string>>& golds, double tau = 0.5);

} // namespace docml
