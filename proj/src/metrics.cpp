#include "docml/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>

namespace docml {

std::vector<Entity> decode_bio(const std::vector<std::string>& tags) {
    std::vector<Entity> out;
    std::string open_type;
    int open_start = -1;
    auto close = [&](int end) {
        if (open_start >= 0)
            out.push_back({open_type, open_start, end});
        open_start = -1;
        open_type.clear();
    };
    for (int i = 0; i < int(tags.size()); ++i) {
        const std::string& tag = tags[std::size_t(i)];
        if (tag == "O") {
            close(i - 1);
        } else if (tag.size() >= 3 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') {
            const std::string type = tag.substr(2);
            if (tag[0] == 'B' || open_start < 0 || open_type != type) {
                close(i - 1);
                open_type = type;
                open_start = i;
            }
        } else {
            throw DataError("decode_bio: malformed tag '" + tag + "'");
        }
    }
    close(int(tags.size()) - 1);
    return out;
}

EvalReport entity_f1(const std::vector<std::vector<std::string>>& gold,
                     const std::vector<std::vector<std::string>>& pred) {
    if (gold.size() != pred.size())
        throw DataError("entity_f1: document count mismatch");
    long n_gold = 0, n_pred = 0, n_match = 0;
    for (std::size_t d = 0; d < gold.size(); ++d) {
        if (gold[d].size() != pred[d].size())
            throw DataError("entity_f1: tag length mismatch in document " + std::to_string(d));
        std::map<Entity, int> bag;
        for (const Entity& e : decode_bio(gold[d])) {
            ++bag[e];
            ++n_gold;
        }
        for (const Entity& e : decode_bio(pred[d])) {
            ++n_pred;
            auto it = bag.find(e);
            if (it != bag.end() && it->second > 0) {
                --it->second;
                ++n_match;
            }
        }
    }
    const double p = n_pred > 0 ? double(n_match) / double(n_pred) : 0.0;
    const double r = n_gold > 0 ? double(n_match) / double(n_gold) : 0.0;
    const double f1 = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    return {"entity_f1", f1, n_gold, n_pred, n_match};
}

EvalReport accuracy(const std::vector<int>& gold, const std::vector<int>& pred) {
    if (gold.empty())
        throw DataError("accuracy: empty input");
    if (gold.size() != pred.size())
        throw DataError("accuracy: length mismatch");
    long match = 0;
    for (std::size_t i = 0; i < gold.size(); ++i)
        if (gold[i] == pred[i])
            ++match;
    return {"accuracy", double(match) / double(gold.size()), long(gold.size()), long(pred.size()),
            match};
}

int levenshtein(std::string_view a, std::string_view b) {
    const int n = int(a.size()), m = int(b.size());
    std::vector<int> prev(std::size_t(m) + 1), cur(std::size_t(m) + 1);
    for (int j = 0; j <= m; ++j)
        prev[std::size_t(j)] = j;
    for (int i = 1; i <= n; ++i) {
        cur[0] = i;
        for (int j = 1; j <= m; ++j) {
            const int sub = prev[std::size_t(j) - 1] + (a[std::size_t(i) - 1] == b[std::size_t(j) - 1] ? 0 : 1);
            cur[std::size_t(j)] = std::min({prev[std::size_t(j)] + 1, cur[std::size_t(j) - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[std::size_t(m)];
}

namespace {

std::string canonical(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b])))
        ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1])))
        --e;
    std::string out(s.substr(b, e - b));
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    return out;
}

} // namespace

EvalReport anls(const std::vector<std::string>& preds,
                const std::vector<std::vector<std::string>>& golds, double tau) {
    if (preds.size() != golds.size())
        throw DataError("anls: prediction/gold count mismatch");
    if (preds.empty())
        throw DataError("anls: empty input");
    double sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (golds[i].empty())
            throw DataError("anls: empty gold set for question " + std::to_string(i));
        const std::string p = canonical(preds[i]);
        double best = 0.0;
        for (const std::string& gold_raw : golds[i]) {
            const std::string g = canonical(gold_raw);
            const std::size_t longest = std::max(p.size(), g.size());
            const double nls =
                longest == 0 ? 1.0 : 1.0 - double(levenshtein(p, g)) / double(longest);
            best = std::max(best, nls);
        }
        sum += best >= tau ? best : 0.0;
    }
    return {"anls", sum / double(preds.size()), long(preds.size()), long(preds.size()), 0};
}

} // namespace docml
