#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "docml/model.hpp"

namespace docml {

enum class TaskKind { TokenLabel, DocClass, ExtractiveQA };
enum class HeadShape { Linear, Mlp };

inline std::string to_string(TaskKind k) {
    switch (k) {
    case TaskKind::TokenLabel: return "token-label";
    case TaskKind::DocClass: return "doc-class";
    case TaskKind::ExtractiveQA: return "extractive-qa";
    }
    return "?";
}

inline TaskKind task_kind_of(const std::string& s) {
    if (s == "token-label") return TaskKind::TokenLabel;
    if (s == "doc-class") return TaskKind::DocClass;
    if (s == "extractive-qa") return TaskKind::ExtractiveQA;
    throw ConfigError("unknown task kind '" + s + "'");
}

struct TaskHeadConfig {
    TaskKind kind = TaskKind::TokenLabel;
    int classes = 2;        // ignored for extractive QA (start/end scores)
    HeadShape shape = HeadShape::Linear;
    int qa_max_span = 30;   // maximum decoded span length in tokens

    int out_dim() const { return kind == TaskKind::ExtractiveQA ? 2 : classes; }
    void validate() const {
        if (kind != TaskKind::ExtractiveQA && classes < 2)
            throw ConfigError("task head: class count must be >= 2");
        if (qa_max_span < 1)
            throw ConfigError("task head: qa_max_span must be >= 1");
    }
};

template <class S>
struct TaskHead {
    TaskHeadConfig cfg;
    Tensor<S> w1, b1; // Linear: D x out; Mlp: D x D
    Tensor<S> w2, b2; // Mlp only: D x out

    static TaskHead shaped(const TaskHeadConfig& cfg, int hidden) {
        cfg.validate();
        TaskHead h;
        h.cfg = cfg;
        const int out = cfg.out_dim();
        if (cfg.shape == HeadShape::Linear) {
            h.w1 = Tensor<S>(hidden, out);
            h.b1 = Tensor<S>(1, out);
        } else {
            h.w1 = Tensor<S>(hidden, hidden);
            h.b1 = Tensor<S>(1, hidden);
            h.w2 = Tensor<S>(hidden, out);
            h.b2 = Tensor<S>(1, out);
        }
        return h;
    }

    static TaskHead init(const TaskHeadConfig& cfg, int hidden, std::uint64_t seed,
                         double scale = 0.02) {
        TaskHead h = shaped(cfg, hidden);
        Rng rng(mix_seed(seed, 0x4ead));
        for (auto* t : {&h.w1, &h.w2})
            for (auto& v : t->data)
                v = S(rng.gauss() * scale);
        return h;
    }

    template <class F>
    void for_each(F&& f) {
        f(std::string("task.w1"), w1, ParamKind::Weight);
        f(std::string("task.b1"), b1, ParamKind::Bias);
        if (!w2.empty()) {
            f(std::string("task.w2"), w2, ParamKind::Weight);
            f(std::string("task.b2"), b2, ParamKind::Bias);
        }
    }

    // logits for one contextual row; hidden_buf must hold D scalars (used in
    // the MLP case, stores pre-activation values for the backward pass)
    void logits(const S* x, S* out, S* hidden_buf = nullptr) const {
        const int D = w1.rows;
        if (cfg.shape == HeadShape::Linear) {
            const int O = w1.cols;
            for (int o = 0; o < O; ++o)
                out[o] = b1.data[std::size_t(o)];
            for (int c = 0; c < D; ++c) {
                const S xv = x[c];
                if (xv == S(0))
                    continue;
                const S* wr = w1.row(c);
                for (int o = 0; o < O; ++o)
                    out[o] += xv * wr[o];
            }
            return;
        }
        std::vector<S> local;
        S* h = hidden_buf;
        if (!h) {
            local.resize(std::size_t(D));
            h = local.data();
        }
        for (int c = 0; c < D; ++c)
            h[c] = b1.data[std::size_t(c)];
        for (int c = 0; c < D; ++c) {
            const S xv = x[c];
            if (xv == S(0))
                continue;
            const S* wr = w1.row(c);
            for (int o = 0; o < D; ++o)
                h[o] += xv * wr[o];
        }
        const int O = w2.cols;
        for (int o = 0; o < O; ++o)
            out[o] = b2.data[std::size_t(o)];
        for (int c = 0; c < D; ++c) {
            const S a = gelu(h[c]);
            if (a == S(0))
                continue;
            const S* wr = w2.row(c);
            for (int o = 0; o < O; ++o)
                out[o] += a * wr[o];
        }
    }

    // dlogits -> accumulate head grads and d(input row)
    void backward(const S* x, const S* hidden_pre, const S* dlogits, TaskHead& g, S* dx) const {
        const int D = w1.rows;
        if (cfg.shape == HeadShape::Linear) {
            const int O = w1.cols;
            for (int o = 0; o < O; ++o)
                g.b1.data[std::size_t(o)] += dlogits[o];
            for (int c = 0; c < D; ++c) {
                const S* wr = w1.row(c);
                S* gwr = g.w1.row(c);
                S acc = S(0);
                for (int o = 0; o < O; ++o) {
                    gwr[o] += x[c] * dlogits[o];
                    acc += wr[o] * dlogits[o];
                }
                dx[c] += acc;
            }
            return;
        }
        const int O = w2.cols;
        for (int o = 0; o < O; ++o)
            g.b2.data[std::size_t(o)] += dlogits[o];
        for (int c = 0; c < D; ++c) {
            const S a = gelu(hidden_pre[c]);
            const S* wr = w2.row(c);
            S* gwr = g.w2.row(c);
            S da = S(0);
            for (int o = 0; o < O; ++o) {
                gwr[o] += a * dlogits[o];
                da += wr[o] * dlogits[o];
            }
            const S dh = da * gelu_grad(hidden_pre[c]);
            if (dh == S(0))
                continue;
            g.b1.data[std::size_t(c)] += dh;
            for (int i = 0; i < D; ++i) {
                g.w1.at(i, c) += dh * x[i];
                dx[i] += dh * w1.at(i, c);
            }
        }
    }
};

namespace detail {

template <class S>
void softmax_inplace(std::vector<S>& v) {
    S maxv = v[0];
    for (S x : v)
        maxv = std::max(maxv, x);
    S sum = S(0);
    for (auto& x : v) {
        x = std::exp(x - maxv);
        sum += x;
    }
    for (auto& x : v)
        x /= sum;
}

} // namespace detail

// Class distributions for every real text token, position-wise; pads and
// specials are excluded.
template <class S>
std::vector<std::pair<int, std::vector<S>>> token_classify(const Tensor<S>& ctx,
                                                           const EncodedInput& enc,
                                                           const TaskHead<S>& head) {
    std::vector<std::pair<int, std::vector<S>>> out;
    for (int pos = 0; pos < enc.seq_len(); ++pos) {
        if (!enc.is_real_token(pos))
            continue;
        std::vector<S> logits(static_cast<std::size_t>(head.cfg.out_dim()));
        head.logits(ctx.row(pos), logits.data());
        detail::softmax_inplace(logits);
        out.emplace_back(pos, std::move(logits));
    }
    return out;
}

// Class distribution from the [CLS] contextual vector.
template <class S>
std::vector<S> doc_classify(const Tensor<S>& ctx, const TaskHead<S>& head) {
    std::vector<S> logits(static_cast<std::size_t>(head.cfg.out_dim()));
    head.logits(ctx.row(0), logits.data());
    detail::softmax_inplace(logits);
    return logits;
}

struct QaSpan {
    int start = 0, end = 0; // token positions, inclusive
    double score = 0;
};

// Best spans by start_score(i) + end_score(j) with i <= j and span length
// <= qa_max_span; ties broken by smallest i then smallest j.
template <class S>
std::vector<QaSpan> qa_spans(const Tensor<S>& ctx, const EncodedInput& enc, const TaskHead<S>& head,
                             int top_k = 1) {
    std::vector<int> real;
    for (int pos = 0; pos < enc.seq_len(); ++pos)
        if (enc.is_real_token(pos))
            real.push_back(pos);
    if (real.empty())
        throw DataError("qa_spans: no real tokens to decode from");

    std::vector<double> start_s(real.size()), end_s(real.size());
    S logits[2];
    for (std::size_t i = 0; i < real.size(); ++i) {
        head.logits(ctx.row(real[i]), logits);
        start_s[i] = double(logits[0]);
        end_s[i] = double(logits[1]);
    }
    std::vector<QaSpan> all;
    for (std::size_t i = 0; i < real.size(); ++i)
        for (std::size_t j = i; j < real.size() && real[j] - real[i] + 1 <= head.cfg.qa_max_span; ++j)
            all.push_back({real[i], real[j], start_s[i] + end_s[j]});
    std::sort(all.begin(), all.end(), [](const QaSpan& a, const QaSpan& b) {
        if (a.score != b.score)
            return a.score > b.score;
        if (a.start != b.start)
            return a.start < b.start;
        return a.end < b.end;
    });
    if (int(all.size()) > top_k)
        all.resize(std::size_t(top_k));
    return all;
}

// ---- task losses (training side) -------------------------------------------

// Mean cross-entropy over real tokens against per-word gold classes.
template <class S>
S token_label_loss(const Tensor<S>& ctx, const EncodedInput& enc, const std::vector<int>& word_classes,
                   const TaskHead<S>& head, long* count = nullptr, Tensor<S>* dctx = nullptr,
                   TaskHead<S>* ghead = nullptr) {
    const int C = head.cfg.out_dim(), D = ctx.cols;
    std::vector<int> positions;
    for (int pos = 0; pos < enc.seq_len(); ++pos)
        if (enc.is_real_token(pos))
            positions.push_back(pos);
    if (count)
        *count = long(positions.size());
    if (positions.empty())
        return S(0);
    const S inv_n = S(1) / S(positions.size());
    std::vector<S> logits(static_cast<std::size_t>(C)), hidden(static_cast<std::size_t>(D));
    S loss = S(0);
    for (int pos : positions) {
        const int w = enc.word_index[std::size_t(pos)];
        if (w >= int(word_classes.size()))
            throw ConfigError("token_label_loss: word without a gold class");
        const int gold = word_classes[std::size_t(w)];
        if (gold < 0 || gold >= C)
            throw ConfigError("token_label_loss: gold class " + std::to_string(gold) +
                              " outside head classes");
        head.logits(ctx.row(pos), logits.data(), hidden.data());
        S maxv = logits[0];
        for (S v : logits)
            maxv = std::max(maxv, v);
        S sum = S(0);
        for (S v : logits)
            sum += std::exp(v - maxv);
        const S lse = maxv + std::log(sum);
        loss += (lse - logits[std::size_t(gold)]) * inv_n;
        if (dctx) {
            std::vector<S> dlogits(static_cast<std::size_t>(C));
            for (int v = 0; v < C; ++v)
                dlogits[std::size_t(v)] =
                    (std::exp(logits[std::size_t(v)] - lse) - (v == gold ? S(1) : S(0))) * inv_n;
            head.backward(ctx.row(pos), hidden.data(), dlogits.data(), *ghead, dctx->row(pos));
        }
    }
    return loss;
}

// Cross-entropy of the document class from [CLS].
template <class S>
S doc_class_loss(const Tensor<S>& ctx, int gold, const TaskHead<S>& head, Tensor<S>* dctx = nullptr,
                 TaskHead<S>* ghead = nullptr) {
    const int C = head.cfg.out_dim(), D = ctx.cols;
    if (gold < 0 || gold >= C)
        throw ConfigError("doc_class_loss: gold class outside head classes");
    std::vector<S> logits(static_cast<std::size_t>(C)), hidden(static_cast<std::size_t>(D));
    head.logits(ctx.row(0), logits.data(), hidden.data());
    S maxv = logits[0];
    for (S v : logits)
        maxv = std::max(maxv, v);
    S sum = S(0);
    for (S v : logits)
        sum += std::exp(v - maxv);
    const S lse = maxv + std::log(sum);
    const S loss = lse - logits[std::size_t(gold)];
    if (dctx) {
        std::vector<S> dlogits(static_cast<std::size_t>(C));
        for (int v = 0; v < C; ++v)
            dlogits[std::size_t(v)] = std::exp(logits[std::size_t(v)] - lse) - (v == gold ? S(1) : S(0));
        head.backward(ctx.row(0), hidden.data(), dlogits.data(), *ghead, dctx->row(0));
    }
    return loss;
}

// Extractive QA: softmax cross-entropy over real tokens for the start
// position plus the same for the end position.
template <class S>
S qa_loss(const Tensor<S>& ctx, const EncodedInput& enc, int start_pos, int end_pos,
          const TaskHead<S>& head, Tensor<S>* dctx = nullptr, TaskHead<S>* ghead = nullptr) {
    const int D = ctx.cols;
    std::vector<int> real;
    int start_i = -1, end_i = -1;
    for (int pos = 0; pos < enc.seq_len(); ++pos)
        if (enc.is_real_token(pos)) {
            if (pos == start_pos)
                start_i = int(real.size());
            if (pos == end_pos)
                end_i = int(real.size());
            real.push_back(pos);
        }
    if (real.empty())
        throw DataError("qa_loss: no real tokens");
    if (start_i < 0 || end_i < 0 || start_i > end_i)
        throw ConfigError("qa_loss: gold span not within real tokens");

    const int n = int(real.size());
    Tensor<S> logit_mat(n, 2), hidden_mat(n, D);
    for (int i = 0; i < n; ++i)
        head.logits(ctx.row(real[std::size_t(i)]), logit_mat.row(i), hidden_mat.row(i));

    S loss = S(0);
    std::vector<S> dcol(static_cast<std::size_t>(n));
    Tensor<S> dlogit_mat(n, 2);
    for (int which = 0; which < 2; ++which) {
        const int gold = which == 0 ? start_i : end_i;
        S maxv = logit_mat.at(0, which);
        for (int i = 1; i < n; ++i)
            maxv = std::max(maxv, logit_mat.at(i, which));
        S sum = S(0);
        for (int i = 0; i < n; ++i)
            sum += std::exp(logit_mat.at(i, which) - maxv);
        const S lse = maxv + std::log(sum);
        loss += lse - logit_mat.at(gold, which);
        if (dctx)
            for (int i = 0; i < n; ++i)
                dlogit_mat.at(i, which) =
                    std::exp(logit_mat.at(i, which) - lse) - (i == gold ? S(1) : S(0));
    }
    if (dctx)
        for (int i = 0; i < n; ++i)
            head.backward(ctx.row(real[std::size_t(i)]), hidden_mat.row(i), dlogit_mat.row(i), *ghead,
                          dctx->row(real[std::size_t(i)]));
    return loss;
}

} // namespace docml
