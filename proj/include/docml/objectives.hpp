#pragma once

#include <cmath>
#include <vector>

#include "docml/model.hpp"

namespace docml {

template <class S>
struct LossBreakdown {
    S mlm = 0, mim = 0, wpa = 0, total = 0;
    long n_mlm = 0, n_mim = 0, n_wpa = 0;
};

// Mirrors the pre-training objective ablation rows: switches change which
// terms enter the sum, never the forward pass.
struct ObjectiveSwitches {
    bool mlm = true, mim = true, wpa = true;
};

namespace detail {

// Cross-entropy of a linear head over selected contextual rows, mean over
// positions. W may be stored either D x V ("forward" layout, transposed =
// false) or V x D (an embedding table reused as a tied head, transposed =
// true). Gradients are optional and accumulated.
template <class S>
S linear_ce(const Tensor<S>& ctx, const std::vector<int>& positions, const std::vector<int>& targets,
            const Tensor<S>& w, bool transposed, const Tensor<S>& bias, Tensor<S>* dctx, Tensor<S>* dw,
            Tensor<S>* dbias) {
    const int D = ctx.cols;
    const int V = transposed ? w.rows : w.cols;
    const int n = int(positions.size());
    if (n == 0)
        return S(0);
    std::vector<S> logits(static_cast<std::size_t>(V));
    S loss = S(0);
    const S inv_n = S(1) / S(n);
    for (int t = 0; t < n; ++t) {
        const int pos = positions[std::size_t(t)];
        const int target = targets[std::size_t(t)];
        if (target < 0 || target >= V)
            throw DataError("cross-entropy: target id " + std::to_string(target) + " out of range");
        const S* x = ctx.row(pos);
        if (transposed) {
            for (int v = 0; v < V; ++v) {
                const S* wr = w.row(v);
                S acc = bias.data[std::size_t(v)];
                for (int c = 0; c < D; ++c)
                    acc += x[c] * wr[c];
                logits[std::size_t(v)] = acc;
            }
        } else {
            for (int v = 0; v < V; ++v)
                logits[std::size_t(v)] = bias.data[std::size_t(v)];
            for (int c = 0; c < D; ++c) {
                const S xv = x[c];
                if (xv == S(0))
                    continue;
                const S* wr = w.row(c);
                for (int v = 0; v < V; ++v)
                    logits[std::size_t(v)] += xv * wr[v];
            }
        }
        S maxv = logits[0];
        for (int v = 1; v < V; ++v)
            maxv = std::max(maxv, logits[std::size_t(v)]);
        S sum = S(0);
        for (int v = 0; v < V; ++v)
            sum += std::exp(logits[std::size_t(v)] - maxv);
        const S lse = maxv + std::log(sum);
        loss += (lse - logits[std::size_t(target)]) * inv_n;

        if (dctx) {
            S* dx = dctx->row(pos);
            for (int v = 0; v < V; ++v) {
                S dlogit = std::exp(logits[std::size_t(v)] - lse);
                if (v == target)
                    dlogit -= S(1);
                dlogit *= inv_n;
                if (dlogit == S(0))
                    continue;
                if (dbias)
                    dbias->data[std::size_t(v)] += dlogit;
                if (transposed) {
                    const S* wr = w.row(v);
                    S* dwr = dw->row(v);
                    for (int c = 0; c < D; ++c) {
                        dx[c] += dlogit * wr[c];
                        dwr[c] += dlogit * x[c];
                    }
                } else {
                    for (int c = 0; c < D; ++c) {
                        dx[c] += dlogit * w.at(c, v);
                        dw->at(c, v) += dlogit * x[c];
                    }
                }
            }
        }
    }
    return loss;
}

template <class S>
S sigmoid(S x) {
    return S(1) / (S(1) + std::exp(-x));
}

template <class S>
S softplus(S x) {
    // log(1 + e^x), overflow-safe
    return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
}

} // namespace detail

// Mean cross-entropy of the MLM head over masked text positions against the
// original (uncorrupted) token ids.
template <class S>
S mlm_loss(const Tensor<S>& ctx, const MaskingPlan& plan, const std::vector<int>& original_ids,
           const Parameters<S>& p, const ModelConfig& cfg, long* count = nullptr,
           Tensor<S>* dctx = nullptr, Parameters<S>* grads = nullptr) {
    std::vector<int> targets;
    for (int pos : plan.masked_text) {
        if (pos < 0 || pos >= cfg.max_seq)
            throw DataError("mlm_loss: masked position out of text range");
        targets.push_back(original_ids[std::size_t(pos)]);
    }
    if (count)
        *count = long(plan.masked_text.size());
    const bool tied = cfg.tie_mlm;
    return detail::linear_ce(ctx, plan.masked_text, targets, tied ? p.word_emb : p.mlm_w, tied,
                             p.mlm_b, dctx, grads ? (tied ? &grads->word_emb : &grads->mlm_w) : nullptr,
                             grads ? &grads->mlm_b : nullptr);
}

// Mean cross-entropy of the MIM head over masked patch positions against the
// stand-in tokenizer ids.
template <class S>
S mim_loss(const Tensor<S>& ctx, const MaskingPlan& plan, const Parameters<S>& p,
           const ModelConfig& cfg, long* count = nullptr, Tensor<S>* dctx = nullptr,
           Parameters<S>* grads = nullptr) {
    const int M = cfg.patch_count();
    std::vector<int> positions;
    for (int k : plan.masked_patches) {
        if (k < 0 || k >= M)
            throw DataError("mim_loss: masked patch out of range");
        positions.push_back(cfg.max_seq + k);
    }
    if (plan.mim_targets.size() != plan.masked_patches.size())
        throw DataError("mim_loss: targets missing for masked patches");
    if (count)
        *count = long(positions.size());
    return detail::linear_ce(ctx, positions, plan.mim_targets, p.mim_w, false, p.mim_b, dctx,
                             grads ? &grads->mim_w : nullptr, grads ? &grads->mim_b : nullptr);
}

// Mean binary cross-entropy of the two-layer MLP alignment head over labeled
// positions (real unmasked text tokens).
template <class S>
S wpa_loss(const Tensor<S>& ctx, const EncodedInput& enc, const MaskingPlan& plan,
           const Parameters<S>& p, const ModelConfig& cfg, long* count = nullptr,
           Tensor<S>* dctx = nullptr, Parameters<S>* grads = nullptr) {
    const int L = cfg.max_seq, D = cfg.hidden;
    if (int(plan.wpa.size()) != L)
        throw DataError("wpa_loss: label vector has wrong length");
    std::vector<int> positions;
    for (int pos = 0; pos < L; ++pos) {
        const bool labeled = plan.wpa[std::size_t(pos)] != kWpaNone;
        const bool expected = enc.is_real_token(pos) && !plan.text_masked(pos);
        if (labeled != expected)
            throw DataError("wpa_loss: label domain mismatch at position " + std::to_string(pos));
        if (labeled)
            positions.push_back(pos);
    }
    if (count)
        *count = long(positions.size());
    if (positions.empty())
        return S(0);

    const S inv_n = S(1) / S(positions.size());
    std::vector<S> hidden(static_cast<std::size_t>(D)), act(static_cast<std::size_t>(D));
    S loss = S(0);
    for (int pos : positions) {
        const S* x = ctx.row(pos);
        for (int c = 0; c < D; ++c)
            hidden[std::size_t(c)] = p.wpa_b1.data[std::size_t(c)];
        for (int i = 0; i < D; ++i) {
            const S xv = x[i];
            if (xv == S(0))
                continue;
            const S* wr = p.wpa_w1.row(i);
            for (int c = 0; c < D; ++c)
                hidden[std::size_t(c)] += xv * wr[c];
        }
        S s = p.wpa_b2.data[0];
        for (int c = 0; c < D; ++c) {
            act[std::size_t(c)] = gelu(hidden[std::size_t(c)]);
            s += act[std::size_t(c)] * p.wpa_w2.at(c, 0);
        }
        const S z = plan.wpa[std::size_t(pos)] == kWpaAligned ? S(1) : S(0);
        // -[z log sig(s) + (1-z) log(1 - sig(s))] = softplus(s) - z*s
        loss += (detail::softplus(s) - z * s) * inv_n;

        if (dctx) {
            const S ds = (detail::sigmoid(s) - z) * inv_n;
            grads->wpa_b2.data[0] += ds;
            S* dx = dctx->row(pos);
            for (int c = 0; c < D; ++c) {
                grads->wpa_w2.at(c, 0) += ds * act[std::size_t(c)];
                const S dh = ds * p.wpa_w2.at(c, 0) * gelu_grad(hidden[std::size_t(c)]);
                if (dh == S(0))
                    continue;
                grads->wpa_b1.data[std::size_t(c)] += dh;
                for (int i = 0; i < D; ++i) {
                    grads->wpa_w1.at(i, c) += dh * x[i];
                    dx[i] += dh * p.wpa_w1.at(i, c);
                }
            }
        }
    }
    return loss;
}

// Single shared forward pass, all three objective heads, optional full
// backward into grads.
template <class S>
LossBreakdown<S> total_loss(const EncodedInput& enc, const MaskingPlan& plan, const Parameters<S>& p,
                            const ModelConfig& cfg, const ObjectiveSwitches& sw = {},
                            Parameters<S>* grads = nullptr, const BiasIndex* cached_bias = nullptr) {
    EncodeResult<S> t = encode(enc, &plan, p, cfg, cached_bias);
    LossBreakdown<S> lb;
    Tensor<S> dctx;
    Tensor<S>* dctx_ptr = nullptr;
    if (grads) {
        dctx = Tensor<S>(t.out.rows, t.out.cols);
        dctx_ptr = &dctx;
    }
    if (sw.mlm)
        lb.mlm = mlm_loss(t.out, plan, enc.token_ids, p, cfg, &lb.n_mlm, dctx_ptr, grads);
    if (sw.mim)
        lb.mim = mim_loss(t.out, plan, p, cfg, &lb.n_mim, dctx_ptr, grads);
    if (sw.wpa)
        lb.wpa = wpa_loss(t.out, enc, plan, p, cfg, &lb.n_wpa, dctx_ptr, grads);
    lb.total = lb.mlm + lb.mim + lb.wpa;
    if (grads)
        encode_backward(enc, p, cfg, t, dctx, *grads);
    return lb;
}

} // namespace docml
