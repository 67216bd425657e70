#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "docml/checkpoint.hpp"
#include "docml/docmodel.hpp"
#include "docml/heads.hpp"
#include "docml/masking.hpp"
#include "docml/metrics.hpp"
#include "docml/model.hpp"
#include "docml/objectives.hpp"

namespace docml {

struct OptimizerConfig {
    double beta1 = 0.9, beta2 = 0.98;
    double eps = 1e-6;
    double weight_decay = 1e-2;
    double peak_lr = 1e-4;
    double warmup_frac = 0.048;
    bool decay_to_zero = true; // linear decay to 0 after warmup; else constant
};

// Linear warmup 0 -> peak over the first warmup_frac of steps, then linear
// decay peak -> 0 (or constant when decay_to_zero is off). lr_at(total) = 0.
inline double lr_at(long step, long total, double warmup_frac, double peak,
                    bool decay_to_zero = true) {
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
        throw ConfigError("lr_at: warmup fraction must lie in [0,1)");
    if (step < 0 || step > total || total < 1)
        throw ConfigError("lr_at: step outside [0,total]");
    long w = std::llround(warmup_frac * double(total));
    w = std::min(w, total - 1);
    if (w > 0 && step <= w)
        return peak * double(step) / double(w);
    if (!decay_to_zero)
        return peak;
    return peak * double(total - step) / double(total - w);
}

// Decoupled weight decay followed by a bias-corrected Adam update. Moments
// are kept in the same precision as the parameters.
template <class S>
class AdamW {
public:
    AdamW(const OptimizerConfig& cfg, const ParamRefs<S>& params) : cfg_(cfg) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const auto& [name, t] : params) {
            m_.emplace_back(t->size(), S(0));
            v_.emplace_back(t->size(), S(0));
        }
    }

    long step_count() const { return t_; }

    void step(const ParamRefs<S>& params, const ParamRefs<S>& grads, double lr) {
        if (params.size() != grads.size() || params.size() != m_.size())
            throw ConfigError("adamw: parameter/gradient set mismatch");
        ++t_;
        const S b1 = S(cfg_.beta1), b2 = S(cfg_.beta2);
        const S bc1 = S(1) - S(std::pow(cfg_.beta1, double(t_)));
        const S bc2 = S(1) - S(std::pow(cfg_.beta2, double(t_)));
        const S slr = S(lr), eps = S(cfg_.eps), wd = S(cfg_.weight_decay);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<S>& th = *params[i].second;
            const Tensor<S>& g = *grads[i].second;
            if (th.size() != g.size())
                throw ConfigError("adamw: shape mismatch for " + params[i].first);
            if (!g.finite())
                throw NumericError("adamw: non-finite gradient in " + params[i].first);
            S* m = m_[i].data();
            S* v = v_[i].data();
            for (std::size_t j = 0; j < th.size(); ++j) {
                th.data[j] -= slr * wd * th.data[j];
                const S gj = g.data[j];
                m[j] = b1 * m[j] + (S(1) - b1) * gj;
                v[j] = b2 * v[j] + (S(1) - b2) * gj * gj;
                const S mhat = m[j] / bc1;
                const S vhat = v[j] / bc2;
                th.data[j] -= slr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

private:
    OptimizerConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<S>> m_, v_;
};

struct RunConfig {
    std::uint64_t seed = 0;
    int batch = 8;
    int accum = 1;
    long steps = 100;
    long ckpt_interval = 0; // 0 = final checkpoint only
    ObjectiveSwitches objectives;
    TaskHeadConfig head;
    ModelConfig model;
    MaskingConfig masking;
    OptimizerConfig opt;
    bool fresh_init = false; // finetune without a pre-training checkpoint
    std::string corpus, eval_corpus;
    std::string vocab_in, vocab_out;
    std::string ckpt_in, ckpt_out;
    std::string log_out, pred_out;

    void validate() const {
        if (batch < 1 || accum < 1 || batch % accum != 0)
            throw ConfigError("run: batch size must be a positive multiple of accumulation steps");
        if (steps < 0)
            throw ConfigError("run: steps must be >= 0");
        model.validate();
        masking.validate();
        if (opt.warmup_frac < 0.0 || opt.warmup_frac >= 1.0)
            throw ConfigError("run: warmup fraction must lie in [0,1)");
    }
};

// Fixed loss-log line: step, l_mlm, l_mim, l_wpa, total, n_mlm, n_mim, n_wpa.
inline std::string format_log_line(long step, const LossBreakdown<double>& lb) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%ld\t%.17g\t%.17g\t%.17g\t%.17g\t%ld\t%ld\t%ld", step, lb.mlm,
                  lb.mim, lb.wpa, lb.total, lb.n_mlm, lb.n_mim, lb.n_wpa);
    return buf;
}

template <class S>
struct PretrainResult {
    std::vector<LossBreakdown<double>> history; // one entry per step, batch means
    ModelConfig model_cfg;
    Parameters<S> params;
    Vocabulary vocab;
};

namespace detail {

inline std::vector<DocumentRecord> load_corpus_checked(const std::string& path) {
    std::vector<DocumentRecord> docs = read_corpus(path);
    if (docs.empty())
        throw DataError("corpus " + path + " contains no documents");
    return docs;
}

inline Vocabulary resolve_vocab(const RunConfig& run, const std::vector<DocumentRecord>& docs) {
    Vocabulary v = run.vocab_in.empty() ? Vocabulary::build(docs, run.model.text_vocab)
                                        : Vocabulary::load(run.vocab_in);
    if (v.size() > run.model.text_vocab)
        throw ConfigError("vocabulary size " + std::to_string(v.size()) +
                          " exceeds model text vocab " + std::to_string(run.model.text_vocab));
    return v;
}

} // namespace detail

// Deterministic single-threaded pre-training: batch items are drawn by
// cycling the corpus in order, masking plans are seeded per (run seed, step,
// item), gradients are reduced in item order, and the update uses the batch
// mean gradient. Gradient accumulation splits the batch into accum
// micro-batches without changing any numerics.
template <class S>
PretrainResult<S> pretrain(const RunConfig& run) {
    run.validate();
    const std::vector<DocumentRecord> docs = detail::load_corpus_checked(run.corpus);
    const Vocabulary vocab = detail::resolve_vocab(run, docs);
    const ModelConfig& cfg = run.model;

    std::vector<EncodedInput> encoded;
    std::vector<BiasIndex> bias_cache;
    encoded.reserve(docs.size());
    for (const auto& d : docs) {
        encoded.push_back(encode_document(d, cfg.encode_config(), vocab));
        bias_cache.push_back(build_bias_index(encoded.back(), cfg));
    }

    PretrainResult<S> result;
    result.model_cfg = cfg;
    result.vocab = vocab;
    result.params = Parameters<S>::init(cfg, run.seed);
    Parameters<S> grads = Parameters<S>::shaped(cfg);
    ParamRefs<S> prefs = collect_refs<S>(result.params);
    ParamRefs<S> grefs = collect_refs<S>(grads);
    AdamW<S> opt(run.opt, prefs);

    std::ofstream log;
    if (!run.log_out.empty()) {
        log.open(run.log_out, std::ios::binary);
        if (!log)
            throw DataError("pretrain: cannot write log " + run.log_out);
    }
    nlohmann::json cfg_json;
    model_config_to_json(cfg, cfg_json["model"]);
    bool have_checkpoint = false;

    const int micro = run.batch / run.accum;
    for (long step = 1; step <= run.steps; ++step) {
        for (auto& [name, g] : grefs)
            g->zero();
        LossBreakdown<double> batch_lb;
        for (int a = 0; a < run.accum; ++a) {
            for (int u = 0; u < micro; ++u) {
                const int k = a * micro + u;
                const std::size_t di = std::size_t(((step - 1) * run.batch + k) % long(docs.size()));
                Rng rng(mix_seed(run.seed, std::uint64_t(step), std::uint64_t(k)));
                const MaskingPlan plan =
                    build_plan(encoded[di], run.masking, cfg.text_vocab, cfg.image_vocab, rng);
                const LossBreakdown<S> lb = total_loss(encoded[di], plan, result.params, cfg,
                                                       run.objectives, &grads, &bias_cache[di]);
                batch_lb.mlm += double(lb.mlm);
                batch_lb.mim += double(lb.mim);
                batch_lb.wpa += double(lb.wpa);
                batch_lb.total += double(lb.total);
                batch_lb.n_mlm += lb.n_mlm;
                batch_lb.n_mim += lb.n_mim;
                batch_lb.n_wpa += lb.n_wpa;
            }
        }
        batch_lb.mlm /= run.batch;
        batch_lb.mim /= run.batch;
        batch_lb.wpa /= run.batch;
        batch_lb.total /= run.batch;
        if (!std::isfinite(batch_lb.total))
            throw NumericError("pretrain: divergent loss at step " + std::to_string(step) +
                               (have_checkpoint ? " (last good checkpoint retained)" : ""));
        for (auto& [name, g] : grefs)
            scale_inplace(*g, S(1) / S(run.batch));
        // with every objective disabled there is nothing to optimize, so the
        // parameters (including weight decay) stay untouched
        if (run.objectives.mlm || run.objectives.mim || run.objectives.wpa)
            opt.step(prefs, grefs, lr_at(step, run.steps, run.opt.warmup_frac, run.opt.peak_lr,
                                         run.opt.decay_to_zero));
        result.history.push_back(batch_lb);
        if (log)
            log << format_log_line(step, batch_lb) << '\n';
        if (!run.ckpt_out.empty() && run.ckpt_interval > 0 && step % run.ckpt_interval == 0) {
            save_checkpoint(run.ckpt_out, cfg_json, prefs);
            have_checkpoint = true;
        }
    }
    if (!run.ckpt_out.empty())
        save_checkpoint(run.ckpt_out, cfg_json, prefs);
    if (!run.vocab_out.empty())
        vocab.save(run.vocab_out);
    return result;
}

// ---- prediction dumps -------------------------------------------------------

struct PredictionRecord {
    std::string id;
    std::string task;
    std::vector<int> word_labels; // token-label, one per encoded word
    int doc_class = -1;
    int span_start = -1, span_end = -1; // token positions
    std::string answer;
};

inline void write_predictions(const std::vector<PredictionRecord>& preds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("predictions: cannot write " + path);
    for (const auto& p : preds) {
        nlohmann::json rec;
        rec["id"] = p.id;
        rec["task"] = p.task;
        if (p.task == "token-label")
            rec["word_labels"] = p.word_labels;
        else if (p.task == "doc-class")
            rec["doc_class"] = p.doc_class;
        else if (p.task == "extractive-qa") {
            rec["span"] = {p.span_start, p.span_end};
            rec["answer"] = p.answer;
        }
        out << rec.dump() << '\n';
    }
}

inline std::vector<PredictionRecord> read_predictions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("predictions: cannot read " + path);
    std::vector<PredictionRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        try {
            const nlohmann::json rec = nlohmann::json::parse(line);
            PredictionRecord p;
            p.id = rec.at("id").get<std::string>();
            p.task = rec.at("task").get<std::string>();
            if (rec.contains("word_labels"))
                p.word_labels = rec["word_labels"].get<std::vector<int>>();
            if (rec.contains("doc_class"))
                p.doc_class = rec["doc_class"].get<int>();
            if (rec.contains("span")) {
                p.span_start = rec["span"].at(0).get<int>();
                p.span_end = rec["span"].at(1).get<int>();
            }
            if (rec.contains("answer"))
                p.answer = rec["answer"].get<std::string>();
            out.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("predictions: parse error at line " + std::to_string(lineno) + ": " +
                            e.what());
        }
    }
    return out;
}

// Metric over two prediction dumps of the same shape (e.g. model output vs
// a gold dump).
inline EvalReport compare_prediction_files(const std::string& pred_path,
                                           const std::string& gold_path) {
    const auto preds = read_predictions(pred_path);
    const auto golds = read_predictions(gold_path);
    if (preds.size() != golds.size())
        throw DataError("compare: prediction/gold record count mismatch");
    if (preds.empty())
        throw DataError("compare: no records");
    const std::string& task = golds.front().task;
    if (task == "token-label") {
        std::vector<std::vector<std::string>> gt, pt;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            std::vector<std::string> g, p;
            for (int c : golds[i].word_labels)
                g.push_back(tag_of_class(c));
            for (int c : preds[i].word_labels)
                p.push_back(tag_of_class(c));
            gt.push_back(std::move(g));
            pt.push_back(std::move(p));
        }
        return entity_f1(gt, pt);
    }
    if (task == "doc-class") {
        std::vector<int> g, p;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            g.push_back(golds[i].doc_class);
            p.push_back(preds[i].doc_class);
        }
        return accuracy(g, p);
    }
    if (task == "extractive-qa") {
        std::vector<std::string> p;
        std::vector<std::vector<std::string>> g;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            p.push_back(preds[i].answer);
            g.push_back({golds[i].answer});
        }
        return anls(p, g);
    }
    throw DataError("compare: unknown task '" + task + "'");
}

// ---- fine-tuning / evaluation -----------------------------------------------

namespace detail {

inline std::string join_words(const std::vector<std::string>& words, int start, int end) {
    std::string out;
    for (int i = start; i <= end && i < int(words.size()); ++i) {
        if (!out.empty())
            out += ' ';
        out += words[std::size_t(i)];
    }
    return out;
}

// gold span in word indices -> token positions; {-1,-1} when truncated away
inline std::pair<int, int> span_tokens(const EncodedInput& enc, const AnswerSpan& span) {
    int s = -1, e = -1;
    for (int pos = 0; pos < enc.seq_len(); ++pos) {
        if (enc.word_index[std::size_t(pos)] == span.start_word)
            s = pos;
        if (enc.word_index[std::size_t(pos)] == span.end_word)
            e = pos;
    }
    if (s < 0 || e < 0 || s > e)
        return {-1, -1};
    return {s, e};
}

} // namespace detail

template <class S>
PredictionRecord predict_document(const DocumentRecord& doc, const EncodedInput& enc,
                                  const Parameters<S>& params, const ModelConfig& cfg,
                                  const TaskHead<S>& head) {
    const EncodeResult<S> t = encode(enc, nullptr, params, cfg);
    PredictionRecord rec;
    rec.id = doc.id;
    rec.task = to_string(head.cfg.kind);
    switch (head.cfg.kind) {
    case TaskKind::TokenLabel: {
        for (const auto& [pos, probs] : token_classify(t.out, enc, head)) {
            int arg = 0;
            for (int c = 1; c < int(probs.size()); ++c)
                if (probs[std::size_t(c)] > probs[std::size_t(arg)])
                    arg = c;
            rec.word_labels.push_back(arg);
        }
        break;
    }
    case TaskKind::DocClass: {
        const auto probs = doc_classify(t.out, head);
        int arg = 0;
        for (int c = 1; c < int(probs.size()); ++c)
            if (probs[std::size_t(c)] > probs[std::size_t(arg)])
                arg = c;
        rec.doc_class = arg;
        break;
    }
    case TaskKind::ExtractiveQA: {
        const auto spans = qa_spans(t.out, enc, head, 1);
        rec.span_start = spans.front().start;
        rec.span_end = spans.front().end;
        const int ws = enc.word_index[std::size_t(rec.span_start)];
        const int we = enc.word_index[std::size_t(rec.span_end)];
        rec.answer = detail::join_words(doc.words, ws, we);
        break;
    }
    }
    return rec;
}

inline PredictionRecord gold_record(const DocumentRecord& doc, const EncodedInput& enc,
                                    TaskKind kind) {
    PredictionRecord rec;
    rec.id = doc.id;
    rec.task = to_string(kind);
    switch (kind) {
    case TaskKind::TokenLabel: {
        if (!doc.labels.word_classes)
            throw ConfigError("document " + doc.id + " has no word class labels");
        for (int pos = 0; pos < enc.seq_len(); ++pos)
            if (enc.is_real_token(pos))
                rec.word_labels.push_back(
                    (*doc.labels.word_classes)[std::size_t(enc.word_index[std::size_t(pos)])]);
        break;
    }
    case TaskKind::DocClass:
        if (!doc.labels.doc_class)
            throw ConfigError("document " + doc.id + " has no document class label");
        rec.doc_class = *doc.labels.doc_class;
        break;
    case TaskKind::ExtractiveQA: {
        if (!doc.labels.answer_span)
            throw ConfigError("document " + doc.id + " has no answer span label");
        const auto [s, e] = detail::span_tokens(enc, *doc.labels.answer_span);
        rec.span_start = s;
        rec.span_end = e;
        rec.answer = detail::join_words(doc.words, doc.labels.answer_span->start_word,
                                        doc.labels.answer_span->end_word);
        break;
    }
    }
    return rec;
}

template <class S>
EvalReport evaluate_model(const std::vector<DocumentRecord>& docs,
                          const std::vector<EncodedInput>& encoded, const Parameters<S>& params,
                          const ModelConfig& cfg, const TaskHead<S>& head,
                          std::vector<PredictionRecord>* preds_out = nullptr) {
    std::vector<PredictionRecord> preds, golds;
    for (std::size_t i = 0; i < docs.size(); ++i) {
        preds.push_back(predict_document(docs[i], encoded[i], params, cfg, head));
        golds.push_back(gold_record(docs[i], encoded[i], head.cfg.kind));
    }
    EvalReport report;
    switch (head.cfg.kind) {
    case TaskKind::TokenLabel: {
        std::vector<std::vector<std::string>> gt, pt;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            std::vector<std::string> g, p;
            for (int c : golds[i].word_labels)
                g.push_back(tag_of_class(c));
            for (int c : preds[i].word_labels)
                p.push_back(tag_of_class(c));
            gt.push_back(std::move(g));
            pt.push_back(std::move(p));
        }
        report = entity_f1(gt, pt);
        break;
    }
    case TaskKind::DocClass: {
        std::vector<int> g, p;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            g.push_back(golds[i].doc_class);
            p.push_back(preds[i].doc_class);
        }
        report = accuracy(g, p);
        break;
    }
    case TaskKind::ExtractiveQA: {
        std::vector<std::string> p;
        std::vector<std::vector<std::string>> g;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            p.push_back(preds[i].answer);
            g.push_back({golds[i].answer});
        }
        report = anls(p, g);
        break;
    }
    }
    if (preds_out)
        *preds_out = std::move(preds);
    return report;
}

template <class S>
struct FinetuneResult {
    std::vector<double> history; // batch-mean task loss per step
    ModelConfig model_cfg;
    Parameters<S> params;
    TaskHead<S> head;
    EvalReport eval;
};

// Fine-tune the encoder plus a task head with the task cross-entropy
// (QA: start CE + end CE). The optimizer covers encoder and head jointly.
template <class S>
FinetuneResult<S> finetune(const RunConfig& run) {
    run.validate();
    run.head.validate();
    const std::vector<DocumentRecord> docs = detail::load_corpus_checked(run.corpus);

    FinetuneResult<S> result;
    result.model_cfg = run.model;
    if (!run.ckpt_in.empty()) {
        // architecture comes from the checkpoint config block
        const nlohmann::json cfg_json = read_checkpoint_config(run.ckpt_in);
        result.model_cfg = model_config_from_json(
            cfg_json.contains("model") ? cfg_json.at("model") : cfg_json);
        result.params = Parameters<S>::shaped(result.model_cfg);
        ParamRefs<S> refs = collect_refs<S>(result.params);
        load_checkpoint(run.ckpt_in, refs);
    } else {
        if (!run.fresh_init)
            throw ConfigError("finetune: either --init-from checkpoint or --fresh-init is required");
        result.params = Parameters<S>::init(run.model, run.seed);
    }
    const ModelConfig& cfg = result.model_cfg;

    const Vocabulary vocab = [&] {
        RunConfig r = run;
        r.model = cfg;
        return detail::resolve_vocab(r, docs);
    }();

    std::vector<EncodedInput> encoded;
    for (const auto& d : docs)
        encoded.push_back(encode_document(d, cfg.encode_config(), vocab));

    result.head = TaskHead<S>::init(run.head, cfg.hidden, run.seed);
    TaskHead<S> head_grads = TaskHead<S>::shaped(run.head, cfg.hidden);
    Parameters<S> grads = Parameters<S>::shaped(cfg);

    ParamRefs<S> prefs = collect_refs<S>(result.params);
    ParamRefs<S> grefs = collect_refs<S>(grads);
    for (auto& [name, t] : collect_refs<S>(result.head))
        prefs.emplace_back(name, t);
    for (auto& [name, t] : collect_refs<S>(head_grads))
        grefs.emplace_back(name, t);

    AdamW<S> opt(run.opt, prefs);
    std::ofstream log;
    if (!run.log_out.empty()) {
        log.open(run.log_out, std::ios::binary);
        if (!log)
            throw DataError("finetune: cannot write log " + run.log_out);
    }

    for (long step = 1; step <= run.steps; ++step) {
        for (auto& [name, g] : grefs)
            g->zero();
        double batch_loss = 0.0;
        for (int k = 0; k < run.batch; ++k) {
            const std::size_t di = std::size_t(((step - 1) * run.batch + k) % long(docs.size()));
            const DocumentRecord& doc = docs[di];
            const EncodedInput& enc = encoded[di];
            const EncodeResult<S> t = encode(enc, nullptr, result.params, cfg);
            Tensor<S> dctx(t.out.rows, t.out.cols);
            S loss = S(0);
            switch (run.head.kind) {
            case TaskKind::TokenLabel:
                if (!doc.labels.word_classes)
                    throw ConfigError("finetune: document " + doc.id + " lacks word class labels");
                loss = token_label_loss(t.out, enc, *doc.labels.word_classes, result.head, nullptr,
                                        &dctx, &head_grads);
                break;
            case TaskKind::DocClass:
                if (!doc.labels.doc_class)
                    throw ConfigError("finetune: document " + doc.id + " lacks a class label");
                loss = doc_class_loss(t.out, *doc.labels.doc_class, result.head, &dctx, &head_grads);
                break;
            case TaskKind::ExtractiveQA: {
                if (!doc.labels.answer_span)
                    throw ConfigError("finetune: document " + doc.id + " lacks an answer span");
                const auto [s, e] = detail::span_tokens(enc, *doc.labels.answer_span);
                if (s < 0)
                    continue; // span truncated away; contributes nothing
                loss = qa_loss(t.out, enc, s, e, result.head, &dctx, &head_grads);
                break;
            }
            }
            encode_backward(enc, result.params, cfg, t, dctx, grads);
            batch_loss += double(loss);
        }
        batch_loss /= run.batch;
        if (!std::isfinite(batch_loss))
            throw NumericError("finetune: divergent loss at step " + std::to_string(step));
        for (auto& [name, g] : grefs)
            scale_inplace(*g, S(1) / S(run.batch));
        opt.step(prefs, grefs, lr_at(step, run.steps, run.opt.warmup_frac, run.opt.peak_lr,
                                     run.opt.decay_to_zero));
        result.history.push_back(batch_loss);
        if (log) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%ld\t%.17g", step, batch_loss);
            log << buf << '\n';
        }
    }

    if (!run.ckpt_out.empty()) {
        nlohmann::json j;
        model_config_to_json(cfg, j["model"]);
        task_head_config_to_json(run.head, j["task_head"]);
        save_checkpoint(run.ckpt_out, j, prefs);
    }
    if (!run.vocab_out.empty())
        vocab.save(run.vocab_out);

    // evaluation split: eval corpus when given, else the training split
    std::vector<DocumentRecord> eval_docs =
        run.eval_corpus.empty() ? docs : detail::load_corpus_checked(run.eval_corpus);
    std::vector<EncodedInput> eval_enc;
    for (const auto& d : eval_docs)
        eval_enc.push_back(encode_document(d, cfg.encode_config(), vocab));
    std::vector<PredictionRecord> preds;
    result.eval = evaluate_model(eval_docs, eval_enc, result.params, cfg, result.head, &preds);
    if (!run.pred_out.empty())
        write_predictions(preds, run.pred_out);
    return result;
}

} // namespace docml
