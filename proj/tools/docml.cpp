// docml: synthetic document corpus generation, multimodal pre-training,
// fine-tuning, evaluation and verification from one binary.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "docml/gradcheck.hpp"
#include "docml/harness.hpp"

using namespace docml;

namespace {

struct CliState {
    RunConfig run;
    std::string precision = "f32";
    std::string objectives = "mlm,mim,wpa";
    std::string task = "token-label";
    std::string head_shape;
    // gen-corpus
    std::string out_path;
    long n_docs = 32;
    bool ppm = false;
    bool no_labels = false;
    GeneratorStyle style;
    // evaluate / inspect
    std::string pred_file, gold_file;
    long doc_index = 0;
};

ObjectiveSwitches parse_objectives(const std::string& spec) {
    ObjectiveSwitches sw{false, false, false};
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item == "mlm")
            sw.mlm = true;
        else if (item == "mim")
            sw.mim = true;
        else if (item == "wpa")
            sw.wpa = true;
        else if (!item.empty())
            throw ConfigError("unknown objective '" + item + "' (expected mlm,mim,wpa)");
    }
    return sw;
}

void add_model_flags(CLI::App* cmd, ModelConfig& m) {
    cmd->add_option("--layers", m.layers, "Transformer layers");
    cmd->add_option("--heads", m.heads, "attention heads");
    cmd->add_option("--hidden", m.hidden, "hidden size D");
    cmd->add_option("--ffn-inner", m.ffn_inner, "feed-forward inner size");
    cmd->add_option("--max-seq", m.max_seq, "text sequence length L");
    cmd->add_option("--image-size", m.image_h, "square image side H=W")
        ->each([&m](const std::string& v) { m.image_w = std::stoi(v); });
    cmd->add_option("--patch-size", m.patch, "patch side P");
    cmd->add_option("--text-vocab", m.text_vocab, "text vocabulary capacity");
    cmd->add_option("--image-vocab", m.image_vocab, "image token vocabulary (perfect cube)");
    cmd->add_option("--alpha", m.alpha, "attention stabilization divisor");
    cmd->add_flag("--tie-mlm", m.tie_mlm, "tie the MLM head to the word embedding table");
}

void add_masking_flags(CLI::App* cmd, MaskingConfig& mc) {
    cmd->add_option("--text-ratio", mc.text_ratio, "text masking ratio");
    cmd->add_option("--span-lambda", mc.span_lambda, "Poisson span length mean");
    cmd->add_option("--span-max", mc.span_max, "span length clamp");
    cmd->add_option("--image-ratio", mc.image_ratio, "image masking ratio");
    cmd->add_option("--min-block", mc.min_block_patches, "minimum block area in patches");
    cmd->add_option("--mask-prob", mc.mask_prob, "P([MASK] replacement)");
    cmd->add_option("--random-prob", mc.random_prob, "P(random id replacement)");
    cmd->add_option("--keep-prob", mc.keep_prob, "P(keep original id)");
}

void add_optimizer_flags(CLI::App* cmd, OptimizerConfig& oc) {
    cmd->add_option("--lr", oc.peak_lr, "peak learning rate");
    cmd->add_option("--warmup", oc.warmup_frac, "warmup fraction of total steps");
    cmd->add_option("--weight-decay", oc.weight_decay, "decoupled weight decay");
    cmd->add_option("--beta1", oc.beta1, "Adam beta1");
    cmd->add_option("--beta2", oc.beta2, "Adam beta2");
    cmd->add_option("--adam-eps", oc.eps, "Adam epsilon");
    cmd->add_flag("--constant-lr", [&oc](std::int64_t) { oc.decay_to_zero = false; },
                  "keep the peak rate after warmup instead of decaying to zero");
}

void print_report(const EvalReport& r) {
    std::printf("%s\t%.6f\tgold=%ld\tpred=%ld\tmatched=%ld\n", r.metric.c_str(), r.value,
                r.support_gold, r.support_pred, r.support_matched);
}

int run_gen_corpus(CliState& st) {
    std::vector<DocumentRecord> docs;
    st.style.emit_labels = !st.no_labels;
    for (long i = 0; i < st.n_docs; ++i)
        docs.push_back(generate_document(st.run.seed + std::uint64_t(i), st.style));
    write_corpus(docs, st.out_path, st.ppm);
    if (!st.run.vocab_out.empty())
        Vocabulary::build(docs, st.run.model.text_vocab).save(st.run.vocab_out);
    std::fprintf(stderr, "wrote %ld documents to %s\n", st.n_docs, st.out_path.c_str());
    return 0;
}

template <class S>
int run_pretrain(CliState& st) {
    const PretrainResult<S> res = pretrain<S>(st.run);
    if (!res.history.empty()) {
        const auto& last = res.history.back();
        std::fprintf(stderr, "final step %zu: total=%.6f mlm=%.6f mim=%.6f wpa=%.6f\n",
                     res.history.size(), last.total, last.mlm, last.mim, last.wpa);
    }
    return 0;
}

template <class S>
int run_finetune(CliState& st) {
    const FinetuneResult<S> res = finetune<S>(st.run);
    print_report(res.eval);
    return 0;
}

template <class S>
int run_evaluate_model(CliState& st) {
    const nlohmann::json cfg_json = read_checkpoint_config(st.run.ckpt_in);
    const ModelConfig cfg = model_config_from_json(
        cfg_json.contains("model") ? cfg_json.at("model") : cfg_json);
    if (!cfg_json.contains("task_head"))
        throw ConfigError("evaluate: checkpoint " + st.run.ckpt_in +
                          " has no task head (run finetune first)");
    const TaskHeadConfig head_cfg = task_head_config_from_json(cfg_json.at("task_head"));

    Parameters<S> params = Parameters<S>::shaped(cfg);
    TaskHead<S> head = TaskHead<S>::shaped(head_cfg, cfg.hidden);
    ParamRefs<S> refs = collect_refs<S>(params);
    for (auto& [name, t] : collect_refs<S>(head))
        refs.emplace_back(name, t);
    load_checkpoint(st.run.ckpt_in, refs);

    const std::vector<DocumentRecord> docs = read_corpus(st.run.corpus);
    if (docs.empty())
        throw DataError("evaluate: corpus is empty");
    const Vocabulary vocab = st.run.vocab_in.empty()
                                 ? Vocabulary::build(docs, cfg.text_vocab)
                                 : Vocabulary::load(st.run.vocab_in);
    std::vector<EncodedInput> encoded;
    for (const auto& d : docs)
        encoded.push_back(encode_document(d, cfg.encode_config(), vocab));
    std::vector<PredictionRecord> preds;
    const EvalReport report = evaluate_model(docs, encoded, params, cfg, head, &preds);
    if (!st.run.pred_out.empty())
        write_predictions(preds, st.run.pred_out);
    print_report(report);
    return 0;
}

int run_inspect_plan(CliState& st) {
    const std::vector<DocumentRecord> docs = read_corpus(st.run.corpus);
    if (st.doc_index < 0 || st.doc_index >= long(docs.size()))
        throw DataError("inspect-plan: document index out of range");
    const DocumentRecord& doc = docs[std::size_t(st.doc_index)];
    const Vocabulary vocab = st.run.vocab_in.empty()
                                 ? Vocabulary::build(docs, st.run.model.text_vocab)
                                 : Vocabulary::load(st.run.vocab_in);
    const EncodedInput enc = encode_document(doc, st.run.model.encode_config(), vocab);
    Rng rng(mix_seed(st.run.seed, 0, 0));
    const MaskingPlan plan =
        build_plan(enc, st.run.masking, st.run.model.text_vocab, st.run.model.image_vocab, rng);

    nlohmann::json j;
    j["doc"] = doc.id;
    j["seed"] = st.run.seed;
    j["masked_text_positions"] = plan.masked_text;
    nlohmann::json reps = nlohmann::json::array();
    for (std::size_t i = 0; i < plan.masked_text.size(); ++i) {
        switch (plan.text_replacements[i]) {
        case Replacement::Mask:
            reps.push_back("mask");
            break;
        case Replacement::Random:
            reps.push_back("random:" + std::to_string(plan.random_ids[i]));
            break;
        case Replacement::Keep:
            reps.push_back("keep");
            break;
        }
    }
    j["replacements"] = std::move(reps);
    j["masked_patches"] = plan.masked_patches;
    j["mim_targets"] = plan.mim_targets;
    nlohmann::json wpa = nlohmann::json::object();
    for (int pos = 0; pos < enc.seq_len(); ++pos)
        if (plan.wpa[std::size_t(pos)] != kWpaNone)
            wpa[std::to_string(pos)] =
                plan.wpa[std::size_t(pos)] == kWpaAligned ? "aligned" : "unaligned";
    j["wpa_labels"] = std::move(wpa);
    std::cout << j.dump(2) << "\n";
    return 0;
}

int run_gradcheck_cmd(CliState& st) {
    const GradcheckReport report = run_gradcheck(st.run.seed, &std::cerr);
    std::printf("fd_step\t%.1e\n", report.fd_step);
    for (const auto& g : report.groups)
        std::printf("group\t%s\t%.3e\n", g.name.c_str(), g.max_rel_err);
    std::printf("max_rel_err\t%.3e\n", report.max_rel_err);
    std::printf("dead_param_ok\t%s\n", report.dead_param_ok ? "yes" : "no");
    std::printf("linearity_max_abs\t%.3e\n", report.linearity_max_abs);
    return report.max_rel_err < 1e-4 && report.dead_param_ok ? 0 : 3;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale multimodal document model trainer"};
    app.require_subcommand(1);
    CliState st;

    auto add_common = [&](CLI::App* cmd, bool needs_seed) {
        cmd->set_config("--config", "", "read options from a TOML/INI file");
        auto* seed = cmd->add_option("--seed", st.run.seed, "run seed");
        if (needs_seed)
            seed->required();
    };

    CLI::App* gen = app.add_subcommand("gen-corpus", "generate a synthetic document corpus");
    add_common(gen, false);
    gen->add_option("--out", st.out_path, "corpus jsonl path")->required();
    gen->add_option("--docs", st.n_docs, "number of documents");
    gen->add_flag("--ppm", st.ppm, "write PPM (P6) images instead of LFIMG1");
    gen->add_flag("--no-labels", st.no_labels, "omit task labels");
    gen->add_option("--vocab-out", st.run.vocab_out, "also write the built vocabulary");
    gen->add_option("--page-size", st.style.page_w, "square page side in pixels")
        ->each([&](const std::string& v) { st.style.page_h = std::stoi(v); });
    gen->add_option("--max-segments", st.style.max_segments, "segments per page cap");
    gen->add_option("--max-words", st.style.max_words, "words per segment cap");
    gen->add_option("--entity-types", st.style.n_entity_types, "entity types for token labels");
    gen->add_option("--doc-classes", st.style.n_doc_classes, "document class count");

    CLI::App* pre = app.add_subcommand("pretrain", "run the masked pre-training objectives");
    add_common(pre, true);
    pre->add_option("--corpus", st.run.corpus, "training corpus")->required();
    pre->add_option("--steps", st.run.steps, "optimizer steps");
    pre->add_option("--batch", st.run.batch, "batch size");
    pre->add_option("--accum", st.run.accum, "gradient accumulation factor");
    pre->add_option("--objectives", st.objectives, "comma list of mlm,mim,wpa");
    pre->add_option("--precision", st.precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    pre->add_option("--ckpt-out", st.run.ckpt_out, "checkpoint output path");
    pre->add_option("--ckpt-interval", st.run.ckpt_interval, "checkpoint every N steps");
    pre->add_option("--vocab-in", st.run.vocab_in, "existing vocabulary file");
    pre->add_option("--vocab-out", st.run.vocab_out, "write the vocabulary");
    pre->add_option("--log", st.run.log_out, "loss log output path");
    add_model_flags(pre, st.run.model);
    add_masking_flags(pre, st.run.masking);
    add_optimizer_flags(pre, st.run.opt);

    CLI::App* ft = app.add_subcommand("finetune", "train a task head on a labeled corpus");
    add_common(ft, true);
    ft->add_option("--corpus", st.run.corpus, "training corpus")->required();
    ft->add_option("--eval-corpus", st.run.eval_corpus, "held-out corpus for the final report");
    ft->add_option("--task", st.task, "token-label | doc-class | extractive-qa");
    ft->add_option("--classes", st.run.head.classes, "class count for classification tasks");
    ft->add_option("--head-shape", st.head_shape, "linear | mlp (default depends on task)");
    ft->add_option("--qa-max-span", st.run.head.qa_max_span, "maximum decoded span length");
    ft->add_option("--steps", st.run.steps, "optimizer steps");
    ft->add_option("--batch", st.run.batch, "batch size");
    ft->add_option("--precision", st.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    ft->add_option("--init-from", st.run.ckpt_in, "pre-training checkpoint to start from");
    ft->add_flag("--fresh-init", st.run.fresh_init, "train from random initialization");
    ft->add_option("--ckpt-out", st.run.ckpt_out, "checkpoint output path");
    ft->add_option("--vocab-in", st.run.vocab_in, "vocabulary file (recommended)");
    ft->add_option("--vocab-out", st.run.vocab_out, "write the vocabulary");
    ft->add_option("--log", st.run.log_out, "loss log output path");
    ft->add_option("--pred-out", st.run.pred_out, "prediction dump for the eval split");
    add_model_flags(ft, st.run.model);
    add_optimizer_flags(ft, st.run.opt);

    CLI::App* ev = app.add_subcommand("evaluate", "score a fine-tuned checkpoint or two dumps");
    add_common(ev, false);
    ev->add_option("--corpus", st.run.corpus, "evaluation corpus with gold labels");
    ev->add_option("--ckpt", st.run.ckpt_in, "fine-tuned checkpoint");
    ev->add_option("--vocab-in", st.run.vocab_in, "vocabulary file");
    ev->add_option("--precision", st.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    ev->add_option("--pred-out", st.run.pred_out, "write the prediction dump");
    ev->add_option("--pred", st.pred_file, "prediction dump (file mode)");
    ev->add_option("--gold", st.gold_file, "gold dump (file mode)");

    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    add_common(gc, false);

    CLI::App* ip = app.add_subcommand("inspect-plan", "dump a masking plan for one document");
    add_common(ip, true);
    ip->add_option("--corpus", st.run.corpus, "corpus")->required();
    ip->add_option("--doc-index", st.doc_index, "document index in the corpus");
    ip->add_option("--vocab-in", st.run.vocab_in, "vocabulary file");
    add_model_flags(ip, st.run.model);
    add_masking_flags(ip, st.run.masking);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0)
            return app.exit(e); // --help
        app.exit(e);
        return 1; // bad flags are config errors
    }

    try {
        if (*gen)
            return run_gen_corpus(st);
        st.run.objectives = parse_objectives(st.objectives);
        if (*ft) {
            st.run.head.kind = task_kind_of(st.task);
            if (st.head_shape.empty())
                st.run.head.shape =
                    st.run.head.kind == TaskKind::DocClass ? HeadShape::Mlp : HeadShape::Linear;
            else if (st.head_shape == "linear")
                st.run.head.shape = HeadShape::Linear;
            else if (st.head_shape == "mlp")
                st.run.head.shape = HeadShape::Mlp;
            else
                throw ConfigError("unknown head shape '" + st.head_shape + "'");
        }
        if (*pre)
            return st.precision == "f64" ? run_pretrain<double>(st) : run_pretrain<float>(st);
        if (*ft)
            return st.precision == "f64" ? run_finetune<double>(st) : run_finetune<float>(st);
        if (*ev) {
            if (!st.pred_file.empty() || !st.gold_file.empty()) {
                if (st.pred_file.empty() || st.gold_file.empty())
                    throw ConfigError("evaluate file mode needs both --pred and --gold");
                print_report(compare_prediction_files(st.pred_file, st.gold_file));
                return 0;
            }
            if (st.run.ckpt_in.empty() || st.run.corpus.empty())
                throw ConfigError("evaluate needs --ckpt and --corpus (or --pred/--gold)");
            std::uint32_t bits = 32;
            read_checkpoint_config(st.run.ckpt_in, &bits);
            return bits == 64 ? run_evaluate_model<double>(st) : run_evaluate_model<float>(st);
        }
        if (*gc)
            return run_gradcheck_cmd(st);
        if (*ip)
            return run_inspect_plan(st);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    }
    return 0;
}
