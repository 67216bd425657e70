#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "docml/gradcheck.hpp"
#include "docml/harness.hpp"

using namespace docml;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static int counter = 0;
    fs::path p = fs::temp_directory_path() / ("docml_harness_" + std::to_string(::getpid()) + "_" +
                                              std::to_string(counter++));
    fs::create_directories(p);
    return p;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

GeneratorStyle small_style() {
    GeneratorStyle st;
    st.page_w = 128;
    st.page_h = 128;
    st.max_segments = 3;
    st.max_words = 4;
    return st;
}

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.hidden = 16;
    cfg.ffn_inner = 32;
    cfg.max_seq = 12;
    cfg.image_h = 32;
    cfg.image_w = 32;
    cfg.text_vocab = 64;
    cfg.image_vocab = 8;
    return cfg;
}

RunConfig tiny_run(const fs::path& dir, int n_docs, std::uint64_t seed) {
    std::vector<DocumentRecord> docs;
    for (int i = 0; i < n_docs; ++i)
        docs.push_back(generate_document(std::uint64_t(i), small_style()));
    const std::string corpus = (dir / "corpus.jsonl").string();
    write_corpus(docs, corpus);
    RunConfig run;
    run.seed = seed;
    run.corpus = corpus;
    run.batch = 4;
    run.steps = 5;
    run.model = tiny_model();
    run.masking.min_block_patches = 1;
    run.opt.peak_lr = 1e-3;
    run.opt.warmup_frac = 0.2;
    return run;
}

} // namespace

TEST_CASE("lr schedule endpoints and interpolation") {
    // 1000 steps, 10% warmup: peak at 100, zero at both ends
    CHECK(lr_at(0, 1000, 0.1, 2.0) == 0.0);
    CHECK(lr_at(100, 1000, 0.1, 2.0) == doctest::Approx(2.0));
    CHECK(lr_at(550, 1000, 0.1, 2.0) == doctest::Approx(1.0)); // decay midpoint
    CHECK(lr_at(1000, 1000, 0.1, 2.0) == 0.0);
    // continuity across the warmup boundary
    CHECK(std::abs(lr_at(99, 1000, 0.1, 2.0) - lr_at(101, 1000, 0.1, 2.0)) < 0.05);
    // constant mode after warmup
    CHECK(lr_at(700, 1000, 0.1, 2.0, false) == doctest::Approx(2.0));
    // zero warmup starts at peak
    CHECK(lr_at(0, 10, 0.0, 2.0) == doctest::Approx(2.0));
    CHECK_THROWS_AS(lr_at(5, 10, 1.5, 1.0), ConfigError);
    CHECK_THROWS_AS(lr_at(11, 10, 0.1, 1.0), ConfigError);
}

TEST_CASE("adam first-step closed form and zero-lr behaviour") {
    Tensor<double> theta(1, 1);
    theta.at(0, 0) = 0.7;
    Tensor<double> grad(1, 1);
    grad.at(0, 0) = 1.0;
    ParamRefs<double> p{{"w", &theta}}, g{{"w", &grad}};

    OptimizerConfig oc;
    oc.weight_decay = 0.0;
    AdamW<double> opt(oc, p);

    SUBCASE("zero lr leaves parameters untouched but advances the state") {
        opt.step(p, g, 0.0);
        CHECK(theta.at(0, 0) == 0.7);
        CHECK(opt.step_count() == 1);
        // the next unit-lr step uses t=2 bias corrections over the warm state
        opt.step(p, g, 0.01);
        CHECK(theta.at(0, 0) < 0.7);
    }
    SUBCASE("first step moves by -lr/(1+eps)") {
        const double lr = 0.01;
        opt.step(p, g, lr);
        CHECK(theta.at(0, 0) == doctest::Approx(0.7 - lr / (1.0 + oc.eps)).epsilon(1e-12));
    }
    SUBCASE("decoupled decay shrinks the weight before the update") {
        OptimizerConfig wd = oc;
        wd.weight_decay = 0.5;
        AdamW<double> opt2(wd, p);
        Tensor<double> zero_grad(1, 1);
        ParamRefs<double> gz{{"w", &zero_grad}};
        opt2.step(p, gz, 0.1);
        CHECK(theta.at(0, 0) == doctest::Approx(0.7 * (1.0 - 0.1 * 0.5)).epsilon(1e-12));
    }
}

TEST_CASE("adam rejects non-finite gradients naming the tensor") {
    Tensor<double> theta(1, 2), grad(1, 2);
    grad.at(0, 1) = std::numeric_limits<double>::infinity();
    ParamRefs<double> p{{"embed.word", &theta}}, g{{"embed.word", &grad}};
    AdamW<double> opt({}, p);
    CHECK_THROWS_WITH_AS(opt.step(p, g, 0.1), doctest::Contains("embed.word"), NumericError);
}

TEST_CASE("gradient accumulation matches the unaccumulated update exactly") {
    const fs::path dir = temp_dir();
    RunConfig base = tiny_run(dir, 8, 7);
    base.steps = 2;

    const PretrainResult<double> full = pretrain<double>(base);
    for (int accum : {2, 4}) {
        RunConfig split = base;
        split.accum = accum;
        const PretrainResult<double> acc = pretrain<double>(split);
        ParamRefs<double> a = collect_refs<double>(const_cast<Parameters<double>&>(full.params));
        ParamRefs<double> b = collect_refs<double>(const_cast<Parameters<double>&>(acc.params));
        REQUIRE(a.size() == b.size());
        double max_diff = 0;
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t j = 0; j < a[i].second->size(); ++j)
                max_diff = std::max(max_diff,
                                    std::abs(a[i].second->data[j] - b[i].second->data[j]));
        CHECK(max_diff <= 1e-12);
    }
    fs::remove_all(dir);
}

TEST_CASE("identical seeds give bitwise-identical loss logs") {
    const fs::path dir = temp_dir();
    RunConfig run = tiny_run(dir, 6, 13);
    run.log_out = (dir / "log_a.tsv").string();
    pretrain<float>(run);
    run.log_out = (dir / "log_b.tsv").string();
    pretrain<float>(run);
    const std::string a = slurp((dir / "log_a.tsv").string());
    const std::string b = slurp((dir / "log_b.tsv").string());
    CHECK(!a.empty());
    CHECK(a == b);

    // a different seed changes the masking stream and the log
    run.seed = 14;
    run.log_out = (dir / "log_c.tsv").string();
    pretrain<float>(run);
    CHECK(slurp((dir / "log_c.tsv").string()) != a);
    fs::remove_all(dir);
}

TEST_CASE("log lines carry the fixed column order") {
    LossBreakdown<double> lb;
    lb.mlm = 1.5;
    lb.mim = 2.5;
    lb.wpa = 0.25;
    lb.total = 4.25;
    lb.n_mlm = 3;
    lb.n_mim = 7;
    lb.n_wpa = 9;
    CHECK(format_log_line(12, lb) == "12\t1.5\t2.5\t0.25\t4.25\t3\t7\t9");
}

TEST_CASE("checkpoint round trip is bit-exact and validates") {
    const fs::path dir = temp_dir();
    const ModelConfig cfg = tiny_model();
    Parameters<float> params = Parameters<float>::init(cfg, 3);
    nlohmann::json j;
    model_config_to_json(cfg, j["model"]);
    const std::string path = (dir / "model.ckpt").string();
    ParamRefs<float> refs = collect_refs<float>(params);
    save_checkpoint(path, j, refs);

    Parameters<float> loaded = Parameters<float>::shaped(cfg);
    ParamRefs<float> lrefs = collect_refs<float>(loaded);
    const nlohmann::json back = load_checkpoint(path, lrefs);
    CHECK(model_config_from_json(back.at("model")).hidden == cfg.hidden);
    for (std::size_t i = 0; i < refs.size(); ++i)
        CHECK(refs[i].second->data == lrefs[i].second->data);

    // forward passes agree bitwise after the round trip
    const DocumentRecord doc = generate_document(1, small_style());
    const Vocabulary vocab = Vocabulary::build({doc}, cfg.text_vocab);
    const EncodedInput enc = encode_document(doc, cfg.encode_config(), vocab);
    const EncodeResult<float> a = encode(enc, nullptr, params, cfg);
    const EncodeResult<float> b = encode(enc, nullptr, loaded, cfg);
    CHECK(a.out == b.out);

    // precision and shape mismatches are rejected
    Parameters<double> dbl = Parameters<double>::shaped(cfg);
    ParamRefs<double> drefs = collect_refs<double>(dbl);
    CHECK_THROWS_AS(load_checkpoint(path, drefs), ConfigError);
    ModelConfig other = cfg;
    other.hidden = 32;
    Parameters<float> wrong = Parameters<float>::shaped(other);
    ParamRefs<float> wrefs = collect_refs<float>(wrong);
    CHECK_THROWS_AS(load_checkpoint(path, wrefs), DataError);
    CHECK_THROWS_AS(read_checkpoint_config((dir / "nothere.ckpt").string()), DataError);
    fs::remove_all(dir);
}

TEST_CASE("pretrain writes checkpoint, vocab and parseable log") {
    const fs::path dir = temp_dir();
    RunConfig run = tiny_run(dir, 6, 3);
    run.ckpt_out = (dir / "m.ckpt").string();
    run.vocab_out = (dir / "v.txt").string();
    run.log_out = (dir / "log.tsv").string();
    run.ckpt_interval = 2;
    const PretrainResult<float> res = pretrain<float>(run);
    CHECK(res.history.size() == std::size_t(run.steps));
    for (const auto& lb : res.history) {
        CHECK(std::isfinite(lb.total));
        CHECK(lb.total >= 0.0);
        CHECK(lb.n_mlm >= 0);
    }
    CHECK(fs::exists(run.ckpt_out));
    CHECK(fs::exists(run.vocab_out));

    std::ifstream log(run.log_out);
    std::string line;
    int rows = 0;
    while (std::getline(log, line)) {
        ++rows;
        long step, n1, n2, n3;
        double a, b, c, d;
        CHECK(std::sscanf(line.c_str(), "%ld\t%lf\t%lf\t%lf\t%lf\t%ld\t%ld\t%ld", &step, &a, &b, &c,
                          &d, &n1, &n2, &n3) == 8);
        CHECK(step == rows);
    }
    CHECK(rows == run.steps);
    fs::remove_all(dir);
}

TEST_CASE("all switches off: zero loss, parameters untouched") {
    const fs::path dir = temp_dir();
    RunConfig run = tiny_run(dir, 4, 6);
    run.steps = 3;
    run.objectives = {false, false, false};
    const PretrainResult<float> res = pretrain<float>(run);
    for (const auto& lb : res.history)
        CHECK(lb.total == 0.0);
    const Parameters<float> fresh = Parameters<float>::init(run.model, run.seed);
    ParamRefs<float> a = collect_refs<float>(const_cast<Parameters<float>&>(res.params));
    ParamRefs<float> b = collect_refs<float>(const_cast<Parameters<float>&>(fresh));
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a[i].second->data == b[i].second->data);
    fs::remove_all(dir);
}

TEST_CASE("objective switches change which loss terms train") {
    const fs::path dir = temp_dir();
    RunConfig run = tiny_run(dir, 4, 5);
    run.steps = 2;
    run.objectives = {true, false, false};
    const PretrainResult<float> res = pretrain<float>(run);
    for (const auto& lb : res.history) {
        CHECK(lb.mim == 0.0);
        CHECK(lb.wpa == 0.0);
        CHECK(lb.total == lb.mlm);
    }
    fs::remove_all(dir);
}

TEST_CASE("finetune trains a token head and zero steps equal the untrained head") {
    const fs::path dir = temp_dir();
    RunConfig run = tiny_run(dir, 4, 9);
    run.fresh_init = true;
    run.head.kind = TaskKind::TokenLabel;
    run.head.classes = small_style().n_token_classes();
    run.steps = 3;
    run.pred_out = (dir / "preds.jsonl").string();
    const FinetuneResult<float> res = finetune<float>(run);
    CHECK(res.history.size() == 3);
    CHECK(res.eval.metric == "entity_f1");
    CHECK(fs::exists(run.pred_out));

    RunConfig zero = run;
    zero.steps = 0;
    zero.pred_out.clear();
    const FinetuneResult<float> untrained = finetune<float>(zero);
    // with no training the head equals a fresh init with the same seed
    const TaskHead<float> fresh = TaskHead<float>::init(run.head, run.model.hidden, run.seed);
    CHECK(untrained.head.w1.data == fresh.w1.data);
    fs::remove_all(dir);
}

TEST_CASE("finetune from a pre-training checkpoint and evaluate against gold dump") {
    const fs::path dir = temp_dir();
    RunConfig pre = tiny_run(dir, 4, 11);
    pre.steps = 2;
    pre.ckpt_out = (dir / "pre.ckpt").string();
    pre.vocab_out = (dir / "v.txt").string();
    pretrain<float>(pre);

    RunConfig ft = pre;
    ft.ckpt_in = pre.ckpt_out;
    ft.ckpt_out = (dir / "ft.ckpt").string();
    ft.vocab_in = pre.vocab_out;
    ft.vocab_out.clear();
    ft.head.kind = TaskKind::DocClass;
    ft.head.classes = small_style().n_doc_classes;
    ft.head.shape = HeadShape::Mlp;
    ft.steps = 3;
    const FinetuneResult<float> res = finetune<float>(ft);
    CHECK(res.eval.metric == "accuracy");
    CHECK(fs::exists(ft.ckpt_out));

    // gold dump compared with itself scores 1.0 for every task
    const std::vector<DocumentRecord> docs = read_corpus(pre.corpus);
    const Vocabulary vocab = Vocabulary::load(pre.vocab_out);
    for (const TaskKind kind : {TaskKind::TokenLabel, TaskKind::DocClass, TaskKind::ExtractiveQA}) {
        std::vector<PredictionRecord> golds;
        for (const auto& d : docs)
            golds.push_back(
                gold_record(d, encode_document(d, pre.model.encode_config(), vocab), kind));
        const std::string gold_path = (dir / ("gold_" + to_string(kind) + ".jsonl")).string();
        write_predictions(golds, gold_path);
        CHECK(compare_prediction_files(gold_path, gold_path).value == doctest::Approx(1.0));
    }
    fs::remove_all(dir);
}

TEST_CASE("finetune runs the extractive-qa task end to end") {
    const fs::path dir = temp_dir();
    RunConfig run = tiny_run(dir, 4, 17);
    run.fresh_init = true;
    run.head.kind = TaskKind::ExtractiveQA;
    run.steps = 3;
    run.pred_out = (dir / "qa_preds.jsonl").string();
    const FinetuneResult<float> res = finetune<float>(run);
    CHECK(res.eval.metric == "anls");
    CHECK(res.eval.value >= 0.0);
    CHECK(res.eval.value <= 1.0);
    const auto preds = read_predictions(run.pred_out);
    REQUIRE(preds.size() == 4);
    for (const auto& p : preds) {
        CHECK(p.task == "extractive-qa");
        CHECK(p.span_start <= p.span_end);
        CHECK(p.span_start >= 0);
    }
    fs::remove_all(dir);
}

TEST_CASE("finetune rejects missing labels as a config error") {
    const fs::path dir = temp_dir();
    GeneratorStyle st = small_style();
    st.emit_labels = false;
    std::vector<DocumentRecord> docs{generate_document(0, st), generate_document(1, st)};
    const std::string corpus = (dir / "nolabels.jsonl").string();
    write_corpus(docs, corpus);
    RunConfig run;
    run.corpus = corpus;
    run.batch = 2;
    run.steps = 1;
    run.model = tiny_model();
    run.masking.min_block_patches = 1;
    run.fresh_init = true;
    run.head.kind = TaskKind::TokenLabel;
    run.head.classes = 7;
    CHECK_THROWS_AS(finetune<float>(run), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("run config validation") {
    RunConfig run;
    run.model = tiny_model();
    run.corpus = "x";
    run.batch = 5;
    run.accum = 2; // not a divisor
    CHECK_THROWS_AS(run.validate(), ConfigError);
    run.batch = 4;
    run.accum = 2;
    CHECK_NOTHROW(run.validate());
    run.steps = -1;
    CHECK_THROWS_AS(run.validate(), ConfigError);
}

TEST_CASE("gradcheck passes on the tiny high-precision config") {
    const GradcheckReport report = run_gradcheck(0);
    CHECK(!report.groups.empty());
    for (const auto& g : report.groups) {
        INFO(g.name, " rel=", g.max_rel_err, " analytic=", g.analytic, " numeric=", g.numeric);
        CHECK(g.max_rel_err < 1e-4);
    }
    CHECK(report.dead_param_ok);
    CHECK(report.linearity_max_abs < 1e-10);
}
