#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "docml/gradcheck.hpp"
#include "docml/heads.hpp"

using namespace docml;

namespace {

ModelConfig cfg_ = gradcheck_config();

EncodedInput fixture_enc() {
    return encode_document(gradcheck_document(), cfg_.encode_config(), gradcheck_vocabulary());
}

Tensor<double> random_ctx(int rows, int cols, std::uint64_t seed) {
    Tensor<double> t(rows, cols);
    Rng rng(seed);
    for (auto& v : t.data)
        v = rng.gauss();
    return t;
}

// exhaustive (i, j) search with the documented tie-break
QaSpan qa_bruteforce(const Tensor<double>& ctx, const EncodedInput& enc, const TaskHead<double>& head) {
    QaSpan best;
    bool first = true;
    double s[2];
    for (int i = 0; i < enc.seq_len(); ++i) {
        if (!enc.is_real_token(i))
            continue;
        head.logits(ctx.row(i), s);
        const double ss = s[0];
        for (int j = i; j < enc.seq_len(); ++j) {
            if (!enc.is_real_token(j) || j - i + 1 > head.cfg.qa_max_span)
                continue;
            head.logits(ctx.row(j), s);
            const double score = ss + s[1];
            if (first || score > best.score) {
                best = {i, j, score};
                first = false;
            }
        }
    }
    return best;
}

} // namespace

TEST_CASE("token classification yields normalized distributions on real tokens only") {
    const EncodedInput enc = fixture_enc();
    TaskHeadConfig hc;
    hc.kind = TaskKind::TokenLabel;
    hc.classes = 4;
    const TaskHead<double> head = TaskHead<double>::init(hc, cfg_.hidden, 3);
    const Tensor<double> ctx = random_ctx(cfg_.max_seq + cfg_.patch_count(), cfg_.hidden, 5);
    const auto preds = token_classify(ctx, enc, head);
    CHECK(preds.size() == 3); // three real words in the fixture
    for (const auto& [pos, dist] : preds) {
        CHECK(enc.is_real_token(pos));
        double sum = 0;
        for (double p : dist)
            sum += p;
        CHECK(std::abs(sum - 1.0) <= 1e-6);
    }
}

TEST_CASE("zero-weight heads are uniform") {
    const EncodedInput enc = fixture_enc();
    const Tensor<double> ctx = random_ctx(cfg_.max_seq + cfg_.patch_count(), cfg_.hidden, 6);

    TaskHeadConfig tc;
    tc.kind = TaskKind::TokenLabel;
    tc.classes = 4;
    const TaskHead<double> linear = TaskHead<double>::shaped(tc, cfg_.hidden);
    for (const auto& [pos, dist] : token_classify(ctx, enc, linear))
        for (double p : dist)
            CHECK(p == doctest::Approx(0.25).epsilon(1e-12));

    TaskHeadConfig dc;
    dc.kind = TaskKind::DocClass;
    dc.classes = 5;
    dc.shape = HeadShape::Mlp;
    const TaskHead<double> mlp = TaskHead<double>::shaped(dc, cfg_.hidden);
    for (double p : doc_classify(ctx, mlp))
        CHECK(p == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("doc classification is deterministic") {
    const Tensor<double> ctx = random_ctx(cfg_.max_seq + cfg_.patch_count(), cfg_.hidden, 7);
    TaskHeadConfig dc;
    dc.kind = TaskKind::DocClass;
    dc.classes = 3;
    dc.shape = HeadShape::Mlp;
    const TaskHead<double> head = TaskHead<double>::init(dc, cfg_.hidden, 8);
    CHECK(doc_classify(ctx, head) == doc_classify(ctx, head));
}

TEST_CASE("qa span decoding") {
    const EncodedInput enc = fixture_enc(); // real tokens at positions 1,2,3
    TaskHeadConfig qc;
    qc.kind = TaskKind::ExtractiveQA;
    TaskHead<double> head = TaskHead<double>::shaped(qc, cfg_.hidden);

    SUBCASE("peaked start and end decode to that span") {
        Tensor<double> ctx(cfg_.max_seq + cfg_.patch_count(), cfg_.hidden);
        // linear head reads feature 0 -> start score, feature 1 -> end score
        head.w1.at(0, 0) = 1.0;
        head.w1.at(1, 1) = 1.0;
        ctx.at(1, 0) = 5.0; // start peaked at position 1
        ctx.at(3, 1) = 5.0; // end peaked at position 3
        const auto spans = qa_spans(ctx, enc, head, 2);
        REQUIRE(!spans.empty());
        CHECK(spans[0].start == 1);
        CHECK(spans[0].end == 3);
    }
    SUBCASE("all-equal scores tie-break to the first real token singleton") {
        const Tensor<double> ctx(cfg_.max_seq + cfg_.patch_count(), cfg_.hidden);
        const auto spans = qa_spans(ctx, enc, head, 1);
        REQUIRE(spans.size() == 1);
        CHECK(spans[0].start == 1);
        CHECK(spans[0].end == 1);
    }
    SUBCASE("random scores equal the brute-force argmax") {
        TaskHead<double> rnd = TaskHead<double>::init(qc, cfg_.hidden, 11);
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            const Tensor<double> ctx =
                random_ctx(cfg_.max_seq + cfg_.patch_count(), cfg_.hidden, 100 + seed);
            const auto spans = qa_spans(ctx, enc, rnd, 1);
            const QaSpan want = qa_bruteforce(ctx, enc, rnd);
            REQUIRE(spans.size() == 1);
            CHECK(spans[0].start == want.start);
            CHECK(spans[0].end == want.end);
            CHECK(spans[0].start <= spans[0].end);
            CHECK(enc.is_real_token(spans[0].start));
            CHECK(enc.is_real_token(spans[0].end));
        }
    }
    SUBCASE("span length cap is honoured") {
        TaskHeadConfig capped = qc;
        capped.qa_max_span = 1;
        TaskHead<double> h1 = TaskHead<double>::init(capped, cfg_.hidden, 12);
        const Tensor<double> ctx = random_ctx(cfg_.max_seq + cfg_.patch_count(), cfg_.hidden, 13);
        const auto spans = qa_spans(ctx, enc, h1, 5);
        for (const auto& s : spans)
            CHECK(s.end == s.start);
    }
}

TEST_CASE("qa decoding with no real tokens is an error") {
    DocumentRecord d;
    d.id = "empty";
    d.image = RasterImage::filled(3, 32, 32, 255);
    Vocabulary v;
    v.add("x");
    const EncodedInput enc = encode_document(d, cfg_.encode_config(), v);
    TaskHeadConfig qc;
    qc.kind = TaskKind::ExtractiveQA;
    const TaskHead<double> head = TaskHead<double>::shaped(qc, cfg_.hidden);
    const Tensor<double> ctx(cfg_.max_seq + cfg_.patch_count(), cfg_.hidden);
    CHECK_THROWS_AS(qa_spans(ctx, enc, head, 1), DataError);
}

TEST_CASE("task losses match finite differences through head and context") {
    const EncodedInput enc = fixture_enc();
    const int rows = cfg_.max_seq + cfg_.patch_count();
    const std::vector<int> gold_words{2, 0, 1};

    for (const HeadShape shape : {HeadShape::Linear, HeadShape::Mlp}) {
        for (const TaskKind kind :
             {TaskKind::TokenLabel, TaskKind::DocClass, TaskKind::ExtractiveQA}) {
            TaskHeadConfig hc;
            hc.kind = kind;
            hc.classes = 3;
            hc.shape = shape;
            TaskHead<double> head = TaskHead<double>::init(hc, cfg_.hidden, 21);
            Tensor<double> ctx = random_ctx(rows, cfg_.hidden, 22);

            auto eval = [&]() -> double {
                switch (kind) {
                case TaskKind::TokenLabel:
                    return token_label_loss(ctx, enc, gold_words, head);
                case TaskKind::DocClass:
                    return doc_class_loss(ctx, 1, head);
                case TaskKind::ExtractiveQA:
                    return qa_loss(ctx, enc, 1, 2, head);
                }
                return 0;
            };

            Tensor<double> dctx(rows, cfg_.hidden);
            TaskHead<double> ghead = TaskHead<double>::shaped(hc, cfg_.hidden);
            switch (kind) {
            case TaskKind::TokenLabel:
                token_label_loss(ctx, enc, gold_words, head, nullptr, &dctx, &ghead);
                break;
            case TaskKind::DocClass:
                doc_class_loss(ctx, 1, head, &dctx, &ghead);
                break;
            case TaskKind::ExtractiveQA:
                qa_loss(ctx, enc, 1, 2, head, &dctx, &ghead);
                break;
            }

            const double h = 1e-6;
            Rng pick(mix_seed(0xfd, std::uint64_t(kind), std::uint64_t(shape)));
            // head parameters
            for (Tensor<double>* t : {&head.w1, &head.b1, &head.w2, &head.b2}) {
                if (t->empty())
                    continue;
                Tensor<double>* g = t == &head.w1   ? &ghead.w1
                                    : t == &head.b1 ? &ghead.b1
                                    : t == &head.w2 ? &ghead.w2
                                                    : &ghead.b2;
                for (int s = 0; s < 8; ++s) {
                    const std::size_t j = pick.uniform(t->size());
                    const double keep = t->data[j];
                    t->data[j] = keep + h;
                    const double lp = eval();
                    t->data[j] = keep - h;
                    const double lm = eval();
                    t->data[j] = keep;
                    const double numeric = (lp - lm) / (2 * h);
                    const double analytic = g->data[j];
                    CHECK(std::abs(analytic - numeric) <=
                          1e-5 * std::max({std::abs(analytic), std::abs(numeric), 1.0}));
                }
            }
            // context rows that carry gradient ([CLS] for doc-class)
            for (int s = 0; s < 10; ++s) {
                const int pos = kind == TaskKind::DocClass ? 0 : 1 + int(pick.uniform(3));
                const int c = int(pick.uniform(std::uint64_t(cfg_.hidden)));
                const double keep = ctx.at(pos, c);
                ctx.at(pos, c) = keep + h;
                const double lp = eval();
                ctx.at(pos, c) = keep - h;
                const double lm = eval();
                ctx.at(pos, c) = keep;
                const double numeric = (lp - lm) / (2 * h);
                const double analytic = dctx.at(pos, c);
                CHECK(std::abs(analytic - numeric) <=
                      1e-5 * std::max({std::abs(analytic), std::abs(numeric), 1.0}));
            }
        }
    }
}

TEST_CASE("head config validation") {
    TaskHeadConfig hc;
    hc.classes = 1;
    CHECK_THROWS_AS(hc.validate(), ConfigError);
    hc.kind = TaskKind::ExtractiveQA;
    CHECK_NOTHROW(hc.validate()); // class count ignored for QA
    hc.qa_max_span = 0;
    CHECK_THROWS_AS(hc.validate(), ConfigError);
    CHECK_THROWS_AS(task_kind_of("nope"), ConfigError);
}
