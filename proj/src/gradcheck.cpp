#include "docml/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>

#include "docml/checkpoint.hpp"
#include "docml/objectives.hpp"

namespace docml {

DocumentRecord gradcheck_document() {
    DocumentRecord d;
    d.id = "gradcheck-0";
    d.image = RasterImage::filled(3, 64, 64, 0);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                d.image.at(c, y, x) = std::uint8_t((x * 7 + y * 13 + c * 29) % 256);
    d.words = {"alpha", "beta", "gamma"};
    d.boxes = {{8, 8, 28, 20}, {32, 8, 56, 20}, {8, 28, 40, 44}};
    d.segment_ids = {0, 0, 1};
    return d;
}

Vocabulary gradcheck_vocabulary() {
    Vocabulary v;
    for (const char* t : {"alpha", "beta", "gamma", "f0", "f1", "f2"})
        v.add(t);
    return v; // 5 reserved + 6 regular = 11
}

MaskingConfig gradcheck_masking() {
    MaskingConfig mc;
    mc.text_ratio = 0.34; // 1 of 3 real tokens
    mc.image_ratio = 0.5; // 2 of 4 patches
    mc.min_block_patches = 1;
    return mc;
}

namespace {

// first plan (scanning derived seeds) that masks some but not all of both
// modalities, so every head contributes
MaskingPlan pick_plan(const EncodedInput& enc, const MaskingConfig& mc, const ModelConfig& cfg,
                      std::uint64_t seed) {
    int n_real = 0;
    for (int pos = 0; pos < enc.seq_len(); ++pos)
        if (enc.is_real_token(pos))
            ++n_real;
    for (std::uint64_t trial = 0;; ++trial) {
        Rng rng(mix_seed(seed, trial, 0x97adc));
        MaskingPlan plan = build_plan(enc, mc, cfg.text_vocab, cfg.image_vocab, rng);
        const int m = enc.patch_count();
        if (!plan.masked_text.empty() && int(plan.masked_text.size()) < n_real &&
            !plan.masked_patches.empty() && int(plan.masked_patches.size()) < m)
            return plan;
        if (trial > 1000)
            throw NumericError("gradcheck: could not find a usable masking plan");
    }
}

} // namespace

GradcheckReport run_gradcheck(std::uint64_t seed, std::ostream* log) {
    const ModelConfig cfg = gradcheck_config();
    const DocumentRecord doc = gradcheck_document();
    const Vocabulary vocab = gradcheck_vocabulary();
    const EncodedInput enc = encode_document(doc, cfg.encode_config(), vocab);
    const MaskingConfig mc = gradcheck_masking();
    const MaskingPlan plan = pick_plan(enc, mc, cfg, seed);
    const BiasIndex bias = build_bias_index(enc, cfg);

    Parameters<double> params = Parameters<double>::init(cfg, seed, 0.05);
    const ObjectiveSwitches all_on;

    auto eval = [&] { return double(total_loss<double>(enc, plan, params, cfg, all_on, nullptr, &bias).total); };

    GradcheckReport report;
    const double h = report.fd_step;

    Parameters<double> grads = Parameters<double>::shaped(cfg);
    const double base = double(total_loss(enc, plan, params, cfg, all_on, &grads, &bias).total);
    (void)base;

    ParamRefs<double> prefs = collect_refs<double>(params);
    ParamRefs<double> grefs = collect_refs<double>(grads);
    for (std::size_t gi = 0; gi < prefs.size(); ++gi) {
        Tensor<double>& t = *prefs[gi].second;
        const Tensor<double>& g = *grefs[gi].second;
        GradcheckGroup group;
        group.name = prefs[gi].first;
        for (std::size_t j = 0; j < t.size(); ++j) {
            const double keep = t.data[j];
            t.data[j] = keep + h;
            const double lp = eval();
            t.data[j] = keep - h;
            const double lm = eval();
            t.data[j] = keep;
            const double numeric = (lp - lm) / (2.0 * h);
            const double analytic = g.data[j];
            const double rel =
                std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            if (rel > group.max_rel_err) {
                group.max_rel_err = rel;
                group.worst_index = j;
                group.analytic = analytic;
                group.numeric = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, group.max_rel_err);
        if (log)
            *log << "gradcheck " << group.name << " max_rel_err=" << group.max_rel_err << "\n";
        report.groups.push_back(std::move(group));
    }

    // dead-parameter check: an input-embedding row of an id absent from the
    // corrupted sequence cannot influence the loss
    {
        EncodeResult<double> t = encode(enc, &plan, params, cfg, &bias);
        std::set<int> used(t.corrupted_ids.begin(), t.corrupted_ids.end());
        int unused = -1;
        for (int id = cfg.text_vocab - 1; id >= 0; --id)
            if (!used.count(id)) {
                unused = id;
                break;
            }
        const double before = eval();
        params.word_emb.at(unused, 3) += 0.5;
        const double after = eval();
        params.word_emb.at(unused, 3) -= 0.5;
        report.dead_param_ok = (before == after);
    }

    // gradient linearity: all objectives on == sum of single-objective runs
    {
        Parameters<double> g_all = Parameters<double>::shaped(cfg);
        total_loss(enc, plan, params, cfg, all_on, &g_all, &bias);
        Parameters<double> g_sum = Parameters<double>::shaped(cfg);
        for (const ObjectiveSwitches sw :
             {ObjectiveSwitches{true, false, false}, ObjectiveSwitches{false, true, false},
              ObjectiveSwitches{false, false, true}}) {
            Parameters<double> g = Parameters<double>::shaped(cfg);
            total_loss(enc, plan, params, cfg, sw, &g, &bias);
            ParamRefs<double> a = collect_refs<double>(g_sum), b = collect_refs<double>(g);
            for (std::size_t i = 0; i < a.size(); ++i)
                add_inplace(*a[i].second, *b[i].second);
        }
        ParamRefs<double> a = collect_refs<double>(g_all), b = collect_refs<double>(g_sum);
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t j = 0; j < a[i].second->size(); ++j)
                report.linearity_max_abs = std::max(
                    report.linearity_max_abs, std::abs(a[i].second->data[j] - b[i].second->data[j]));
    }
    return report;
}

} // namespace docml
