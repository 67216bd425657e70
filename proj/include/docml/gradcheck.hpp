#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "docml/docmodel.hpp"
#include "docml/masking.hpp"
#include "docml/model.hpp"

namespace docml {

struct GradcheckGroup {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0, numeric = 0.0; // at the worst entry
};

struct GradcheckReport {
    std::vector<GradcheckGroup> groups;
    double max_rel_err = 0.0;
    bool dead_param_ok = false;      // perturbing an unused vocab row leaves the loss bit-identical
    double linearity_max_abs = 0.0;  // all-on gradient vs sum of per-objective gradients
    double fd_step = 1e-4;
};

// Tiny high-precision configuration for the finite-difference check.
inline ModelConfig gradcheck_config() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.hidden = 8;
    cfg.ffn_inner = 16;
    cfg.max_seq = 6;
    cfg.image_h = 32;
    cfg.image_w = 32;
    cfg.patch = 16; // 2x2 patch grid
    cfg.text_vocab = 11;
    cfg.image_vocab = 8;
    return cfg;
}

// Deterministic fixture shared by the gradcheck and its tests.
DocumentRecord gradcheck_document();
Vocabulary gradcheck_vocabulary();
MaskingConfig gradcheck_masking();

// Compares analytic d(total_loss)/d(theta) against central finite
// differences for every parameter tensor, in double precision.
GradcheckReport run_gradcheck(std::uint64_t seed, std::ostream* log = nullptr);

} // namespace docml
