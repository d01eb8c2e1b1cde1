#pragma once

#include <string>
#include <vector>

#include "gradleak/models.hpp"

namespace gradleak {

// Which parameter entries participate in the gradient-matching sum.
struct MaskSpec {
    enum class Mode { all, drop_layers, keep_component, keep_full };
    Mode mode = Mode::all;
    // drop_layers: 1-based inclusive transformer-layer range; from > to is empty
    int64_t drop_from = 1, drop_to = 0;
    std::string component; // "msa" | "mlp" for keep_component

    std::string describe() const;
};

// Deterministic resolution to a subset of the parameter enumeration.
// keep_component keeps only the q/k/v/out (or fc1/fc2) projections of every
// layer; embeddings, norms, and the head are excluded under the strict
// "w/ MSA, w/o others" reading.
std::vector<std::string> resolve_mask(const MaskSpec& spec, const ViTConfig& cfg);

// Depth-proportional thirds: [0,L/3), [L/3,2L/3), [2L/3,L). Returns 0-based
// half-open layer range for which in {0,1,2}.
std::pair<int64_t, int64_t> layer_third(int64_t depth, int which);

MaskSpec mask_all();
MaskSpec mask_drop_layers(int64_t from_1based, int64_t to_1based);
MaskSpec mask_keep_component(const std::string& component);

} // namespace gradleak
