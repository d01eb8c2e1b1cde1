#include "gradleak/ablation.hpp"

#include <algorithm>

namespace gradleak {

std::string MaskSpec::describe() const {
    switch (mode) {
        case Mode::all: return "all";
        case Mode::keep_full: return "keep_full";
        case Mode::drop_layers:
            if (drop_from > drop_to) return "drop_layers()";
            return "drop_layers(" + std::to_string(drop_from) + ".." + std::to_string(drop_to) +
                   ")";
        case Mode::keep_component: return "keep_component(" + component + ")";
    }
    return "?";
}

MaskSpec mask_all() { return MaskSpec{}; }

MaskSpec mask_drop_layers(int64_t from_1based, int64_t to_1based) {
    MaskSpec m;
    m.mode = MaskSpec::Mode::drop_layers;
    m.drop_from = from_1based;
    m.drop_to = to_1based;
    return m;
}

MaskSpec mask_keep_component(const std::string& component) {
    MaskSpec m;
    m.mode = MaskSpec::Mode::keep_component;
    m.component = component;
    return m;
}

std::vector<std::string> resolve_mask(const MaskSpec& spec, const ViTConfig& cfg) {
    const std::vector<std::string> names = param_names(cfg);
    std::vector<std::string> out;
    switch (spec.mode) {
        case MaskSpec::Mode::all:
        case MaskSpec::Mode::keep_full: out = names; break;
        case MaskSpec::Mode::drop_layers: {
            if (spec.drop_from > spec.drop_to) {
                out = names; // empty range drops nothing
                break;
            }
            require(spec.drop_from >= 1 && spec.drop_to <= cfg.depth,
                    "resolve_mask: drop_layers range outside 1.." + std::to_string(cfg.depth));
            for (const auto& n : names) {
                bool dropped = false;
                for (int64_t l = spec.drop_from; l <= spec.drop_to; ++l) {
                    const std::string pre = "layer" + std::to_string(l - 1) + "/";
                    if (n.rfind(pre, 0) == 0) {
                        dropped = true;
                        break;
                    }
                }
                if (!dropped) out.push_back(n);
            }
            break;
        }
        case MaskSpec::Mode::keep_component: {
            require(spec.component == "msa" || spec.component == "mlp",
                    "resolve_mask: component must be 'msa' or 'mlp'");
            const std::string needle = "/" + spec.component + "/";
            for (const auto& n : names)
                if (n.find(needle) != std::string::npos) out.push_back(n);
            break;
        }
    }
    require(!out.empty(), "resolve_mask: resolved entry set is empty");
    return out;
}

std::pair<int64_t, int64_t> layer_third(int64_t depth, int which) {
    require(depth >= 1, "layer_third: depth must be >= 1");
    require(which >= 0 && which <= 2, "layer_third: which must be 0, 1, or 2");
    const int64_t b0 = depth / 3;
    const int64_t b1 = 2 * depth / 3;
    if (which == 0) return {0, b0};
    if (which == 1) return {b0, b1};
    return {b1, depth};
}

} // namespace gradleak
