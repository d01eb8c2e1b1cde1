#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gradleak/archive.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak {

struct ViTConfig {
    int64_t image_size = 16; // H = W
    int64_t channels = 1;
    int64_t patch_size = 4;
    int64_t embed_dim = 32;
    int64_t depth = 3;
    int64_t heads = 4;
    int64_t mlp_ratio = 4;
    int64_t num_classes = 8;

    void validate() const;
    int64_t grid() const { return image_size / patch_size; }
    int64_t tokens() const { return grid() * grid() + 1; } // + class token
    int64_t patch_len() const { return patch_size * patch_size * channels; }
    uint64_t hash() const;
};

struct ViTParams {
    ViTConfig config;
    Tensor patch_embed_w; // [P*P*C, D]
    Tensor patch_embed_b; // [D]
    Tensor cls_token;     // [D]
    Tensor pos_embed;     // [T, D]
    struct Layer {
        Tensor ln1_gamma, ln1_beta;
        Tensor q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
        Tensor ln2_gamma, ln2_beta;
        Tensor fc1_w, fc1_b, fc2_w, fc2_b;
    };
    std::vector<Layer> layers;
    Tensor final_ln_gamma, final_ln_beta;
    Tensor head_w; // [D, K]
    Tensor head_b; // [K]
};

// Visits parameters in the fixed enumeration order that defines the
// gradient-capture layout and the checkpoint entry order.
void for_each_param(ViTParams& p, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_param(const ViTParams& p,
                    const std::function<void(const std::string&, const Tensor&)>& fn);
std::vector<std::string> param_names(const ViTConfig& cfg);

// Truncated normal (std 0.02) weights; zero biases, class token, positional
// embedding.
ViTParams init_vit(const ViTConfig& cfg, uint64_t seed);

// Forward intermediates needed to express the loss gradient as tape ops.
struct VitTrace {
    Tensor patches; // [N, T-1, P*P*C]
    Tensor h0;      // [N, T, D]
    struct Layer {
        Tensor h_in, n1, a1;
        Tensor qh, kh, vh;  // [N, heads, T, dh]
        Tensor attn_p;      // [N, heads, T, T]
        Tensor o2;          // [N, T, D]
        Tensor h_mid, n2, a2, m1, act, h_out;
    };
    std::vector<Layer> layers;
    Tensor nf, af; // final LN out, its affine
    Tensor hcls;   // [N, D]
    Tensor logits; // [N, K]
};

Tensor vit_forward(const ViTParams& params, const Tensor& x, VitTrace* trace = nullptr);

struct GradientCapture {
    uint64_t config_hash = 0;
    int64_t batch_size = 0;
    double defense_sigma = 0.0;
    std::string defense_target = "none";
    std::vector<std::string> names; // fixed enumeration order
    std::vector<Tensor> grads;

    const Tensor& grad(const std::string& name) const;
    int64_t index_of(const std::string& name) const;
};

// dL/dW of cross-entropy at (x, y) via the reverse pass, one tensor per
// parameter in enumeration order.
GradientCapture capture_gradients(const ViTParams& params, const Tensor& x,
                                  const std::vector<int64_t>& y);

// Same gradients built as tape expressions of x: the backward chain of the
// network written out in primitives, so a single backward() through the
// result reaches d/dx. This is what lets the attack differentiate the
// gradient-matching loss without second-order support.
std::vector<Tensor> vit_param_grads(const ViTParams& params, const Tensor& x,
                                    const std::vector<int64_t>& y);

// Plain classification training of the victim on toy images. A briefly
// trained victim has a nonzero positional embedding, which is what pins the
// patch arrangement during inversion.
ViTParams train_vit(const std::vector<Tensor>& images, const std::vector<int64_t>& labels,
                    const ViTConfig& cfg, int64_t epochs, uint64_t seed,
                    std::vector<double>* epoch_losses = nullptr);

// Model checkpoint I/O: GVT1 archive with reserved name prefixes plus a JSON
// config sidecar at <path>.json.
void save_vit(const ViTParams& params, const std::filesystem::path& path);
ViTParams load_vit(const std::filesystem::path& path);

} // namespace gradleak
