#pragma once

#include <filesystem>
#include <vector>

#include "gradleak/tensor.hpp"

namespace gradleak {

inline constexpr double kBatchNormEps = 1e-5;

struct PriorConfig {
    int64_t image_size = 16;
    int64_t channels = 1;
    int64_t num_classes = 8;
    int64_t kernel = 3;
    std::vector<int64_t> widths = {8, 16, 16}; // conv channels per block

    void validate() const;
    uint64_t hash() const;
};

// Per-BN-layer running statistics in forward order.
struct PriorStats {
    std::vector<Tensor> mean; // [C_l]
    std::vector<Tensor> var;  // [C_l], elementwise >= 0
};

// [conv -> BN -> relu] x M, global average pool, linear head. The stored
// running statistics are the image prior's matching target.
struct PriorCNN {
    PriorConfig config;
    std::vector<Tensor> conv_w; // [k,k,Cin,Cout], no conv bias (BN absorbs it)
    std::vector<Tensor> bn_gamma, bn_beta;
    Tensor head_w, head_b;
    PriorStats stats;
    bool stats_frozen = false;
};

PriorCNN init_prior(const PriorConfig& cfg, uint64_t seed);

struct PriorBatchStats {
    std::vector<Tensor> mean, var; // differentiable w.r.t. the input batch
};

// Training-statistics forward: every BN normalizes with its input's batch
// statistics. Optionally updates running stats (EMA, momentum 0.1).
Tensor prior_forward_train(PriorCNN& prior, const Tensor& x, PriorBatchStats* stats,
                           bool update_running);

// Batch statistics per BN layer for the image prior loss; requires frozen
// stats and resizes the input to the prior's native size when needed.
PriorBatchStats prior_forward_stats(const PriorCNN& prior, const Tensor& x);

// Eval-mode penultimate embedding (GAP output) using running statistics;
// pure per-sample function used by the metrics.
Tensor prior_features(const PriorCNN& prior, const Tensor& x);
Tensor prior_logits_eval(const PriorCNN& prior, const Tensor& x);

// Plain classification pretraining on toy images; freezes stats afterwards.
// epoch_losses, when given, receives the mean training loss per epoch.
PriorCNN pretrain_prior(const std::vector<Tensor>& images, const std::vector<int64_t>& labels,
                        const PriorConfig& cfg, int64_t epochs, uint64_t seed,
                        std::vector<double>* epoch_losses = nullptr);

void save_prior(const PriorCNN& prior, const std::filesystem::path& path);
PriorCNN load_prior(const std::filesystem::path& path);

} // namespace gradleak
