#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gradleak/attack.hpp"
#include "gradleak/dataset.hpp"
#include "gradleak/metrics.hpp"

namespace gradleak {

struct SweepCell {
    std::string axis, variant;
    int64_t trial = 0;
    uint64_t seed = 0;
    double psnr = 0, fft2d = 0, feature_dist = 0, iip_ratio = 0, wall_s = 0;
    bool failed = false;
    std::string error;
};

struct VariantAggregate {
    std::string variant;
    int64_t trials = 0;
    double psnr_mean = 0, psnr_std = 0;
    double fft2d_mean = 0, feature_mean = 0, iip_mean = 0;
};

struct SweepResult {
    std::string axis;
    std::vector<std::string> variants; // fixed order
    std::vector<SweepCell> cells;
    std::vector<VariantAggregate> aggregates;

    const VariantAggregate& aggregate(const std::string& variant) const;
};

struct SweepSetup {
    const ToyDataset* data = nullptr;
    const ViTParams* victim = nullptr;
    const PriorCNN* prior = nullptr;
    AttackConfig base;              // per-variant configs derive from this
    int64_t batch_size = 4;         // fixed-N axes
    std::vector<int64_t> batch_sizes = {1, 2, 4, 8};
    std::vector<double> sigmas = {0.0, 1e-3, 1e-2, 1e-1};
    std::string defense_target = "all";
    uint64_t base_seed = 1;
    int64_t gallery_size = 64;
};

// Axes: layer_thirds | components | loss_terms | batch_size | defense_sigma.
// One attack per (variant, trial); a trial shares its batch and optimization
// seed across variants so only the variant's knob differs. Failed cells are
// recorded and the sweep continues.
SweepResult run_sweep(const SweepSetup& setup, const std::string& axis, int64_t trials);

void write_sweep_csv(const SweepResult& r, const std::filesystem::path& path);
void write_sweep_json(const SweepResult& r, const std::filesystem::path& path);

} // namespace gradleak
