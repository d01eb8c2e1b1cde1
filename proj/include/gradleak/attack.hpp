#pragma once

#include <string>
#include <vector>

#include "gradleak/ablation.hpp"
#include "gradleak/models.hpp"
#include "gradleak/prior.hpp"

namespace gradleak {

struct AttackConfig {
    int64_t iterations = 3000; // T; even, >= 2
    double lr = 0.1;           // Adam initial rate, cosine-decayed to 0
    double alpha_grad = 4e-3;
    double alpha_image = 2e-1;
    double alpha_patch = 1e-4; // alpha_1
    double alpha_reg = 1e-2;   // alpha_2
    double alpha_tv_l2 = 1e-4; // alpha_3
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    std::vector<uint64_t> seeds = {1};
    struct Toggles {
        bool grad = true;
        bool image_prior = true;
        bool patch = true;
        bool reg = true;
        bool tv_l2 = true;
    } losses;
    bool use_scheduler = true;  // off: constant alpha_grad / alpha_image weights
    int64_t consensus_every = 0; // 0 selects T/10
    MaskSpec mask;

    void validate() const;
    int64_t consensus_cadence() const;
};

struct ScheduleState {
    int64_t t = 1;       // 1-based iteration
    int64_t horizon = 2; // T
};

struct Schedule {
    double gamma;   // gradient-loss weight
    double upsilon; // image-prior weight
};

// Piecewise-constant weights: gamma = alpha_grad through T/2 then halves;
// upsilon = 0 through T/2 then alpha_image.
Schedule scheduler(const ScheduleState& state, const AttackConfig& cfg);

// Labels from the negative traces of the classification-head gradient:
// argsort of per-class column minima, first N. Rejects N > K (duplicate
// labels are unreachable) and degenerate captures with no ordering signal.
std::vector<int64_t> restore_labels(const GradientCapture& capture);

// Sum over unmasked entries of || grad_sim(x,y) - captured ||_2, per-layer
// norms summed. Differentiable w.r.t. x through the expression-built
// gradients.
Tensor gradient_matching_loss(const Tensor& x, const std::vector<int64_t>& y,
                              const ViTParams& params, const GradientCapture& capture,
                              const std::vector<std::string>& mask_entries);

// Sum_l ||mu_l(x)-mu_BN||_2 + sum_l ||var_l(x)-var_BN||_2.
Tensor image_prior_loss(const Tensor& x, const PriorCNN& prior);

// Eq. 8 seams: adjacent-row and adjacent-column differences at patch joints.
Tensor patch_prior_loss(const Tensor& x, int64_t patch);

struct SeedEnsemble {
    std::vector<Tensor> members; // x_hat per seed, identical shapes
};

// Pixel-mean consensus (identity flow); returned tensor is a constant with
// no gradient path into the members.
Tensor consensus(const SeedEnsemble& ensemble);

// alpha_1*R_patch + alpha_2*||x - x_C||_2 + alpha_3*(||x||_2 + R_TV), with
// per-term toggles from cfg.
Tensor auxiliary_loss(const Tensor& x, const Tensor& x_consensus, const AttackConfig& cfg,
                      int64_t patch);

// sigma-scaled Gaussian noise on the selected entries; "msa_only" hits the
// q/k/v/out projections, "last_third" every parameter of the deepest third.
GradientCapture apply_defense(const GradientCapture& capture, double sigma,
                              const std::string& target, uint64_t noise_seed);

struct IterationRecord {
    int64_t t = 0;
    double l_grad = 0, r_image = 0, r_patch = 0, r_reg = 0, r_tv_l2 = 0;
    double total = 0, lr = 0;
};

struct ReconstructionResult {
    uint64_t seed = 0;
    Tensor recon; // unclamped; clamp on export only
    std::vector<int64_t> labels;
    std::vector<IterationRecord> ledger;
    double wall_seconds = 0;
    bool image_prior_degenerate = false; // N < 2 with the prior active
};

struct AttackOutput {
    std::vector<ReconstructionResult> per_seed;
    Tensor consensus_recon;
    std::vector<int64_t> labels;
    double wall_seconds = 0;
    bool aborted = false;      // numeric divergence; ledgers preserved
    std::string abort_reason;
};

// The full optimization loop: restore labels, per-seed Adam on the input
// under the scheduled objective, consensus refresh every R iterations.
// Seeds may run on parallel workers (GRADLEAK_THREADS caps the count);
// results are identical either way.
AttackOutput run_attack(const GradientCapture& capture, const ViTParams& params,
                        const PriorCNN* prior, const AttackConfig& cfg);

int worker_cap(); // GRADLEAK_THREADS, default 1

} // namespace gradleak
