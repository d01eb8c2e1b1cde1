#include "gradleak/attack.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <thread>

#include "gradleak/ops.hpp"
#include "gradleak/optim.hpp"
#include "gradleak/rng.hpp"

namespace gradleak {

void AttackConfig::validate() const {
    require(iterations >= 2 && iterations % 2 == 0,
            "attack config: iterations must be even and >= 2 (schedule midpoint)");
    require(!seeds.empty(), "attack config: at least one seed");
    require(lr > 0.0, "attack config: lr must be positive");
    require(alpha_grad >= 0 && alpha_image >= 0 && alpha_patch >= 0 && alpha_reg >= 0 &&
                alpha_tv_l2 >= 0,
            "attack config: loss coefficients must be nonnegative");
    require(consensus_every >= 0, "attack config: consensus_every must be nonnegative");
}

int64_t AttackConfig::consensus_cadence() const {
    if (consensus_every > 0) return consensus_every;
    return std::max<int64_t>(1, iterations / 10);
}

Schedule scheduler(const ScheduleState& state, const AttackConfig& cfg) {
    require(state.t >= 1 && state.t <= state.horizon, "scheduler: t outside 1..T");
    const bool first_half = state.t <= state.horizon / 2;
    return Schedule{first_half ? cfg.alpha_grad : 0.5 * cfg.alpha_grad,
                    first_half ? 0.0 : cfg.alpha_image};
}

std::vector<int64_t> restore_labels(const GradientCapture& capture) {
    const Tensor& hw = capture.grad("head/weight"); // [D, K]
    require(hw.rank() == 2, "restore_labels: head gradient must be [D,K]");
    const int64_t d = hw.dim(0), k = hw.dim(1);
    const int64_t n = capture.batch_size;
    require(n >= 1, "restore_labels: empty batch");
    require(n <= k, "restore_labels: batch size " + std::to_string(n) + " exceeds " +
                        std::to_string(k) +
                        " classes; the column-minimum rule cannot emit duplicate labels");
    std::vector<double> col_min(static_cast<size_t>(k));
    for (int64_t j = 0; j < k; ++j) {
        double m = hw.values()[static_cast<size_t>(j)];
        for (int64_t i = 1; i < d; ++i)
            m = std::min(m, hw.values()[static_cast<size_t>(i * k + j)]);
        col_min[static_cast<size_t>(j)] = m;
    }
    const auto [lo, hi] = std::minmax_element(col_min.begin(), col_min.end());
    require(*lo != *hi,
            "restore_labels: degenerate capture, the head gradient carries no class ordering");
    auto order = argsort(Tensor::from_data({k}, col_min));
    return std::vector<int64_t>(order.begin(), order.begin() + n);
}

Tensor gradient_matching_loss(const Tensor& x, const std::vector<int64_t>& y,
                              const ViTParams& params, const GradientCapture& capture,
                              const std::vector<std::string>& mask_entries) {
    require(capture.config_hash == params.config.hash(),
            "gradient_matching_loss: capture/model config hash mismatch");
    if (mask_entries.empty()) return Tensor::scalar(0.0);
    std::vector<Tensor> sim = vit_param_grads(params, x, y);
    Tensor total = Tensor::scalar(0.0);
    for (const std::string& name : mask_entries) {
        const auto idx = static_cast<size_t>(capture.index_of(name));
        require(sim[idx].shape() == capture.grads[idx].shape(),
                "gradient_matching_loss: shape mismatch for '" + name + "'");
        total = add(total, l2_norm(sub(sim[idx], capture.grads[idx])));
    }
    return total;
}

Tensor image_prior_loss(const Tensor& x, const PriorCNN& prior) {
    PriorBatchStats st = prior_forward_stats(prior, x);
    Tensor total = Tensor::scalar(0.0);
    for (size_t l = 0; l < st.mean.size(); ++l) {
        total = add(total, l2_norm(sub(st.mean[l], prior.stats.mean[l])));
        total = add(total, l2_norm(sub(st.var[l], prior.stats.var[l])));
    }
    return total;
}

Tensor patch_prior_loss(const Tensor& x, int64_t patch) {
    require(x.rank() == 4, "patch_prior_loss: input must be NHWC");
    const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    require(patch > 0 && h % patch == 0 && w % patch == 0,
            "patch_prior_loss: patch must divide height and width");
    Tensor total = Tensor::scalar(0.0);
    for (int64_t k = 1; k <= h / patch - 1; ++k) {
        Tensor row_hi = slice(x, {0, patch * k, 0, 0}, {n, patch * k + 1, w, c});
        Tensor row_lo = slice(x, {0, patch * k - 1, 0, 0}, {n, patch * k, w, c});
        total = add(total, l2_norm(sub(row_hi, row_lo)));
    }
    for (int64_t k = 1; k <= w / patch - 1; ++k) {
        Tensor col_hi = slice(x, {0, 0, patch * k, 0}, {n, h, patch * k + 1, c});
        Tensor col_lo = slice(x, {0, 0, patch * k - 1, 0}, {n, h, patch * k, c});
        total = add(total, l2_norm(sub(col_hi, col_lo)));
    }
    return total;
}

Tensor consensus(const SeedEnsemble& ensemble) {
    require(!ensemble.members.empty(), "consensus: no members");
    const Shape shape = ensemble.members.front().shape();
    for (const Tensor& m : ensemble.members)
        require(m.shape() == shape, "consensus: member shape mismatch");
    Tensor out = Tensor::zeros(shape);
    auto acc = out.values_mut();
    const double inv = 1.0 / static_cast<double>(ensemble.members.size());
    for (const Tensor& m : ensemble.members)
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += m.values()[i] * inv;
    return out; // constant: requires_grad stays false
}

Tensor auxiliary_loss(const Tensor& x, const Tensor& x_consensus, const AttackConfig& cfg,
                      int64_t patch) {
    Tensor total = Tensor::scalar(0.0);
    if (cfg.losses.patch && cfg.alpha_patch > 0)
        total = add(total, mul(patch_prior_loss(x, patch), cfg.alpha_patch));
    if (cfg.losses.reg && cfg.alpha_reg > 0 && x_consensus.defined())
        total = add(total, mul(l2_norm(sub(x, x_consensus.detach())), cfg.alpha_reg));
    if (cfg.losses.tv_l2 && cfg.alpha_tv_l2 > 0) {
        const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
        Tensor dv = sub(slice(x, {0, 1, 0, 0}, {n, h, w, c}), slice(x, {0, 0, 0, 0}, {n, h - 1, w, c}));
        Tensor dh = sub(slice(x, {0, 0, 1, 0}, {n, h, w, c}), slice(x, {0, 0, 0, 0}, {n, h, w - 1, c}));
        Tensor tv = add(l2_norm(dh), l2_norm(dv));
        total = add(total, mul(add(l2_norm(x), tv), cfg.alpha_tv_l2));
    }
    return total;
}

GradientCapture apply_defense(const GradientCapture& capture, double sigma,
                              const std::string& target, uint64_t noise_seed) {
    require(sigma >= 0.0, "apply_defense: sigma must be nonnegative");
    require(target == "all" || target == "msa_only" || target == "last_third",
            "apply_defense: unknown target '" + target + "'");
    GradientCapture out = capture;
    out.defense_sigma = sigma;
    out.defense_target = target;
    if (sigma == 0.0) return out;

    int64_t depth = 0;
    for (const auto& n : capture.names) {
        if (n.rfind("layer", 0) == 0) {
            const size_t slash = n.find('/');
            depth = std::max<int64_t>(depth, std::stoll(n.substr(5, slash - 5)) + 1);
        }
    }
    auto selected = [&](const std::string& name) {
        if (target == "all") return true;
        if (target == "msa_only") return name.find("/msa/") != std::string::npos;
        // last_third: every parameter of the deepest depth-proportional third
        if (name.rfind("layer", 0) != 0) return false;
        const auto [lo, hi] = layer_third(depth, 2);
        const int64_t l = std::stoll(name.substr(5, name.find('/') - 5));
        return l >= lo && l < hi;
    };
    Rng rng(Rng::mix(noise_seed, 0x444546454e5345ULL)); // "DEFENSE"
    for (size_t i = 0; i < out.grads.size(); ++i) {
        if (!selected(out.names[i])) continue;
        Tensor noisy = out.grads[i].detach();
        for (double& v : noisy.values_mut()) v += rng.normal(0.0, sigma);
        out.grads[i] = noisy;
    }
    return out;
}

int worker_cap() {
    const char* env = std::getenv("GRADLEAK_THREADS");
    if (!env) return 1;
    const int v = std::atoi(env);
    return v >= 1 ? v : 1;
}

namespace {

struct SeedState {
    uint64_t seed = 0;
    Tensor x;
    AdamState adam;
    std::vector<IterationRecord> ledger;
};

} // namespace

AttackOutput run_attack(const GradientCapture& capture, const ViTParams& params,
                        const PriorCNN* prior, const AttackConfig& cfg) {
    const auto t_start = std::chrono::steady_clock::now();
    cfg.validate();
    const ViTConfig& vc = params.config;
    require(capture.config_hash == vc.hash(), "run_attack: capture/model config hash mismatch");
    if (cfg.losses.image_prior)
        require(prior != nullptr && prior->stats_frozen,
                "run_attack: image prior enabled but no frozen prior supplied");

    const int64_t n = capture.batch_size;
    const int64_t hw = vc.image_size;
    const int64_t T = cfg.iterations;
    const int64_t cadence = cfg.consensus_cadence();
    const std::vector<int64_t> labels = restore_labels(capture);
    const std::vector<std::string> mask_entries =
        cfg.losses.grad ? resolve_mask(cfg.mask, vc) : std::vector<std::string>{};
    const bool single_seed = cfg.seeds.size() == 1;
    const bool prior_degenerate = cfg.losses.image_prior && n < 2;

    std::vector<SeedState> states(cfg.seeds.size());
    for (size_t s = 0; s < cfg.seeds.size(); ++s) {
        states[s].seed = cfg.seeds[s];
        states[s].adam = AdamState(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Tensor x = Tensor::zeros({n, hw, hw, vc.channels});
        Rng rng(Rng::mix(cfg.seeds[s], 0x58494e4954ULL)); // "XINIT"
        for (double& v : x.values_mut()) v = rng.uniform();
        states[s].x = x;
        states[s].ledger.reserve(static_cast<size_t>(T));
    }

    Tensor x_consensus; // refreshed at window starts
    std::atomic<bool> aborted{false};
    std::mutex abort_mu;
    std::string abort_reason;

    auto iterate = [&](SeedState& st, int64_t t) {
        Tensor& x = st.x;
        x.set_requires_grad(true);
        x.zero_grad();
        IterationRecord rec;
        rec.t = t;
        rec.lr = cosine_lr(cfg.lr, t, T);
        std::vector<double> grad;
        try {
            Tape tape;
            {
                Tape::Scope scope(tape);
                const Schedule sched = cfg.use_scheduler
                                           ? scheduler({t, T}, cfg)
                                           : Schedule{cfg.alpha_grad, cfg.alpha_image};
                Tensor total = Tensor::scalar(0.0);
                if (cfg.losses.grad) {
                    Tensor lg = gradient_matching_loss(x, labels, params, capture, mask_entries);
                    rec.l_grad = lg.item();
                    total = add(total, mul(lg, sched.gamma));
                }
                if (cfg.losses.image_prior && sched.upsilon > 0.0) {
                    Tensor ri = image_prior_loss(x, *prior);
                    rec.r_image = ri.item();
                    total = add(total, mul(ri, sched.upsilon));
                }
                if (cfg.losses.patch) {
                    Tensor rp = patch_prior_loss(x, vc.patch_size);
                    rec.r_patch = rp.item();
                    total = add(total, mul(rp, cfg.alpha_patch));
                }
                if (cfg.losses.reg && !single_seed) {
                    Tensor rr = l2_norm(sub(x, x_consensus));
                    rec.r_reg = rr.item();
                    total = add(total, mul(rr, cfg.alpha_reg));
                }
                if (cfg.losses.tv_l2) {
                    Tensor dv = sub(slice(x, {0, 1, 0, 0}, {n, hw, hw, vc.channels}),
                                    slice(x, {0, 0, 0, 0}, {n, hw - 1, hw, vc.channels}));
                    Tensor dh = sub(slice(x, {0, 0, 1, 0}, {n, hw, hw, vc.channels}),
                                    slice(x, {0, 0, 0, 0}, {n, hw, hw - 1, vc.channels}));
                    Tensor rtv = add(l2_norm(x), add(l2_norm(dh), l2_norm(dv)));
                    rec.r_tv_l2 = rtv.item();
                    total = add(total, mul(rtv, cfg.alpha_tv_l2));
                }
                rec.total = total.item();
                if (!std::isfinite(rec.total))
                    throw NumericError("run_attack: non-finite total loss at t=" +
                                       std::to_string(t));
                if (total.requires_grad()) {
                    tape.backward(total);
                    if (x.has_grad()) grad.assign(x.grad().begin(), x.grad().end());
                }
            }
        } catch (const NumericError& e) {
            st.ledger.push_back(rec);
            bool expected = false;
            if (aborted.compare_exchange_strong(expected, true)) {
                std::lock_guard<std::mutex> lock(abort_mu);
                abort_reason = e.what();
            }
            return;
        }
        if (grad.empty()) grad.assign(static_cast<size_t>(x.numel()), 0.0);
        st.adam.step(x, grad, rec.lr);
        x.zero_grad();
        st.ledger.push_back(rec);
    };

    const int workers =
        std::min<int>(worker_cap(), static_cast<int>(cfg.seeds.size()));
    for (int64_t t0 = 1; t0 <= T && !aborted.load(); t0 += cadence) {
        const int64_t t1 = std::min<int64_t>(T, t0 + cadence - 1);
        {
            SeedEnsemble ens;
            for (const auto& st : states) ens.members.push_back(st.x);
            x_consensus = consensus(ens);
        }
        auto window = [&](size_t si) {
            for (int64_t t = t0; t <= t1 && !aborted.load(); ++t) iterate(states[si], t);
        };
        if (workers <= 1) {
            for (size_t si = 0; si < states.size(); ++si) window(si);
        } else {
            std::vector<std::thread> pool;
            for (size_t si = 0; si < states.size(); ++si) {
                pool.emplace_back(window, si);
                if (static_cast<int>(pool.size()) == workers) {
                    for (auto& th : pool) th.join();
                    pool.clear();
                }
            }
            for (auto& th : pool) th.join();
        }
    }

    AttackOutput out;
    out.labels = labels;
    out.aborted = aborted.load();
    out.abort_reason = abort_reason;
    for (auto& st : states) {
        st.x.set_requires_grad(false);
        ReconstructionResult r;
        r.seed = st.seed;
        r.recon = st.x;
        r.labels = labels;
        r.ledger = std::move(st.ledger);
        r.image_prior_degenerate = prior_degenerate;
        out.per_seed.push_back(std::move(r));
    }
    {
        SeedEnsemble ens;
        for (const auto& r : out.per_seed) ens.members.push_back(r.recon);
        out.consensus_recon = consensus(ens);
    }
    out.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    for (auto& r : out.per_seed) r.wall_seconds = out.wall_seconds;
    return out;
}

} // namespace gradleak
