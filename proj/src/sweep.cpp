#include "gradleak/sweep.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "gradleak/hashing.hpp"
#include "gradleak/rng.hpp"

namespace gradleak {

const VariantAggregate& SweepResult::aggregate(const std::string& variant) const {
    for (const auto& a : aggregates)
        if (a.variant == variant) return a;
    throw ContractViolation("sweep: no aggregate for variant '" + variant + "'");
}

namespace {

struct VariantPlan {
    std::string name;
    AttackConfig cfg;
    int64_t batch = 0;
    double sigma = 0.0;
};

std::vector<VariantPlan> plan_variants(const SweepSetup& s, const std::string& axis) {
    std::vector<VariantPlan> out;
    auto push = [&](const std::string& name, AttackConfig cfg, int64_t n, double sigma) {
        VariantPlan p;
        p.name = name;
        p.cfg = std::move(cfg);
        p.batch = n;
        p.sigma = sigma;
        out.push_back(std::move(p));
    };
    if (axis == "layer_thirds") {
        const int64_t depth = s.victim->config.depth;
        const char* names[3] = {"drop_first_third", "drop_middle_third", "drop_last_third"};
        for (int which = 0; which < 3; ++which) {
            auto [lo, hi] = layer_third(depth, which);
            AttackConfig c = s.base;
            c.mask = mask_drop_layers(lo + 1, hi); // 1-based inclusive
            push(names[which], c, s.batch_size, 0.0);
        }
    } else if (axis == "components") {
        AttackConfig full = s.base;
        full.mask.mode = MaskSpec::Mode::keep_full;
        push("keep_full", full, s.batch_size, 0.0);
        AttackConfig msa = s.base;
        msa.mask = mask_keep_component("msa");
        push("msa_only", msa, s.batch_size, 0.0);
        AttackConfig mlp = s.base;
        mlp.mask = mask_keep_component("mlp");
        push("mlp_only", mlp, s.batch_size, 0.0);
    } else if (axis == "loss_terms") {
        // cumulative stack; total-variation and l2 priors stay on throughout
        AttackConfig c = s.base;
        c.losses.grad = true;
        c.losses.reg = true;
        c.losses.tv_l2 = true;
        c.losses.image_prior = false;
        c.losses.patch = false;
        c.use_scheduler = false;
        push("grad_reg", c, s.batch_size, 0.0);
        c.losses.image_prior = true; // prior active from t=1, no schedule
        push("image_prior", c, s.batch_size, 0.0);
        c.use_scheduler = true;
        push("scheduler", c, s.batch_size, 0.0);
        c.losses.patch = true;
        push("patch_prior", c, s.batch_size, 0.0);
    } else if (axis == "batch_size") {
        for (int64_t n : s.batch_sizes)
            push("n" + std::to_string(n), s.base, n, 0.0);
    } else if (axis == "defense_sigma") {
        for (double sg : s.sigmas) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%g", sg);
            push(std::string("sigma_") + buf, s.base, s.batch_size, sg);
        }
    } else {
        throw ContractViolation("run_sweep: unknown axis '" + axis + "'");
    }
    return out;
}

} // namespace

SweepResult run_sweep(const SweepSetup& setup, const std::string& axis, int64_t trials) {
    require(trials >= 1, "run_sweep: trials must be >= 1");
    require(setup.data && setup.victim, "run_sweep: dataset and victim are required");
    const std::vector<VariantPlan> variants = plan_variants(setup, axis);

    SweepResult result;
    result.axis = axis;
    for (const auto& v : variants) result.variants.push_back(v.name);
    result.cells.resize(variants.size() * static_cast<size_t>(trials));

    // gallery for IIP: dataset head, extended to cover any batch member
    auto build_gallery = [&](const std::vector<int64_t>& batch_idx,
                             std::vector<Tensor>& gallery, std::vector<int64_t>& own) {
        std::vector<int64_t> gal_idx;
        for (int64_t i = 0; i < std::min<int64_t>(setup.gallery_size,
                                                  static_cast<int64_t>(setup.data->images.size()));
             ++i)
            gal_idx.push_back(i);
        for (int64_t bi : batch_idx)
            if (std::find(gal_idx.begin(), gal_idx.end(), bi) == gal_idx.end())
                gal_idx.push_back(bi);
        gallery.clear();
        for (int64_t gi : gal_idx) gallery.push_back(setup.data->images[static_cast<size_t>(gi)]);
        own.clear();
        for (int64_t bi : batch_idx) {
            const auto it = std::find(gal_idx.begin(), gal_idx.end(), bi);
            own.push_back(it - gal_idx.begin());
        }
    };

    auto run_cell = [&](size_t vi, int64_t trial) {
        const VariantPlan& plan = variants[vi];
        SweepCell cell;
        cell.axis = axis;
        cell.variant = plan.name;
        cell.trial = trial;
        const uint64_t trial_seed = Rng::mix(setup.base_seed, static_cast<uint64_t>(trial) + 17);
        cell.seed = trial_seed;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            const std::vector<int64_t> batch_idx =
                pick_batch_unique_labels(*setup.data, plan.batch, trial_seed);
            Tensor x_true = setup.data->batch(batch_idx);
            std::vector<int64_t> y_true;
            for (int64_t bi : batch_idx) y_true.push_back(setup.data->labels[static_cast<size_t>(bi)]);
            GradientCapture cap = capture_gradients(*setup.victim, x_true, y_true);
            if (plan.sigma > 0.0)
                cap = apply_defense(cap, plan.sigma, setup.defense_target, trial_seed);
            AttackConfig cfg = plan.cfg;
            cfg.seeds = {Rng::mix(trial_seed, 0xa77acc)};
            AttackOutput out = run_attack(cap, *setup.victim, setup.prior, cfg);
            if (out.aborted) throw NumericError(out.abort_reason);
            std::vector<Tensor> gallery;
            std::vector<int64_t> own;
            build_gallery(batch_idx, gallery, own);
            MetricReport rep = evaluate_reconstruction(out.consensus_recon, x_true, setup.prior,
                                                       &gallery, &own);
            cell.psnr = rep.psnr_mean_db;
            cell.fft2d = rep.fft2d;
            cell.feature_dist = rep.feature_dist;
            cell.iip_ratio = rep.iip_ratio;
        } catch (const std::exception& e) {
            cell.failed = true;
            cell.error = e.what();
        }
        cell.wall_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.cells[vi * static_cast<size_t>(trials) + static_cast<size_t>(trial)] = cell;
    };

    // cells are independent; run them on up to GRADLEAK_THREADS workers
    std::vector<std::pair<size_t, int64_t>> jobs;
    for (size_t vi = 0; vi < variants.size(); ++vi)
        for (int64_t trial = 0; trial < trials; ++trial) jobs.emplace_back(vi, trial);
    const int workers = std::min<int>(worker_cap(), static_cast<int>(jobs.size()));
    if (workers <= 1) {
        for (auto& [vi, trial] : jobs) run_cell(vi, trial);
    } else {
        std::atomic<size_t> next{0};
        auto drain = [&]() {
            for (;;) {
                const size_t j = next.fetch_add(1);
                if (j >= jobs.size()) return;
                run_cell(jobs[j].first, jobs[j].second);
            }
        };
        std::vector<std::thread> pool;
        for (int wkr = 0; wkr < workers; ++wkr) pool.emplace_back(drain);
        for (auto& th : pool) th.join();
    }

    for (size_t vi = 0; vi < variants.size(); ++vi) {
        VariantAggregate agg;
        agg.variant = variants[vi].name;
        std::vector<double> psnrs;
        for (int64_t trial = 0; trial < trials; ++trial) {
            const SweepCell& c = result.cells[vi * static_cast<size_t>(trials) + static_cast<size_t>(trial)];
            if (c.failed) continue;
            ++agg.trials;
            psnrs.push_back(c.psnr);
            agg.fft2d_mean += c.fft2d;
            agg.feature_mean += c.feature_dist;
            agg.iip_mean += c.iip_ratio;
        }
        if (agg.trials > 0) {
            for (double p : psnrs) agg.psnr_mean += p;
            agg.psnr_mean /= static_cast<double>(agg.trials);
            double var = 0;
            for (double p : psnrs) var += (p - agg.psnr_mean) * (p - agg.psnr_mean);
            agg.psnr_std = agg.trials > 1 ? std::sqrt(var / static_cast<double>(agg.trials - 1)) : 0.0;
            agg.fft2d_mean /= static_cast<double>(agg.trials);
            agg.feature_mean /= static_cast<double>(agg.trials);
            agg.iip_mean /= static_cast<double>(agg.trials);
        }
        result.aggregates.push_back(agg);
    }
    return result;
}

void write_sweep_csv(const SweepResult& r, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), "sweep: cannot write " + path.string());
    out << "axis,variant,trial,seed,psnr,fft2d,feature_distance,iip,wall_s\n";
    char line[512];
    for (const auto& c : r.cells) {
        if (c.failed) {
            out << c.axis << "," << c.variant << "," << c.trial << "," << c.seed
                << ",error,error,error,error," << c.wall_s << "\n";
            continue;
        }
        std::snprintf(line, sizeof(line), "%s,%s,%lld,%llu,%.6f,%.9f,%.9f,%.6f,%.3f\n",
                      c.axis.c_str(), c.variant.c_str(), static_cast<long long>(c.trial),
                      static_cast<unsigned long long>(c.seed), c.psnr, c.fft2d, c.feature_dist,
                      c.iip_ratio, c.wall_s);
        out << line;
    }
}

void write_sweep_json(const SweepResult& r, const std::filesystem::path& path) {
    nlohmann::json j;
    j["axis"] = r.axis;
    j["variants"] = nlohmann::json::array();
    for (const auto& a : r.aggregates) {
        nlohmann::json v;
        v["variant"] = a.variant;
        v["trials"] = a.trials;
        v["psnr_mean"] = a.psnr_mean;
        v["psnr_std"] = a.psnr_std;
        v["fft2d_mean"] = a.fft2d_mean;
        v["feature_distance_mean"] = a.feature_mean;
        v["iip_mean"] = a.iip_mean;
        j["variants"].push_back(std::move(v));
    }
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : r.cells) {
        nlohmann::json jc;
        jc["variant"] = c.variant;
        jc["trial"] = c.trial;
        jc["seed"] = c.seed;
        if (c.failed) {
            jc["error"] = c.error;
        } else {
            jc["psnr"] = c.psnr;
            jc["fft2d"] = c.fft2d;
            jc["feature_distance"] = c.feature_dist;
            jc["iip"] = c.iip_ratio;
        }
        jc["wall_s"] = c.wall_s;
        cells.push_back(std::move(jc));
    }
    j["cells"] = std::move(cells);
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), "sweep: cannot write " + path.string());
    out << j.dump(2) << "\n";
}

} // namespace gradleak
