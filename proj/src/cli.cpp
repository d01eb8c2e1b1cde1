#include "gradleak/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradleak/dataset.hpp"
#include "gradleak/hashing.hpp"
#include "gradleak/io_util.hpp"
#include "gradleak/metrics.hpp"
#include "gradleak/ops.hpp"
#include "gradleak/sweep.hpp"

namespace gradleak {

namespace {

constexpr const char* kToolVersion = "0.1.0";
namespace fs = std::filesystem;

std::vector<int64_t> parse_index_list(const std::string& text) {
    std::vector<int64_t> out;
    std::string cur;
    for (char ch : text + ",") {
        if (ch == ',') {
            if (!cur.empty()) out.push_back(std::stoll(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    require(!out.empty(), "expected a comma-separated index list");
    return out;
}

void save_recon(const Tensor& recon, const std::vector<int64_t>& labels, const fs::path& path) {
    ArchiveWriter w;
    w.add("recon", recon);
    std::vector<double> lab(labels.begin(), labels.end());
    w.add("labels", Tensor::from_data({static_cast<int64_t>(lab.size())}, lab));
    w.save(path);
}

int cmd_synth_data(const std::string& gen, int64_t n, int64_t size, int64_t classes,
                   int64_t channels, uint64_t seed, const std::string& out) {
    ToyDatasetSpec spec;
    spec.gen = generator_from_name(gen);
    spec.count = n;
    spec.size = size;
    spec.classes = classes;
    spec.channels = channels;
    spec.seed = seed;
    ToyDataset ds = synth_dataset(spec);
    save_dataset(ds, out);
    std::printf("wrote %lld images (%s, %lldx%lld, %lld classes) to %s\n",
                static_cast<long long>(n), gen.c_str(), static_cast<long long>(size),
                static_cast<long long>(size), static_cast<long long>(classes), out.c_str());
    return 0;
}

int cmd_train_victim(const std::string& data, int64_t epochs, uint64_t seed,
                     const std::string& out, int64_t patch, int64_t dim, int64_t depth,
                     int64_t heads) {
    ToyDataset ds = load_dataset(data);
    ViTConfig cfg;
    cfg.image_size = ds.spec.size;
    cfg.channels = ds.spec.channels;
    cfg.num_classes = ds.spec.classes;
    cfg.patch_size = patch;
    cfg.embed_dim = dim;
    cfg.depth = depth;
    cfg.heads = heads;
    std::vector<double> losses;
    ViTParams params =
        epochs > 0 ? train_vit(ds.images, ds.labels, cfg, epochs, seed, &losses) : init_vit(cfg, seed);
    save_vit(params, out);
    for (size_t e = 0; e < losses.size(); ++e)
        std::printf("epoch %zu: loss %.6f\n", e + 1, losses[e]);
    std::printf("victim checkpoint: %s\n", out.c_str());
    return 0;
}

int cmd_train_prior(const std::string& data, int64_t epochs, uint64_t seed,
                    const std::string& out) {
    ToyDataset ds = load_dataset(data);
    PriorConfig cfg;
    cfg.image_size = ds.spec.size;
    cfg.channels = ds.spec.channels;
    cfg.num_classes = ds.spec.classes;
    std::vector<double> losses;
    PriorCNN prior = pretrain_prior(ds.images, ds.labels, cfg, epochs, seed, &losses);
    save_prior(prior, out);
    for (size_t e = 0; e < losses.size(); ++e)
        std::printf("epoch %zu: loss %.6f\n", e + 1, losses[e]);
    std::printf("prior checkpoint: %s\n", out.c_str());
    return 0;
}

int cmd_capture(const std::string& victim, const std::string& data, const std::string& indices,
                double sigma, const std::string& target, uint64_t seed, const std::string& out) {
    ViTParams params = load_vit(victim);
    ToyDataset ds = load_dataset(data);
    std::vector<int64_t> batch_idx = parse_index_list(indices);
    Tensor x = ds.batch(batch_idx);
    std::vector<int64_t> y;
    for (int64_t i : batch_idx) y.push_back(ds.labels[static_cast<size_t>(i)]);
    GradientCapture cap = capture_gradients(params, x, y);
    if (sigma > 0.0) cap = apply_defense(cap, sigma, target, seed);
    cap.defense_target = sigma > 0.0 ? target : "none";
    cap.defense_sigma = sigma;
    CaptureSidecar side;
    side.dataset_dir = data;
    side.batch_indices = batch_idx;
    save_capture(cap, side, out);
    std::printf("capture: N=%lld sigma=%g target=%s -> %s\n",
                static_cast<long long>(cap.batch_size), sigma, cap.defense_target.c_str(),
                out.c_str());
    return 0;
}

int cmd_attack(const std::string& capture_path, const std::string& victim,
               const std::string& prior_path, const std::string& config_path, int64_t seed_flag,
               const std::string& out) {
    auto [cap, side] = load_capture(capture_path);
    ViTParams params = load_vit(victim);
    AttackConfig cfg = config_path.empty() ? AttackConfig{} : attack_config_from_file(config_path);
    if (seed_flag >= 0) cfg.seeds = {static_cast<uint64_t>(seed_flag)};
    PriorCNN prior;
    bool have_prior = false;
    if (!prior_path.empty()) {
        prior = load_prior(prior_path);
        have_prior = true;
    }
    require(!cfg.losses.image_prior || have_prior,
            "attack: config enables the image prior but no --prior was given");

    fs::create_directories(out);
    {
        std::ofstream cj(fs::path(out) / "config.json", std::ios::trunc);
        cj << attack_config_to_json(cfg) << "\n";
    }
    fs::copy_file(capture_path, fs::path(out) / "capture.gvt",
                  fs::copy_options::overwrite_existing);
    fs::copy_file(capture_path + ".json", fs::path(out) / "capture.gvt.json",
                  fs::copy_options::overwrite_existing);

    AttackOutput result = run_attack(cap, params, have_prior ? &prior : nullptr, cfg);

    RunManifest manifest;
    manifest.tool_version = kToolVersion;
    manifest.config_json = attack_config_to_json(cfg);
    manifest.seeds = cfg.seeds;
    manifest.input_hashes.emplace_back("capture.gvt", hash_file(capture_path));
    manifest.input_hashes.emplace_back("victim.gvt", hash_file(victim));
    if (have_prior) manifest.input_hashes.emplace_back("prior.gvt", hash_file(prior_path));
    if (!config_path.empty())
        manifest.input_hashes.emplace_back("config.json", hash_file(config_path));
    manifest.wall_seconds = result.wall_seconds;
    manifest.image_prior_degenerate =
        !result.per_seed.empty() && result.per_seed.front().image_prior_degenerate;

    for (const auto& r : result.per_seed) {
        const fs::path dir = fs::path(out) / ("seed_" + std::to_string(r.seed));
        fs::create_directories(dir);
        save_recon(r.recon, r.labels, dir / "recon.gvt");
        write_ledger_csv(r.ledger, dir / "ledger.csv");
        manifest.outputs.push_back("seed_" + std::to_string(r.seed) + "/recon.gvt");
        manifest.outputs.push_back("seed_" + std::to_string(r.seed) + "/ledger.csv");
    }
    save_recon(result.consensus_recon, result.labels, fs::path(out) / "consensus.gvt");
    manifest.outputs.push_back("consensus.gvt");
    write_manifest(manifest, fs::path(out) / "manifest.json");

    if (result.aborted) {
        std::fprintf(stderr, "attack aborted: %s (ledger preserved)\n",
                     result.abort_reason.c_str());
        return 4;
    }
    std::printf("attack: %zu seed(s), %.1fs -> %s\n", result.per_seed.size(),
                result.wall_seconds, out.c_str());
    return 0;
}

int cmd_sweep(const std::string& axis, int64_t trials, const std::string& config_path,
              const std::string& victim, const std::string& prior_path, const std::string& data,
              int64_t batch_size, const std::string& sigmas, const std::string& target,
              uint64_t base_seed, const std::string& out) {
    ToyDataset ds = load_dataset(data);
    ViTParams params = load_vit(victim);
    PriorCNN prior;
    bool have_prior = false;
    if (!prior_path.empty()) {
        prior = load_prior(prior_path);
        have_prior = true;
    }
    SweepSetup setup;
    setup.data = &ds;
    setup.victim = &params;
    setup.prior = have_prior ? &prior : nullptr;
    setup.base = config_path.empty() ? AttackConfig{} : attack_config_from_file(config_path);
    setup.batch_size = batch_size;
    setup.defense_target = target;
    setup.base_seed = base_seed;
    if (!sigmas.empty()) {
        setup.sigmas.clear();
        std::string cur;
        for (char ch : sigmas + ",") {
            if (ch == ',') {
                if (!cur.empty()) setup.sigmas.push_back(std::stod(cur));
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
    }
    require(!setup.base.losses.image_prior || have_prior,
            "sweep: base config enables the image prior but no --prior was given");
    SweepResult r = run_sweep(setup, axis, trials);
    fs::create_directories(out);
    write_sweep_csv(r, fs::path(out) / "sweep.csv");
    write_sweep_json(r, fs::path(out) / "sweep.json");
    for (const auto& a : r.aggregates)
        std::printf("%-20s psnr %.2f +- %.2f dB (%lld trials)\n", a.variant.c_str(), a.psnr_mean,
                    a.psnr_std, static_cast<long long>(a.trials));
    std::printf("sweep outputs in %s\n", out.c_str());
    return 0;
}

int cmd_report(const std::string& run, const std::string& format, bool images,
               const std::string& data_override, const std::string& prior_path,
               int64_t gallery_size) {
    const fs::path run_dir(run);
    auto [cap, side] = load_capture(run_dir / "capture.gvt");
    const std::string data_dir = data_override.empty() ? side.dataset_dir : data_override;
    require(!data_dir.empty(), "report: no dataset recorded in the capture; pass --data");
    ToyDataset ds = load_dataset(data_dir);
    Tensor originals = ds.batch(side.batch_indices);

    Archive consensus = Archive::load(run_dir / "consensus.gvt");
    Tensor recon = consensus.get("recon");
    require(recon.shape() == originals.shape(), "report: recon/original shape mismatch");

    PriorCNN prior;
    bool have_prior = false;
    if (!prior_path.empty()) {
        prior = load_prior(prior_path);
        have_prior = true;
    }

    std::vector<Tensor> gallery;
    std::vector<int64_t> own;
    if (have_prior) {
        std::vector<int64_t> gal_idx;
        for (int64_t i = 0;
             i < std::min<int64_t>(gallery_size, static_cast<int64_t>(ds.images.size())); ++i)
            gal_idx.push_back(i);
        for (int64_t bi : side.batch_indices)
            if (std::find(gal_idx.begin(), gal_idx.end(), bi) == gal_idx.end())
                gal_idx.push_back(bi);
        for (int64_t gi : gal_idx) gallery.push_back(ds.images[static_cast<size_t>(gi)]);
        for (int64_t bi : side.batch_indices) {
            const auto it = std::find(gal_idx.begin(), gal_idx.end(), bi);
            own.push_back(it - gal_idx.begin());
        }
    }
    MetricReport rep = evaluate_reconstruction(recon, originals, have_prior ? &prior : nullptr,
                                               have_prior ? &gallery : nullptr,
                                               have_prior ? &own : nullptr);

    nlohmann::json j;
    j["assignment"] = rep.assignment;
    j["psnr_per_image_db"] = rep.psnr_per_image_db;
    j["psnr_mean_db"] = rep.psnr_mean_db;
    j["fft2d_distance"] = rep.fft2d;
    if (rep.feature_dist >= 0) j["feature_distance"] = rep.feature_dist;
    if (rep.iip_ratio >= 0) j["iip"] = rep.iip_ratio;
    {
        std::ofstream out(run_dir / "metrics.json", std::ios::trunc);
        require(out.good(), "report: cannot write metrics.json");
        out << j.dump(2) << "\n";
    }
    if (format == "csv") {
        std::ofstream out(run_dir / "report.csv", std::ios::trunc);
        out << "batch_size,sigma,mask,psnr,fft2d,feature_distance,iip\n";
        char line[256];
        std::snprintf(line, sizeof(line), "%lld,%g,%s,%.6f,%.9f,%.9f,%.6f\n",
                      static_cast<long long>(cap.batch_size), cap.defense_sigma, "per-config",
                      rep.psnr_mean_db, rep.fft2d, rep.feature_dist, rep.iip_ratio);
        out << line;
    }
    if (images) {
        const int64_t n = recon.dim(0);
        const int64_t h = recon.dim(1), w = recon.dim(2), c = recon.dim(3);
        for (int64_t i = 0; i < n; ++i) {
            Tensor ri = reshape(slice(recon, {i, 0, 0, 0}, {i + 1, h, w, c}), {h, w, c});
            const int64_t oi = rep.assignment[static_cast<size_t>(i)];
            Tensor orig = reshape(slice(originals, {oi, 0, 0, 0}, {oi + 1, h, w, c}), {h, w, c});
            const char* ext = c == 3 ? ".ppm" : ".pgm";
            export_side_by_side(orig, ri, run_dir / ("pair_" + std::to_string(i) + ext));
        }
    }
    std::printf("psnr_mean_db=%.3f fft2d=%.6f%s\n", rep.psnr_mean_db, rep.fft2d,
                rep.iip_ratio >= 0 ? (" iip=" + std::to_string(rep.iip_ratio)).c_str() : "");
    return 0;
}

} // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"gradleak: gradient inversion attacks on a toy vision transformer"};
    app.require_subcommand(0, 1);
    bool print_default_config = false;
    app.add_flag("--print-default-config", print_default_config,
                 "print the default attack config JSON and exit");

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "generate a toy dataset");
    std::string sd_gen = "smooth_gradients", sd_out;
    int64_t sd_n = 256, sd_size = 16, sd_classes = 8, sd_channels = 1;
    uint64_t sd_seed = 1;
    synth->add_option("--gen", sd_gen, "smooth_gradients|gaussian_blobs|checker_textures");
    synth->add_option("--n", sd_n, "image count");
    synth->add_option("--size", sd_size, "image side length");
    synth->add_option("--classes", sd_classes, "class count");
    synth->add_option("--channels", sd_channels, "1 or 3");
    synth->add_option("--seed", sd_seed, "generator seed");
    synth->add_option("--out", sd_out, "output directory")->required();

    // train-victim
    auto* tv = app.add_subcommand("train-victim", "train the victim transformer");
    std::string tv_data, tv_out;
    int64_t tv_epochs = 2, tv_patch = 4, tv_dim = 32, tv_depth = 3, tv_heads = 4;
    uint64_t tv_seed = 1;
    tv->add_option("--data", tv_data, "dataset directory")->required();
    tv->add_option("--epochs", tv_epochs, "training epochs (0 = random init)");
    tv->add_option("--seed", tv_seed, "init/shuffle seed");
    tv->add_option("--patch-size", tv_patch, "ViT patch size");
    tv->add_option("--embed-dim", tv_dim, "ViT embedding width");
    tv->add_option("--depth", tv_depth, "transformer layers");
    tv->add_option("--heads", tv_heads, "attention heads");
    tv->add_option("--out", tv_out, "checkpoint path (.gvt)")->required();

    // train-prior
    auto* tp = app.add_subcommand("train-prior", "pretrain the BN prior CNN");
    std::string tp_data, tp_out;
    int64_t tp_epochs = 3;
    uint64_t tp_seed = 1;
    tp->add_option("--data", tp_data, "dataset directory")->required();
    tp->add_option("--epochs", tp_epochs, "training epochs");
    tp->add_option("--seed", tp_seed, "init/shuffle seed");
    tp->add_option("--out", tp_out, "checkpoint path (.gvt)")->required();

    // capture
    auto* cp = app.add_subcommand("capture", "capture victim gradients for a batch");
    std::string cp_victim, cp_data, cp_indices, cp_target = "all", cp_out;
    double cp_sigma = 0.0;
    uint64_t cp_seed = 1;
    cp->add_option("--victim", cp_victim, "victim checkpoint")->required();
    cp->add_option("--data", cp_data, "dataset directory")->required();
    cp->add_option("--batch-indices", cp_indices, "comma-separated dataset indices")->required();
    cp->add_option("--defense-sigma", cp_sigma, "Gaussian defense noise scale");
    cp->add_option("--defense-target", cp_target, "all|msa_only|last_third");
    cp->add_option("--seed", cp_seed, "defense noise seed");
    cp->add_option("--out", cp_out, "capture path (.gvt)")->required();

    // attack
    auto* at = app.add_subcommand("attack", "run the reconstruction attack");
    std::string at_capture, at_victim, at_prior, at_config, at_out;
    int64_t at_seed = -1;
    at->add_option("--capture", at_capture, "capture path")->required();
    at->add_option("--victim", at_victim, "victim checkpoint")->required();
    at->add_option("--prior", at_prior, "prior checkpoint (required for the image prior)");
    at->add_option("--config", at_config, "attack config JSON");
    at->add_option("--seed", at_seed, "override config seeds with one seed");
    at->add_option("--out", at_out, "run directory")->required();

    // sweep
    auto* sw = app.add_subcommand("sweep", "run an ablation axis");
    std::string sw_axis, sw_config, sw_victim, sw_prior, sw_data, sw_sigmas,
        sw_target = "all", sw_out;
    int64_t sw_trials = 5, sw_batch = 4;
    uint64_t sw_seed = 1;
    sw->add_option("--axis", sw_axis,
                   "layer_thirds|components|loss_terms|batch_size|defense_sigma")
        ->required();
    sw->add_option("--trials", sw_trials, "trials per variant");
    sw->add_option("--config", sw_config, "base attack config JSON");
    sw->add_option("--victim", sw_victim, "victim checkpoint")->required();
    sw->add_option("--prior", sw_prior, "prior checkpoint");
    sw->add_option("--data", sw_data, "dataset directory")->required();
    sw->add_option("--batch-size", sw_batch, "batch size for fixed-N axes");
    sw->add_option("--sigmas", sw_sigmas, "comma-separated sigma list");
    sw->add_option("--defense-target", sw_target, "defense target for the sigma axis");
    sw->add_option("--base-seed", sw_seed, "sweep seed");
    sw->add_option("--out", sw_out, "output directory")->required();

    // report
    auto* rp = app.add_subcommand("report", "metrics and image panels for a run");
    std::string rp_run, rp_format = "json", rp_data, rp_prior;
    bool rp_images = false;
    int64_t rp_gallery = 64;
    rp->add_option("--run", rp_run, "attack run directory")->required();
    rp->add_option("--format", rp_format, "csv|json");
    rp->add_flag("--images", rp_images, "write side-by-side panels");
    rp->add_option("--data", rp_data, "dataset directory override");
    rp->add_option("--prior", rp_prior, "prior checkpoint for feature metrics");
    rp->add_option("--gallery-size", rp_gallery, "IIP gallery size");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (print_default_config) {
            std::cout << attack_config_to_json(AttackConfig{}) << "\n";
            return 0;
        }
        if (synth->parsed())
            return cmd_synth_data(sd_gen, sd_n, sd_size, sd_classes, sd_channels, sd_seed, sd_out);
        if (tv->parsed())
            return cmd_train_victim(tv_data, tv_epochs, tv_seed, tv_out, tv_patch, tv_dim,
                                    tv_depth, tv_heads);
        if (tp->parsed()) return cmd_train_prior(tp_data, tp_epochs, tp_seed, tp_out);
        if (cp->parsed())
            return cmd_capture(cp_victim, cp_data, cp_indices, cp_sigma, cp_target, cp_seed,
                               cp_out);
        if (at->parsed())
            return cmd_attack(at_capture, at_victim, at_prior, at_config, at_seed, at_out);
        if (sw->parsed())
            return cmd_sweep(sw_axis, sw_trials, sw_config, sw_victim, sw_prior, sw_data, sw_batch,
                             sw_sigmas, sw_target, sw_seed, sw_out);
        if (rp->parsed())
            return cmd_report(rp_run, rp_format, rp_images, rp_data, rp_prior, rp_gallery);
        std::cerr << app.help();
        return 2;
    } catch (const ContractViolation& e) {
        std::cerr << "contract violation: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

} // namespace gradleak
