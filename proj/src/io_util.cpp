#include "gradleak/io_util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "gradleak/archive.hpp"
#include "gradleak/hashing.hpp"

namespace gradleak {

std::string fnv1a64_hex(std::string_view bytes) {
    const uint64_t h = fnv1a64(bytes);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::string hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "hash_file: cannot open " + path.string());
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a64(std::string_view(buf, static_cast<size_t>(in.gcount())), h);
        if (!in) break;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

namespace {

unsigned char quantize(double v) {
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return static_cast<unsigned char>(v * 255.0 + 0.5); // half-up
}

} // namespace

void export_ppm(const Tensor& image, const std::filesystem::path& path) {
    require(image.rank() == 3, "export_ppm: image must be [H,W,C]");
    const int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    require(c == 1 || c == 3, "export_ppm: channel count must be 1 or 3");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "export_ppm: cannot open " + path.string());
    out << (c == 3 ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> bytes(static_cast<size_t>(h * w * c));
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize(image.values()[i]);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    require(out.good(), "export_ppm: write failed");
}

Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "read_ppm: cannot open " + path.string());
    std::string magic;
    in >> magic;
    require(magic == "P6" || magic == "P5", "read_ppm: unsupported format " + magic);
    int64_t w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    require(w > 0 && h > 0 && maxval == 255, "read_ppm: bad header");
    in.get(); // single whitespace after maxval
    const int64_t c = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> bytes(static_cast<size_t>(h * w * c));
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(in.gcount() == static_cast<std::streamsize>(bytes.size()), "read_ppm: truncated");
    Tensor t = Tensor::zeros({h, w, c});
    for (size_t i = 0; i < bytes.size(); ++i)
        t.values_mut()[i] = static_cast<double>(bytes[i]) / 255.0;
    return t;
}

void export_side_by_side(const Tensor& original, const Tensor& recon,
                         const std::filesystem::path& path) {
    require(original.shape() == recon.shape() && original.rank() == 3,
            "export_side_by_side: images must be matching [H,W,C]");
    const int64_t h = original.dim(0), w = original.dim(1), c = original.dim(2);
    Tensor panel = Tensor::zeros({h, 2 * w + 1, c});
    auto dst = panel.values_mut();
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x)
            for (int64_t ch = 0; ch < c; ++ch) {
                dst[static_cast<size_t>((y * (2 * w + 1) + x) * c + ch)] =
                    original.values()[static_cast<size_t>((y * w + x) * c + ch)];
                dst[static_cast<size_t>((y * (2 * w + 1) + w + 1 + x) * c + ch)] =
                    recon.values()[static_cast<size_t>((y * w + x) * c + ch)];
            }
        for (int64_t ch = 0; ch < c; ++ch)
            dst[static_cast<size_t>((y * (2 * w + 1) + w) * c + ch)] = 0.5;
    }
    export_ppm(panel, path);
}

namespace {

void check_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        require(std::find(known.begin(), known.end(), it.key()) != known.end(),
                "config: unknown key '" + it.key() + "' in " + where);
}

nlohmann::json mask_to_json(const MaskSpec& m) {
    nlohmann::json j;
    switch (m.mode) {
        case MaskSpec::Mode::all: j["mode"] = "all"; break;
        case MaskSpec::Mode::keep_full: j["mode"] = "keep_full"; break;
        case MaskSpec::Mode::drop_layers:
            j["mode"] = "drop_layers";
            j["from"] = m.drop_from;
            j["to"] = m.drop_to;
            break;
        case MaskSpec::Mode::keep_component:
            j["mode"] = "keep_component";
            j["component"] = m.component;
            break;
    }
    return j;
}

MaskSpec mask_from_json(const nlohmann::json& j) {
    check_keys(j, {"mode", "from", "to", "component"}, "mask");
    MaskSpec m;
    const std::string mode = j.at("mode").get<std::string>();
    if (mode == "all") {
        m.mode = MaskSpec::Mode::all;
    } else if (mode == "keep_full") {
        m.mode = MaskSpec::Mode::keep_full;
    } else if (mode == "drop_layers") {
        m.mode = MaskSpec::Mode::drop_layers;
        m.drop_from = j.at("from").get<int64_t>();
        m.drop_to = j.at("to").get<int64_t>();
    } else if (mode == "keep_component") {
        m.mode = MaskSpec::Mode::keep_component;
        m.component = j.at("component").get<std::string>();
    } else {
        throw ContractViolation("config: unknown mask mode '" + mode + "'");
    }
    return m;
}

} // namespace

std::string attack_config_to_json(const AttackConfig& cfg) {
    nlohmann::json j;
    j["iterations"] = cfg.iterations;
    j["lr"] = cfg.lr;
    j["alpha_grad"] = cfg.alpha_grad;
    j["alpha_image"] = cfg.alpha_image;
    j["alpha_patch"] = cfg.alpha_patch;
    j["alpha_reg"] = cfg.alpha_reg;
    j["alpha_tv_l2"] = cfg.alpha_tv_l2;
    j["adam"] = {{"beta1", cfg.adam_beta1}, {"beta2", cfg.adam_beta2}, {"eps", cfg.adam_eps}};
    j["seeds"] = cfg.seeds;
    j["losses"] = {{"grad", cfg.losses.grad},
                   {"image_prior", cfg.losses.image_prior},
                   {"patch", cfg.losses.patch},
                   {"reg", cfg.losses.reg},
                   {"tv_l2", cfg.losses.tv_l2}};
    j["scheduler"] = cfg.use_scheduler;
    j["consensus_every"] = cfg.consensus_every;
    j["mask"] = mask_to_json(cfg.mask);
    return j.dump(2);
}

AttackConfig attack_config_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    require(!j.is_discarded(), "config: malformed JSON");
    check_keys(j,
               {"iterations", "lr", "alpha_grad", "alpha_image", "alpha_patch", "alpha_reg",
                "alpha_tv_l2", "adam", "seeds", "losses", "scheduler", "consensus_every", "mask"},
               "attack config");
    AttackConfig cfg;
    cfg.iterations = j.value("iterations", cfg.iterations);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.alpha_grad = j.value("alpha_grad", cfg.alpha_grad);
    cfg.alpha_image = j.value("alpha_image", cfg.alpha_image);
    cfg.alpha_patch = j.value("alpha_patch", cfg.alpha_patch);
    cfg.alpha_reg = j.value("alpha_reg", cfg.alpha_reg);
    cfg.alpha_tv_l2 = j.value("alpha_tv_l2", cfg.alpha_tv_l2);
    if (j.contains("adam")) {
        check_keys(j["adam"], {"beta1", "beta2", "eps"}, "adam");
        cfg.adam_beta1 = j["adam"].value("beta1", cfg.adam_beta1);
        cfg.adam_beta2 = j["adam"].value("beta2", cfg.adam_beta2);
        cfg.adam_eps = j["adam"].value("eps", cfg.adam_eps);
    }
    if (j.contains("seeds")) cfg.seeds = j["seeds"].get<std::vector<uint64_t>>();
    if (j.contains("losses")) {
        check_keys(j["losses"], {"grad", "image_prior", "patch", "reg", "tv_l2"}, "losses");
        cfg.losses.grad = j["losses"].value("grad", cfg.losses.grad);
        cfg.losses.image_prior = j["losses"].value("image_prior", cfg.losses.image_prior);
        cfg.losses.patch = j["losses"].value("patch", cfg.losses.patch);
        cfg.losses.reg = j["losses"].value("reg", cfg.losses.reg);
        cfg.losses.tv_l2 = j["losses"].value("tv_l2", cfg.losses.tv_l2);
    }
    cfg.use_scheduler = j.value("scheduler", cfg.use_scheduler);
    cfg.consensus_every = j.value("consensus_every", cfg.consensus_every);
    if (j.contains("mask")) cfg.mask = mask_from_json(j["mask"]);
    cfg.validate();
    return cfg;
}

AttackConfig attack_config_from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), "config: cannot open " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return attack_config_from_json(text);
}

void write_manifest(const RunManifest& m, const std::filesystem::path& path) {
    nlohmann::json j;
    j["tool"] = "gradleak";
    j["version"] = m.tool_version;
    j["config"] = nlohmann::json::parse(m.config_json.empty() ? "{}" : m.config_json);
    j["seeds"] = m.seeds;
    j["inputs"] = nlohmann::json::object();
    for (const auto& [file, hash] : m.input_hashes) j["inputs"][file] = hash;
    // resolved design choices a rerun must agree on
    j["flags"] = {{"gelu", "tanh_approximation"},
                  {"fft2d", "one_minus_cosine_of_magnitude_spectra"},
                  {"consensus_flow", "identity"},
                  {"mask_semantics", "keep_component_excludes_embeddings_and_head"},
                  {"vit_init", "truncated_normal_0.02_zero_embeddings"},
                  {"layer_norm_eps", 1e-6},
                  {"batch_norm_eps", 1e-5}};
    j["wall_s"] = m.wall_seconds;
    j["outputs"] = m.outputs;
    if (m.image_prior_degenerate) j["image_prior_degenerate"] = true;
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), "manifest: cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void write_ledger_csv(const std::vector<IterationRecord>& ledger,
                      const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), "ledger: cannot write " + path.string());
    out << "t,L_grad,R_image,R_patch,R_reg,R_tv_l2,total,lr\n";
    char line[256];
    for (const auto& r : ledger) {
        std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      static_cast<long long>(r.t), r.l_grad, r.r_image, r.r_patch, r.r_reg,
                      r.r_tv_l2, r.total, r.lr);
        out << line;
    }
}

void save_capture(const GradientCapture& cap, const CaptureSidecar& side,
                  const std::filesystem::path& path) {
    ArchiveWriter w;
    for (size_t i = 0; i < cap.names.size(); ++i) w.add("grad/" + cap.names[i], cap.grads[i]);
    w.save(path);
    nlohmann::json j;
    j["config_hash"] = cap.config_hash;
    j["batch_size"] = cap.batch_size;
    j["defense"] = {{"sigma", cap.defense_sigma}, {"target", cap.defense_target}};
    j["dataset_dir"] = side.dataset_dir;
    j["batch_indices"] = side.batch_indices;
    std::ofstream out(path.string() + ".json", std::ios::trunc);
    require(out.good(), "save_capture: cannot write sidecar");
    out << j.dump(2) << "\n";
}

std::pair<GradientCapture, CaptureSidecar> load_capture(const std::filesystem::path& path) {
    Archive a = Archive::load(path);
    GradientCapture cap;
    for (const std::string& name : a.names()) {
        require(name.rfind("grad/", 0) == 0, "load_capture: unexpected entry '" + name + "'");
        cap.names.push_back(name.substr(5));
        cap.grads.push_back(a.get(name));
    }
    std::ifstream in(path.string() + ".json");
    require(in.good(), "load_capture: missing sidecar " + path.string() + ".json");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), "load_capture: malformed sidecar");
    cap.config_hash = j.at("config_hash").get<uint64_t>();
    cap.batch_size = j.at("batch_size").get<int64_t>();
    cap.defense_sigma = j.at("defense").at("sigma").get<double>();
    cap.defense_target = j.at("defense").at("target").get<std::string>();
    CaptureSidecar side;
    side.config_hash = cap.config_hash;
    side.batch_size = cap.batch_size;
    side.defense_sigma = cap.defense_sigma;
    side.defense_target = cap.defense_target;
    side.dataset_dir = j.value("dataset_dir", "");
    if (j.contains("batch_indices"))
        side.batch_indices = j["batch_indices"].get<std::vector<int64_t>>();
    return {cap, side};
}

} // namespace gradleak
