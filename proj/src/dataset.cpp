#include "gradleak/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "gradleak/archive.hpp"
#include "gradleak/rng.hpp"

namespace gradleak {

namespace {
constexpr double kPi = 3.14159265358979323846;

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }
} // namespace

Generator generator_from_name(const std::string& name) {
    if (name == "smooth_gradients") return Generator::smooth_gradients;
    if (name == "gaussian_blobs") return Generator::gaussian_blobs;
    if (name == "checker_textures") return Generator::checker_textures;
    throw ContractViolation("dataset: unknown generator '" + name + "'");
}

std::string generator_name(Generator g) {
    switch (g) {
        case Generator::smooth_gradients: return "smooth_gradients";
        case Generator::gaussian_blobs: return "gaussian_blobs";
        case Generator::checker_textures: return "checker_textures";
    }
    throw ContractViolation("dataset: bad generator enum");
}

int64_t toy_label(const ToyDatasetSpec& spec, int64_t index) {
    require(spec.classes >= 1, "dataset: classes must be >= 1");
    return index % spec.classes;
}

Tensor toy_image(const ToyDatasetSpec& spec, int64_t index) {
    require(spec.size >= 2 && (spec.channels == 1 || spec.channels == 3),
            "dataset: size >= 2 and channels in {1,3}");
    const int64_t hw = spec.size, c = spec.channels, k = toy_label(spec, index);
    Rng rng(Rng::mix(Rng::mix(spec.seed, static_cast<uint64_t>(spec.gen)),
                     static_cast<uint64_t>(index) + 0x9137));
    Tensor img = Tensor::zeros({hw, hw, c});
    auto px = img.values_mut();
    auto set = [&](int64_t y, int64_t x2, int64_t ch, double v) {
        px[static_cast<size_t>((y * hw + x2) * c + ch)] = clamp01(v);
    };

    switch (spec.gen) {
        case Generator::smooth_gradients: {
            // dominant gradient direction encodes the class; an oblique
            // low-frequency bump breaks the patch-swap ties a pure ramp has
            const double theta = 2.0 * kPi * (static_cast<double>(k) + 0.5 +
                                              0.3 * (rng.uniform() - 0.5)) /
                                 static_cast<double>(spec.classes);
            const double slope = 0.30 + 0.10 * rng.uniform();
            const double amp = 0.08 + 0.08 * rng.uniform();
            const double fu = 0.7 + 0.8 * rng.uniform();
            const double fv = 0.7 + 0.8 * rng.uniform();
            const double p1 = 2.0 * kPi * rng.uniform();
            const double p2 = 2.0 * kPi * rng.uniform();
            const double base = 0.45 + 0.1 * rng.uniform();
            for (int64_t ch = 0; ch < c; ++ch) {
                const double chshift = 0.06 * static_cast<double>(ch);
                for (int64_t y = 0; y < hw; ++y)
                    for (int64_t x2 = 0; x2 < hw; ++x2) {
                        const double u = (static_cast<double>(x2) + 0.5) / static_cast<double>(hw) - 0.5;
                        const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(hw) - 0.5;
                        const double ramp = slope * 2.0 * (std::cos(theta) * u + std::sin(theta) * v);
                        const double bump = amp * std::sin(2.0 * kPi * fu * u + p1) *
                                            std::sin(2.0 * kPi * fv * v + p2);
                        set(y, x2, ch, base + chshift + ramp + bump);
                    }
            }
            break;
        }
        case Generator::gaussian_blobs: {
            // blob position encodes the class on a grid of cells
            const int64_t gx = spec.classes >= 4 ? 4 : spec.classes;
            const int64_t gy = (spec.classes + gx - 1) / gx;
            const double cx = (static_cast<double>(k % gx) + 0.35 + 0.3 * rng.uniform()) /
                              static_cast<double>(gx);
            const double cy = (static_cast<double>(k / gx) + 0.35 + 0.3 * rng.uniform()) /
                              static_cast<double>(gy);
            const double sigma = 0.10 + 0.06 * rng.uniform();
            const double amp = 0.7 + 0.3 * rng.uniform();
            const double bg = 0.08 + 0.06 * rng.uniform();
            for (int64_t ch = 0; ch < c; ++ch) {
                const double chscale = 1.0 - 0.15 * static_cast<double>(ch);
                for (int64_t y = 0; y < hw; ++y)
                    for (int64_t x2 = 0; x2 < hw; ++x2) {
                        const double u = (static_cast<double>(x2) + 0.5) / static_cast<double>(hw);
                        const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(hw);
                        const double d2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
                        set(y, x2, ch, bg + chscale * amp * std::exp(-d2 / (2.0 * sigma * sigma)));
                    }
            }
            break;
        }
        case Generator::checker_textures: {
            // checker frequency encodes the class; soft edges keep it smooth
            const double freq = 1.0 + 0.5 * static_cast<double>(k) + 0.2 * rng.uniform();
            const double phx = 2.0 * kPi * rng.uniform();
            const double phy = 2.0 * kPi * rng.uniform();
            for (int64_t ch = 0; ch < c; ++ch) {
                const double chshift = 0.05 * static_cast<double>(ch);
                for (int64_t y = 0; y < hw; ++y)
                    for (int64_t x2 = 0; x2 < hw; ++x2) {
                        const double u = (static_cast<double>(x2) + 0.5) / static_cast<double>(hw);
                        const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(hw);
                        const double s = std::sin(2.0 * kPi * freq * u + phx) *
                                         std::sin(2.0 * kPi * freq * v + phy);
                        set(y, x2, ch, 0.5 + chshift + 0.38 * std::tanh(2.5 * s));
                    }
            }
            break;
        }
    }
    return img;
}

ToyDataset synth_dataset(const ToyDatasetSpec& spec) {
    require(spec.count >= 1, "dataset: count must be >= 1");
    ToyDataset ds;
    ds.spec = spec;
    ds.images.reserve(static_cast<size_t>(spec.count));
    ds.labels.reserve(static_cast<size_t>(spec.count));
    for (int64_t i = 0; i < spec.count; ++i) {
        ds.images.push_back(toy_image(spec, i));
        ds.labels.push_back(toy_label(spec, i));
    }
    return ds;
}

Tensor ToyDataset::batch(const std::vector<int64_t>& indices) const {
    require(!indices.empty(), "dataset: empty batch");
    const int64_t hw = spec.size, c = spec.channels;
    Tensor out = Tensor::zeros({static_cast<int64_t>(indices.size()), hw, hw, c});
    auto dst = out.values_mut();
    const int64_t stride = hw * hw * c;
    for (size_t i = 0; i < indices.size(); ++i) {
        require(indices[i] >= 0 && indices[i] < static_cast<int64_t>(images.size()),
                "dataset: batch index out of range");
        const auto& img = images[static_cast<size_t>(indices[i])];
        std::copy(img.values().begin(), img.values().end(),
                  dst.begin() + static_cast<int64_t>(i) * stride);
    }
    return out;
}

void save_dataset(const ToyDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    ArchiveWriter w;
    char name[32];
    for (size_t i = 0; i < ds.images.size(); ++i) {
        std::snprintf(name, sizeof(name), "img_%05zu", i);
        w.add(name, ds.images[i]);
    }
    w.save(dir / "images.gvt");
    nlohmann::json j;
    j["generator"] = generator_name(ds.spec.gen);
    j["count"] = ds.spec.count;
    j["size"] = ds.spec.size;
    j["channels"] = ds.spec.channels;
    j["classes"] = ds.spec.classes;
    j["seed"] = ds.spec.seed;
    j["labels"] = ds.labels;
    std::ofstream out(dir / "labels.json", std::ios::trunc);
    require(out.good(), "dataset: cannot write labels.json");
    out << j.dump(2) << "\n";
}

ToyDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "labels.json");
    require(in.good(), "dataset: missing labels.json in " + dir.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), "dataset: malformed labels.json");
    ToyDataset ds;
    ds.spec.gen = generator_from_name(j.at("generator").get<std::string>());
    ds.spec.count = j.at("count").get<int64_t>();
    ds.spec.size = j.at("size").get<int64_t>();
    ds.spec.channels = j.at("channels").get<int64_t>();
    ds.spec.classes = j.at("classes").get<int64_t>();
    ds.spec.seed = j.at("seed").get<uint64_t>();
    ds.labels = j.at("labels").get<std::vector<int64_t>>();
    Archive a = Archive::load(dir / "images.gvt");
    char name[32];
    for (int64_t i = 0; i < ds.spec.count; ++i) {
        std::snprintf(name, sizeof(name), "img_%05lld", static_cast<long long>(i));
        ds.images.push_back(a.get(name));
    }
    require(ds.images.size() == ds.labels.size(), "dataset: image/label count mismatch");
    return ds;
}

std::vector<int64_t> pick_batch_unique_labels(const ToyDataset& ds, int64_t n, uint64_t seed) {
    require(n >= 1, "dataset: batch size must be >= 1");
    require(n <= ds.spec.classes,
            "dataset: cannot pick " + std::to_string(n) + " unique labels from " +
                std::to_string(ds.spec.classes) + " classes");
    std::vector<int64_t> order(ds.images.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::mix(seed, 0x4241544348ULL)); // "BATCH"
    for (size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[rng.below(i + 1)]);
    std::vector<int64_t> picked;
    std::vector<bool> used(static_cast<size_t>(ds.spec.classes), false);
    for (int64_t idx : order) {
        const int64_t lab = ds.labels[static_cast<size_t>(idx)];
        if (used[static_cast<size_t>(lab)]) continue;
        used[static_cast<size_t>(lab)] = true;
        picked.push_back(idx);
        if (static_cast<int64_t>(picked.size()) == n) break;
    }
    require(static_cast<int64_t>(picked.size()) == n,
            "dataset: not enough distinct labels in the dataset");
    return picked;
}

} // namespace gradleak
