#include "gradleak/prior.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "gradleak/archive.hpp"
#include "gradleak/hashing.hpp"
#include "gradleak/ops.hpp"
#include "gradleak/optim.hpp"
#include "gradleak/rng.hpp"

namespace gradleak {

void PriorConfig::validate() const {
    require(image_size > 0 && channels > 0 && num_classes > 0 && kernel > 0,
            "prior config: all dimensions must be positive");
    require(!widths.empty(), "prior config: at least one conv block");
    for (int64_t w : widths) require(w > 0, "prior config: block widths must be positive");
    require(kernel % 2 == 1, "prior config: kernel must be odd (same padding)");
}

uint64_t PriorConfig::hash() const {
    std::string s = "prior:" + std::to_string(image_size) + "," + std::to_string(channels) + "," +
                    std::to_string(num_classes) + "," + std::to_string(kernel);
    for (int64_t w : widths) s += ":" + std::to_string(w);
    return fnv1a64(s);
}

PriorCNN init_prior(const PriorConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(Rng::mix(seed, 0x5052494f525f4954ULL)); // "PRIOR_IT"
    PriorCNN p;
    p.config = cfg;
    int64_t cin = cfg.channels;
    for (int64_t cout : cfg.widths) {
        const double std_he = std::sqrt(2.0 / static_cast<double>(cfg.kernel * cfg.kernel * cin));
        Tensor w = Tensor::zeros({cfg.kernel, cfg.kernel, cin, cout});
        for (double& v : w.values_mut()) v = rng.truncated_normal(std_he);
        p.conv_w.push_back(w);
        p.bn_gamma.push_back(Tensor::full({cout}, 1.0));
        p.bn_beta.push_back(Tensor::zeros({cout}));
        p.stats.mean.push_back(Tensor::zeros({cout}));
        p.stats.var.push_back(Tensor::full({cout}, 1.0));
        cin = cout;
    }
    const double std_head = std::sqrt(1.0 / static_cast<double>(cin));
    p.head_w = Tensor::zeros({cin, cfg.num_classes});
    for (double& v : p.head_w.values_mut()) v = rng.truncated_normal(std_head);
    p.head_b = Tensor::zeros({cfg.num_classes});
    return p;
}

namespace {

Tensor maybe_resize(const PriorConfig& cfg, const Tensor& x) {
    require(x.rank() == 4, "prior: input must be NHWC");
    require(x.dim(3) == cfg.channels, "prior: channel count mismatch");
    if (x.dim(1) == cfg.image_size && x.dim(2) == cfg.image_size) return x;
    return resize_nearest(x, cfg.image_size, cfg.image_size);
}

Tensor bn_normalize(const Tensor& h, const Tensor& mu, const Tensor& var, const Tensor& gamma,
                    const Tensor& beta) {
    Tensor norm = div(sub(h, mu), sqrt(add(var, kBatchNormEps)));
    return add(mul(norm, gamma), beta);
}

Tensor head_logits(const PriorCNN& p, const Tensor& pooled) {
    return add(matmul(pooled, p.head_w), p.head_b);
}

} // namespace

Tensor prior_forward_train(PriorCNN& prior, const Tensor& x, PriorBatchStats* stats,
                           bool update_running) {
    const PriorConfig& cfg = prior.config;
    require(!update_running || !prior.stats_frozen,
            "prior: running statistics are frozen after pretraining");
    Tensor h = maybe_resize(cfg, x);
    const int pad = static_cast<int>(cfg.kernel / 2);
    for (size_t l = 0; l < prior.conv_w.size(); ++l) {
        h = conv2d(h, prior.conv_w[l], 1, pad);
        auto [mu, var] = batch_stats(h);
        if (stats) {
            stats->mean.push_back(mu);
            stats->var.push_back(var);
        }
        if (update_running) {
            // EMA, momentum 0.1
            auto rm = prior.stats.mean[l].values_mut();
            auto rv = prior.stats.var[l].values_mut();
            for (size_t c = 0; c < rm.size(); ++c) {
                rm[c] = 0.9 * rm[c] + 0.1 * mu.values()[c];
                rv[c] = 0.9 * rv[c] + 0.1 * var.values()[c];
            }
        }
        h = relu(bn_normalize(h, mu, var, prior.bn_gamma[l], prior.bn_beta[l]));
    }
    Tensor pooled = mean(h, {1, 2});
    return head_logits(prior, pooled);
}

PriorBatchStats prior_forward_stats(const PriorCNN& prior, const Tensor& x) {
    require(prior.stats_frozen, "prior_forward_stats: prior statistics are not frozen yet");
    require(x.dim(0) >= 1, "prior_forward_stats: empty batch");
    PriorBatchStats out;
    Tensor h = maybe_resize(prior.config, x);
    const int pad = static_cast<int>(prior.config.kernel / 2);
    for (size_t l = 0; l < prior.conv_w.size(); ++l) {
        h = conv2d(h, prior.conv_w[l], 1, pad);
        auto [mu, var] = batch_stats(h);
        out.mean.push_back(mu);
        out.var.push_back(var);
        h = relu(bn_normalize(h, mu, var, prior.bn_gamma[l], prior.bn_beta[l]));
    }
    return out;
}

Tensor prior_features(const PriorCNN& prior, const Tensor& x) {
    Tensor h = maybe_resize(prior.config, x);
    const int pad = static_cast<int>(prior.config.kernel / 2);
    for (size_t l = 0; l < prior.conv_w.size(); ++l) {
        h = conv2d(h, prior.conv_w[l], 1, pad);
        h = relu(bn_normalize(h, prior.stats.mean[l], prior.stats.var[l], prior.bn_gamma[l],
                              prior.bn_beta[l]));
    }
    return mean(h, {1, 2});
}

Tensor prior_logits_eval(const PriorCNN& prior, const Tensor& x) {
    return head_logits(prior, prior_features(prior, x));
}

PriorCNN pretrain_prior(const std::vector<Tensor>& images, const std::vector<int64_t>& labels,
                        const PriorConfig& cfg, int64_t epochs, uint64_t seed,
                        std::vector<double>* epoch_losses) {
    require(!images.empty(), "pretrain_prior: empty dataset");
    require(images.size() == labels.size(), "pretrain_prior: image/label count mismatch");
    require(epochs >= 1, "pretrain_prior: epochs must be >= 1");
    PriorCNN prior = init_prior(cfg, seed);

    std::vector<Tensor*> params;
    std::vector<AdamState> opt;
    auto reg = [&](Tensor& t) {
        t.set_requires_grad(true);
        params.push_back(&t);
        opt.emplace_back();
    };
    for (auto& w : prior.conv_w) reg(w);
    for (auto& g : prior.bn_gamma) reg(g);
    for (auto& b : prior.bn_beta) reg(b);
    reg(prior.head_w);
    reg(prior.head_b);

    const int64_t batch = std::min<int64_t>(16, static_cast<int64_t>(images.size()));
    const int64_t hw = cfg.image_size;
    Rng rng(Rng::mix(seed, 0x505249545241494eULL)); // "PRITRAIN"
    std::vector<size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    const double lr = 0.01;

    for (int64_t e = 0; e < epochs; ++e) {
        // Fisher-Yates with the deterministic stream
        for (size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[rng.below(i + 1)]);
        double loss_sum = 0.0;
        int64_t steps = 0;
        for (size_t start = 0; start + static_cast<size_t>(batch) <= order.size();
             start += static_cast<size_t>(batch)) {
            Tensor xb = Tensor::zeros({batch, hw, hw, cfg.channels});
            std::vector<int64_t> yb(static_cast<size_t>(batch));
            for (int64_t i = 0; i < batch; ++i) {
                const Tensor& img = images[order[start + static_cast<size_t>(i)]];
                require(img.rank() == 3 && img.dim(0) == hw && img.dim(1) == hw &&
                            img.dim(2) == cfg.channels,
                        "pretrain_prior: image shape mismatch");
                std::copy(img.values().begin(), img.values().end(),
                          xb.values_mut().begin() + i * hw * hw * cfg.channels);
                yb[static_cast<size_t>(i)] = labels[order[start + static_cast<size_t>(i)]];
            }
            Tape tape;
            {
                Tape::Scope scope(tape);
                Tensor logits = prior_forward_train(prior, xb, nullptr, true);
                Tensor loss = cross_entropy(logits, yb);
                tape.backward(loss);
                loss_sum += loss.item();
            }
            for (size_t pi = 0; pi < params.size(); ++pi) {
                if (params[pi]->has_grad()) opt[pi].step(*params[pi], params[pi]->grad(), lr);
                params[pi]->zero_grad();
            }
            ++steps;
        }
        if (epoch_losses) epoch_losses->push_back(steps ? loss_sum / static_cast<double>(steps) : 0.0);
    }
    for (auto& t : prior.conv_w) t.set_requires_grad(false);
    for (auto& t : prior.bn_gamma) t.set_requires_grad(false);
    for (auto& t : prior.bn_beta) t.set_requires_grad(false);
    prior.head_w.set_requires_grad(false);
    prior.head_b.set_requires_grad(false);
    prior.stats_frozen = true;
    for (const auto& v : prior.stats.var)
        for (double s : v.values())
            require(s >= 0.0, "pretrain_prior: negative running variance");
    return prior;
}

namespace {

nlohmann::json prior_config_json(const PriorConfig& c) {
    return {{"image_size", c.image_size},
            {"channels", c.channels},
            {"num_classes", c.num_classes},
            {"kernel", c.kernel},
            {"widths", c.widths}};
}

PriorConfig prior_config_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"image_size", "channels", "num_classes",
                                                   "kernel", "widths"};
    for (auto it = j.begin(); it != j.end(); ++it)
        require(std::find(known.begin(), known.end(), it.key()) != known.end(),
                "prior config: unknown key '" + it.key() + "'");
    PriorConfig c;
    c.image_size = j.at("image_size").get<int64_t>();
    c.channels = j.at("channels").get<int64_t>();
    c.num_classes = j.at("num_classes").get<int64_t>();
    c.kernel = j.at("kernel").get<int64_t>();
    c.widths = j.at("widths").get<std::vector<int64_t>>();
    c.validate();
    return c;
}

} // namespace

void save_prior(const PriorCNN& prior, const std::filesystem::path& path) {
    ArchiveWriter w;
    for (size_t l = 0; l < prior.conv_w.size(); ++l) {
        const std::string pre = "prior/block" + std::to_string(l) + "/";
        w.add(pre + "conv_weight", prior.conv_w[l]);
        w.add(pre + "bn_gamma", prior.bn_gamma[l]);
        w.add(pre + "bn_beta", prior.bn_beta[l]);
        w.add("prior_stats/block" + std::to_string(l) + "/mean", prior.stats.mean[l]);
        w.add("prior_stats/block" + std::to_string(l) + "/var", prior.stats.var[l]);
    }
    w.add("prior/head_weight", prior.head_w);
    w.add("prior/head_bias", prior.head_b);
    w.save(path);
    std::ofstream out(path.string() + ".json", std::ios::trunc);
    require(out.good(), "save_prior: cannot write config sidecar");
    nlohmann::json j = prior_config_json(prior.config);
    j["stats_frozen"] = prior.stats_frozen;
    out << j.dump(2) << "\n";
}

PriorCNN load_prior(const std::filesystem::path& path) {
    std::ifstream in(path.string() + ".json");
    require(in.good(), "load_prior: missing config sidecar " + path.string() + ".json");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), "load_prior: malformed config sidecar");
    bool frozen = j.value("stats_frozen", true);
    j.erase("stats_frozen");
    PriorConfig cfg = prior_config_from_json(j);
    Archive a = Archive::load(path);
    PriorCNN p = init_prior(cfg, 0);
    for (size_t l = 0; l < p.conv_w.size(); ++l) {
        const std::string pre = "prior/block" + std::to_string(l) + "/";
        p.conv_w[l] = a.get(pre + "conv_weight");
        p.bn_gamma[l] = a.get(pre + "bn_gamma");
        p.bn_beta[l] = a.get(pre + "bn_beta");
        p.stats.mean[l] = a.get("prior_stats/block" + std::to_string(l) + "/mean");
        p.stats.var[l] = a.get("prior_stats/block" + std::to_string(l) + "/var");
    }
    p.head_w = a.get("prior/head_weight");
    p.head_b = a.get("prior/head_bias");
    p.stats_frozen = frozen;
    return p;
}

} // namespace gradleak
