#include "gradleak/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "gradleak/hashing.hpp"
#include "gradleak/ops.hpp"
#include "gradleak/optim.hpp"
#include "gradleak/rng.hpp"

namespace gradleak {

namespace {

constexpr double kLnEps = 1e-6;
constexpr double kGeluC = 0.7978845608028653979; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

Tensor flat2(const Tensor& t, int64_t rows, int64_t cols) { return reshape(t, {rows, cols}); }

} // namespace

void ViTConfig::validate() const {
    require(image_size > 0 && channels > 0 && patch_size > 0 && embed_dim > 0 && depth > 0 &&
                heads > 0 && mlp_ratio > 0 && num_classes > 0,
            "vit config: all dimensions must be positive");
    require(image_size % patch_size == 0, "vit config: patch size must divide image size");
    require(embed_dim % heads == 0, "vit config: heads must divide embed dim");
}

uint64_t ViTConfig::hash() const {
    std::string s = "vit:" + std::to_string(image_size) + "," + std::to_string(channels) + "," +
                    std::to_string(patch_size) + "," + std::to_string(embed_dim) + "," +
                    std::to_string(depth) + "," + std::to_string(heads) + "," +
                    std::to_string(mlp_ratio) + "," + std::to_string(num_classes);
    return fnv1a64(s);
}

namespace {

template <class Params, class Fn>
void visit_params(Params& p, Fn&& fn) {
    fn("patch_embed/weight", p.patch_embed_w);
    fn("patch_embed/bias", p.patch_embed_b);
    fn("cls_token", p.cls_token);
    fn("pos_embed", p.pos_embed);
    for (size_t l = 0; l < p.layers.size(); ++l) {
        const std::string pre = "layer" + std::to_string(l) + "/";
        auto& L = p.layers[l];
        fn(pre + "ln1/gamma", L.ln1_gamma);
        fn(pre + "ln1/beta", L.ln1_beta);
        fn(pre + "msa/q_weight", L.q_w);
        fn(pre + "msa/q_bias", L.q_b);
        fn(pre + "msa/k_weight", L.k_w);
        fn(pre + "msa/k_bias", L.k_b);
        fn(pre + "msa/v_weight", L.v_w);
        fn(pre + "msa/v_bias", L.v_b);
        fn(pre + "msa/out_weight", L.out_w);
        fn(pre + "msa/out_bias", L.out_b);
        fn(pre + "ln2/gamma", L.ln2_gamma);
        fn(pre + "ln2/beta", L.ln2_beta);
        fn(pre + "mlp/fc1_weight", L.fc1_w);
        fn(pre + "mlp/fc1_bias", L.fc1_b);
        fn(pre + "mlp/fc2_weight", L.fc2_w);
        fn(pre + "mlp/fc2_bias", L.fc2_b);
    }
    fn("final_ln/gamma", p.final_ln_gamma);
    fn("final_ln/beta", p.final_ln_beta);
    fn("head/weight", p.head_w);
    fn("head/bias", p.head_b);
}

} // namespace

void for_each_param(ViTParams& p, const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_params(p, fn);
}

void for_each_param(const ViTParams& p,
                    const std::function<void(const std::string&, const Tensor&)>& fn) {
    visit_params(p, fn);
}

std::vector<std::string> param_names(const ViTConfig& cfg) {
    ViTParams p; // tensors stay undefined; only the visit order matters
    p.config = cfg;
    p.layers.resize(static_cast<size_t>(cfg.depth));
    std::vector<std::string> names;
    for_each_param(p, [&](const std::string& n, Tensor&) { names.push_back(n); });
    return names;
}

ViTParams init_vit(const ViTConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(Rng::mix(seed, 0x5649545f494e4954ULL)); // "VIT_INIT"
    const int64_t d = cfg.embed_dim;
    const int64_t hid = cfg.mlp_ratio * d;
    auto tn = [&](Shape shape) {
        Tensor t = Tensor::zeros(shape);
        for (double& v : t.values_mut()) v = rng.truncated_normal(0.02);
        return t;
    };
    ViTParams p;
    p.config = cfg;
    p.patch_embed_w = tn({cfg.patch_len(), d});
    p.patch_embed_b = Tensor::zeros({d});
    p.cls_token = Tensor::zeros({d});
    p.pos_embed = Tensor::zeros({cfg.tokens(), d});
    p.layers.resize(static_cast<size_t>(cfg.depth));
    for (auto& L : p.layers) {
        L.ln1_gamma = Tensor::full({d}, 1.0);
        L.ln1_beta = Tensor::zeros({d});
        L.q_w = tn({d, d});
        L.q_b = Tensor::zeros({d});
        L.k_w = tn({d, d});
        L.k_b = Tensor::zeros({d});
        L.v_w = tn({d, d});
        L.v_b = Tensor::zeros({d});
        L.out_w = tn({d, d});
        L.out_b = Tensor::zeros({d});
        L.ln2_gamma = Tensor::full({d}, 1.0);
        L.ln2_beta = Tensor::zeros({d});
        L.fc1_w = tn({d, hid});
        L.fc1_b = Tensor::zeros({hid});
        L.fc2_w = tn({hid, d});
        L.fc2_b = Tensor::zeros({d});
    }
    p.final_ln_gamma = Tensor::full({d}, 1.0);
    p.final_ln_beta = Tensor::zeros({d});
    p.head_w = tn({d, cfg.num_classes});
    p.head_b = Tensor::zeros({cfg.num_classes});
    return p;
}

namespace {

Tensor linear3(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), b);
}

Tensor affine(const Tensor& n, const Tensor& gamma, const Tensor& beta) {
    return add(mul(n, gamma), beta);
}

Tensor split_heads(const Tensor& t, int64_t n, int64_t tok, int64_t heads, int64_t dh) {
    return transpose(reshape(t, {n, tok, heads, dh}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& t, int64_t n, int64_t tok, int64_t d) {
    return reshape(transpose(t, {0, 2, 1, 3}), {n, tok, d});
}

} // namespace

Tensor vit_forward(const ViTParams& params, const Tensor& x, VitTrace* trace) {
    const ViTConfig& cfg = params.config;
    cfg.validate();
    require(x.rank() == 4 && x.dim(1) == cfg.image_size && x.dim(2) == cfg.image_size &&
                x.dim(3) == cfg.channels,
            "vit_forward: input shape " + shape_str(x.shape()) + " does not match config");
    const int64_t n = x.dim(0);
    const int64_t d = cfg.embed_dim;
    const int64_t t = cfg.tokens();
    const int64_t nh = cfg.heads;
    const int64_t dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor patches = extract_patches(x, cfg.patch_size);
    Tensor tok = linear3(patches, params.patch_embed_w, params.patch_embed_b);
    Tensor cls = broadcast_to(reshape(params.cls_token, {1, 1, d}), {n, 1, d});
    Tensor h = add(concat({cls, tok}, 1), params.pos_embed);
    if (trace) {
        trace->patches = patches;
        trace->h0 = h;
        trace->layers.clear();
    }
    for (const auto& L : params.layers) {
        VitTrace::Layer tl;
        tl.h_in = h;
        tl.n1 = layer_norm(h, -1, kLnEps);
        tl.a1 = affine(tl.n1, L.ln1_gamma, L.ln1_beta);
        Tensor q = linear3(tl.a1, L.q_w, L.q_b);
        Tensor k = linear3(tl.a1, L.k_w, L.k_b);
        Tensor v = linear3(tl.a1, L.v_w, L.v_b);
        tl.qh = split_heads(q, n, t, nh, dh);
        tl.kh = split_heads(k, n, t, nh, dh);
        tl.vh = split_heads(v, n, t, nh, dh);
        Tensor scores = mul(matmul(tl.qh, transpose(tl.kh)), scale);
        tl.attn_p = softmax(scores, -1);
        Tensor o = matmul(tl.attn_p, tl.vh);
        tl.o2 = merge_heads(o, n, t, d);
        Tensor attn_out = linear3(tl.o2, L.out_w, L.out_b);
        tl.h_mid = add(h, attn_out);
        tl.n2 = layer_norm(tl.h_mid, -1, kLnEps);
        tl.a2 = affine(tl.n2, L.ln2_gamma, L.ln2_beta);
        tl.m1 = linear3(tl.a2, L.fc1_w, L.fc1_b);
        tl.act = gelu(tl.m1);
        Tensor m2 = linear3(tl.act, L.fc2_w, L.fc2_b);
        tl.h_out = add(tl.h_mid, m2);
        h = tl.h_out;
        if (trace) trace->layers.push_back(tl);
    }
    Tensor nf = layer_norm(h, -1, kLnEps);
    Tensor af = affine(nf, params.final_ln_gamma, params.final_ln_beta);
    Tensor hcls = reshape(slice(af, {0, 0, 0}, {n, 1, d}), {n, d});
    Tensor logits = linear3(hcls, params.head_w, params.head_b);
    if (trace) {
        trace->nf = nf;
        trace->af = af;
        trace->hcls = hcls;
        trace->logits = logits;
    }
    return logits;
}

const Tensor& GradientCapture::grad(const std::string& name) const {
    return grads[static_cast<size_t>(index_of(name))];
}

int64_t GradientCapture::index_of(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int64_t>(i);
    throw ContractViolation("capture: no gradient entry named '" + name + "'");
}

GradientCapture capture_gradients(const ViTParams& params, const Tensor& x,
                                  const std::vector<int64_t>& y) {
    ViTParams live = params;
    for_each_param(live, [](const std::string&, Tensor& t) {
        t = t.clone();
        t.set_requires_grad(true);
    });
    Tape tape;
    GradientCapture cap;
    cap.config_hash = params.config.hash();
    cap.batch_size = x.dim(0);
    {
        Tape::Scope scope(tape);
        Tensor logits = vit_forward(live, x);
        Tensor loss = cross_entropy(logits, y);
        tape.backward(loss);
    }
    for_each_param(live, [&](const std::string& name, Tensor& t) {
        cap.names.push_back(name);
        cap.grads.push_back(t.has_grad() ? t.grad_tensor() : Tensor::zeros(t.shape()));
    });
    return cap;
}

namespace {

// dx of y = layer_norm(x) given dy, with x and y from the forward trace
Tensor ln_adjoint(const Tensor& dy, const Tensor& x_in, const Tensor& y_norm) {
    Tensor v = variance(x_in, {-1}, true);
    Tensor s = sqrt(add(v, kLnEps));
    Tensor mg = mean(dy, {-1}, true);
    Tensor mgy = mean(mul(dy, y_norm), {-1}, true);
    return div(sub(sub(dy, mg), mul(y_norm, mgy)), s);
}

Tensor gelu_prime(const Tensor& x) {
    Tensor x2 = mul(x, x);
    Tensor u = mul(add(x, mul(mul(x2, x), kGeluA)), kGeluC);
    Tensor t = tanh(u);
    Tensor one_minus_t2 = add(mul(mul(t, t), -1.0), 1.0);
    Tensor du = mul(add(mul(x2, 3.0 * kGeluA), 1.0), kGeluC);
    return add(mul(add(t, 1.0), 0.5), mul(mul(mul(x, one_minus_t2), du), 0.5));
}

} // namespace

std::vector<Tensor> vit_param_grads(const ViTParams& params, const Tensor& x,
                                    const std::vector<int64_t>& y) {
    const ViTConfig& cfg = params.config;
    const int64_t n = x.dim(0);
    const int64_t d = cfg.embed_dim;
    const int64_t t = cfg.tokens();
    const int64_t nh = cfg.heads;
    const int64_t hd = d / nh;
    const int64_t nt = n * t;
    const int64_t hid = cfg.mlp_ratio * d;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    require(static_cast<int64_t>(y.size()) == n, "vit_param_grads: label count mismatch");

    VitTrace tr;
    (void)vit_forward(params, x, &tr);

    std::vector<std::pair<std::string, Tensor>> out;
    auto emit = [&](const std::string& name, Tensor g) { out.emplace_back(name, std::move(g)); };

    // cross-entropy: dlogits = (softmax - onehot) / N
    Tensor onehot = Tensor::zeros({n, cfg.num_classes});
    for (int64_t i = 0; i < n; ++i) {
        require(y[static_cast<size_t>(i)] >= 0 && y[static_cast<size_t>(i)] < cfg.num_classes,
                "vit_param_grads: label out of range");
        onehot.values_mut()[static_cast<size_t>(i * cfg.num_classes + y[static_cast<size_t>(i)])] =
            1.0;
    }
    Tensor probs = softmax(tr.logits, -1);
    Tensor dlogits = mul(sub(probs, onehot), 1.0 / static_cast<double>(n));

    emit("head/weight", matmul(transpose(tr.hcls), dlogits));
    emit("head/bias", sum(dlogits, {0}));
    Tensor dhcls = matmul(dlogits, transpose(params.head_w));

    Tensor daf = concat({reshape(dhcls, {n, 1, d}), Tensor::zeros({n, t - 1, d})}, 1);
    emit("final_ln/gamma", sum(mul(daf, tr.nf), {0, 1}));
    emit("final_ln/beta", sum(daf, {0, 1}));
    Tensor dnf = mul(daf, params.final_ln_gamma);
    Tensor dh = ln_adjoint(dnf, tr.layers.back().h_out, tr.nf);

    for (int64_t l = cfg.depth - 1; l >= 0; --l) {
        const auto& L = params.layers[static_cast<size_t>(l)];
        const auto& tl = tr.layers[static_cast<size_t>(l)];
        const std::string pre = "layer" + std::to_string(l) + "/";

        // MLP branch
        Tensor dm2 = dh;
        emit(pre + "mlp/fc2_weight", matmul(transpose(flat2(tl.act, nt, hid)), flat2(dm2, nt, d)));
        emit(pre + "mlp/fc2_bias", sum(dm2, {0, 1}));
        Tensor dact = matmul(dm2, transpose(L.fc2_w));
        Tensor dm1 = mul(dact, gelu_prime(tl.m1));
        emit(pre + "mlp/fc1_weight", matmul(transpose(flat2(tl.a2, nt, d)), flat2(dm1, nt, hid)));
        emit(pre + "mlp/fc1_bias", sum(dm1, {0, 1}));
        Tensor da2 = matmul(dm1, transpose(L.fc1_w));
        emit(pre + "ln2/gamma", sum(mul(da2, tl.n2), {0, 1}));
        emit(pre + "ln2/beta", sum(da2, {0, 1}));
        Tensor dn2 = mul(da2, L.ln2_gamma);
        Tensor dh_mid = add(dh, ln_adjoint(dn2, tl.h_mid, tl.n2));

        // attention branch
        Tensor dattn = dh_mid;
        emit(pre + "msa/out_weight",
             matmul(transpose(flat2(tl.o2, nt, d)), flat2(dattn, nt, d)));
        emit(pre + "msa/out_bias", sum(dattn, {0, 1}));
        Tensor do2 = matmul(dattn, transpose(L.out_w));
        Tensor doh = split_heads(do2, n, t, nh, hd);
        Tensor dp = matmul(doh, transpose(tl.vh));
        Tensor dvh = matmul(transpose(tl.attn_p), doh);
        Tensor dscores =
            mul(tl.attn_p, sub(dp, sum(mul(dp, tl.attn_p), {3}, true)));
        Tensor dqh = mul(matmul(dscores, tl.kh), scale);
        Tensor dkh = mul(matmul(transpose(dscores), tl.qh), scale);
        Tensor dq = merge_heads(dqh, n, t, d);
        Tensor dk = merge_heads(dkh, n, t, d);
        Tensor dv = merge_heads(dvh, n, t, d);
        emit(pre + "msa/q_weight", matmul(transpose(flat2(tl.a1, nt, d)), flat2(dq, nt, d)));
        emit(pre + "msa/q_bias", sum(dq, {0, 1}));
        emit(pre + "msa/k_weight", matmul(transpose(flat2(tl.a1, nt, d)), flat2(dk, nt, d)));
        emit(pre + "msa/k_bias", sum(dk, {0, 1}));
        emit(pre + "msa/v_weight", matmul(transpose(flat2(tl.a1, nt, d)), flat2(dv, nt, d)));
        emit(pre + "msa/v_bias", sum(dv, {0, 1}));
        Tensor da1 = add(add(matmul(dq, transpose(L.q_w)), matmul(dk, transpose(L.k_w))),
                         matmul(dv, transpose(L.v_w)));
        emit(pre + "ln1/gamma", sum(mul(da1, tl.n1), {0, 1}));
        emit(pre + "ln1/beta", sum(da1, {0, 1}));
        Tensor dn1 = mul(da1, L.ln1_gamma);
        dh = add(dh_mid, ln_adjoint(dn1, tl.h_in, tl.n1));
    }

    // embeddings
    emit("pos_embed", sum(dh, {0}));
    emit("cls_token", sum(slice(dh, {0, 0, 0}, {n, 1, d}), {0, 1}));
    Tensor dtok = slice(dh, {0, 1, 0}, {n, t, d});
    emit("patch_embed/weight", matmul(transpose(flat2(tr.patches, n * (t - 1), cfg.patch_len())),
                                      flat2(dtok, n * (t - 1), d)));
    emit("patch_embed/bias", sum(dtok, {0, 1}));

    // order per the fixed enumeration
    std::vector<Tensor> ordered;
    for (const std::string& name : param_names(cfg)) {
        bool found = false;
        for (auto& [n2, g] : out) {
            if (n2 == name) {
                ordered.push_back(g);
                found = true;
                break;
            }
        }
        require(found, "vit_param_grads: missing gradient for '" + name + "'");
    }
    return ordered;
}

ViTParams train_vit(const std::vector<Tensor>& images, const std::vector<int64_t>& labels,
                    const ViTConfig& cfg, int64_t epochs, uint64_t seed,
                    std::vector<double>* epoch_losses) {
    require(!images.empty() && images.size() == labels.size(),
            "train_vit: dataset empty or image/label counts differ");
    require(epochs >= 1, "train_vit: epochs must be >= 1");
    ViTParams params = init_vit(cfg, seed);
    std::vector<Tensor*> leafs;
    std::vector<AdamState> opt;
    for_each_param(params, [&](const std::string&, Tensor& t) {
        t.set_requires_grad(true);
        leafs.push_back(&t);
        opt.emplace_back();
    });
    const int64_t batch = std::min<int64_t>(16, static_cast<int64_t>(images.size()));
    const int64_t hw = cfg.image_size;
    const double lr = 1e-3;
    Rng rng(Rng::mix(seed, 0x564954545241494eULL)); // "VITTRAIN"
    std::vector<size_t> order(images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int64_t e = 0; e < epochs; ++e) {
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
                std::copy(img.values().begin(), img.values().end(),
                          xb.values_mut().begin() + i * hw * hw * cfg.channels);
                yb[static_cast<size_t>(i)] = labels[order[start + static_cast<size_t>(i)]];
            }
            Tape tape;
            {
                Tape::Scope scope(tape);
                Tensor loss = cross_entropy(vit_forward(params, xb), yb);
                tape.backward(loss);
                loss_sum += loss.item();
            }
            for (size_t pi = 0; pi < leafs.size(); ++pi) {
                if (leafs[pi]->has_grad()) opt[pi].step(*leafs[pi], leafs[pi]->grad(), lr);
                leafs[pi]->zero_grad();
            }
            ++steps;
        }
        if (epoch_losses)
            epoch_losses->push_back(steps ? loss_sum / static_cast<double>(steps) : 0.0);
    }
    for (Tensor* t : leafs) t->set_requires_grad(false);
    return params;
}

namespace {

void to_json(nlohmann::json& j, const ViTConfig& c) {
    j = {{"image_size", c.image_size}, {"channels", c.channels},
         {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
         {"depth", c.depth},           {"heads", c.heads},
         {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}};
}

} // namespace

ViTConfig vit_config_from_json(const nlohmann::json& j);

ViTConfig vit_config_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"image_size", "channels",  "patch_size",
                                                   "embed_dim",  "depth",     "heads",
                                                   "mlp_ratio",  "num_classes"};
    for (auto it = j.begin(); it != j.end(); ++it)
        require(std::find(known.begin(), known.end(), it.key()) != known.end(),
                "vit config: unknown key '" + it.key() + "'");
    ViTConfig c;
    c.image_size = j.at("image_size").get<int64_t>();
    c.channels = j.at("channels").get<int64_t>();
    c.patch_size = j.at("patch_size").get<int64_t>();
    c.embed_dim = j.at("embed_dim").get<int64_t>();
    c.depth = j.at("depth").get<int64_t>();
    c.heads = j.at("heads").get<int64_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<int64_t>();
    c.num_classes = j.at("num_classes").get<int64_t>();
    c.validate();
    return c;
}

void save_vit(const ViTParams& params, const std::filesystem::path& path) {
    ArchiveWriter w;
    for_each_param(params,
                   [&](const std::string& name, const Tensor& t) { w.add("vit/" + name, t); });
    w.save(path);
    nlohmann::json j;
    to_json(j, params.config);
    std::ofstream out(path.string() + ".json", std::ios::trunc);
    require(out.good(), "save_vit: cannot write config sidecar");
    out << j.dump(2) << "\n";
}

ViTParams load_vit(const std::filesystem::path& path) {
    std::ifstream in(path.string() + ".json");
    require(in.good(), "load_vit: missing config sidecar " + path.string() + ".json");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), "load_vit: malformed config sidecar");
    ViTConfig cfg = vit_config_from_json(j);
    Archive a = Archive::load(path);
    ViTParams p = init_vit(cfg, 0);
    for_each_param(p, [&](const std::string& name, Tensor& t) {
        Tensor loaded = a.get("vit/" + name);
        require(loaded.shape() == t.shape(),
                "load_vit: shape mismatch for '" + name + "'");
        t = loaded;
    });
    return p;
}

} // namespace gradleak
