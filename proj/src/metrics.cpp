#include "gradleak/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gradleak/ops.hpp"

namespace gradleak {

namespace {

constexpr double kPi = 3.14159265358979323846;

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

double pair_l2(const Tensor& a, int64_t i, const Tensor& b, int64_t j) {
    const int64_t stride = a.numel() / a.dim(0);
    const double* av = a.values().data() + i * stride;
    const double* bv = b.values().data() + j * stride;
    double s = 0;
    for (int64_t q = 0; q < stride; ++q) s += (av[q] - bv[q]) * (av[q] - bv[q]);
    return std::sqrt(s);
}

double mse_clamped(const double* a, const double* b, int64_t count) {
    double s = 0;
    for (int64_t i = 0; i < count; ++i) {
        const double d = clamp01(a[i]) - clamp01(b[i]);
        s += d * d;
    }
    return s / static_cast<double>(count);
}

// row-column decomposition of the 2-D DFT; returns |F| flattened
std::vector<double> dft2_magnitude(const double* img, int64_t h, int64_t w, int64_t stride) {
    std::vector<double> re(static_cast<size_t>(h * w)), im(static_cast<size_t>(h * w));
    // rows
    std::vector<double> rre(static_cast<size_t>(w)), rim(static_cast<size_t>(w));
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t k = 0; k < w; ++k) {
            double sr = 0, si = 0;
            for (int64_t x = 0; x < w; ++x) {
                const double ang = -2.0 * kPi * static_cast<double>(k * x) / static_cast<double>(w);
                const double v = img[(y * w + x) * stride];
                sr += v * std::cos(ang);
                si += v * std::sin(ang);
            }
            rre[static_cast<size_t>(k)] = sr;
            rim[static_cast<size_t>(k)] = si;
        }
        for (int64_t k = 0; k < w; ++k) {
            re[static_cast<size_t>(y * w + k)] = rre[static_cast<size_t>(k)];
            im[static_cast<size_t>(y * w + k)] = rim[static_cast<size_t>(k)];
        }
    }
    // columns
    std::vector<double> cre(static_cast<size_t>(h)), cim(static_cast<size_t>(h));
    for (int64_t k = 0; k < w; ++k) {
        for (int64_t m = 0; m < h; ++m) {
            double sr = 0, si = 0;
            for (int64_t y = 0; y < h; ++y) {
                const double ang = -2.0 * kPi * static_cast<double>(m * y) / static_cast<double>(h);
                const double c = std::cos(ang), s = std::sin(ang);
                const double vr = re[static_cast<size_t>(y * w + k)];
                const double vi = im[static_cast<size_t>(y * w + k)];
                sr += vr * c - vi * s;
                si += vr * s + vi * c;
            }
            cre[static_cast<size_t>(m)] = sr;
            cim[static_cast<size_t>(m)] = si;
        }
        for (int64_t m = 0; m < h; ++m) {
            re[static_cast<size_t>(m * w + k)] = cre[static_cast<size_t>(m)];
            im[static_cast<size_t>(m * w + k)] = cim[static_cast<size_t>(m)];
        }
    }
    std::vector<double> mag(static_cast<size_t>(h * w));
    for (size_t i = 0; i < mag.size(); ++i) mag[i] = std::hypot(re[i], im[i]);
    return mag;
}

} // namespace

std::vector<int64_t> hungarian(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    for (const auto& row : cost)
        require(static_cast<int>(row.size()) == n, "hungarian: cost matrix must be square");
    // potentials formulation, O(n^3)
    std::vector<double> u(static_cast<size_t>(n + 1)), v(static_cast<size_t>(n + 1));
    std::vector<int> p(static_cast<size_t>(n + 1)), way(static_cast<size_t>(n + 1));
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n + 1),
                                 std::numeric_limits<double>::infinity());
        std::vector<char> used(static_cast<size_t>(n + 1), 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            const int i0 = p[static_cast<size_t>(j0)];
            int j1 = 0;
            double delta = std::numeric_limits<double>::infinity();
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                const double cur = cost[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                                   u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int64_t> out(static_cast<size_t>(n), -1);
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<size_t>(j)]) out[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
    return out;
}

std::vector<int64_t> assign(const Tensor& recons, const Tensor& originals) {
    require(recons.rank() == 4 && originals.rank() == 4, "assign: batches must be NHWC");
    require(recons.shape() == originals.shape(), "assign: batch shapes must match");
    const int64_t n = recons.dim(0);
    require(n <= 12, "assign: batch sizes above 12 are unsupported");
    std::vector<std::vector<double>> cost(static_cast<size_t>(n),
                                          std::vector<double>(static_cast<size_t>(n)));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            cost[static_cast<size_t>(i)][static_cast<size_t>(j)] = pair_l2(recons, i, originals, j);
    if (n <= 8) {
        std::vector<int64_t> perm(static_cast<size_t>(n)), best;
        std::iota(perm.begin(), perm.end(), 0);
        double best_cost = std::numeric_limits<double>::infinity();
        do {
            double c = 0;
            for (int64_t i = 0; i < n; ++i)
                c += cost[static_cast<size_t>(i)][static_cast<size_t>(perm[static_cast<size_t>(i)])];
            if (c < best_cost) {
                best_cost = c;
                best = perm;
            }
        } while (std::next_permutation(perm.begin(), perm.end()));
        return best;
    }
    return hungarian(cost);
}

double psnr(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "psnr: shape mismatch");
    const double mse = mse_clamped(a.values().data(), b.values().data(), a.numel());
    if (mse == 0.0) return kPsnrSentinelDb;
    return std::min(kPsnrSentinelDb, 10.0 * std::log10(1.0 / mse));
}

std::vector<double> psnr_per_image(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape() && a.rank() == 4, "psnr_per_image: NHWC batches required");
    const int64_t n = a.dim(0), stride = a.numel() / n;
    std::vector<double> out;
    for (int64_t i = 0; i < n; ++i) {
        const double mse =
            mse_clamped(a.values().data() + i * stride, b.values().data() + i * stride, stride);
        out.push_back(mse == 0.0 ? kPsnrSentinelDb
                                 : std::min(kPsnrSentinelDb, 10.0 * std::log10(1.0 / mse)));
    }
    return out;
}

double fft2d_distance(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape() && a.rank() == 4, "fft2d_distance: NHWC batches required");
    const int64_t n = a.dim(0), h = a.dim(1), w = a.dim(2), c = a.dim(3);
    double total = 0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            std::vector<double> ca(static_cast<size_t>(h * w)), cb(static_cast<size_t>(h * w));
            for (int64_t q = 0; q < h * w; ++q) {
                ca[static_cast<size_t>(q)] =
                    clamp01(a.values()[static_cast<size_t>((i * h * w + q) * c + ch)]);
                cb[static_cast<size_t>(q)] =
                    clamp01(b.values()[static_cast<size_t>((i * h * w + q) * c + ch)]);
            }
            auto ma = dft2_magnitude(ca.data(), h, w, 1);
            auto mb = dft2_magnitude(cb.data(), h, w, 1);
            double dot = 0, na = 0, nb = 0;
            for (size_t q = 0; q < ma.size(); ++q) {
                dot += ma[q] * mb[q];
                na += ma[q] * ma[q];
                nb += mb[q] * mb[q];
            }
            double cos_sim;
            if (na == 0.0 && nb == 0.0)
                cos_sim = 1.0; // both spectra empty: distance 0
            else if (na == 0.0 || nb == 0.0)
                cos_sim = 0.0;
            else
                cos_sim = dot / (std::sqrt(na) * std::sqrt(nb));
            total += 1.0 - cos_sim;
        }
    return total / static_cast<double>(n * c);
}

namespace {

Tensor clamped_batch(const Tensor& t) {
    Tensor out = t.detach();
    for (double& v : out.values_mut()) v = clamp01(v);
    return out;
}

} // namespace

double feature_distance(const Tensor& a, const Tensor& b, const PriorCNN& prior) {
    require(a.shape() == b.shape() && a.rank() == 4, "feature_distance: NHWC batches required");
    Tensor fa = prior_features(prior, clamped_batch(a));
    Tensor fb = prior_features(prior, clamped_batch(b));
    const int64_t n = fa.dim(0), f = fa.dim(1);
    double total = 0;
    for (int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int64_t q = 0; q < f; ++q) {
            const double d = fa.values()[static_cast<size_t>(i * f + q)] -
                             fb.values()[static_cast<size_t>(i * f + q)];
            s += d * d;
        }
        total += std::sqrt(s);
    }
    return total / static_cast<double>(n);
}

double iip(const Tensor& recons, const std::vector<Tensor>& gallery,
           const std::vector<int64_t>& own_index, const PriorCNN& prior) {
    const int64_t n = recons.dim(0);
    require(static_cast<int64_t>(own_index.size()) == n, "iip: own_index size mismatch");
    require(static_cast<int64_t>(gallery.size()) >= n,
            "iip: gallery smaller than the batch");
    Tensor fr = prior_features(prior, clamped_batch(recons));
    const int64_t f = fr.dim(1);
    // gallery embeddings one at a time (eval mode is per-sample pure)
    std::vector<std::vector<double>> gf;
    for (const Tensor& img : gallery) {
        Tensor batch1 = reshape(img, {1, img.dim(0), img.dim(1), img.dim(2)});
        Tensor e = prior_features(prior, clamped_batch(batch1));
        gf.emplace_back(e.values().begin(), e.values().end());
    }
    int64_t hits = 0;
    for (int64_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        int64_t best_j = -1;
        for (size_t j = 0; j < gf.size(); ++j) {
            double s = 0;
            for (int64_t q = 0; q < f; ++q) {
                const double d = fr.values()[static_cast<size_t>(i * f + q)] - gf[j][static_cast<size_t>(q)];
                s += d * d;
            }
            if (s < best) {
                best = s;
                best_j = static_cast<int64_t>(j);
            }
        }
        if (best_j == own_index[static_cast<size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

MetricReport evaluate_reconstruction(const Tensor& recons, const Tensor& originals,
                                     const PriorCNN* prior, const std::vector<Tensor>* gallery,
                                     const std::vector<int64_t>* own_index) {
    MetricReport rep;
    rep.assignment = assign(recons, originals);
    // reorder the originals to the assignment before per-pair metrics
    const int64_t n = recons.dim(0), stride = recons.numel() / n;
    Tensor aligned = Tensor::zeros(originals.shape());
    for (int64_t i = 0; i < n; ++i) {
        const int64_t j = rep.assignment[static_cast<size_t>(i)];
        std::copy(originals.values().begin() + j * stride,
                  originals.values().begin() + (j + 1) * stride,
                  aligned.values_mut().begin() + i * stride);
    }
    rep.psnr_per_image_db = psnr_per_image(recons, aligned);
    rep.psnr_mean_db = 0;
    for (double v : rep.psnr_per_image_db) rep.psnr_mean_db += v;
    rep.psnr_mean_db /= static_cast<double>(n);
    rep.fft2d = fft2d_distance(recons, aligned);
    if (prior) rep.feature_dist = feature_distance(recons, aligned, *prior);
    if (prior && gallery && own_index) {
        std::vector<int64_t> own_aligned(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i)
            own_aligned[static_cast<size_t>(i)] =
                (*own_index)[static_cast<size_t>(rep.assignment[static_cast<size_t>(i)])];
        rep.iip_ratio = iip(recons, *gallery, own_aligned, *prior);
    }
    return rep;
}

} // namespace gradleak
