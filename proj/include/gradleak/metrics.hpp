#pragma once

#include <optional>
#include <vector>

#include "gradleak/prior.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak {

inline constexpr double kPsnrSentinelDb = 99.0;

// Permutation mapping reconstruction index -> original index that minimizes
// total per-pair pixel l2. Exhaustive for N <= 8, Hungarian above; N <= 12.
std::vector<int64_t> assign(const Tensor& recons, const Tensor& originals);

// Kuhn-Munkres on a square cost matrix; row i -> assignment[i].
std::vector<int64_t> hungarian(const std::vector<std::vector<double>>& cost);

// 10*log10(1/MSE) on [0,1]-clamped copies; identical inputs hit the sentinel.
double psnr(const Tensor& a, const Tensor& b);

// Per assigned pair (batch tensors [N,H,W,C]), order already aligned.
std::vector<double> psnr_per_image(const Tensor& a, const Tensor& b);

// Mean over batch and channels of 1 - cosine(|DFT2(a)|, |DFT2(b)|); zero
// spectra on both sides count as distance 0.
double fft2d_distance(const Tensor& a, const Tensor& b);

// l2 between penultimate prior embeddings, averaged over aligned pairs.
double feature_distance(const Tensor& a, const Tensor& b, const PriorCNN& prior);

// Fraction of reconstructions whose nearest gallery image in embedding
// space is their own original; own_index[i] locates recon i's original in
// the gallery.
double iip(const Tensor& recons, const std::vector<Tensor>& gallery,
           const std::vector<int64_t>& own_index, const PriorCNN& prior);

struct MetricReport {
    std::vector<int64_t> assignment;
    std::vector<double> psnr_per_image_db;
    double psnr_mean_db = 0;
    double fft2d = 0;
    double feature_dist = -1; // -1 when no prior available
    double iip_ratio = -1;    // -1 when no gallery provided
};

// Full evaluation: assignment first, then every metric on the aligned batch.
MetricReport evaluate_reconstruction(const Tensor& recons, const Tensor& originals,
                                     const PriorCNN* prior,
                                     const std::vector<Tensor>* gallery = nullptr,
                                     const std::vector<int64_t>* own_index = nullptr);

} // namespace gradleak
