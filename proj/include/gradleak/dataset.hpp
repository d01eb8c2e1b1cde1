#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gradleak/tensor.hpp"

namespace gradleak {

enum class Generator { smooth_gradients, gaussian_blobs, checker_textures };

Generator generator_from_name(const std::string& name);
std::string generator_name(Generator g);

struct ToyDatasetSpec {
    Generator gen = Generator::smooth_gradients;
    int64_t count = 256;
    int64_t size = 16;
    int64_t channels = 1;
    int64_t classes = 8;
    uint64_t seed = 1;
};

// Image and label are pure functions of (generator, seed, index).
Tensor toy_image(const ToyDatasetSpec& spec, int64_t index); // [H,W,C] in [0,1]
int64_t toy_label(const ToyDatasetSpec& spec, int64_t index);

struct ToyDataset {
    ToyDatasetSpec spec;
    std::vector<Tensor> images;
    std::vector<int64_t> labels;

    // [N,H,W,C] batch from dataset indices
    Tensor batch(const std::vector<int64_t>& indices) const;
};

ToyDataset synth_dataset(const ToyDatasetSpec& spec);

// Directory layout: images.gvt (entries img_00000, ...) + labels.json.
void save_dataset(const ToyDataset& ds, const std::filesystem::path& dir);
ToyDataset load_dataset(const std::filesystem::path& dir);

// First n indices with pairwise-distinct labels, scanning a seeded shuffle.
std::vector<int64_t> pick_batch_unique_labels(const ToyDataset& ds, int64_t n, uint64_t seed);

} // namespace gradleak
