#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gradleak/attack.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak {

// Binary PPM P6 for 3-channel images, PGM P5 for single-channel; maxval 255,
// half-up rounding of [0,1]-clamped values.
void export_ppm(const Tensor& image_hwc, const std::filesystem::path& path);

// [H,W,C] image read back as doubles in [0,1] (quantized to 1/255 steps).
Tensor read_ppm(const std::filesystem::path& path);

// original | reconstruction with a one-pixel divider column
void export_side_by_side(const Tensor& original_hwc, const Tensor& recon_hwc,
                         const std::filesystem::path& path);

// Strict JSON round-trip of AttackConfig: unknown keys are errors.
std::string attack_config_to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const std::string& text);
AttackConfig attack_config_from_file(const std::filesystem::path& path);

struct RunManifest {
    std::string tool_version;
    std::string config_json;
    std::vector<uint64_t> seeds;
    std::vector<std::pair<std::string, std::string>> input_hashes; // file, fnv1a64
    double wall_seconds = 0;
    std::vector<std::string> outputs;
    bool image_prior_degenerate = false;
};

void write_manifest(const RunManifest& m, const std::filesystem::path& path);

void write_ledger_csv(const std::vector<IterationRecord>& ledger,
                      const std::filesystem::path& path);

// Capture persistence: grad/<name> entries in capture.gvt plus a sidecar
// capture.gvt.json carrying hash, batch size, defense metadata, and the
// dataset provenance the report stage needs.
struct CaptureSidecar {
    uint64_t config_hash = 0;
    int64_t batch_size = 0;
    double defense_sigma = 0.0;
    std::string defense_target = "none";
    std::string dataset_dir;
    std::vector<int64_t> batch_indices;
};

void save_capture(const GradientCapture& cap, const CaptureSidecar& side,
                  const std::filesystem::path& path);
std::pair<GradientCapture, CaptureSidecar> load_capture(const std::filesystem::path& path);

} // namespace gradleak
