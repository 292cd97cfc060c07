// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <optional>

#include "rng.hpp"
#include "tensor.hpp"

namespace can {

enum class Split { train, query, gallery };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct SampleRecord {
    int64_t person_id; // -1 marks junk; never valid in the train split
    int64_t camera_id;
    Split split;
    std::string file; // path relative to the manifest directory
};

struct Manifest {
    std::filesystem::path root;
    std::vector<SampleRecord> records;

    std::vector<int64_t> split_indices(Split s) const;
    /// person_id -> record indices, train split only.
    std::map<int64_t, std::vector<int64_t>> train_by_id() const;
};

/// JSON-lines manifest, one record per line:
///   {"id": 3, "cam": 0, "split": "train", "file": "blobs/x.cant"}
/// Rejects malformed lines (with the line number), duplicate files, missing
/// blobs, and junk ids in the train split.
Manifest load_manifest(const std::filesystem::path& manifest_path);

/// The PK precondition: every train id must have at least K samples and at
/// least P distinct ids must exist.
void validate_pk(const Manifest& m, int64_t p, int64_t k);

/// Market-1501-style "personID_cameraID..." prefix, e.g. "0042_c3s1_000151_00.jpg"
/// -> (42, 3). Junk images use id -1.
std::optional<std::pair<int64_t, int64_t>> parse_market_filename(const std::string& name);

/// Bilinear resize of a [C,H,W] tensor with corner alignment; a singleton
/// output axis samples the input center.
Tensor bilinear_resize(const Tensor& chw, int64_t out_h, int64_t out_w);

/// Blob -> resized, normalized [3,H,W] tensor: (v - mean_c) / std_c.
Tensor load_image_tensor(const Manifest& m, const SampleRecord& rec, int64_t target_h,
                         int64_t target_w, std::span<const double> mean,
                         std::span<const double> stddev);

/// Identity-balanced batches: P distinct ids with K samples each. Within an
/// epoch, samples are drawn without replacement as long as an id's pool
/// lasts; ids short of K need allow_replacement and are refilled.
class PKSampler {
public:
    PKSampler(const Manifest& m, int64_t p, int64_t k, uint64_t seed,
              bool allow_replacement = false);

    /// All batches of the next epoch; every train id appears at least once.
    std::vector<std::vector<int64_t>> epoch_batches();

    int64_t batch_size() const { return p_ * k_; }
    const std::vector<std::string>& warnings() const { return warnings_; }

private:
    int64_t p_;
    int64_t k_;
    bool allow_replacement_;
    Rng rng_;
    std::vector<int64_t> ids_;
    std::map<int64_t, std::vector<int64_t>> by_id_;
    std::map<int64_t, std::vector<int64_t>> pools_;
    std::vector<std::string> warnings_;

    void refill(int64_t id);
    std::vector<int64_t> draw_k(int64_t id);
};

struct SynthConfig {
    int64_t num_ids = 16;
    int64_t per_id = 8;
    int64_t height = 96;
    int64_t width = 32;
    int64_t cameras = 2;
    uint64_t seed = 1;
    double noise = 0.05;
};

/// Identity dataset of vertically striped "clothing" patterns, one base
/// pattern per id plus per-image noise/shift/camera tint (all zero when
/// noise == 0). Writes blobs plus manifest.jsonl; image 0 of each id is the
/// query, images 1-2 the gallery, the rest train.
void generate_synthetic(const SynthConfig& cfg, const std::filesystem::path& out_dir);

} // namespace can
