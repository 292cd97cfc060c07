// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <functional>
#include <optional>

#include "data.hpp"
#include "eval.hpp"
#include "losses.hpp"
#include "model.hpp"

namespace can {

struct TrainConfig {
    uint64_t seed = 1;
    std::vector<int64_t> branch_parts{1, 3, 5, 7};
    int64_t embed_dim = 64;
    int64_t num_classes = 0; // 0 = number of distinct train ids
    int64_t input_h = 96;
    int64_t input_w = 32;
    int64_t batch_p = 4;
    int64_t batch_k = 4;
    double margin = 0.3;
    double center_weight = 0.0005;
    double cosine_scale = 16.0;
    double base_lr = 3e-4;
    std::vector<int64_t> decay_epochs{250, 350, 450};
    double decay_factor = 0.1;
    int64_t epochs = 200;
    bool use_triplet = true;
    bool use_center = true;
    bool supervise_local = true; // clustering losses on global AND local streams
    bool collab_attention = true;
    double center_lr = 0.5;
    bool center_unsquared = false;
    int64_t eval_every = 20;      // epochs; 0 disables periodic evaluation
    int64_t checkpoint_every = 0; // epochs; 0 = final checkpoint only
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> stddev{0.5, 0.5, 0.5};
    bool allow_replacement = false;
    std::vector<int64_t> stage_widths{16, 32, 64, 64};
    std::vector<int64_t> stage_strides{1, 2, 2, 1};
    int64_t stem_stride = 2;

    void validate() const;
    std::string to_json() const;
    /// Strict parse: unknown keys are rejected. Missing keys keep defaults.
    static TrainConfig from_json(const std::string& text);

    ModelConfig model_config(int64_t resolved_classes) const;
};

/// Step-decay schedule: base_lr scaled by decay_factor once per boundary
/// already reached (epoch >= boundary).
double lr_at(int64_t epoch, const TrainConfig& cfg);

struct StepStats {
    int64_t epoch;
    int64_t step;
    double lr;
    double total;
    double ce;
    double triplet;
    double center;
};

using LogFn = std::function<void(const std::string&)>;

struct TrainResult {
    std::filesystem::path checkpoint_dir;
    std::optional<EvalReport> final_eval;
    int64_t steps = 0;
    std::vector<StepStats> history;
};

/// Seeded end-to-end loop: PK batches -> multi-branch forward -> composite
/// loss -> backward -> Adam at lr_at(epoch) -> center updates. Writes
/// metrics.jsonl, train_config.json and a final checkpoint under out_dir;
/// aborts on non-finite loss.
TrainResult train(const TrainConfig& cfg, const Manifest& manifest,
                  const std::filesystem::path& out_dir, const LogFn& log = {});

/// Descriptors for every record of a split, in record order.
Tensor compute_descriptors(CanModel& model, const Manifest& manifest, Split split,
                           std::span<const double> mean, std::span<const double> stddev,
                           std::vector<ItemMeta>& meta_out);

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint_dir,
                               const Manifest& manifest);

/// Checkpoint sidecar with the normalization the model was trained with.
struct CheckpointExtras {
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> stddev{0.5, 0.5, 0.5};
};

void write_checkpoint_extras(const std::filesystem::path& dir, const CheckpointExtras& e);
CheckpointExtras read_checkpoint_extras(const std::filesystem::path& dir);

} // namespace can
