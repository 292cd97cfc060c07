// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>

#include "nn.hpp"

namespace can {

struct BackboneConfig {
    std::vector<int64_t> stage_widths{16, 32, 64, 64};
    std::vector<int64_t> stage_strides{1, 2, 2, 1}; // last stage runs at stride 1
    int64_t stem_stride = 2;
    int64_t input_h = 96;
    int64_t input_w = 32;

    int64_t cumulative_stride() const;
    /// Spatial size of the final feature map.
    int64_t map_h() const { return input_h / cumulative_stride(); }
    int64_t map_w() const { return input_w / cumulative_stride(); }
    void validate() const;
};

struct ModelConfig {
    BackboneConfig backbone;
    std::vector<int64_t> branch_parts{1, 3, 5, 7};
    int64_t embed_dim = 64;
    int64_t num_classes = 2;
    double cosine_scale = 16.0;
    bool collab_attention = true;

    void validate() const;
};

struct StreamInfo {
    std::string name;
    int64_t branch; // index into branch_parts
    bool is_global;
};

/// Deterministic stream layout: branches in spec order, global first, then
/// locals top to bottom. With collaborative attention a part-n branch owns
/// n-1 local streams; without it, n raw slices. A part-1 branch is global
/// only.
std::vector<StreamInfo> make_streams(const std::vector<int64_t>& branch_parts,
                                     bool collab_attention);

struct ResidualBlock {
    Conv2dLayer conv1;
    Conv2dLayer conv2;
    std::optional<Conv2dLayer> proj; // 1x1 shortcut when shape changes

    ResidualBlock(const std::string& name, int64_t in_ch, int64_t out_ch, int64_t stride,
                  Rng& rng);
    Var forward(Tape& t, Var x);
    void collect(std::vector<Parameter*>& out);
};

/// Adjacent-slice attention: local [2C,n,1] (or [B,2C,n,1]) becomes n-1
/// blocks, block k = spatial max over the concatenation of slices k and k+1.
std::vector<Var> collaborative_attention(Tape& t, Var local);

/// Scaled cosine logits: scale * (row-normalized weight @ normalized feature).
Var classify(Tape& t, Var feature, LinearLayer& head, double scale);

class CanModel {
public:
    CanModel(ModelConfig cfg, uint64_t seed);
    /// Load from a checkpoint directory written by save().
    explicit CanModel(const std::filesystem::path& checkpoint_dir);

    // parameters() hands out stable pointers into this object
    CanModel(const CanModel&) = delete;
    CanModel& operator=(const CanModel&) = delete;
    CanModel(CanModel&&) = delete;
    CanModel& operator=(CanModel&&) = delete;

    const ModelConfig& config() const { return cfg_; }
    const std::vector<StreamInfo>& streams() const { return streams_; }
    int64_t descriptor_dim() const;
    /// Channel width of each pooled stream (2C: max- and avg-pooled halves).
    int64_t pooled_channels() const { return 2 * cfg_.backbone.stage_widths.back(); }

    /// Optimizer-visible parameters. Center banks are excluded: they are
    /// state driven by center_update, not by gradients.
    const std::vector<Parameter*>& parameters() { return params_; }
    std::vector<Tensor>& center_banks() { return centers_; }
    const std::vector<Tensor>& center_banks() const { return centers_; }

    struct Forward {
        std::vector<Var> features; // per stream, [B,d] embedded (pre-normalization)
        std::vector<Var> logits;   // per stream, [B,num_classes] scaled cosine logits
    };
    Forward forward(Tape& t, Var images);

    /// Shared backbone then per-branch final stages; one map per branch.
    std::vector<Var> backbone_forward(Tape& t, Var images);

    /// Max+avg adaptive pooling of one branch map, concatenated on channels.
    struct BranchPool {
        Var global; // [B,2C,1,1]
        Var local;  // [B,2C,n,1]
    };
    BranchPool branch_pool(Tape& t, Var branch_map, int64_t parts);

    /// Shared-embedding projection of a flattened [B,2C] stream to [B,d].
    Var embed(Tape& t, Var stream);

    /// Flattened, L2-normalized concatenation of all embedded streams for a
    /// single [3,H,W] image.
    Tensor inference_descriptor(const Tensor& image);

    void save(const std::filesystem::path& dir) const;

private:
    ModelConfig cfg_;
    Conv2dLayer stem_;
    std::vector<ResidualBlock> shared_stages_;
    std::vector<ResidualBlock> branch_stages_; // one per branch, unshared
    Parameter embed_weight_;                   // [d, 2C], shared by all branches
    std::vector<LinearLayer> heads_;           // per stream
    std::vector<Tensor> centers_;              // per stream, [num_classes, d]
    std::vector<StreamInfo> streams_;
    std::vector<Parameter*> params_;

    void collect_params();
};

} // namespace can
