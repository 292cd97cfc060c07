// SPDX-License-Identifier: Apache-2.0

#include "model.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "blob.hpp"

namespace can {

using nlohmann::json;

int64_t BackboneConfig::cumulative_stride() const {
    int64_t s = stem_stride;
    for (size_t i = 0; i + 1 < stage_strides.size(); ++i) {
        s *= stage_strides[i];
    }
    return s; // final stage always contributes stride 1
}

void BackboneConfig::validate() const {
    require(!stage_widths.empty() && stage_widths.size() == stage_strides.size(),
            ErrorKind::invalid_argument,
            "backbone: stage widths and strides must be non-empty and equal length");
    require(stage_strides.back() == 1, ErrorKind::invalid_argument,
            "backbone: the final stage runs at stride 1");
    require(stem_stride >= 1, ErrorKind::invalid_argument, "backbone: stem stride >= 1");
    for (int64_t w : stage_widths) {
        require(w >= 1, ErrorKind::invalid_argument, "backbone: stage width >= 1");
    }
    for (int64_t s : stage_strides) {
        require(s >= 1, ErrorKind::invalid_argument, "backbone: stage stride >= 1");
    }
    const int64_t cum = cumulative_stride();
    require(input_h % cum == 0 && input_w % cum == 0, ErrorKind::invalid_argument,
            "backbone: cumulative stride " + std::to_string(cum) +
                " must divide input " + std::to_string(input_h) + "x" +
                std::to_string(input_w));
}

void ModelConfig::validate() const {
    backbone.validate();
    require(!branch_parts.empty(), ErrorKind::invalid_argument, "model: no branches");
    std::set<int64_t> seen;
    for (int64_t n : branch_parts) {
        require(n >= 1, ErrorKind::invalid_argument, "model: part count must be >= 1");
        require(n <= backbone.map_h(), ErrorKind::invalid_argument,
                "model: part count " + std::to_string(n) + " exceeds pooled map height " +
                    std::to_string(backbone.map_h()));
        require(seen.insert(n).second, ErrorKind::invalid_argument,
                "model: duplicate part count " + std::to_string(n));
    }
    require(embed_dim >= 1, ErrorKind::invalid_argument, "model: embed_dim >= 1");
    require(num_classes >= 2, ErrorKind::invalid_argument, "model: num_classes >= 2");
    require(cosine_scale > 0.0, ErrorKind::invalid_argument, "model: cosine_scale > 0");
}

std::vector<StreamInfo> make_streams(const std::vector<int64_t>& branch_parts,
                                     bool collab_attention) {
    std::vector<StreamInfo> out;
    for (size_t b = 0; b < branch_parts.size(); ++b) {
        const int64_t n = branch_parts[b];
        const std::string prefix = "part" + std::to_string(n);
        out.push_back({prefix + ".global", static_cast<int64_t>(b), true});
        if (n >= 2) {
            const int64_t locals = collab_attention ? n - 1 : n;
            for (int64_t k = 0; k < locals; ++k) {
                out.push_back({prefix + ".local" + std::to_string(k),
                               static_cast<int64_t>(b), false});
            }
        }
    }
    return out;
}

ResidualBlock::ResidualBlock(const std::string& name, int64_t in_ch, int64_t out_ch,
                             int64_t stride, Rng& rng)
    : conv1(name + ".conv1", in_ch, out_ch, 3, 3, stride, 1, true, rng),
      conv2(name + ".conv2", out_ch, out_ch, 3, 3, 1, 1, true, rng) {
    if (stride != 1 || in_ch != out_ch) {
        proj.emplace(name + ".proj", in_ch, out_ch, 1, 1, stride, 0, true, rng);
    }
}

Var ResidualBlock::forward(Tape& t, Var x) {
    Var y = conv2.forward(t, t.relu(conv1.forward(t, x)));
    Var skip = proj ? proj->forward(t, x) : x;
    return t.relu(t.add(y, skip));
}

void ResidualBlock::collect(std::vector<Parameter*>& out) {
    conv1.collect(out);
    conv2.collect(out);
    if (proj) {
        proj->collect(out);
    }
}

std::vector<Var> collaborative_attention(Tape& t, Var local) {
    const Tensor& lv = t.value(local);
    require(lv.ndim() == 3 || lv.ndim() == 4, ErrorKind::invalid_argument,
            "collaborative_attention: expected [2C,n,1] or [B,2C,n,1], got " +
                lv.shape_str());
    const int64_t spatial_axis = lv.ndim() - 2;
    const int64_t n = lv.shape()[static_cast<size_t>(spatial_axis)];
    require(n >= 2, ErrorKind::invalid_argument,
            "collaborative_attention: needs at least 2 slices, got " + std::to_string(n));
    std::vector<Var> blocks;
    blocks.reserve(static_cast<size_t>(n - 1));
    for (int64_t k = 0; k + 1 < n; ++k) {
        // adjacent pair [.., 2, 1] -> spatial max -> [.., 1]; slicing two
        // neighbouring rows is exactly their concatenation
        Var pair = t.slice(local, spatial_axis, k, 2);
        blocks.push_back(t.reduce_max(pair, spatial_axis));
    }
    return blocks;
}

Var classify(Tape& t, Var feature, LinearLayer& head, double scale) {
    require(scale > 0.0, ErrorKind::invalid_argument, "classify: scale must be positive");
    Var fn = l2_normalize(t, feature);
    Var wn = l2_normalize(t, t.param(head.weight));
    return t.scale(t.matmul_nt(fn, wn), scale);
}

namespace {

ModelConfig validated(ModelConfig cfg) {
    cfg.validate();
    return cfg;
}

} // namespace

CanModel::CanModel(ModelConfig cfg, uint64_t seed)
    : cfg_(validated(std::move(cfg))),
      stem_([&] {
          Rng rng = Rng(seed).fork(0x57e3);
          return Conv2dLayer("stem", 3, cfg_.backbone.stage_widths[0], 3, 3,
                             cfg_.backbone.stem_stride, 1, true, rng);
      }()),
      embed_weight_("embed.weight", Tensor()) {
    Rng rng = Rng(seed).fork(0xb10c);

    const auto& widths = cfg_.backbone.stage_widths;
    const auto& strides = cfg_.backbone.stage_strides;
    const size_t num_stages = widths.size();
    for (size_t s = 0; s + 1 < num_stages; ++s) {
        const int64_t in_ch = s == 0 ? widths[0] : widths[s - 1];
        shared_stages_.emplace_back("stage" + std::to_string(s + 1), in_ch, widths[s],
                                    strides[s], rng);
    }
    const int64_t last_in = num_stages >= 2 ? widths[num_stages - 2] : widths[0];
    for (size_t b = 0; b < cfg_.branch_parts.size(); ++b) {
        branch_stages_.emplace_back("part" + std::to_string(cfg_.branch_parts[b]) +
                                        ".stage" + std::to_string(num_stages),
                                    last_in, widths.back(), 1, rng);
    }

    const int64_t two_c = pooled_channels();
    embed_weight_ =
        Parameter("embed.weight", init_uniform({cfg_.embed_dim, two_c}, two_c, rng));

    streams_ = make_streams(cfg_.branch_parts, cfg_.collab_attention);
    heads_.reserve(streams_.size());
    centers_.reserve(streams_.size());
    for (const auto& s : streams_) {
        heads_.emplace_back("head." + s.name, cfg_.embed_dim, cfg_.num_classes, false, rng);
        centers_.push_back(Tensor::zeros({cfg_.num_classes, cfg_.embed_dim}));
    }
    collect_params();
}

void CanModel::collect_params() {
    params_.clear();
    stem_.collect(params_);
    for (auto& s : shared_stages_) {
        s.collect(params_);
    }
    for (auto& s : branch_stages_) {
        s.collect(params_);
    }
    params_.push_back(&embed_weight_);
    for (auto& h : heads_) {
        h.collect(params_);
    }
    std::set<std::string> names;
    for (const Parameter* p : params_) {
        require(names.insert(p->name).second, ErrorKind::internal,
                "duplicate parameter name " + p->name);
    }
}

int64_t CanModel::descriptor_dim() const {
    return static_cast<int64_t>(streams_.size()) * cfg_.embed_dim;
}

std::vector<Var> CanModel::backbone_forward(Tape& t, Var images) {
    const Tensor& iv = t.value(images);
    require(iv.ndim() == 4 && iv.dim(1) == 3, ErrorKind::invalid_argument,
            "backbone: images must be [B,3,H,W], got " + iv.shape_str());
    require(iv.dim(2) == cfg_.backbone.input_h && iv.dim(3) == cfg_.backbone.input_w,
            ErrorKind::invalid_argument,
            "backbone: expected " + std::to_string(cfg_.backbone.input_h) + "x" +
                std::to_string(cfg_.backbone.input_w) + " input, got " + iv.shape_str());
    Var x = t.relu(stem_.forward(t, images));
    for (auto& stage : shared_stages_) {
        x = stage.forward(t, x);
    }
    std::vector<Var> maps;
    maps.reserve(branch_stages_.size());
    for (auto& stage : branch_stages_) {
        maps.push_back(stage.forward(t, x));
    }
    return maps;
}

CanModel::BranchPool CanModel::branch_pool(Tape& t, Var branch_map, int64_t parts) {
    const Tensor& mv = t.value(branch_map);
    const int64_t spatial_axis = mv.ndim() - 2;
    require(parts >= 1 && parts <= mv.shape()[static_cast<size_t>(spatial_axis)],
            ErrorKind::invalid_argument,
            "branch_pool: part count " + std::to_string(parts) +
                " exceeds feature map height");
    const int64_t ch_axis = mv.ndim() - 3;
    BranchPool out;
    out.global = t.concat(adaptive_pool2d(t, branch_map, 1, 1, PoolMode::max),
                          adaptive_pool2d(t, branch_map, 1, 1, PoolMode::avg), ch_axis);
    out.local = t.concat(adaptive_pool2d(t, branch_map, parts, 1, PoolMode::max),
                         adaptive_pool2d(t, branch_map, parts, 1, PoolMode::avg), ch_axis);
    return out;
}

Var CanModel::embed(Tape& t, Var stream) {
    return t.matmul_nt(stream, t.param(embed_weight_));
}

CanModel::Forward CanModel::forward(Tape& t, Var images) {
    const int64_t batch = t.value(images).dim(0);
    const int64_t two_c = pooled_channels();
    const auto maps = backbone_forward(t, images);

    Forward out;
    auto flatten = [&](Var v) { return t.reshape(v, {batch, two_c}); };
    for (size_t b = 0; b < cfg_.branch_parts.size(); ++b) {
        const int64_t n = cfg_.branch_parts[b];
        auto pooled = branch_pool(t, maps[b], n);
        out.features.push_back(embed(t, flatten(pooled.global)));
        if (n >= 2) {
            if (cfg_.collab_attention) {
                for (Var block : collaborative_attention(t, pooled.local)) {
                    // block: [B,2C,1]
                    out.features.push_back(embed(t, t.reshape(block, {batch, two_c})));
                }
            } else {
                for (int64_t k = 0; k < n; ++k) {
                    Var slice_k = t.slice(pooled.local, 2, k, 1);
                    out.features.push_back(embed(t, flatten(slice_k)));
                }
            }
        }
    }
    require(out.features.size() == streams_.size(), ErrorKind::internal,
            "stream census mismatch in forward");
    out.logits.reserve(out.features.size());
    for (size_t i = 0; i < out.features.size(); ++i) {
        out.logits.push_back(classify(t, out.features[i], heads_[i], cfg_.cosine_scale));
    }
    return out;
}

Tensor CanModel::inference_descriptor(const Tensor& image) {
    require(image.ndim() == 3, ErrorKind::invalid_argument,
            "inference_descriptor: expected [3,H,W], got " + image.shape_str());
    Tape t;
    std::vector<int64_t> batched_shape{1, image.dim(0), image.dim(1), image.dim(2)};
    Var images = t.constant(
        Tensor(batched_shape, std::vector<double>(image.data().begin(), image.data().end())));
    auto fwd = forward(t, images);
    Var all = fwd.features[0];
    for (size_t i = 1; i < fwd.features.size(); ++i) {
        all = t.concat(all, fwd.features[i], 1);
    }
    Var desc = l2_normalize(t, t.reshape(all, {descriptor_dim()}));
    return t.value(desc);
}

// ---------------------------------------------------------------------------
// Checkpoint format: <dir>/meta.json plus one CANT blob per parameter under
// <dir>/params/ and per center bank under <dir>/state/.
// ---------------------------------------------------------------------------

namespace {

constexpr int kCheckpointVersion = 1;

json config_to_json(const ModelConfig& cfg) {
    return json{{"backbone",
                 {{"stage_widths", cfg.backbone.stage_widths},
                  {"stage_strides", cfg.backbone.stage_strides},
                  {"stem_stride", cfg.backbone.stem_stride},
                  {"input_h", cfg.backbone.input_h},
                  {"input_w", cfg.backbone.input_w}}},
                {"branch_parts", cfg.branch_parts},
                {"embed_dim", cfg.embed_dim},
                {"num_classes", cfg.num_classes},
                {"cosine_scale", cfg.cosine_scale},
                {"collab_attention", cfg.collab_attention}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    const auto& b = j.at("backbone");
    cfg.backbone.stage_widths = b.at("stage_widths").get<std::vector<int64_t>>();
    cfg.backbone.stage_strides = b.at("stage_strides").get<std::vector<int64_t>>();
    cfg.backbone.stem_stride = b.at("stem_stride").get<int64_t>();
    cfg.backbone.input_h = b.at("input_h").get<int64_t>();
    cfg.backbone.input_w = b.at("input_w").get<int64_t>();
    cfg.branch_parts = j.at("branch_parts").get<std::vector<int64_t>>();
    cfg.embed_dim = j.at("embed_dim").get<int64_t>();
    cfg.num_classes = j.at("num_classes").get<int64_t>();
    cfg.cosine_scale = j.at("cosine_scale").get<double>();
    cfg.collab_attention = j.at("collab_attention").get<bool>();
    return cfg;
}

} // namespace

void CanModel::save(const std::filesystem::path& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "params");
    fs::create_directories(dir / "state");

    json meta;
    meta["format_version"] = kCheckpointVersion;
    meta["model"] = config_to_json(cfg_);
    std::vector<std::string> stream_names;
    for (const auto& s : streams_) {
        stream_names.push_back(s.name);
    }
    meta["streams"] = stream_names;
    std::vector<std::string> param_names;
    for (const Parameter* p : params_) {
        param_names.push_back(p->name);
    }
    meta["parameters"] = param_names;

    std::ofstream mf(dir / "meta.json");
    require(mf.good(), ErrorKind::io, "cannot write " + (dir / "meta.json").string());
    mf << meta.dump(2) << "\n";
    require(mf.good(), ErrorKind::io, "write failed: " + (dir / "meta.json").string());

    for (const Parameter* p : params_) {
        blob::write(dir / "params" / (p->name + ".cant"), p->value);
    }
    for (size_t i = 0; i < centers_.size(); ++i) {
        blob::write(dir / "state" / ("centers." + streams_[i].name + ".cant"), centers_[i]);
    }
}

namespace {

json read_checkpoint_meta(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "meta.json");
    require(mf.good(), ErrorKind::io, "cannot open checkpoint meta: " + dir.string());
    json meta;
    try {
        mf >> meta;
    } catch (const json::exception& e) {
        fail(ErrorKind::format,
             "checkpoint meta.json is not valid JSON: " + std::string(e.what()));
    }
    require(meta.at("format_version").get<int>() == kCheckpointVersion, ErrorKind::format,
            "unsupported checkpoint format version");
    return meta;
}

} // namespace

CanModel::CanModel(const std::filesystem::path& dir)
    : CanModel(config_from_json(read_checkpoint_meta(dir).at("model")), 0) {
    const json meta = read_checkpoint_meta(dir);

    const auto stream_names = meta.at("streams").get<std::vector<std::string>>();
    require(stream_names.size() == streams_.size(), ErrorKind::format,
            "checkpoint stream census does not match this build");
    for (size_t i = 0; i < stream_names.size(); ++i) {
        require(stream_names[i] == streams_[i].name, ErrorKind::format,
                "checkpoint stream order mismatch at index " + std::to_string(i) + ": " +
                    stream_names[i] + " vs " + streams_[i].name);
    }

    const auto param_names = meta.at("parameters").get<std::vector<std::string>>();
    require(param_names.size() == params_.size(), ErrorKind::format,
            "checkpoint parameter census does not match this build");
    for (size_t i = 0; i < param_names.size(); ++i) {
        require(param_names[i] == params_[i]->name, ErrorKind::format,
                "checkpoint parameter order mismatch: " + param_names[i]);
        Tensor v = blob::read(dir / "params" / (param_names[i] + ".cant"));
        require(v.same_shape(params_[i]->value), ErrorKind::format,
                "checkpoint parameter shape mismatch for " + param_names[i]);
        params_[i]->value = std::move(v);
    }
    for (size_t i = 0; i < centers_.size(); ++i) {
        Tensor c = blob::read(dir / "state" / ("centers." + streams_[i].name + ".cant"));
        require(c.same_shape(centers_[i]), ErrorKind::format,
                "checkpoint center bank shape mismatch for " + streams_[i].name);
        centers_[i] = std::move(c);
    }
}

} // namespace can
