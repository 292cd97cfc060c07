// SPDX-License-Identifier: Apache-2.0

#include "trainer.hpp"

#include <cmath>
#include <fstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "optim.hpp"

namespace can {

using nlohmann::json;

void TrainConfig::validate() const {
    require(batch_p >= 2 && batch_k >= 2, ErrorKind::invalid_argument,
            "config: P and K must be >= 2");
    require(epochs >= 0, ErrorKind::invalid_argument, "config: epochs >= 0");
    require(base_lr > 0.0, ErrorKind::invalid_argument, "config: base_lr > 0");
    require(decay_factor > 0.0 && decay_factor <= 1.0, ErrorKind::invalid_argument,
            "config: decay_factor in (0, 1]");
    for (size_t i = 1; i < decay_epochs.size(); ++i) {
        require(decay_epochs[i] > decay_epochs[i - 1], ErrorKind::invalid_argument,
                "config: decay_epochs must be strictly increasing");
    }
    require(margin >= 0.0 && std::isfinite(margin), ErrorKind::invalid_argument,
            "config: margin must be finite and >= 0");
    require(center_weight >= 0.0, ErrorKind::invalid_argument, "config: center_weight >= 0");
    require(center_lr >= 0.0 && center_lr <= 1.0, ErrorKind::invalid_argument,
            "config: center_lr in [0, 1]");
    require(eval_every >= 0 && checkpoint_every >= 0, ErrorKind::invalid_argument,
            "config: cadences must be >= 0");
    for (double s : stddev) {
        require(s != 0.0, ErrorKind::invalid_argument, "config: std must be non-zero");
    }
    ModelConfig mc = model_config(std::max<int64_t>(num_classes, 2));
    mc.validate();
}

ModelConfig TrainConfig::model_config(int64_t resolved_classes) const {
    ModelConfig mc;
    mc.backbone.stage_widths = stage_widths;
    mc.backbone.stage_strides = stage_strides;
    mc.backbone.stem_stride = stem_stride;
    mc.backbone.input_h = input_h;
    mc.backbone.input_w = input_w;
    mc.branch_parts = branch_parts;
    mc.embed_dim = embed_dim;
    mc.num_classes = resolved_classes;
    mc.cosine_scale = cosine_scale;
    mc.collab_attention = collab_attention;
    return mc;
}

namespace {

json config_to_json_obj(const TrainConfig& c) {
    return json{{"seed", c.seed},
                {"branch_parts", c.branch_parts},
                {"embed_dim", c.embed_dim},
                {"num_classes", c.num_classes},
                {"input_h", c.input_h},
                {"input_w", c.input_w},
                {"batch_p", c.batch_p},
                {"batch_k", c.batch_k},
                {"margin", c.margin},
                {"center_weight", c.center_weight},
                {"cosine_scale", c.cosine_scale},
                {"base_lr", c.base_lr},
                {"decay_epochs", c.decay_epochs},
                {"decay_factor", c.decay_factor},
                {"epochs", c.epochs},
                {"use_triplet", c.use_triplet},
                {"use_center", c.use_center},
                {"supervise_local", c.supervise_local},
                {"collab_attention", c.collab_attention},
                {"center_lr", c.center_lr},
                {"center_unsquared", c.center_unsquared},
                {"eval_every", c.eval_every},
                {"checkpoint_every", c.checkpoint_every},
                {"mean", c.mean},
                {"std", c.stddev},
                {"allow_replacement", c.allow_replacement},
                {"stage_widths", c.stage_widths},
                {"stage_strides", c.stage_strides},
                {"stem_stride", c.stem_stride}};
}

} // namespace

std::string TrainConfig::to_json() const { return config_to_json_obj(*this).dump(2); }

TrainConfig TrainConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("config is not valid JSON: ") + e.what());
    }
    require(j.is_object(), ErrorKind::format, "config must be a JSON object");

    TrainConfig c;
    const json defaults = config_to_json_obj(c);
    for (const auto& [key, value] : j.items()) {
        require(defaults.contains(key), ErrorKind::format,
                "unknown config key \"" + key + "\"");
        (void)value;
    }
    try {
        if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
        if (j.contains("branch_parts")) c.branch_parts = j["branch_parts"].get<std::vector<int64_t>>();
        if (j.contains("embed_dim")) c.embed_dim = j["embed_dim"].get<int64_t>();
        if (j.contains("num_classes")) c.num_classes = j["num_classes"].get<int64_t>();
        if (j.contains("input_h")) c.input_h = j["input_h"].get<int64_t>();
        if (j.contains("input_w")) c.input_w = j["input_w"].get<int64_t>();
        if (j.contains("batch_p")) c.batch_p = j["batch_p"].get<int64_t>();
        if (j.contains("batch_k")) c.batch_k = j["batch_k"].get<int64_t>();
        if (j.contains("margin")) c.margin = j["margin"].get<double>();
        if (j.contains("center_weight")) c.center_weight = j["center_weight"].get<double>();
        if (j.contains("cosine_scale")) c.cosine_scale = j["cosine_scale"].get<double>();
        if (j.contains("base_lr")) c.base_lr = j["base_lr"].get<double>();
        if (j.contains("decay_epochs")) c.decay_epochs = j["decay_epochs"].get<std::vector<int64_t>>();
        if (j.contains("decay_factor")) c.decay_factor = j["decay_factor"].get<double>();
        if (j.contains("epochs")) c.epochs = j["epochs"].get<int64_t>();
        if (j.contains("use_triplet")) c.use_triplet = j["use_triplet"].get<bool>();
        if (j.contains("use_center")) c.use_center = j["use_center"].get<bool>();
        if (j.contains("supervise_local")) c.supervise_local = j["supervise_local"].get<bool>();
        if (j.contains("collab_attention")) c.collab_attention = j["collab_attention"].get<bool>();
        if (j.contains("center_lr")) c.center_lr = j["center_lr"].get<double>();
        if (j.contains("center_unsquared")) c.center_unsquared = j["center_unsquared"].get<bool>();
        if (j.contains("eval_every")) c.eval_every = j["eval_every"].get<int64_t>();
        if (j.contains("checkpoint_every")) c.checkpoint_every = j["checkpoint_every"].get<int64_t>();
        if (j.contains("mean")) c.mean = j["mean"].get<std::array<double, 3>>();
        if (j.contains("std")) c.stddev = j["std"].get<std::array<double, 3>>();
        if (j.contains("allow_replacement")) c.allow_replacement = j["allow_replacement"].get<bool>();
        if (j.contains("stage_widths")) c.stage_widths = j["stage_widths"].get<std::vector<int64_t>>();
        if (j.contains("stage_strides")) c.stage_strides = j["stage_strides"].get<std::vector<int64_t>>();
        if (j.contains("stem_stride")) c.stem_stride = j["stem_stride"].get<int64_t>();
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("config field has wrong type: ") + e.what());
    }
    return c;
}

double lr_at(int64_t epoch, const TrainConfig& cfg) {
    require(epoch >= 0, ErrorKind::invalid_argument, "lr_at: epoch >= 0");
    double lr = cfg.base_lr;
    for (int64_t boundary : cfg.decay_epochs) {
        if (epoch >= boundary) {
            lr *= cfg.decay_factor;
        }
    }
    return lr;
}

namespace {

class ImageCache {
public:
    ImageCache(const Manifest& m, int64_t h, int64_t w, std::span<const double> mean,
               std::span<const double> stddev)
        : manifest_(m), h_(h), w_(w), mean_(mean.begin(), mean.end()),
          stddev_(stddev.begin(), stddev.end()) {}

    const Tensor& get(int64_t record_index) {
        auto it = cache_.find(record_index);
        if (it != cache_.end()) {
            return it->second;
        }
        const auto& rec = manifest_.records[static_cast<size_t>(record_index)];
        Tensor img = load_image_tensor(manifest_, rec, h_, w_, mean_, stddev_);
        return cache_.emplace(record_index, std::move(img)).first->second;
    }

private:
    const Manifest& manifest_;
    int64_t h_, w_;
    std::vector<double> mean_, stddev_;
    std::unordered_map<int64_t, Tensor> cache_;
};

Tensor assemble_batch(ImageCache& cache, std::span<const int64_t> indices, int64_t h,
                      int64_t w) {
    Tensor batch({static_cast<int64_t>(indices.size()), 3, h, w});
    const int64_t stride = 3 * h * w;
    for (size_t i = 0; i < indices.size(); ++i) {
        const Tensor& img = cache.get(indices[i]);
        std::copy_n(img.data().data(), stride,
                    batch.data().data() + static_cast<int64_t>(i) * stride);
    }
    return batch;
}

std::string step_line(const StepStats& s) {
    json j{{"epoch", s.epoch}, {"step", s.step},       {"lr", s.lr},
           {"total", s.total}, {"ce", s.ce},           {"triplet", s.triplet},
           {"center", s.center}};
    return j.dump();
}

EvalReport eval_in_memory(CanModel& model, const Manifest& manifest,
                          std::span<const double> mean, std::span<const double> stddev) {
    std::vector<ItemMeta> qmeta, gmeta;
    Tensor q = compute_descriptors(model, manifest, Split::query, mean, stddev, qmeta);
    Tensor g = compute_descriptors(model, manifest, Split::gallery, mean, stddev, gmeta);
    auto dist = cosine_distance_matrix(q, g, std::move(qmeta), std::move(gmeta));
    return evaluate(dist, std::min<int64_t>(10, g.dim(0)));
}

} // namespace

Tensor compute_descriptors(CanModel& model, const Manifest& manifest, Split split,
                           std::span<const double> mean, std::span<const double> stddev,
                           std::vector<ItemMeta>& meta_out) {
    const auto indices = manifest.split_indices(split);
    require(!indices.empty(), ErrorKind::invalid_argument,
            std::string("no records in split ") + split_name(split));
    const auto& bb = model.config().backbone;
    Tensor out({static_cast<int64_t>(indices.size()), model.descriptor_dim()});
    meta_out.clear();
    for (size_t i = 0; i < indices.size(); ++i) {
        const auto& rec = manifest.records[static_cast<size_t>(indices[i])];
        Tensor img = load_image_tensor(manifest, rec, bb.input_h, bb.input_w, mean, stddev);
        Tensor desc = model.inference_descriptor(img);
        std::copy_n(desc.data().data(), desc.numel(),
                    out.data().data() + static_cast<int64_t>(i) * model.descriptor_dim());
        meta_out.push_back({rec.person_id, rec.camera_id});
    }
    return out;
}

TrainResult train(const TrainConfig& cfg, const Manifest& manifest,
                  const std::filesystem::path& out_dir, const LogFn& log) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    const auto by_id = manifest.train_by_id();
    require(!by_id.empty(), ErrorKind::invalid_argument, "train: manifest has no train split");
    std::unordered_map<int64_t, int64_t> class_of;
    for (const auto& [person_id, _] : by_id) {
        const int64_t cls = static_cast<int64_t>(class_of.size());
        class_of.emplace(person_id, cls);
    }
    int64_t num_classes = static_cast<int64_t>(class_of.size());
    if (cfg.num_classes > 0) {
        require(cfg.num_classes >= num_classes, ErrorKind::invalid_argument,
                "config: num_classes smaller than the number of train ids");
        num_classes = cfg.num_classes;
    }

    CanModel model(cfg.model_config(num_classes), cfg.seed);
    PKSampler sampler(manifest, cfg.batch_p, cfg.batch_k, cfg.seed, cfg.allow_replacement);

    std::ofstream metrics(out_dir / "metrics.jsonl");
    require(metrics.good(), ErrorKind::io, "cannot write metrics.jsonl");
    auto emit = [&](const std::string& line) {
        metrics << line << "\n";
        if (log) {
            log(line);
        }
    };
    {
        std::ofstream cf(out_dir / "train_config.json");
        cf << cfg.to_json() << "\n";
    }
    for (const auto& w : sampler.warnings()) {
        emit(json{{"warning", w}}.dump());
    }

    const bool can_eval = !manifest.split_indices(Split::query).empty() &&
                          !manifest.split_indices(Split::gallery).empty();

    AdamState adam(model.parameters());
    ImageCache cache(manifest, cfg.input_h, cfg.input_w, cfg.mean, cfg.stddev);

    CompositeConfig loss_cfg;
    loss_cfg.margin = cfg.margin;
    loss_cfg.center_weight = cfg.center_weight;
    loss_cfg.use_triplet = cfg.use_triplet;
    loss_cfg.use_center = cfg.use_center;
    loss_cfg.supervise_local = cfg.supervise_local;
    loss_cfg.center_unsquared = cfg.center_unsquared;

    std::vector<uint8_t> is_global;
    for (const auto& s : model.streams()) {
        is_global.push_back(s.is_global ? 1 : 0);
    }

    TrainResult result;
    int64_t step = 0;
    const CheckpointExtras extras{cfg.mean, cfg.stddev};

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(epoch, cfg);
        for (const auto& batch : sampler.epoch_batches()) {
            Tensor images = assemble_batch(cache, batch, cfg.input_h, cfg.input_w);
            std::vector<int64_t> labels;
            labels.reserve(batch.size());
            for (int64_t idx : batch) {
                labels.push_back(
                    class_of.at(manifest.records[static_cast<size_t>(idx)].person_id));
            }

            Tape tape;
            Var imgs = tape.constant(std::move(images));
            auto fwd = model.forward(tape, imgs);

            std::vector<const Tensor*> banks;
            banks.reserve(model.center_banks().size());
            for (const auto& b : model.center_banks()) {
                banks.push_back(&b);
            }
            const auto terms = composite_loss(tape, fwd.logits, fwd.features, is_global,
                                              labels, banks, loss_cfg);
            if (!std::isfinite(terms.total_value)) {
                fail(ErrorKind::numeric,
                     "non-finite loss at step " + std::to_string(step) +
                         " (ce=" + std::to_string(terms.ce) +
                         ", triplet=" + std::to_string(terms.triplet) +
                         ", center=" + std::to_string(terms.center) + ")");
            }

            for (Parameter* p : model.parameters()) {
                p->zero_grad();
            }
            tape.backward(terms.total);
            adam.step(model.parameters(), lr);

            if (cfg.use_center) {
                for (size_t i = 0; i < model.streams().size(); ++i) {
                    if (!cfg.supervise_local && !model.streams()[i].is_global) {
                        continue;
                    }
                    center_update(model.center_banks()[i], tape.value(fwd.features[i]),
                                  labels, cfg.center_lr);
                }
            }

            StepStats stats{epoch, step, lr, terms.total_value, terms.ce, terms.triplet,
                            terms.center};
            emit(step_line(stats));
            result.history.push_back(stats);
            ++step;
        }

        if (can_eval && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 &&
            epoch + 1 < cfg.epochs) {
            const EvalReport r = eval_in_memory(model, manifest, cfg.mean, cfg.stddev);
            emit(json{{"epoch", epoch}, {"eval", json::parse(r.to_json())}}.dump());
        }
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
            epoch + 1 < cfg.epochs) {
            char name[40];
            std::snprintf(name, sizeof(name), "checkpoint_epoch_%05lld",
                          static_cast<long long>(epoch + 1));
            model.save(out_dir / name);
            write_checkpoint_extras(out_dir / name, extras);
        }
    }

    result.checkpoint_dir = out_dir / "checkpoint";
    model.save(result.checkpoint_dir);
    write_checkpoint_extras(result.checkpoint_dir, extras);
    result.steps = step;

    if (can_eval) {
        result.final_eval = eval_in_memory(model, manifest, cfg.mean, cfg.stddev);
        emit(json{{"epoch", cfg.epochs}, {"eval", json::parse(result.final_eval->to_json())}}
                 .dump());
        std::ofstream ef(out_dir / "eval.json");
        ef << result.final_eval->to_json() << "\n";
    }
    return result;
}

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint_dir,
                               const Manifest& manifest) {
    CanModel model(checkpoint_dir);
    const CheckpointExtras extras = read_checkpoint_extras(checkpoint_dir);
    return eval_in_memory(model, manifest, extras.mean, extras.stddev);
}

void write_checkpoint_extras(const std::filesystem::path& dir, const CheckpointExtras& e) {
    std::ofstream f(dir / "data.json");
    require(f.good(), ErrorKind::io, "cannot write checkpoint data.json");
    f << json{{"mean", e.mean}, {"std", e.stddev}}.dump(2) << "\n";
}

CheckpointExtras read_checkpoint_extras(const std::filesystem::path& dir) {
    CheckpointExtras e;
    std::ifstream f(dir / "data.json");
    if (!f.good()) {
        return e; // older checkpoints: defaults
    }
    json j;
    try {
        f >> j;
        e.mean = j.at("mean").get<std::array<double, 3>>();
        e.stddev = j.at("std").get<std::array<double, 3>>();
    } catch (const json::exception& err) {
        fail(ErrorKind::format, std::string("bad checkpoint data.json: ") + err.what());
    }
    return e;
}

} // namespace can
