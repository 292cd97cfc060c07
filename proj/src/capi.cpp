// SPDX-License-Identifier: Apache-2.0

#include "can/can.h"

#include <cstdlib>
#include <cstring>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "gradcheck.hpp"
#include "model.hpp"
#include "trainer.hpp"

using nlohmann::json;

namespace {

thread_local std::string g_last_error;

can_status status_of(can::ErrorKind kind) {
    switch (kind) {
    case can::ErrorKind::invalid_argument:
        return CAN_ERROR_INVALID_ARGUMENT;
    case can::ErrorKind::io:
        return CAN_ERROR_IO;
    case can::ErrorKind::format:
        return CAN_ERROR_FORMAT;
    case can::ErrorKind::numeric:
        return CAN_ERROR_NUMERIC;
    case can::ErrorKind::internal:
        return CAN_ERROR_INTERNAL;
    }
    return CAN_ERROR_INTERNAL;
}

template <typename Fn>
can_status guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return CAN_OK;
    } catch (const can::Error& e) {
        g_last_error = e.what();
        return status_of(e.kind());
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return CAN_ERROR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return CAN_ERROR_INTERNAL;
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out != nullptr) {
        std::memcpy(out, s.c_str(), s.size() + 1);
    }
    return out;
}

void require_arg(const void* p, const char* name) {
    can::require(p != nullptr, can::ErrorKind::invalid_argument,
                 std::string(name) + " must not be null");
}

can::Manifest open_data_dir(const char* data_dir) {
    require_arg(data_dir, "data_dir");
    return can::load_manifest(std::filesystem::path(data_dir) / "manifest.jsonl");
}

} // namespace

extern "C" {

const char* can_version(void) { return "0.1.0"; }

const char* can_last_error(void) { return g_last_error.c_str(); }

void can_string_free(char* s) { std::free(s); }

can_status can_synth_dataset(const char* options_json, const char* out_dir) {
    return guarded([&] {
        require_arg(out_dir, "out_dir");
        can::SynthConfig cfg;
        if (options_json != nullptr && options_json[0] != '\0') {
            json j;
            try {
                j = json::parse(options_json);
            } catch (const json::exception& e) {
                can::fail(can::ErrorKind::format,
                          std::string("options are not valid JSON: ") + e.what());
            }
            try {
                if (j.contains("ids")) cfg.num_ids = j["ids"].get<int64_t>();
                if (j.contains("per_id")) cfg.per_id = j["per_id"].get<int64_t>();
                if (j.contains("h")) cfg.height = j["h"].get<int64_t>();
                if (j.contains("w")) cfg.width = j["w"].get<int64_t>();
                if (j.contains("cameras")) cfg.cameras = j["cameras"].get<int64_t>();
                if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
                if (j.contains("noise")) cfg.noise = j["noise"].get<double>();
            } catch (const json::exception& e) {
                can::fail(can::ErrorKind::format,
                          std::string("bad option value: ") + e.what());
            }
            for (const auto& [key, _] : j.items()) {
                static const std::set<std::string> known{"ids",     "per_id", "h",    "w",
                                                         "cameras", "seed",   "noise"};
                can::require(known.count(key) != 0, can::ErrorKind::format,
                             "unknown synth option \"" + key + "\"");
            }
        }
        can::generate_synthetic(cfg, out_dir);
    });
}

can_status can_train(const char* config_json, const char* data_dir, const char* out_dir,
                     can_log_callback log_cb, void* user) {
    return guarded([&] {
        require_arg(out_dir, "out_dir");
        const can::TrainConfig cfg = can::TrainConfig::from_json(
            config_json != nullptr && config_json[0] != '\0' ? config_json : "{}");
        const can::Manifest manifest = open_data_dir(data_dir);
        can::LogFn log;
        if (log_cb != nullptr) {
            log = [log_cb, user](const std::string& line) { log_cb(line.c_str(), user); };
        }
        can::train(cfg, manifest, out_dir, log);
    });
}

can_status can_evaluate(const char* checkpoint_dir, const char* data_dir,
                        char** report_json_out) {
    return guarded([&] {
        require_arg(checkpoint_dir, "checkpoint_dir");
        require_arg(report_json_out, "report_json_out");
        const can::Manifest manifest = open_data_dir(data_dir);
        const can::EvalReport report = can::evaluate_checkpoint(checkpoint_dir, manifest);
        *report_json_out = dup_string(report.to_json());
    });
}

can_status can_gradcheck(double tolerance, char** report_json_out) {
    return guarded([&] {
        require_arg(report_json_out, "report_json_out");
        can::require(tolerance > 0.0, can::ErrorKind::invalid_argument,
                     "tolerance must be positive");
        const can::SuiteReport report = can::gradcheck_suite();
        *report_json_out = dup_string(report.to_json(tolerance));
    });
}

can_status can_inspect(const char* checkpoint_dir, char** summary_json_out) {
    return guarded([&] {
        require_arg(checkpoint_dir, "checkpoint_dir");
        require_arg(summary_json_out, "summary_json_out");
        can::CanModel model{std::filesystem::path(checkpoint_dir)};

        json streams = json::array();
        for (const auto& s : model.streams()) {
            streams.push_back(
                {{"name", s.name}, {"branch", s.branch}, {"global", s.is_global}});
        }
        int64_t param_elems = 0;
        for (const can::Parameter* p : model.parameters()) {
            param_elems += p->value.numel();
        }
        const auto& cfg = model.config();
        json summary{
            {"branch_parts", cfg.branch_parts},
            {"embed_dim", cfg.embed_dim},
            {"num_classes", cfg.num_classes},
            {"cosine_scale", cfg.cosine_scale},
            {"collab_attention", cfg.collab_attention},
            {"input", {cfg.backbone.input_h, cfg.backbone.input_w}},
            {"feature_map", {cfg.backbone.map_h(), cfg.backbone.map_w()}},
            {"descriptor_dim", model.descriptor_dim()},
            {"num_streams", static_cast<int64_t>(model.streams().size())},
            {"num_parameters", static_cast<int64_t>(model.parameters().size())},
            {"num_parameter_elements", param_elems},
            {"streams", streams},
        };
        *summary_json_out = dup_string(summary.dump(2));
    });
}

struct can_model {
    can::CanModel impl;
    explicit can_model(const std::filesystem::path& checkpoint_dir) : impl(checkpoint_dir) {}
};

can_status can_model_open(const char* checkpoint_dir, can_model** out) {
    return guarded([&] {
        require_arg(checkpoint_dir, "checkpoint_dir");
        require_arg(out, "out");
        *out = new can_model(std::filesystem::path(checkpoint_dir));
    });
}

void can_model_close(can_model* m) { delete m; }

int32_t can_model_descriptor_size(const can_model* m) {
    if (m == nullptr) {
        return 0;
    }
    return static_cast<int32_t>(m->impl.descriptor_dim());
}

can_status can_model_descriptor(can_model* m, const double* chw, int32_t channels,
                                int32_t height, int32_t width, double* out,
                                int32_t out_size) {
    return guarded([&] {
        require_arg(m, "model");
        require_arg(chw, "chw");
        require_arg(out, "out");
        can::require(channels == 3, can::ErrorKind::invalid_argument,
                     "descriptor input must have 3 channels");
        can::require(out_size == can_model_descriptor_size(m),
                     can::ErrorKind::invalid_argument,
                     "out_size does not match the descriptor length");
        const int64_t n = static_cast<int64_t>(channels) * height * width;
        can::Tensor img({channels, height, width}, std::vector<double>(chw, chw + n));
        const can::Tensor desc = m->impl.inference_descriptor(img);
        std::copy_n(desc.data().data(), desc.numel(), out);
    });
}

} // extern "C"
