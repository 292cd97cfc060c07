// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Talks to the core exclusively through the C API
// in can/can.h.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "can/can.h"

namespace {

using nlohmann::json;

int report_failure(can_status status) {
    std::cerr << "error (" << static_cast<int>(status) << "): " << can_last_error() << "\n";
    return 1;
}

std::optional<std::string> read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) {
        return std::nullopt;
    }
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void log_line(const char* line, void*) { std::cout << line << "\n"; }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"canreid: multi-branch ReID training and retrieval evaluation"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "generate a synthetic identity dataset");
    int64_t ids = 16, per_id = 8, height = 96, width = 32, cameras = 2;
    uint64_t synth_seed = 1;
    double noise = 0.05;
    std::string synth_out;
    synth->add_option("--ids", ids, "number of identities");
    synth->add_option("--per-id", per_id, "images per identity");
    synth->add_option("--height", height, "image height");
    synth->add_option("--width", width, "image width");
    synth->add_option("--cameras", cameras, "number of synthetic cameras");
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--noise", noise, "per-image noise amplitude");
    synth->add_option("--out", synth_out, "output directory")->required();

    // ---- train ----
    auto* train = app.add_subcommand("train", "train a model on a dataset");
    std::string train_config, train_data, train_out;
    std::vector<std::string> overrides;
    bool quiet = false;
    train->add_option("--config", train_config, "training config JSON file");
    train->add_option("--data", train_data, "dataset directory (with manifest.jsonl)")
        ->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--set", overrides,
                      "config override as key=json, e.g. --set epochs=40 "
                      "--set collab_attention=false");
    train->add_flag("--quiet", quiet, "suppress per-step log lines");

    // ---- eval ----
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (mAP / CMC)");
    std::string eval_ckpt, eval_data;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();

    // ---- gradcheck ----
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    double tolerance = 1e-4;
    gradcheck->add_option("--tolerance", tolerance, "max relative error allowed");

    // ---- inspect ----
    auto* inspect = app.add_subcommand("inspect", "print a checkpoint summary");
    std::string inspect_ckpt;
    inspect->add_option("--checkpoint", inspect_ckpt, "checkpoint directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (synth->parsed()) {
        const json options{{"ids", ids},         {"per_id", per_id}, {"h", height},
                           {"w", width},         {"cameras", cameras},
                           {"seed", synth_seed}, {"noise", noise}};
        const can_status st = can_synth_dataset(options.dump().c_str(), synth_out.c_str());
        if (st != CAN_OK) {
            return report_failure(st);
        }
        std::cout << "dataset written to " << synth_out << "\n";
        return 0;
    }

    if (train->parsed()) {
        json cfg = json::object();
        if (!train_config.empty()) {
            const auto text = read_file(train_config);
            if (!text) {
                std::cerr << "error: cannot read config file " << train_config << "\n";
                return 1;
            }
            cfg = json::parse(*text, nullptr, false);
            if (cfg.is_discarded()) {
                std::cerr << "error: config file is not valid JSON\n";
                return 1;
            }
        }
        for (const auto& kv : overrides) {
            const auto pos = kv.find('=');
            if (pos == std::string::npos) {
                std::cerr << "error: --set expects key=value, got \"" << kv << "\"\n";
                return 1;
            }
            const std::string key = kv.substr(0, pos);
            const json value = json::parse(kv.substr(pos + 1), nullptr, false);
            if (value.is_discarded()) {
                std::cerr << "error: override value for \"" << key
                          << "\" is not valid JSON\n";
                return 1;
            }
            cfg[key] = value;
        }
        const can_status st = can_train(cfg.dump().c_str(), train_data.c_str(),
                                        train_out.c_str(), quiet ? nullptr : log_line,
                                        nullptr);
        if (st != CAN_OK) {
            return report_failure(st);
        }
        std::cout << "checkpoint written to " << train_out << "/checkpoint\n";
        return 0;
    }

    if (eval->parsed()) {
        char* report = nullptr;
        const can_status st = can_evaluate(eval_ckpt.c_str(), eval_data.c_str(), &report);
        if (st != CAN_OK) {
            return report_failure(st);
        }
        std::cout << report << "\n";
        can_string_free(report);
        return 0;
    }

    if (gradcheck->parsed()) {
        char* report = nullptr;
        const can_status st = can_gradcheck(tolerance, &report);
        if (st != CAN_OK) {
            return report_failure(st);
        }
        std::cout << report << "\n";
        const json parsed = json::parse(report, nullptr, false);
        can_string_free(report);
        return !parsed.is_discarded() && parsed.value("pass", false) ? 0 : 1;
    }

    if (inspect->parsed()) {
        char* summary = nullptr;
        const can_status st = can_inspect(inspect_ckpt.c_str(), &summary);
        if (st != CAN_OK) {
            return report_failure(st);
        }
        std::cout << summary << "\n";
        can_string_free(summary);
        return 0;
    }
    return 1;
}
