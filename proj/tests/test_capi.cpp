// SPDX-License-Identifier: Apache-2.0
//
// Exercises the shared-library surface the CLI sits on, end to end:
// synth -> train -> inspect -> eval -> descriptor handle.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "can/can.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

constexpr const char* kTinyTrainConfig = R"({
    "seed": 3,
    "branch_parts": [1, 3],
    "embed_dim": 8,
    "input_h": 24,
    "input_w": 8,
    "batch_p": 2,
    "batch_k": 2,
    "epochs": 4,
    "eval_every": 0,
    "stage_widths": [4, 6],
    "stage_strides": [2, 1],
    "stem_stride": 2
})";

} // namespace

TEST_CASE("version and error surface") {
    CHECK(std::string(can_version()) == "0.1.0");
    CHECK(can_last_error() != nullptr);
}

TEST_CASE("null arguments come back as invalid-argument with a message") {
    CHECK(can_synth_dataset("{}", nullptr) == CAN_ERROR_INVALID_ARGUMENT);
    CHECK(std::strlen(can_last_error()) > 0);
    CHECK(can_train("{}", nullptr, nullptr, nullptr, nullptr) ==
          CAN_ERROR_INVALID_ARGUMENT);
    char* out = nullptr;
    CHECK(can_evaluate(nullptr, nullptr, &out) == CAN_ERROR_INVALID_ARGUMENT);
    CHECK(can_gradcheck(-1.0, &out) == CAN_ERROR_INVALID_ARGUMENT);
    CHECK(can_inspect(nullptr, &out) == CAN_ERROR_INVALID_ARGUMENT);
    can_model* m = nullptr;
    CHECK(can_model_open(nullptr, &m) == CAN_ERROR_INVALID_ARGUMENT);
}

TEST_CASE("malformed options and configs map to format errors") {
    TempDir dir("canreid_capi_bad");
    CHECK(can_synth_dataset("{nope", (dir.path / "d").c_str()) == CAN_ERROR_FORMAT);
    CHECK(can_synth_dataset(R"({"idz": 4})", (dir.path / "d").c_str()) ==
          CAN_ERROR_FORMAT);
    CHECK(can_train(R"({"unknown_key": 1})", (dir.path / "d").c_str(),
                    (dir.path / "o").c_str(), nullptr, nullptr) == CAN_ERROR_FORMAT);
    CHECK(can_evaluate((dir.path / "nothing").c_str(), (dir.path / "d").c_str(), nullptr) ==
          CAN_ERROR_INVALID_ARGUMENT);
}

TEST_CASE("missing dataset directory is an IO error") {
    TempDir dir("canreid_capi_noio");
    CHECK(can_train("{}", (dir.path / "missing").c_str(), (dir.path / "o").c_str(),
                    nullptr, nullptr) == CAN_ERROR_IO);
}

TEST_CASE("full pipeline through the C API") {
    TempDir dir("canreid_capi_pipeline");
    const fs::path data = dir.path / "data";
    const fs::path out = dir.path / "run";

    REQUIRE(can_synth_dataset(
                R"({"ids": 4, "per_id": 6, "h": 24, "w": 8, "seed": 2, "noise": 0.08})",
                data.c_str()) == CAN_OK);
    REQUIRE(fs::exists(data / "manifest.jsonl"));

    // train with the log callback collecting lines
    std::vector<std::string> lines;
    auto log_cb = [](const char* line, void* user) {
        static_cast<std::vector<std::string>*>(user)->push_back(line);
    };
    REQUIRE(can_train(kTinyTrainConfig, data.c_str(), out.c_str(), log_cb, &lines) ==
            CAN_OK);
    CHECK(!lines.empty());
    const fs::path ckpt = out / "checkpoint";
    REQUIRE(fs::exists(ckpt / "meta.json"));

    // inspect
    char* summary = nullptr;
    REQUIRE(can_inspect(ckpt.c_str(), &summary) == CAN_OK);
    REQUIRE(summary != nullptr);
    const json s = json::parse(summary);
    can_string_free(summary);
    CHECK(s["num_streams"] == 4); // {1,3} with CA: 2 globals + 2 locals
    CHECK(s["embed_dim"] == 8);
    CHECK(s["descriptor_dim"] == 32);

    // evaluate
    char* report = nullptr;
    REQUIRE(can_evaluate(ckpt.c_str(), data.c_str(), &report) == CAN_OK);
    REQUIRE(report != nullptr);
    const json r = json::parse(report);
    can_string_free(report);
    CHECK(r.contains("mAP"));
    CHECK(r.contains("cmc"));
    CHECK(r["queries_evaluated"].get<int>() > 0);

    // descriptor through the opaque handle
    can_model* model = nullptr;
    REQUIRE(can_model_open(ckpt.c_str(), &model) == CAN_OK);
    REQUIRE(model != nullptr);
    const int32_t dim = can_model_descriptor_size(model);
    CHECK(dim == 32);

    std::vector<double> image(3 * 24 * 8, 0.1);
    std::vector<double> desc(static_cast<size_t>(dim));
    REQUIRE(can_model_descriptor(model, image.data(), 3, 24, 8, desc.data(), dim) ==
            CAN_OK);
    double norm = 0.0;
    for (double v : desc) {
        norm += v * v;
    }
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-9);

    // wrong out_size is rejected
    CHECK(can_model_descriptor(model, image.data(), 3, 24, 8, desc.data(), dim - 1) ==
          CAN_ERROR_INVALID_ARGUMENT);
    can_model_close(model);

    // opening a non-checkpoint fails cleanly
    can_model* bad = nullptr;
    CHECK(can_model_open((dir.path / "data").c_str(), &bad) != CAN_OK);
    CHECK(bad == nullptr);
}

TEST_CASE("gradcheck through the C API") {
    // the full suite runs in the acceptance binary; here only the surface
    char* report = nullptr;
    REQUIRE(can_gradcheck(1e-4, &report) == CAN_OK);
    REQUIRE(report != nullptr);
    const json r = json::parse(report);
    can_string_free(report);
    CHECK(r.contains("pass"));
    CHECK(r.contains("ops"));
    CHECK(r["tolerance"].get<double>() == 1e-4);
    CHECK(r["pass"].get<bool>());
}
