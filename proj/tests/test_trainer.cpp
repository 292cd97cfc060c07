// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "trainer.hpp"

using namespace can;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// tiny but end-to-end: 4 ids x 6 images at 24x8, two branches
TrainConfig tiny_train_config() {
    TrainConfig cfg;
    cfg.seed = 5;
    cfg.branch_parts = {1, 3};
    cfg.embed_dim = 8;
    cfg.input_h = 24;
    cfg.input_w = 8;
    cfg.batch_p = 2;
    cfg.batch_k = 2;
    cfg.epochs = 5;
    cfg.eval_every = 0;
    cfg.stage_widths = {4, 6};
    cfg.stage_strides = {2, 1};
    cfg.stem_stride = 2; // cumulative 4 -> 6x2 map
    return cfg;
}

const Manifest& tiny_dataset() {
    static TempDir dir("canreid_trainer_data");
    static bool made = false;
    static Manifest m = [&] {
        SynthConfig sc;
        sc.num_ids = 4;
        sc.per_id = 6; // 1 query + 2 gallery + 3 train per id
        sc.height = 24;
        sc.width = 8;
        sc.seed = 11;
        sc.noise = 0.08;
        generate_synthetic(sc, dir.path / "data");
        made = true;
        return load_manifest(dir.path / "data" / "manifest.jsonl");
    }();
    (void)made;
    return m;
}

} // namespace

TEST_CASE("lr_at follows the step schedule with inclusive boundaries") {
    TrainConfig cfg; // base 3e-4, decays at 250/350/450, factor 0.1
    CHECK(lr_at(0, cfg) == doctest::Approx(3e-4).epsilon(1e-12));
    CHECK(lr_at(100, cfg) == doctest::Approx(3e-4).epsilon(1e-12));
    CHECK(lr_at(249, cfg) == doctest::Approx(3e-4).epsilon(1e-12));
    CHECK(lr_at(250, cfg) == doctest::Approx(3e-5).epsilon(1e-12));
    CHECK(lr_at(350, cfg) == doctest::Approx(3e-6).epsilon(1e-12));
    CHECK(lr_at(450, cfg) == doctest::Approx(3e-7).epsilon(1e-12));
    CHECK(lr_at(599, cfg) == doctest::Approx(3e-7).epsilon(1e-12));

    // non-increasing, exactly len(decay)+1 distinct levels
    std::set<double> levels;
    double prev = lr_at(0, cfg);
    for (int64_t e = 0; e < 600; ++e) {
        const double lr = lr_at(e, cfg);
        CHECK(lr <= prev);
        prev = lr;
        levels.insert(lr);
    }
    CHECK(levels.size() == cfg.decay_epochs.size() + 1);
}

TEST_CASE("config json: defaults, round trip, unknown keys") {
    TrainConfig def;
    const TrainConfig parsed = TrainConfig::from_json("{}");
    CHECK(parsed.base_lr == def.base_lr);
    CHECK(parsed.branch_parts == def.branch_parts);
    CHECK(parsed.center_weight == doctest::Approx(0.0005));

    const TrainConfig round = TrainConfig::from_json(def.to_json());
    CHECK(round.to_json() == def.to_json());

    CHECK_THROWS_AS(TrainConfig::from_json(R"({"learning_rate": 1.0})"), Error);
    CHECK_THROWS_AS(TrainConfig::from_json("not json"), Error);
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"epochs": "many"})"), Error);

    const TrainConfig override_parsed =
        TrainConfig::from_json(R"({"collab_attention": false, "epochs": 7})");
    CHECK_FALSE(override_parsed.collab_attention);
    CHECK(override_parsed.epochs == 7);
}

TEST_CASE("config validation failures") {
    TrainConfig cfg = tiny_train_config();
    cfg.decay_epochs = {100, 50};
    CHECK_THROWS_AS(cfg.validate(), Error);

    cfg = tiny_train_config();
    cfg.base_lr = 0.0;
    CHECK_THROWS_AS(cfg.validate(), Error);

    cfg = tiny_train_config();
    cfg.branch_parts = {1, 99};
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("zero epochs: the checkpoint is the seeded initialization") {
    TempDir out("canreid_trainer_zero");
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 0;
    const auto result = train(cfg, tiny_dataset(), out.path / "run");
    CHECK(result.steps == 0);

    CanModel from_ckpt(result.checkpoint_dir);
    CanModel fresh(cfg.model_config(4), cfg.seed);
    REQUIRE(from_ckpt.parameters().size() == fresh.parameters().size());
    for (size_t i = 0; i < fresh.parameters().size(); ++i) {
        const Tensor& a = from_ckpt.parameters()[i]->value;
        const Tensor& b = fresh.parameters()[i]->value;
        REQUIRE(a.same_shape(b));
        for (int64_t j = 0; j < a.numel(); ++j) {
            REQUIRE(a[j] == b[j]);
        }
    }
}

TEST_CASE("determinism: same seed gives bit-identical losses and reports") {
    TempDir out("canreid_trainer_det");
    TrainConfig cfg = tiny_train_config();
    const auto r1 = train(cfg, tiny_dataset(), out.path / "a");
    const auto r2 = train(cfg, tiny_dataset(), out.path / "b");
    REQUIRE(r1.steps == r2.steps);
    REQUIRE(r1.history.size() == r2.history.size());
    for (size_t i = 0; i < std::min<size_t>(10, r1.history.size()); ++i) {
        CHECK(r1.history[i].total == r2.history[i].total); // bit-identical
        CHECK(r1.history[i].ce == r2.history[i].ce);
        CHECK(r1.history[i].triplet == r2.history[i].triplet);
        CHECK(r1.history[i].center == r2.history[i].center);
    }
    REQUIRE(r1.final_eval.has_value());
    REQUIRE(r2.final_eval.has_value());
    CHECK(r1.final_eval->mean_ap == r2.final_eval->mean_ap);
    CHECK(r1.final_eval->cmc == r2.final_eval->cmc);

    // a different seed diverges
    cfg.seed = 6;
    const auto r3 = train(cfg, tiny_dataset(), out.path / "c");
    CHECK(r3.history[0].total != r1.history[0].total);
}

TEST_CASE("loss breakdown identity holds at every step") {
    TempDir out("canreid_trainer_identity");
    TrainConfig cfg = tiny_train_config();
    const auto result = train(cfg, tiny_dataset(), out.path / "run");
    REQUIRE(!result.history.empty());
    for (const auto& s : result.history) {
        const double recomposed = s.ce + s.triplet + cfg.center_weight * s.center;
        CHECK(std::abs(s.total - recomposed) <= 1e-10);
        CHECK(s.lr == doctest::Approx(lr_at(s.epoch, cfg)).epsilon(1e-15));
    }
}

TEST_CASE("checkpoint evaluation is reproducible and matches the final report") {
    TempDir out("canreid_trainer_eval");
    TrainConfig cfg = tiny_train_config();
    const auto result = train(cfg, tiny_dataset(), out.path / "run");
    REQUIRE(result.final_eval.has_value());

    const EvalReport again = evaluate_checkpoint(result.checkpoint_dir, tiny_dataset());
    CHECK(again.mean_ap == result.final_eval->mean_ap);
    CHECK(again.cmc == result.final_eval->cmc);

    const EvalReport third = evaluate_checkpoint(result.checkpoint_dir, tiny_dataset());
    CHECK(third.mean_ap == again.mean_ap);
}

TEST_CASE("collaborative attention off reproduces the plain part-based head") {
    TempDir out("canreid_trainer_noca");
    TrainConfig cfg = tiny_train_config();
    cfg.collab_attention = false;
    cfg.epochs = 1;
    const auto result = train(cfg, tiny_dataset(), out.path / "run");
    CanModel model(result.checkpoint_dir);
    CHECK_FALSE(model.config().collab_attention);
    // {1,3} without CA: 2 globals + 3 raw slices
    CHECK(model.streams().size() == 5);
}

TEST_CASE("metrics log lines are valid JSON with the documented keys") {
    TempDir out("canreid_trainer_log");
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 1;
    std::vector<std::string> lines;
    train(cfg, tiny_dataset(), out.path / "run",
          [&](const std::string& line) { lines.push_back(line); });
    REQUIRE(!lines.empty());
    bool saw_step = false;
    for (const auto& l : lines) {
        if (l.find("\"total\"") != std::string::npos) {
            saw_step = true;
            CHECK(l.find("\"epoch\"") != std::string::npos);
            CHECK(l.find("\"lr\"") != std::string::npos);
            CHECK(l.find("\"ce\"") != std::string::npos);
        }
    }
    CHECK(saw_step);
    CHECK(fs::exists(out.path / "run" / "metrics.jsonl"));
    CHECK(fs::exists(out.path / "run" / "train_config.json"));
    CHECK(fs::exists(out.path / "run" / "eval.json"));
}

TEST_CASE("training rejects a dataset that cannot satisfy PK") {
    TempDir out("canreid_trainer_badpk");
    TrainConfig cfg = tiny_train_config();
    cfg.batch_p = 16; // only 4 ids exist
    CHECK_THROWS_AS(train(cfg, tiny_dataset(), out.path / "run"), Error);
}
