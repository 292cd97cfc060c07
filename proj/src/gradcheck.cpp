// SPDX-License-Identifier: Apache-2.0

#include "gradcheck.hpp"

#include <cmath>
#include <sstream>

#include "losses.hpp"
#include "model.hpp"
#include "nn.hpp"

namespace can {

GradCheckResult finite_diff_check(const LossBuilder& build,
                                  std::span<Parameter* const> params, double step) {
    std::vector<Tensor> analytic;
    {
        Tape tape;
        const Var loss = build(tape);
        for (Parameter* p : params) {
            p->zero_grad();
        }
        tape.backward(loss);
        for (Parameter* p : params) {
            analytic.push_back(p->grad);
        }
    }

    auto eval_loss = [&]() {
        Tape tape;
        return tape.value(build(tape)).item();
    };

    GradCheckResult result;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        for (int64_t j = 0; j < p.value.numel(); ++j) {
            const double saved = p.value[j];
            p.value[j] = saved + step;
            const double up = eval_loss();
            p.value[j] = saved - step;
            const double down = eval_loss();
            p.value[j] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[pi][j];
            const double err =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            result.max_rel_err = std::max(result.max_rel_err, err);
            ++result.elements;
        }
    }
    return result;
}

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) {
        t[i] = rng.uniform(lo, hi);
    }
    return t;
}

// Fixed random projection so every output element carries its own weight; a
// plain sum would hide transposed/misrouted gradients. Drawn once per case:
// the loss must be the same function on every finite-difference evaluation.
Var project(Tape& t, Var v, const Tensor& r) {
    return t.sum_all(t.mul(v, t.constant(r)));
}

Tensor projection_like(const std::function<Var(Tape&)>& fwd, Rng& rng) {
    Tape t;
    Tensor r(t.value(fwd(t)).shape());
    for (int64_t i = 0; i < r.numel(); ++i) {
        r[i] = rng.uniform(-1.0, 1.0);
    }
    return r;
}

struct OpCase {
    std::string name;
    std::function<double(Rng&)> run; // returns max rel err of one draw
};

double check_unary(const std::function<Var(Tape&, Var)>& op, std::vector<int64_t> shape,
                   Rng& rng, double lo = -1.0, double hi = 1.0) {
    Parameter x("x", random_tensor(std::move(shape), rng, lo, hi));
    Parameter* params[] = {&x};
    const Tensor r =
        projection_like([&](Tape& t) { return op(t, t.param(x)); }, rng);
    return finite_diff_check(
               [&](Tape& t) { return project(t, op(t, t.param(x)), r); }, params)
        .max_rel_err;
}

double check_binary(const std::function<Var(Tape&, Var, Var)>& op,
                    std::vector<int64_t> sa, std::vector<int64_t> sb, Rng& rng) {
    Parameter a("a", random_tensor(std::move(sa), rng));
    Parameter b("b", random_tensor(std::move(sb), rng));
    Parameter* params[] = {&a, &b};
    const Tensor r =
        projection_like([&](Tape& t) { return op(t, t.param(a), t.param(b)); }, rng);
    return finite_diff_check(
               [&](Tape& t) { return project(t, op(t, t.param(a), t.param(b)), r); },
               params)
        .max_rel_err;
}

double check_composite_toy(uint64_t seed) {
    ModelConfig mc;
    mc.backbone.stage_widths = {2, 3};
    mc.backbone.stage_strides = {2, 1};
    mc.backbone.stem_stride = 2;
    mc.backbone.input_h = 48;
    mc.backbone.input_w = 16;
    mc.branch_parts = {1, 3};
    mc.embed_dim = 4;
    mc.num_classes = 2;
    mc.cosine_scale = 8.0;
    mc.collab_attention = true;
    CanModel model(mc, seed);

    Rng rng(Rng::mix(seed, 0xf00d));
    // check at a generic point: zero-init biases put conv outputs exactly on
    // relu kinks (clamped zeros upstream), where the loss is not
    // differentiable and finite differences measure the average slope
    for (Parameter* p : model.parameters()) {
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            p->value[i] += rng.uniform(-0.05, 0.05);
        }
    }
    const Tensor images = random_tensor({4, 3, 48, 16}, rng);
    const std::vector<int64_t> labels{0, 0, 1, 1};

    // non-trivial center banks so the center term has structure
    for (auto& bank : model.center_banks()) {
        for (int64_t i = 0; i < bank.numel(); ++i) {
            bank[i] = rng.uniform(-0.5, 0.5);
        }
    }

    std::vector<uint8_t> is_global;
    for (const auto& s : model.streams()) {
        is_global.push_back(s.is_global ? 1 : 0);
    }
    CompositeConfig cfg;
    cfg.margin = 0.3;
    cfg.center_weight = 0.0005;

    auto build = [&](Tape& t) {
        Var imgs = t.constant(images);
        auto fwd = model.forward(t, imgs);
        std::vector<const Tensor*> banks;
        for (const auto& b : model.center_banks()) {
            banks.push_back(&b);
        }
        return composite_loss(t, fwd.logits, fwd.features, is_global, labels, banks, cfg)
            .total;
    };
    // h = 1e-7: at 1e-5 the probe itself straddles ReLU kinks somewhere in a
    // deep net and central differences stop being a valid derivative there
    return finite_diff_check(build, model.parameters(), 1e-7).max_rel_err;
}

} // namespace

SuiteReport gradcheck_suite(uint64_t seed, int64_t repeats) {
    std::vector<OpCase> cases;

    cases.push_back({"add", [](Rng& r) {
                         return check_binary([](Tape& t, Var a, Var b) { return t.add(a, b); },
                                             {3, 4}, {3, 4}, r);
                     }});
    cases.push_back({"sub", [](Rng& r) {
                         return check_binary([](Tape& t, Var a, Var b) { return t.sub(a, b); },
                                             {3, 4}, {3, 4}, r);
                     }});
    cases.push_back({"mul", [](Rng& r) {
                         return check_binary([](Tape& t, Var a, Var b) { return t.mul(a, b); },
                                             {3, 4}, {3, 4}, r);
                     }});
    cases.push_back({"scale", [](Rng& r) {
                         return check_unary(
                             [](Tape& t, Var x) { return t.scale(x, -1.7); }, {2, 5}, r);
                     }});
    cases.push_back({"add_scalar", [](Rng& r) {
                         return check_unary(
                             [](Tape& t, Var x) { return t.add_scalar(x, 0.37); }, {7}, r);
                     }});
    cases.push_back({"relu", [](Rng& r) {
                         return check_unary([](Tape& t, Var x) { return t.relu(x); }, {4, 6},
                                            r);
                     }});
    cases.push_back({"sqrt", [](Rng& r) {
                         return check_unary([](Tape& t, Var x) { return t.sqrt(x); }, {3, 3},
                                            r, 0.2, 2.0);
                     }});
    cases.push_back({"matmul", [](Rng& r) {
                         return check_binary(
                             [](Tape& t, Var a, Var b) { return t.matmul(a, b); }, {3, 4},
                             {4, 2}, r);
                     }});
    cases.push_back({"matmul_nt", [](Rng& r) {
                         return check_binary(
                             [](Tape& t, Var a, Var b) { return t.matmul_nt(a, b); }, {3, 4},
                             {5, 4}, r);
                     }});
    cases.push_back({"concat", [](Rng& r) {
                         return check_binary(
                             [](Tape& t, Var a, Var b) { return t.concat(a, b, 1); }, {2, 3},
                             {2, 4}, r);
                     }});
    cases.push_back({"slice", [](Rng& r) {
                         return check_unary(
                             [](Tape& t, Var x) { return t.slice(x, 1, 1, 3); }, {2, 6}, r);
                     }});
    cases.push_back({"reduce_max", [](Rng& r) {
                         return check_unary(
                             [](Tape& t, Var x) { return t.reduce_max(x, 1); }, {3, 5}, r);
                     }});
    cases.push_back({"reduce_mean", [](Rng& r) {
                         return check_unary(
                             [](Tape& t, Var x) { return t.reduce_mean(x, 0); }, {4, 3}, r);
                     }});
    cases.push_back({"sum_all", [](Rng& r) {
                         return check_unary([](Tape& t, Var x) { return t.sum_all(x); },
                                            {3, 4}, r);
                     }});
    cases.push_back({"reshape", [](Rng& r) {
                         return check_unary(
                             [](Tape& t, Var x) { return t.reshape(x, {6, 2}); }, {3, 4}, r);
                     }});
    cases.push_back({"conv2d", [](Rng& r) {
                         Parameter x("x", random_tensor({3, 5, 4}, r));
                         Parameter w("w", random_tensor({2, 3, 3, 3}, r));
                         Parameter b("b", random_tensor({2}, r));
                         Parameter* params[] = {&x, &w, &b};
                         auto fwd = [&](Tape& t) {
                             return conv2d(t, t.param(x), t.param(w), t.param(b), 2, 1);
                         };
                         const Tensor proj = projection_like(fwd, r);
                         return finite_diff_check(
                                    [&](Tape& t) { return project(t, fwd(t), proj); },
                                    params)
                             .max_rel_err;
                     }});
    cases.push_back({"adaptive_pool_max", [](Rng& r) {
                         return check_unary(
                             [](Tape& t, Var x) {
                                 return adaptive_pool2d(t, x, 3, 1, PoolMode::max);
                             },
                             {2, 7, 3}, r);
                     }});
    cases.push_back({"adaptive_pool_avg", [](Rng& r) {
                         return check_unary(
                             [](Tape& t, Var x) {
                                 return adaptive_pool2d(t, x, 3, 2, PoolMode::avg);
                             },
                             {2, 8, 5}, r);
                     }});
    cases.push_back({"softmax", [](Rng& r) {
                         return check_unary([](Tape& t, Var x) { return softmax(t, x); },
                                            {3, 5}, r, -2.0, 2.0);
                     }});
    cases.push_back({"l2_normalize", [](Rng& r) {
                         return check_unary(
                             [](Tape& t, Var x) { return l2_normalize(t, x); }, {3, 6}, r,
                             0.2, 1.0);
                     }});
    cases.push_back({"add_row_bias", [](Rng& r) {
                         return check_binary(
                             [](Tape& t, Var a, Var b) { return add_row_bias(t, a, b); },
                             {4, 3}, {3}, r);
                     }});
    cases.push_back({"cross_entropy", [](Rng& r) {
                         Parameter logits("logits", random_tensor({3, 4}, r, -2.0, 2.0));
                         std::vector<int64_t> labels{static_cast<int64_t>(r.below(4)),
                                                     static_cast<int64_t>(r.below(4)),
                                                     static_cast<int64_t>(r.below(4))};
                         const Tensor target = one_hot(labels, 4);
                         Parameter* params[] = {&logits};
                         return finite_diff_check(
                                    [&](Tape& t) {
                                        return cross_entropy(
                                            t, softmax(t, t.param(logits)), target);
                                    },
                                    params)
                             .max_rel_err;
                     }});
    cases.push_back({"batch_hard_triplet", [](Rng& r) {
                         Parameter f("f", random_tensor({8, 5}, r));
                         const std::vector<int64_t> labels{0, 0, 1, 1, 2, 2, 3, 3};
                         Parameter* params[] = {&f};
                         return finite_diff_check(
                                    [&](Tape& t) {
                                        return batch_hard_triplet(t, t.param(f), labels,
                                                                  0.3);
                                    },
                                    params)
                             .max_rel_err;
                     }});
    cases.push_back({"center_loss", [](Rng& r) {
                         Parameter f("f", random_tensor({6, 4}, r));
                         const Tensor bank = random_tensor({3, 4}, r);
                         const std::vector<int64_t> labels{0, 1, 2, 0, 1, 2};
                         Parameter* params[] = {&f};
                         return finite_diff_check(
                                    [&](Tape& t) {
                                        return center_loss(t, t.param(f), labels, bank);
                                    },
                                    params)
                             .max_rel_err;
                     }});
    cases.push_back({"center_loss_unsquared", [](Rng& r) {
                         Parameter f("f", random_tensor({4, 3}, r));
                         const Tensor bank = random_tensor({2, 3}, r);
                         const std::vector<int64_t> labels{0, 1, 0, 1};
                         Parameter* params[] = {&f};
                         return finite_diff_check(
                                    [&](Tape& t) {
                                        return center_loss(t, t.param(f), labels, bank,
                                                           true);
                                    },
                                    params)
                             .max_rel_err;
                     }});

    SuiteReport report;
    Rng rng(Rng::mix(seed, 0x9dc7));
    for (const auto& c : cases) {
        double worst = 0.0;
        for (int64_t i = 0; i < repeats; ++i) {
            worst = std::max(worst, c.run(rng));
        }
        report.entries.push_back({c.name, worst});
        report.worst = std::max(report.worst, worst);
    }

    const double toy = check_composite_toy(seed);
    report.entries.push_back({"composite_toy_model", toy});
    report.worst = std::max(report.worst, toy);
    return report;
}

std::string SuiteReport::to_json(double tolerance) const {
    std::ostringstream os;
    os.precision(17);
    os << "{\"tolerance\": " << tolerance << ", \"pass\": " << (pass(tolerance) ? "true" : "false")
       << ", \"worst\": " << worst << ", \"ops\": [";
    for (size_t i = 0; i < entries.size(); ++i) {
        if (i) {
            os << ", ";
        }
        os << "{\"op\": \"" << entries[i].op << "\", \"max_rel_err\": " << entries[i].max_rel_err
           << "}";
    }
    os << "]}";
    return os.str();
}

} // namespace can
