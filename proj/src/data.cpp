// SPDX-License-Identifier: Apache-2.0

#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "blob.hpp"

namespace can {

using nlohmann::json;

const char* split_name(Split s) {
    switch (s) {
    case Split::train:
        return "train";
    case Split::query:
        return "query";
    case Split::gallery:
        return "gallery";
    }
    return "?";
}

Split split_from_name(const std::string& name) {
    if (name == "train") {
        return Split::train;
    }
    if (name == "query") {
        return Split::query;
    }
    if (name == "gallery") {
        return Split::gallery;
    }
    fail(ErrorKind::format, "unknown split \"" + name + "\"");
}

std::vector<int64_t> Manifest::split_indices(Split s) const {
    std::vector<int64_t> out;
    for (size_t i = 0; i < records.size(); ++i) {
        if (records[i].split == s) {
            out.push_back(static_cast<int64_t>(i));
        }
    }
    return out;
}

std::map<int64_t, std::vector<int64_t>> Manifest::train_by_id() const {
    std::map<int64_t, std::vector<int64_t>> out;
    for (size_t i = 0; i < records.size(); ++i) {
        if (records[i].split == Split::train) {
            out[records[i].person_id].push_back(static_cast<int64_t>(i));
        }
    }
    return out;
}

Manifest load_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream f(manifest_path);
    require(f.good(), ErrorKind::io, "cannot open manifest: " + manifest_path.string());

    Manifest m;
    m.root = manifest_path.parent_path();
    std::set<std::string> files;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) {
            continue;
        }
        SampleRecord rec;
        try {
            const json j = json::parse(line);
            rec.person_id = j.at("id").get<int64_t>();
            rec.camera_id = j.at("cam").get<int64_t>();
            rec.split = split_from_name(j.at("split").get<std::string>());
            rec.file = j.at("file").get<std::string>();
        } catch (const json::exception& e) {
            fail(ErrorKind::format, "manifest line " + std::to_string(line_no) +
                                        ": " + std::string(e.what()));
        } catch (const Error& e) {
            fail(ErrorKind::format,
                 "manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        require(rec.person_id >= -1, ErrorKind::format,
                "manifest line " + std::to_string(line_no) + ": person id < -1");
        require(rec.camera_id >= 0, ErrorKind::format,
                "manifest line " + std::to_string(line_no) + ": camera id < 0");
        require(!(rec.split == Split::train && rec.person_id == -1), ErrorKind::format,
                "manifest line " + std::to_string(line_no) +
                    ": junk id -1 is not allowed in the train split");
        require(files.insert(rec.file).second, ErrorKind::format,
                "manifest line " + std::to_string(line_no) + ": duplicate file " + rec.file);
        require(std::filesystem::exists(m.root / rec.file), ErrorKind::io,
                "manifest line " + std::to_string(line_no) + ": missing blob " + rec.file);
        m.records.push_back(std::move(rec));
    }
    return m;
}

void validate_pk(const Manifest& m, int64_t p, int64_t k) {
    require(p >= 2 && k >= 2, ErrorKind::invalid_argument,
            "PK sampling needs P >= 2 and K >= 2");
    const auto by_id = m.train_by_id();
    require(static_cast<int64_t>(by_id.size()) >= p, ErrorKind::invalid_argument,
            "PK sampling needs at least " + std::to_string(p) + " train ids, manifest has " +
                std::to_string(by_id.size()));
    for (const auto& [id, idxs] : by_id) {
        require(static_cast<int64_t>(idxs.size()) >= k, ErrorKind::invalid_argument,
                "train id " + std::to_string(id) + " has " + std::to_string(idxs.size()) +
                    " samples, PK sampling needs K=" + std::to_string(k));
    }
}

std::optional<std::pair<int64_t, int64_t>> parse_market_filename(const std::string& name) {
    // "0042_c3s1_000151_00.jpg" -> id 42, cam 3; "-1_c1..." -> junk
    size_t pos = 0;
    int64_t sign = 1;
    if (pos < name.size() && name[pos] == '-') {
        sign = -1;
        ++pos;
    }
    size_t digits = 0;
    int64_t id = 0;
    while (pos < name.size() && std::isdigit(static_cast<unsigned char>(name[pos]))) {
        id = id * 10 + (name[pos] - '0');
        ++pos;
        ++digits;
    }
    if (digits == 0 || pos + 1 >= name.size() || name[pos] != '_' || name[pos + 1] != 'c') {
        return std::nullopt;
    }
    pos += 2;
    size_t cam_digits = 0;
    int64_t cam = 0;
    while (pos < name.size() && std::isdigit(static_cast<unsigned char>(name[pos]))) {
        cam = cam * 10 + (name[pos] - '0');
        ++pos;
        ++cam_digits;
    }
    if (cam_digits == 0) {
        return std::nullopt;
    }
    return std::make_pair(sign * id, cam);
}

Tensor bilinear_resize(const Tensor& chw, int64_t out_h, int64_t out_w) {
    require(chw.ndim() == 3, ErrorKind::invalid_argument,
            "bilinear_resize: expected [C,H,W], got " + chw.shape_str());
    const int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    require(out_h >= 1 && out_w >= 1, ErrorKind::invalid_argument,
            "bilinear_resize: output must be at least 1x1");
    if (out_h == h && out_w == w) {
        return chw;
    }
    Tensor out({c, out_h, out_w});
    auto src_coord = [](int64_t dst, int64_t out_len, int64_t in_len) {
        if (out_len == 1) {
            return static_cast<double>(in_len - 1) / 2.0;
        }
        return static_cast<double>(dst) * static_cast<double>(in_len - 1) /
               static_cast<double>(out_len - 1);
    };
    for (int64_t ci = 0; ci < c; ++ci) {
        const double* plane = chw.data().data() + ci * h * w;
        double* o = out.data().data() + ci * out_h * out_w;
        for (int64_t y = 0; y < out_h; ++y) {
            const double sy = src_coord(y, out_h, h);
            const int64_t y0 = static_cast<int64_t>(std::floor(sy));
            const int64_t y1 = std::min(y0 + 1, h - 1);
            const double fy = sy - static_cast<double>(y0);
            for (int64_t x = 0; x < out_w; ++x) {
                const double sx = src_coord(x, out_w, w);
                const int64_t x0 = static_cast<int64_t>(std::floor(sx));
                const int64_t x1 = std::min(x0 + 1, w - 1);
                const double fx = sx - static_cast<double>(x0);
                const double top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                const double bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                o[y * out_w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    return out;
}

Tensor load_image_tensor(const Manifest& m, const SampleRecord& rec, int64_t target_h,
                         int64_t target_w, std::span<const double> mean,
                         std::span<const double> stddev) {
    Tensor img = blob::read(m.root / rec.file);
    require(img.ndim() == 3 && img.dim(0) == 3, ErrorKind::format,
            "image blob must be [3,H,W], got " + img.shape_str() + " for " + rec.file);
    require(mean.size() == 3 && stddev.size() == 3, ErrorKind::invalid_argument,
            "normalization needs 3 mean and 3 std values");
    Tensor resized = bilinear_resize(img, target_h, target_w);
    const int64_t plane = target_h * target_w;
    for (int64_t c = 0; c < 3; ++c) {
        require(stddev[static_cast<size_t>(c)] != 0.0, ErrorKind::invalid_argument,
                "normalization std must be non-zero");
        double* p = resized.data().data() + c * plane;
        for (int64_t i = 0; i < plane; ++i) {
            p[i] = (p[i] - mean[static_cast<size_t>(c)]) / stddev[static_cast<size_t>(c)];
        }
    }
    return resized;
}

// ---------------------------------------------------------------------------
// PK sampler
// ---------------------------------------------------------------------------

PKSampler::PKSampler(const Manifest& m, int64_t p, int64_t k, uint64_t seed,
                     bool allow_replacement)
    : p_(p), k_(k), allow_replacement_(allow_replacement), rng_(Rng(seed).fork(0x5a3b)) {
    require(p >= 2 && k >= 2, ErrorKind::invalid_argument,
            "PK sampling needs P >= 2 and K >= 2");
    by_id_ = m.train_by_id();
    require(static_cast<int64_t>(by_id_.size()) >= p_, ErrorKind::invalid_argument,
            "PK sampling needs at least " + std::to_string(p_) +
                " train ids, manifest has " + std::to_string(by_id_.size()));
    for (const auto& [id, idxs] : by_id_) {
        if (static_cast<int64_t>(idxs.size()) < k_) {
            require(allow_replacement_, ErrorKind::invalid_argument,
                    "train id " + std::to_string(id) + " has " +
                        std::to_string(idxs.size()) + " samples, PK sampling needs K=" +
                        std::to_string(k_));
            warnings_.push_back("id " + std::to_string(id) + " has fewer than K=" +
                                std::to_string(k_) + " samples; sampling with replacement");
        }
        ids_.push_back(id);
    }
}

void PKSampler::refill(int64_t id) {
    auto pool = by_id_.at(id);
    rng_.shuffle(pool);
    auto& dst = pools_[id];
    dst.insert(dst.begin(), pool.begin(), pool.end());
}

std::vector<int64_t> PKSampler::draw_k(int64_t id) {
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(k_));
    auto& pool = pools_[id];
    while (static_cast<int64_t>(out.size()) < k_) {
        if (pool.empty()) {
            refill(id);
        }
        out.push_back(pool.back());
        pool.pop_back();
    }
    return out;
}

std::vector<std::vector<int64_t>> PKSampler::epoch_batches() {
    pools_.clear();
    std::vector<int64_t> order = ids_;
    rng_.shuffle(order);
    const int64_t num_ids = static_cast<int64_t>(order.size());
    const int64_t num_batches = (num_ids + p_ - 1) / p_;

    std::vector<std::vector<int64_t>> batches;
    batches.reserve(static_cast<size_t>(num_batches));
    for (int64_t b = 0; b < num_batches; ++b) {
        std::vector<int64_t> batch_ids;
        std::set<int64_t> taken;
        for (int64_t j = b * p_; j < std::min((b + 1) * p_, num_ids); ++j) {
            batch_ids.push_back(order[static_cast<size_t>(j)]);
            taken.insert(batch_ids.back());
        }
        // pad a trailing partial batch with other ids, keeping P distinct
        for (int64_t j = 0; static_cast<int64_t>(batch_ids.size()) < p_; ++j) {
            const int64_t cand = order[static_cast<size_t>(j % num_ids)];
            if (taken.insert(cand).second) {
                batch_ids.push_back(cand);
            }
        }
        std::vector<int64_t> batch;
        batch.reserve(static_cast<size_t>(p_ * k_));
        for (int64_t id : batch_ids) {
            for (int64_t idx : draw_k(id)) {
                batch.push_back(idx);
            }
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// Synthetic identity generator
// ---------------------------------------------------------------------------

namespace {

constexpr int64_t kBands = 8;

// Horizontal clothing strata plus one accent stripe in the torso region;
// the stripe gives the pattern horizontal structure so x-shifts matter.
struct IdPattern {
    std::vector<double> bands; // kBands * 3
    std::array<double, 3> stripe;
    int64_t stripe_x;
    int64_t stripe_w;
};

IdPattern random_pattern(Rng& colors, int64_t width) {
    IdPattern p;
    p.bands.resize(static_cast<size_t>(kBands * 3));
    for (auto& v : p.bands) {
        v = colors.uniform(0.05, 0.95);
    }
    for (auto& v : p.stripe) {
        v = colors.uniform(0.05, 0.95);
    }
    p.stripe_w = std::max<int64_t>(2, width / 6);
    p.stripe_x = colors.below(std::max<int64_t>(1, width - p.stripe_w));
    return p;
}

void paint(Tensor& img, const IdPattern& p, int64_t shift_y, int64_t shift_x) {
    const int64_t h = img.dim(1), w = img.dim(2);
    for (int64_t c = 0; c < 3; ++c) {
        double* plane = img.data().data() + c * h * w;
        for (int64_t y = 0; y < h; ++y) {
            // wrapped shift: the same pattern, re-framed
            const int64_t sy = ((y - shift_y) % h + h) % h;
            const int64_t band = std::min(sy * kBands / h, kBands - 1);
            const double v = p.bands[static_cast<size_t>(band * 3 + c)];
            const bool torso = sy >= h / 4 && sy < (3 * h) / 4;
            for (int64_t x = 0; x < w; ++x) {
                const int64_t sx = ((x - shift_x) % w + w) % w;
                const bool in_stripe = sx >= p.stripe_x && sx < p.stripe_x + p.stripe_w;
                plane[y * w + x] = (torso && in_stripe) ? p.stripe[static_cast<size_t>(c)] : v;
            }
        }
    }
}

} // namespace

void generate_synthetic(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    require(cfg.num_ids >= 2, ErrorKind::invalid_argument, "synthetic: num_ids >= 2");
    require(cfg.per_id >= 2, ErrorKind::invalid_argument, "synthetic: per_id >= 2");
    require(cfg.height >= kBands && cfg.width >= 2, ErrorKind::invalid_argument,
            "synthetic: image too small");
    require(cfg.cameras >= 2, ErrorKind::invalid_argument, "synthetic: need >= 2 cameras");
    require(cfg.noise >= 0.0, ErrorKind::invalid_argument, "synthetic: noise >= 0");

    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "blobs");

    Rng root(cfg.seed);
    std::vector<IdPattern> patterns;
    {
        Rng colors = root.fork(0xc0);
        for (int64_t id = 0; id < cfg.num_ids; ++id) {
            IdPattern p = random_pattern(colors, cfg.width);
            // ids must stay distinguishable; with random doubles a clash is
            // practically impossible, but regenerate rather than assume
            for (const auto& prev : patterns) {
                if (prev.bands == p.bands) {
                    p = random_pattern(colors, cfg.width);
                }
            }
            patterns.push_back(std::move(p));
        }
    }

    std::ofstream manifest(out_dir / "manifest.jsonl");
    require(manifest.good(), ErrorKind::io,
            "cannot write manifest in " + out_dir.string());

    // vertical misalignment grows with the noise level; crops of the same
    // person rarely frame the body identically
    const int64_t max_shift =
        cfg.noise > 0.0
            ? std::max<int64_t>(1, static_cast<int64_t>(cfg.noise * cfg.height / 2.0))
            : 0;
    for (int64_t id = 0; id < cfg.num_ids; ++id) {
        Rng img_rng = root.fork(0x1000 + static_cast<uint64_t>(id));
        const int64_t max_shift_x =
            max_shift > 0 ? std::max<int64_t>(1, max_shift / 3) : 0;
        for (int64_t i = 0; i < cfg.per_id; ++i) {
            const int64_t cam = i % cfg.cameras;
            const int64_t shift_y =
                max_shift > 0 ? img_rng.below(2 * max_shift + 1) - max_shift : 0;
            const int64_t shift_x =
                max_shift_x > 0 ? img_rng.below(2 * max_shift_x + 1) - max_shift_x : 0;

            Tensor img({3, cfg.height, cfg.width});
            paint(img, patterns[static_cast<size_t>(id)], shift_y, shift_x);
            if (cfg.noise > 0.0) {
                const double tint =
                    1.0 + cfg.noise * 0.5 * static_cast<double>(cam) /
                              static_cast<double>(cfg.cameras);
                for (int64_t j = 0; j < img.numel(); ++j) {
                    double v = img[j] * tint + img_rng.uniform(-cfg.noise, cfg.noise);
                    img[j] = std::clamp(v, 0.0, 1.0);
                }
            }

            char name[64];
            std::snprintf(name, sizeof(name), "blobs/%04lld_c%lld_%02lld.cant",
                          static_cast<long long>(id), static_cast<long long>(cam),
                          static_cast<long long>(i));
            blob::write(out_dir / name, img);

            const char* split = i == 0 ? "query" : (i <= 2 ? "gallery" : "train");
            json line{{"id", id}, {"cam", cam}, {"split", split}, {"file", name}};
            manifest << line.dump() << "\n";
        }
    }
    require(manifest.good(), ErrorKind::io, "manifest write failed");
}

} // namespace can
