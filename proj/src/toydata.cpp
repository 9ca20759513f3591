#include "tfd/toydata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "tfd/tensor.hpp" // parallel_for

namespace fs = std::filesystem;
using nlohmann::json;

namespace tfd {

namespace {

struct Color {
    float r, g, b;
};

void fill_background(ImagePlane& img, Rng& rng) {
    Color top{float(rng.uniform(0.25, 0.65)), float(rng.uniform(0.25, 0.65)),
              float(rng.uniform(0.30, 0.70))};
    Color bot{float(rng.uniform(0.10, 0.45)), float(rng.uniform(0.10, 0.45)),
              float(rng.uniform(0.10, 0.45))};
    double fx = rng.uniform(1.5, 5.0), fy = rng.uniform(1.5, 5.0);
    double px = rng.uniform(0.0, 6.283), py = rng.uniform(0.0, 6.283);
    double amp = rng.uniform(0.02, 0.08);
    for (int y = 0; y < img.height; ++y) {
        float t = float(y) / float(img.height - 1);
        for (int x = 0; x < img.width; ++x) {
            float tex = float(amp * std::sin(fx * 6.283 * x / img.width + px) *
                              std::sin(fy * 6.283 * y / img.height + py));
            img.at(0, y, x) = std::clamp(top.r + t * (bot.r - top.r) + tex, 0.0f, 1.0f);
            img.at(1, y, x) = std::clamp(top.g + t * (bot.g - top.g) + tex, 0.0f, 1.0f);
            img.at(2, y, x) = std::clamp(top.b + t * (bot.b - top.b) + tex, 0.0f, 1.0f);
        }
    }
}

void fill_rect(ImagePlane& img, int x0, int y0, int x1, int y1, Color c) {
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    x1 = std::min(x1, img.width);
    y1 = std::min(y1, img.height);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            img.at(0, y, x) = c.r;
            img.at(1, y, x) = c.g;
            img.at(2, y, x) = c.b;
        }
}

void fill_ellipse(ImagePlane& img, double cx, double cy, double rx, double ry, Color c) {
    int x0 = std::max(int(std::floor(cx - rx)), 0);
    int x1 = std::min(int(std::ceil(cx + rx)) + 1, img.width);
    int y0 = std::max(int(std::floor(cy - ry)), 0);
    int y1 = std::min(int(std::ceil(cy + ry)) + 1, img.height);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
            if (dx * dx + dy * dy <= 1.0) {
                img.at(0, y, x) = c.r;
                img.at(1, y, x) = c.g;
                img.at(2, y, x) = c.b;
            }
        }
}

// Skin-tone ellipse with eye dots and a mouth bar; returns the face box.
BoxXYWH paint_face(ImagePlane& img, Rng& rng, double cx, double cy, double h) {
    double ry = h / 2.0;
    double rx = ry * rng.uniform(0.70, 0.85);
    Color skin{float(rng.uniform(0.70, 0.92)), float(rng.uniform(0.52, 0.70)),
               float(rng.uniform(0.40, 0.56))};
    Color dark{skin.r * 0.25f, skin.g * 0.25f, skin.b * 0.25f};
    fill_ellipse(img, cx, cy, rx, ry, skin);
    double er = std::max(1.0, 0.10 * ry);
    fill_ellipse(img, cx - 0.45 * rx, cy - 0.25 * ry, er, er, dark);
    fill_ellipse(img, cx + 0.45 * rx, cy - 0.25 * ry, er, er, dark);
    fill_ellipse(img, cx, cy + 0.45 * ry, 0.45 * rx, std::max(1.0, 0.08 * ry), dark);
    return {cx - rx, cy - ry, 2.0 * rx, 2.0 * ry};
}

double iou_xywh(const BoxXYWH& a, const BoxXYWH& b) {
    double x1 = std::max(a.x, b.x), y1 = std::max(a.y, b.y);
    double x2 = std::min(a.x2(), b.x2()), y2 = std::min(a.y2(), b.y2());
    double inter = std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1);
    double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

json toy_config_to_json(const ToyConfig& c) {
    return json{{"count", c.count},
                {"width", c.width},
                {"height", c.height},
                {"faceless_frac", c.faceless_frac},
                {"ratio_min", c.ratio_min},
                {"ratio_max", c.ratio_max},
                {"seed", c.seed},
                {"keep_sources", c.keep_sources},
                {"noise",
                 {{"gain", c.noise.gain},
                  {"gauss_sigma", c.noise.gauss_sigma},
                  {"literal_formula", c.noise.literal_formula}}}};
}

} // namespace

void ToyConfig::validate() const {
    if (count <= 0) throw std::invalid_argument("toy corpus: count must be positive");
    if (width < 32 || height < 32)
        throw std::invalid_argument("toy corpus: target size must be at least 32x32");
    if (faceless_frac < 0.0 || faceless_frac > 1.0)
        throw std::invalid_argument("toy corpus: faceless_frac must be in [0,1]");
    if (!(ratio_min > 0.0) || !(ratio_max >= ratio_min))
        throw std::invalid_argument("toy corpus: need 0 < ratio_min <= ratio_max");
    if (noise.gain < 0 || noise.gauss_sigma < 0)
        throw std::invalid_argument("toy corpus: noise parameters must be non-negative");
}

AnnotatedImage toy_scene(const ToyConfig& cfg, uint64_t seed, bool faceless) {
    int W = cfg.width * 2, H = cfg.height * 2;
    Rng rng(seed);
    AnnotatedImage a;
    a.image = ImagePlane(W, H, 3);
    fill_background(a.image, rng);

    int n_rects = 1 + int(rng.below(4));
    for (int i = 0; i < n_rects; ++i) {
        int w = int(rng.uniform(0.08, 0.30) * W);
        int h = int(rng.uniform(0.08, 0.30) * H);
        int x = int(rng.below(uint64_t(std::max(1, W - w))));
        int y = int(rng.below(uint64_t(std::max(1, H - h))));
        // keep distractors away from skin hues
        Color c{float(rng.uniform(0.05, 0.50)), float(rng.uniform(0.30, 0.90)),
                float(rng.uniform(0.30, 0.90))};
        fill_rect(a.image, x, y, x + w, y + h, c);
    }

    if (!faceless) {
        int n_faces = 1 + int(rng.below(2));
        for (int i = 0; i < n_faces; ++i) {
            for (int attempt = 0; attempt < 40; ++attempt) {
                double h = rng.uniform(0.25, 0.60) * H;
                double cy = rng.uniform(h / 2, H - h / 2);
                double cx = rng.uniform(h / 2, W - h / 2);
                BoxXYWH cand{cx - h / 2, cy - h / 2, h, h};
                bool clear = true;
                for (const BoxXYWH& b : a.boxes)
                    if (iou_xywh(cand, b) > 0.15) clear = false;
                if (!clear) continue;
                a.boxes.push_back(paint_face(a.image, rng, cx, cy, h));
                break;
            }
        }
    }
    return a;
}

void generate_toy_corpus(const ToyConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    if (cfg.keep_sources) fs::create_directories(fs::path(out_dir) / "sources");

    SynthConfig sc;
    sc.target_w = cfg.width;
    sc.target_h = cfg.height;
    sc.ratio_min = cfg.ratio_min;
    sc.ratio_max = cfg.ratio_max;
    sc.rotate_right = false; // scenes are already in sensor orientation
    // evenly interleaved faceless frames at the requested rate
    int faceless_mod = int(std::lround(cfg.faceless_frac * 100.0));
    auto is_faceless = [&](int64_t i) {
        return (i + 1) * faceless_mod / 100 > i * faceless_mod / 100;
    };

    std::vector<AnnotationRecord> raw_recs(size_t(cfg.count));
    std::vector<AnnotationRecord> src_recs(size_t(cfg.count));
    parallel_for(cfg.count, [&](int64_t i) {
        char name[32];
        std::snprintf(name, sizeof name, "toy_%06d", int(i));
        std::string id(name);
        bool faceless = is_faceless(i);
        AnnotatedImage scene = toy_scene(cfg, derive_seed(cfg.seed, id + "/scene"), faceless);
        scene.source_id = id;
        RawSample s = synthesize(scene, sc, cfg.noise, derive_seed(cfg.seed, id));
        std::string out_name = id + ".pgm";
        save_pnm(s.raw, (fs::path(out_dir) / out_name).string());
        raw_recs[size_t(i)] = {id, out_name, s.boxes};
        if (cfg.keep_sources) {
            std::string src_name = id + ".png";
            save_png(to_8bit(scene.image), (fs::path(out_dir) / "sources" / src_name).string());
            src_recs[size_t(i)] = {id, src_name, scene.boxes};
        }
    });

    save_annotations(raw_recs, (fs::path(out_dir) / "annotations.jsonl").string());
    if (cfg.keep_sources)
        save_annotations(src_recs,
                         (fs::path(out_dir) / "sources" / "annotations.jsonl").string());

    json manifest{{"kind", "toy_corpus"},
                  {"config", toy_config_to_json(cfg)},
                  {"count", cfg.count},
                  {"image_dir", cfg.keep_sources ? (fs::path(out_dir) / "sources").string() : ""}};
    std::ofstream mf(fs::path(out_dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

ToyConfig toy_config_from_json_string(const std::string& text) {
    json j = json::parse(text);
    ToyConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "count") c.count = it.value().get<int>();
        else if (k == "width") c.width = it.value().get<int>();
        else if (k == "height") c.height = it.value().get<int>();
        else if (k == "faceless_frac") c.faceless_frac = it.value().get<double>();
        else if (k == "ratio_min") c.ratio_min = it.value().get<double>();
        else if (k == "ratio_max") c.ratio_max = it.value().get<double>();
        else if (k == "seed") c.seed = it.value().get<uint64_t>();
        else if (k == "keep_sources") c.keep_sources = it.value().get<bool>();
        else if (k == "noise") {
            json n = it.value();
            for (auto nit = n.begin(); nit != n.end(); ++nit) {
                const std::string& nk = nit.key();
                if (nk == "gain") c.noise.gain = nit.value().get<double>();
                else if (nk == "gauss_sigma") c.noise.gauss_sigma = nit.value().get<double>();
                else if (nk == "literal_formula") c.noise.literal_formula = nit.value().get<bool>();
                else throw std::invalid_argument("toy config: unknown noise key '" + nk + "'");
            }
        } else {
            throw std::invalid_argument("toy config: unknown key '" + k + "'");
        }
    }
    c.validate();
    return c;
}

std::string toy_config_to_json_string(const ToyConfig& cfg) {
    return toy_config_to_json(cfg).dump(2);
}

} // namespace tfd
