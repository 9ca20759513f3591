#include "tfd/rawsim.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tfd/tensor.hpp" // parallel_for

namespace fs = std::filesystem;
using nlohmann::json;

namespace tfd {

namespace {

float clamp01(float x) { return std::clamp(x, 0.0f, 1.0f); }

// channel index for the 2x2 CFA tile position (row parity, col parity)
int cfa_channel(CfaPhase p, int rp, int cp) {
    static constexpr int kMap[4][4] = {
        // (0,0) (0,1) (1,0) (1,1)
        {0, 1, 1, 2}, // RGGB
        {1, 0, 2, 1}, // GRBG
        {1, 2, 0, 1}, // GBRG
        {2, 1, 1, 0}, // BGGR
    };
    return kMap[int(p)][rp * 2 + cp];
}

} // namespace

CfaPhase cfa_from_string(const std::string& s) {
    if (s == "RGGB") return CfaPhase::RGGB;
    if (s == "GRBG") return CfaPhase::GRBG;
    if (s == "GBRG") return CfaPhase::GBRG;
    if (s == "BGGR") return CfaPhase::BGGR;
    throw std::invalid_argument("unknown CFA phase '" + s + "'");
}

std::string cfa_to_string(CfaPhase p) {
    switch (p) {
        case CfaPhase::RGGB: return "RGGB";
        case CfaPhase::GRBG: return "GRBG";
        case CfaPhase::GBRG: return "GBRG";
        case CfaPhase::BGGR: return "BGGR";
    }
    return "RGGB";
}

void SynthConfig::validate() const {
    if (target_w <= 0 || target_h <= 0)
        throw std::invalid_argument("SynthConfig: target size must be positive");
    if (gamma <= 0) throw std::invalid_argument("SynthConfig: gamma must be positive");
    if (shading_k < 0) throw std::invalid_argument("SynthConfig: shading_k must be >= 0");
    if (!(0 < ratio_min && ratio_min <= ratio_max))
        throw std::invalid_argument("SynthConfig: need 0 < ratio_min <= ratio_max");
    if (sp_prob < 0 || sp_prob > 1)
        throw std::invalid_argument("SynthConfig: sp_prob must be in [0,1]");
    if (sp_density < 0 || sp_density > 1)
        throw std::invalid_argument("SynthConfig: sp_density must be in [0,1]");
}

ImagePlane inverse_tone_curve(const ImagePlane& img) {
    ImagePlane out = img;
    for (auto& x : out.v) {
        float c = clamp01(x);
        x = float(0.5 - std::sin(std::asin(1.0 - 2.0 * double(c)) / 3.0));
    }
    return out;
}

ImagePlane inverse_gamma(const ImagePlane& img, double gamma) {
    if (gamma <= 0) throw std::invalid_argument("inverse_gamma: gamma must be positive");
    ImagePlane out = img;
    for (auto& x : out.v) x = float(std::pow(double(clamp01(x)), gamma));
    return out;
}

ImagePlane inverse_lens_shading(const ImagePlane& img, double k) {
    if (k < 0) throw std::invalid_argument("inverse_lens_shading: k must be >= 0");
    ImagePlane out = img;
    double cx = (img.width - 1) / 2.0;
    double cy = (img.height - 1) / 2.0;
    double half_diag = std::sqrt(cx * cx + cy * cy);
    if (half_diag == 0) half_diag = 1; // 1x1 image: center pixel, r = 0 anyway
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double dx = x - cx, dy = y - cy;
                double r2 = (dx * dx + dy * dy) / (half_diag * half_diag);
                out.at(c, y, x) = clamp01(float(img.at(c, y, x) / (1.0 + k * r2)));
            }
    return out;
}

ImagePlane add_sensor_noise(const ImagePlane& img, const NoiseParams& p) {
    if (p.gain < 0) throw std::invalid_argument("add_sensor_noise: gain must be >= 0");
    if (p.gauss_sigma < 0) throw std::invalid_argument("add_sensor_noise: gauss_sigma must be >= 0");
    ImagePlane out = img;
    Rng rng(p.seed);
    for (auto& x : out.v) {
        double y = double(clamp01(x));
        double v = y;
        if (p.gain > 0) {
            if (p.literal_formula)
                v = double(rng.poisson(p.gain * y)) / p.gain;
            else
                v = p.gain * double(rng.poisson(y / p.gain));
        }
        if (p.gauss_sigma > 0) v += p.gauss_sigma * rng.normal();
        x = clamp01(float(v));
    }
    return out;
}

ImagePlane bayer_mosaic(const ImagePlane& img, CfaPhase phase) {
    if (img.channels != 3) throw std::invalid_argument("bayer_mosaic: expected 3-channel input");
    int w = img.width & ~1;
    int h = img.height & ~1;
    if (w == 0 || h == 0) throw std::invalid_argument("bayer_mosaic: image too small");
    ImagePlane out(w, h, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            out.at(0, y, x) = img.at(cfa_channel(phase, y & 1, x & 1), y, x);
    return out;
}

AnnotatedImage face_crop_augment(const AnnotatedImage& a, const SynthConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const ImagePlane& src = a.image;
    double aspect = double(cfg.target_w) / double(cfg.target_h);

    double crop_h, crop_w, crop_cx, crop_cy;
    if (!a.boxes.empty()) {
        const BoxXYWH& face = a.boxes[rng.below(a.boxes.size())];
        double ratio = rng.uniform(cfg.ratio_min, cfg.ratio_max);
        crop_h = face.h / ratio;
        crop_w = crop_h * aspect;
        crop_cx = face.x + face.w / 2.0;
        crop_cy = face.y + face.h / 2.0;
    } else {
        double scale = rng.uniform(0.5, 1.0);
        crop_h = src.height * scale;
        crop_w = crop_h * aspect;
        crop_cx = src.width / 2.0;
        crop_cy = src.height / 2.0;
    }

    double crop_x = crop_cx - crop_w / 2.0;
    double crop_y = crop_cy - crop_h / 2.0;

    // Sample the crop window into an intermediate buffer at target resolution;
    // source pixels are looked up bilinearly, out-of-source regions are black.
    AnnotatedImage out;
    out.source_id = a.source_id;
    out.image = ImagePlane(cfg.target_w, cfg.target_h, src.channels);
    double sx = crop_w / cfg.target_w;
    double sy = crop_h / cfg.target_h;
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < cfg.target_h; ++y) {
            double fy = crop_y + (y + 0.5) * sy - 0.5;
            int y0 = int(std::floor(fy));
            double wy = fy - y0;
            for (int x = 0; x < cfg.target_w; ++x) {
                double fx = crop_x + (x + 0.5) * sx - 0.5;
                int x0 = int(std::floor(fx));
                double wx = fx - x0;
                auto sample = [&](int yy, int xx) -> double {
                    if (yy < 0 || yy >= src.height || xx < 0 || xx >= src.width) return 0.0;
                    return src.at(c, yy, xx);
                };
                double top = sample(y0, x0) * (1 - wx) + sample(y0, x0 + 1) * wx;
                double bot = sample(y0 + 1, x0) * (1 - wx) + sample(y0 + 1, x0 + 1) * wx;
                out.image.at(c, y, x) = float(top * (1 - wy) + bot * wy);
            }
        }

    double scale_x = cfg.target_w / crop_w;
    double scale_y = cfg.target_h / crop_h;
    for (const BoxXYWH& b : a.boxes) {
        double x1 = (b.x - crop_x) * scale_x;
        double y1 = (b.y - crop_y) * scale_y;
        double x2 = (b.x2() - crop_x) * scale_x;
        double y2 = (b.y2() - crop_y) * scale_y;
        x1 = std::clamp(x1, 0.0, double(cfg.target_w));
        y1 = std::clamp(y1, 0.0, double(cfg.target_h));
        x2 = std::clamp(x2, 0.0, double(cfg.target_w));
        y2 = std::clamp(y2, 0.0, double(cfg.target_h));
        if (x2 - x1 <= 0 || y2 - y1 <= 0) continue;
        out.boxes.push_back({x1, y1, x2 - x1, y2 - y1});
    }
    return out;
}

ImagePlane salt_pepper(const ImagePlane& img, double density, uint64_t seed) {
    if (density < 0 || density > 1)
        throw std::invalid_argument("salt_pepper: density must be in [0,1]");
    ImagePlane out = img;
    Rng rng(seed);
    for (auto& x : out.v)
        if (rng.bernoulli(density)) x = rng.bernoulli(0.5) ? 1.0f : 0.0f;
    return out;
}

ImagePlane backlight_ramp(const ImagePlane& img, const std::vector<BoxXYWH>& boxes) {
    ImagePlane out = img;
    double band_cy = img.height / 2.0;
    if (!boxes.empty()) {
        double top = boxes[0].y;
        for (const auto& b : boxes) top = std::min(top, b.y);
        band_cy = std::max(0.0, top - img.height * 0.1);
    }
    double band_sigma = img.height / 6.0;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y) {
            double dy = (y - band_cy) / band_sigma;
            double gain = 1.0 + std::exp(-0.5 * dy * dy);
            for (int x = 0; x < img.width; ++x) {
                bool fg = false;
                for (const auto& b : boxes)
                    if (x >= b.x && x < b.x2() && y >= b.y && y < b.y2()) { fg = true; break; }
                double g = fg ? 0.5 : gain;
                out.at(c, y, x) = clamp01(float(img.at(c, y, x) * g));
            }
        }
    return out;
}

void rotate90_right(const ImagePlane& img, const std::vector<BoxXYWH>& boxes,
                    ImagePlane& out_img, std::vector<BoxXYWH>& out_boxes) {
    int H = img.height, W = img.width;
    out_img = ImagePlane(H, W, img.channels); // width/height swap
    for (int c = 0; c < img.channels; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
                out_img.at(c, j, H - 1 - i) = img.at(c, i, j);
    out_boxes.clear();
    out_boxes.reserve(boxes.size());
    for (const BoxXYWH& b : boxes)
        out_boxes.push_back({double(H) - b.y - b.h, b.x, b.h, b.w});
}

RawSample synthesize(const AnnotatedImage& a, const SynthConfig& cfg,
                     const NoiseParams& noise, uint64_t seed) {
    cfg.validate();
    std::string stage = "face_crop_augment";
    try {
        AnnotatedImage cur = cfg.crop_augment
                                 ? face_crop_augment(a, cfg, derive_seed(seed, "crop"))
                                 : a;
        ImagePlane img = cur.image;
        std::vector<BoxXYWH> boxes = cur.boxes;

        stage = "inverse_tone_curve";
        if (cfg.tone_curve) img = inverse_tone_curve(img);
        stage = "inverse_gamma";
        if (cfg.gamma != 1.0) img = inverse_gamma(img, cfg.gamma);
        stage = "inverse_lens_shading";
        if (cfg.shading_k > 0) img = inverse_lens_shading(img, cfg.shading_k);

        stage = "bayer_mosaic";
        if (img.channels == 3) {
            img = bayer_mosaic(img, cfg.cfa);
        } else if (img.channels != 1) {
            throw std::invalid_argument("expected 1- or 3-channel image");
        }

        stage = "add_sensor_noise";
        NoiseParams np = noise;
        np.seed = derive_seed(seed, "noise");
        img = add_sensor_noise(img, np);

        stage = "salt_pepper";
        if (cfg.sp_prob > 0) {
            Rng coin(derive_seed(seed, "coin"));
            if (coin.bernoulli(cfg.sp_prob))
                img = salt_pepper(img, cfg.sp_density, derive_seed(seed, "sp"));
        }
        stage = "backlight";
        if (cfg.backlight) img = backlight_ramp(img, boxes);

        stage = "rotate90_right";
        if (cfg.rotate_right) {
            ImagePlane rot;
            std::vector<BoxXYWH> rot_boxes;
            rotate90_right(img, boxes, rot, rot_boxes);
            img = std::move(rot);
            boxes = std::move(rot_boxes);
        }

        stage = "quantize_8bit";
        RawSample out;
        out.raw = to_8bit(img);
        out.boxes = std::move(boxes);
        out.source_id = a.source_id;
        return out;
    } catch (const std::exception& e) {
        throw std::runtime_error("synthesize[" + stage + "] on '" + a.source_id + "': " + e.what());
    }
}

std::vector<AnnotationRecord> load_annotations(const std::string& jsonl_path) {
    std::ifstream in(jsonl_path);
    if (!in) throw std::runtime_error(jsonl_path + ": cannot open");
    std::vector<AnnotationRecord> recs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(jsonl_path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        AnnotationRecord r;
        r.id = j.at("id").get<std::string>();
        r.file = j.at("file").get<std::string>();
        for (const auto& b : j.at("boxes")) {
            if (b.size() != 4)
                throw std::runtime_error(jsonl_path + ":" + std::to_string(lineno) +
                                         ": box must have 4 entries");
            r.boxes.push_back({b[0].get<double>(), b[1].get<double>(),
                               b[2].get<double>(), b[3].get<double>()});
        }
        recs.push_back(std::move(r));
    }
    return recs;
}

void save_annotations(const std::vector<AnnotationRecord>& recs, const std::string& jsonl_path) {
    std::ofstream out(jsonl_path, std::ios::trunc);
    if (!out) throw std::runtime_error(jsonl_path + ": cannot open for write");
    for (const auto& r : recs) {
        json boxes = json::array();
        for (const auto& b : r.boxes) boxes.push_back({b.x, b.y, b.w, b.h});
        json j{{"id", r.id}, {"file", r.file}, {"boxes", boxes}};
        out << j.dump() << "\n";
    }
}

static json synth_config_to_json(const SynthConfig& c) {
    return json{{"target_w", c.target_w},
                {"target_h", c.target_h},
                {"gamma", c.gamma},
                {"shading_k", c.shading_k},
                {"face_ratio", {c.ratio_min, c.ratio_max}},
                {"sp_prob", c.sp_prob},
                {"sp_density", c.sp_density},
                {"backlight", c.backlight},
                {"rotate_right", c.rotate_right},
                {"cfa", cfa_to_string(c.cfa)},
                {"tone_curve", c.tone_curve},
                {"crop_augment", c.crop_augment}};
}

static SynthConfig synth_config_from_json(const json& j) {
    SynthConfig c;
    c.target_w = j.value("target_w", c.target_w);
    c.target_h = j.value("target_h", c.target_h);
    c.gamma = j.value("gamma", c.gamma);
    c.shading_k = j.value("shading_k", c.shading_k);
    if (j.contains("face_ratio")) {
        c.ratio_min = j.at("face_ratio").at(0).get<double>();
        c.ratio_max = j.at("face_ratio").at(1).get<double>();
    }
    c.sp_prob = j.value("sp_prob", c.sp_prob);
    c.sp_density = j.value("sp_density", c.sp_density);
    c.backlight = j.value("backlight", c.backlight);
    c.rotate_right = j.value("rotate_right", c.rotate_right);
    if (j.contains("cfa")) c.cfa = cfa_from_string(j.at("cfa").get<std::string>());
    c.tone_curve = j.value("tone_curve", c.tone_curve);
    c.crop_augment = j.value("crop_augment", c.crop_augment);
    c.validate();
    return c;
}

SynthConfig synth_config_from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    json j;
    in >> j;
    return synth_config_from_json(j);
}

SynthConfig synth_config_from_json_string(const std::string& text) {
    return synth_config_from_json(json::parse(text));
}

std::string synth_config_to_json_string(const SynthConfig& cfg) {
    return synth_config_to_json(cfg).dump(2);
}

int synthesize_corpus(const std::string& image_dir, const std::string& annotations_path,
                      const SynthConfig& cfg, const NoiseParams& noise, uint64_t master_seed,
                      const std::string& out_dir) {
    cfg.validate();
    auto recs = load_annotations(annotations_path);
    fs::create_directories(out_dir);

    std::vector<AnnotationRecord> tmp_recs(recs.size());
    std::vector<std::string> errors(recs.size());
    parallel_for(int64_t(recs.size()), [&](int64_t i) {
        const auto& r = recs[size_t(i)];
        try {
            AnnotatedImage a;
            a.image = to_float(load_image((fs::path(image_dir) / r.file).string()));
            a.boxes = r.boxes;
            a.source_id = r.id;
            RawSample s = synthesize(a, cfg, noise, derive_seed(master_seed, r.id));
            std::string out_name = r.id + ".pgm";
            save_pnm(s.raw, (fs::path(out_dir) / out_name).string());
            tmp_recs[size_t(i)] = {r.id, out_name, s.boxes};
        } catch (const std::exception& e) {
            errors[size_t(i)] = e.what();
        }
    });
    std::vector<AnnotationRecord> out_recs;
    for (size_t i = 0; i < recs.size(); ++i) {
        if (errors[i].empty()) {
            out_recs.push_back(std::move(tmp_recs[i]));
        } else {
            std::cerr << "skipping '" << recs[i].id << "': " << errors[i] << "\n";
        }
    }
    if (out_recs.empty() && !recs.empty())
        throw std::runtime_error("synthesize_corpus: every source image failed");

    save_annotations(out_recs, (fs::path(out_dir) / "annotations.jsonl").string());

    json manifest{
        {"kind", "synth_corpus"},
        {"config", synth_config_to_json(cfg)},
        {"noise", {{"gain", noise.gain},
                   {"gauss_sigma", noise.gauss_sigma},
                   {"literal_formula", noise.literal_formula}}},
        {"master_seed", master_seed},
        {"stage_order",
         {"face_crop_augment", "inverse_tone_curve", "inverse_gamma", "inverse_lens_shading",
          "bayer_mosaic", "add_sensor_noise", "salt_pepper", "backlight", "rotate90_right",
          "quantize_8bit"}},
        {"count", out_recs.size()},
        {"image_dir", image_dir},
        {"source_annotations", annotations_path}};
    std::ofstream mf(fs::path(out_dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
    return int(out_recs.size());
}

} // namespace tfd
