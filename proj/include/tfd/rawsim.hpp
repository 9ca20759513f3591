#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tfd/image.hpp"
#include "tfd/rng.hpp"

namespace tfd {

// Sensor noise model. gain == 0 disables the Poisson term (exact zero-noise
// path for tests); literal_formula selects Poisson(gain*y)/gain instead of
// the photon-count reading gain*Poisson(y/gain).
struct NoiseParams {
    double gain = 0.01;
    double gauss_sigma = 0.02;
    uint64_t seed = 0;
    bool literal_formula = false;
};

enum class CfaPhase { RGGB, GRBG, GBRG, BGGR };

CfaPhase cfa_from_string(const std::string& s);
std::string cfa_to_string(CfaPhase p);

struct SynthConfig {
    int target_w = 160;
    int target_h = 120;
    double gamma = 2.2;
    double shading_k = 0.25;
    double ratio_min = 0.20;
    double ratio_max = 1.10;
    double sp_prob = 0.5;
    double sp_density = 0.02;
    bool backlight = false;
    bool rotate_right = true;
    CfaPhase cfa = CfaPhase::RGGB;
    // Extra switches so the neutral pipeline is reachable in tests/tools.
    bool tone_curve = true;
    bool crop_augment = true;

    void validate() const;
};

struct AnnotatedImage {
    ImagePlane image; // 3-channel sRGB in [0,1]
    std::vector<BoxXYWH> boxes;
    std::string source_id;
};

struct RawSample {
    Image8 raw; // 1-channel 8-bit
    std::vector<BoxXYWH> boxes;
    std::string source_id;
};

ImagePlane inverse_tone_curve(const ImagePlane& img);
ImagePlane inverse_gamma(const ImagePlane& img, double gamma);
ImagePlane inverse_lens_shading(const ImagePlane& img, double k);
ImagePlane add_sensor_noise(const ImagePlane& img, const NoiseParams& p);
ImagePlane bayer_mosaic(const ImagePlane& img, CfaPhase phase);
AnnotatedImage face_crop_augment(const AnnotatedImage& a, const SynthConfig& cfg, uint64_t seed);
ImagePlane salt_pepper(const ImagePlane& img, double density, uint64_t seed);
// Halves gain inside face boxes and brightens a horizontal band behind them.
ImagePlane backlight_ramp(const ImagePlane& img, const std::vector<BoxXYWH>& boxes);
void rotate90_right(const ImagePlane& img, const std::vector<BoxXYWH>& boxes,
                    ImagePlane& out_img, std::vector<BoxXYWH>& out_boxes);

RawSample synthesize(const AnnotatedImage& a, const SynthConfig& cfg,
                     const NoiseParams& noise, uint64_t seed);

// Annotation records as stored in JSONL: {"id", "file", "boxes": [[x,y,w,h],...]}.
struct AnnotationRecord {
    std::string id;
    std::string file;
    std::vector<BoxXYWH> boxes;
};

std::vector<AnnotationRecord> load_annotations(const std::string& jsonl_path);
void save_annotations(const std::vector<AnnotationRecord>& recs, const std::string& jsonl_path);

// Reads sRGB sources per the annotation list, synthesizes RAW PGMs into
// out_dir, writes annotations.jsonl + manifest.json. Parallel over images,
// per-image seed = derive_seed(master_seed, source_id). Returns record count.
int synthesize_corpus(const std::string& image_dir, const std::string& annotations_path,
                      const SynthConfig& cfg, const NoiseParams& noise, uint64_t master_seed,
                      const std::string& out_dir);

SynthConfig synth_config_from_json_file(const std::string& path);
SynthConfig synth_config_from_json_string(const std::string& text);
std::string synth_config_to_json_string(const SynthConfig& cfg);

} // namespace tfd
