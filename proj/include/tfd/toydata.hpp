#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tfd/rawsim.hpp"

namespace tfd {

// Blob-face fixture corpus: ellipse "faces" with eye/mouth marks over
// textured scenes, pushed through the reverse-ISP pipeline into RAW frames.
struct ToyConfig {
    int count = 2000;
    int width = 160;
    int height = 120;
    double faceless_frac = 0.15;
    double ratio_min = 0.20;
    double ratio_max = 1.10;
    uint64_t seed = 1;
    NoiseParams noise;
    bool keep_sources = true; // also write the sRGB scenes under sources/

    void validate() const;
};

// One synthetic sRGB scene (2x the RAW target size) with its face boxes.
AnnotatedImage toy_scene(const ToyConfig& cfg, uint64_t seed, bool faceless);

// Writes <out_dir>/{*.pgm, annotations.jsonl, manifest.json} and, with
// keep_sources, <out_dir>/sources/{*.png, annotations.jsonl}.
void generate_toy_corpus(const ToyConfig& cfg, const std::string& out_dir);

ToyConfig toy_config_from_json_string(const std::string& text);
std::string toy_config_to_json_string(const ToyConfig& cfg);

} // namespace tfd
