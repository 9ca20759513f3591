#pragma once

#include <string>
#include <vector>

#include "tfd/image.hpp"
#include "tfd/infer.hpp"
#include "tfd/model.hpp"
#include "tfd/rawsim.hpp"

namespace tfd {

// AP at one IoU threshold over the whole set: detections ranked globally by
// score (ties broken by image index, then detection index), greedily matched
// to the best still-unmatched ground truth in their image, PR area taken with
// all-points interpolation. Rejects a set with no ground truth at all.
double average_precision(const std::vector<std::vector<Detection>>& dets_per_image,
                         const std::vector<std::vector<BoxXYWH>>& gts_per_image,
                         double iou_thresh);

// Fraction of (faceless) images carrying at least one detection with
// score >= score_thresh. Rejects an empty image set.
double false_positive_rate(const std::vector<std::vector<Detection>>& dets_per_image,
                           double score_thresh);

struct CostReport {
    int num_layers = 0;
    double params_M = 0;
    double flops_G = 0;
    double bops_M = 0;
};

// Storage and arithmetic accounting at the given precision (ternary passes
// w_bits = 2). Weights are charged w_bits/32 of their fp32 footprint, biases
// a full 32 bits; per-layer BOPs = MACs * (bw*ba + bw + ba + log2(acc width))
// with 32-bit accumulators. flops_G counts MACs and so never moves with the
// bit widths.
CostReport cost_report(const NetworkGraph& g, const ArchConfig& arch, int w_bits, int a_bits);

struct EvalReport {
    double ap50 = 0, ap75 = 0, ap90 = 0;
    double ap_small = -1, ap_noisy = -1, ap_backlight = -1; // -1 = not measured
    double fp_rate = -1;
    std::vector<DetectionRecord> detections;
};

enum class SubsetVariant { kSmall, kNoisy, kBacklight };

const char* variant_name(SubsetVariant v);

// Mutates exactly one knob: small pins the crop ratio range to [0.04, 0.10],
// noisy divides the Poisson gain by 4, backlight forces the ramp on.
void subset_config(SubsetVariant v, SynthConfig& cfg, NoiseParams& noise);

// Synthesizes the variant corpus from the sRGB sources, runs the detector on
// every frame, and returns AP@0.50. `intnet` is only consulted when
// dp.engine is the integer one.
double subset_eval(const NetworkGraph& g, const ArchConfig& arch,
                   const std::vector<AnnotatedImage>& sources, const SynthConfig& base_cfg,
                   const NoiseParams& base_noise, SubsetVariant v, uint64_t master_seed,
                   const DetectParams& dp, const IntegerNetwork* intnet = nullptr);

std::string to_json(const EvalReport& r);
std::string to_json(const CostReport& r);

struct TableRow {
    std::string name;
    std::string precision;
    EvalReport eval;
    CostReport cost;
};

// Columns: Approach, Precision, AP50/75/90, AP_S/N/B, FP rate, layers,
// params (M), FLOPs (G), BOPs (M).
std::string render_table(const std::vector<TableRow>& rows);

} // namespace tfd
