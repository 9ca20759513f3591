#include "tfd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace tfd {

double average_precision(const std::vector<std::vector<Detection>>& dets_per_image,
                         const std::vector<std::vector<BoxXYWH>>& gts_per_image,
                         double iou_thresh) {
    if (dets_per_image.size() != gts_per_image.size())
        throw std::invalid_argument("average_precision: detection/ground-truth set size mismatch");
    size_t n_gt = 0;
    for (const auto& g : gts_per_image) n_gt += g.size();
    if (n_gt == 0)
        throw std::invalid_argument(
            "average_precision: no ground truth in the set (use false_positive_rate)");

    struct Ranked {
        double score;
        int img;
        int idx;
    };
    std::vector<Ranked> ranked;
    for (size_t i = 0; i < dets_per_image.size(); ++i)
        for (size_t d = 0; d < dets_per_image[i].size(); ++d)
            ranked.push_back({dets_per_image[i][d].score, int(i), int(d)});
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.img != b.img) return a.img < b.img;
        return a.idx < b.idx;
    });
    if (ranked.empty()) return 0.0;

    std::vector<std::vector<char>> used(gts_per_image.size());
    for (size_t i = 0; i < gts_per_image.size(); ++i)
        used[i].assign(gts_per_image[i].size(), 0);

    std::vector<char> is_tp(ranked.size(), 0);
    for (size_t r = 0; r < ranked.size(); ++r) {
        const Detection& d = dets_per_image[size_t(ranked[r].img)][size_t(ranked[r].idx)];
        const auto& gts = gts_per_image[size_t(ranked[r].img)];
        double best = 0.0;
        int best_g = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (used[size_t(ranked[r].img)][g]) continue;
            double iou = iou_corners(d.x1, d.y1, d.x2, d.y2, gts[g].x, gts[g].y, gts[g].x2(),
                                     gts[g].y2());
            if (iou > best) {
                best = iou;
                best_g = int(g);
            }
        }
        if (best_g >= 0 && best >= iou_thresh) {
            is_tp[r] = 1;
            used[size_t(ranked[r].img)][size_t(best_g)] = 1;
        }
    }

    std::vector<double> precision(ranked.size()), recall(ranked.size());
    int64_t tp = 0;
    for (size_t r = 0; r < ranked.size(); ++r) {
        tp += is_tp[r];
        precision[r] = double(tp) / double(r + 1);
        recall[r] = double(tp) / double(n_gt);
    }
    // all-points interpolation: running max of precision from the right
    for (size_t r = ranked.size() - 1; r-- > 0;)
        precision[r] = std::max(precision[r], precision[r + 1]);
    double ap = 0.0, prev_recall = 0.0;
    for (size_t r = 0; r < ranked.size(); ++r) {
        ap += (recall[r] - prev_recall) * precision[r];
        prev_recall = recall[r];
    }
    return ap;
}

double false_positive_rate(const std::vector<std::vector<Detection>>& dets_per_image,
                           double score_thresh) {
    if (dets_per_image.empty())
        throw std::invalid_argument("false_positive_rate: empty image set");
    int64_t flagged = 0;
    for (const auto& dets : dets_per_image) {
        bool any = std::any_of(dets.begin(), dets.end(),
                               [&](const Detection& d) { return d.score >= score_thresh; });
        flagged += any ? 1 : 0;
    }
    return double(flagged) / double(dets_per_image.size());
}

CostReport cost_report(const NetworkGraph& g, const ArchConfig& arch, int w_bits, int a_bits) {
    if (w_bits < 1 || w_bits > 32 || a_bits < 1 || a_bits > 32)
        throw std::invalid_argument("cost_report: bit widths must be in [1,32]");
    CostReport r;
    r.num_layers = num_weight_layers(g);
    double weight_bits = double(count_weights(g)) * w_bits;
    double bias_bits = double(count_biases(g)) * 32.0;
    r.params_M = (weight_bits + bias_bits) / 32.0 / 1e6;
    CostProfile prof = profile_macs(g, arch, arch.input_h, arch.input_w);
    r.flops_G = double(prof.total_macs) / 1e9;
    double ops_per_mac = double(w_bits) * a_bits + w_bits + a_bits + 5.0; // log2(32-bit acc)
    r.bops_M = double(prof.total_macs) * ops_per_mac / 1e6;
    return r;
}

const char* variant_name(SubsetVariant v) {
    switch (v) {
        case SubsetVariant::kSmall: return "small";
        case SubsetVariant::kNoisy: return "noisy";
        case SubsetVariant::kBacklight: return "backlight";
    }
    return "?";
}

void subset_config(SubsetVariant v, SynthConfig& cfg, NoiseParams& noise) {
    switch (v) {
        case SubsetVariant::kSmall:
            cfg.ratio_min = 0.04;
            cfg.ratio_max = 0.10;
            break;
        case SubsetVariant::kNoisy:
            noise.gain /= 4.0;
            break;
        case SubsetVariant::kBacklight:
            cfg.backlight = true;
            break;
    }
}

double subset_eval(const NetworkGraph& g, const ArchConfig& arch,
                   const std::vector<AnnotatedImage>& sources, const SynthConfig& base_cfg,
                   const NoiseParams& base_noise, SubsetVariant v, uint64_t master_seed,
                   const DetectParams& dp, const IntegerNetwork* intnet) {
    SynthConfig cfg = base_cfg;
    NoiseParams noise = base_noise;
    subset_config(v, cfg, noise);
    cfg.validate();

    std::vector<std::vector<Detection>> dets(sources.size());
    std::vector<std::vector<BoxXYWH>> gts(sources.size());
    for (size_t i = 0; i < sources.size(); ++i) {
        RawSample s = synthesize(sources[i], cfg, noise,
                                 derive_seed(master_seed, sources[i].source_id));
        dets[i] = detect(g, intnet, arch, s.raw, dp);
        gts[i] = s.boxes;
    }
    return average_precision(dets, gts, 0.5);
}

namespace {

json detections_json(const std::vector<DetectionRecord>& recs) {
    json arr = json::array();
    for (const auto& r : recs) {
        json boxes = json::array();
        for (const auto& d : r.dets) boxes.push_back({d.x1, d.y1, d.x2, d.y2, d.score});
        arr.push_back({{"file", r.file}, {"boxes", boxes}});
    }
    return arr;
}

} // namespace

std::string to_json(const EvalReport& r) {
    json j{{"ap50", r.ap50}, {"ap75", r.ap75}, {"ap90", r.ap90}};
    if (r.ap_small >= 0) j["ap_small"] = r.ap_small;
    if (r.ap_noisy >= 0) j["ap_noisy"] = r.ap_noisy;
    if (r.ap_backlight >= 0) j["ap_backlight"] = r.ap_backlight;
    if (r.fp_rate >= 0) j["fp_rate"] = r.fp_rate;
    if (!r.detections.empty()) j["detections"] = detections_json(r.detections);
    return j.dump(2);
}

std::string to_json(const CostReport& r) {
    json j{{"num_layers", r.num_layers},
           {"params_M", r.params_M},
           {"flops_G", r.flops_G},
           {"bops_M", r.bops_M}};
    return j.dump(2);
}

std::string render_table(const std::vector<TableRow>& rows) {
    std::ostringstream out;
    auto cell = [&](const std::string& s, int w) {
        out << std::left << std::setw(w) << s << ' ';
    };
    auto num = [](double v, int prec) {
        if (v < 0) return std::string("-");
        std::ostringstream s;
        s << std::fixed << std::setprecision(prec) << v;
        return s.str();
    };
    cell("Approach", 14);
    cell("Precision", 10);
    for (const char* h : {"AP50", "AP75", "AP90", "AP_S", "AP_N", "AP_B", "FP"}) cell(h, 6);
    cell("Layers", 6);
    cell("Params(M)", 9);
    cell("FLOPs(G)", 8);
    cell("BOPs(M)", 8);
    out << '\n';
    for (const auto& r : rows) {
        cell(r.name, 14);
        cell(r.precision, 10);
        cell(num(r.eval.ap50, 3), 6);
        cell(num(r.eval.ap75, 3), 6);
        cell(num(r.eval.ap90, 3), 6);
        cell(num(r.eval.ap_small, 3), 6);
        cell(num(r.eval.ap_noisy, 3), 6);
        cell(num(r.eval.ap_backlight, 3), 6);
        cell(num(r.eval.fp_rate, 3), 6);
        cell(std::to_string(r.cost.num_layers), 6);
        cell(num(r.cost.params_M, 3), 9);
        cell(num(r.cost.flops_G, 3), 8);
        cell(num(r.cost.bops_M, 1), 8);
        out << '\n';
    }
    return out.str();
}

} // namespace tfd
