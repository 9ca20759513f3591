#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tfd/image.hpp"
#include "tfd/model.hpp"

namespace tfd {

enum class Engine { kFloat, kFakeQuant, kInteger };

Engine engine_from_string(const std::string& s);
std::string engine_to_string(Engine e);

struct ForwardResult {
    Tensor cls_logits; // (N*anchors, 2)
    Tensor box_deltas; // (N*anchors, 4)
    std::vector<Tensor> node_values; // per graph node when keep_intermediates
};

ForwardResult run_float(const NetworkGraph& g, const Tensor& input,
                        bool keep_intermediates = false);
ForwardResult run_fake_quant(const NetworkGraph& g, const Tensor& input,
                             bool keep_intermediates = false);

// (N,C,H,W) -> (N*H*W*C/group, group) matching row-major anchor order.
Tensor head_rows(const Tensor& head_out, int group);

// Quantize-dequantize conv weights on the per-channel effective grid
// step*fold_scale (fold_scale == 1 on unfolded graphs).
Tensor fake_quant_weights(const Node& n);

// ---- integer path ----

struct RequantParams {
    int32_t multiplier = 0;
    int shift = 0;
};

// M = multiplier * 2^-shift, multiplier in [2^30, 2^31), relative error <= 2^-30.
RequantParams make_requant(double m);
int64_t apply_requant(int64_t value, const RequantParams& rp);

struct IntTensor {
    Shape shape{{1}};
    std::vector<int32_t> v;
};

struct IntNode {
    enum class Kind { kInput, kConv, kConcat } kind = Kind::kInput;
    std::vector<int> inputs;
    std::string name;

    std::vector<int8_t> wcodes; // OIHW
    Shape wshape{{1}};
    int stride = 1, pad = 0, groups = 1;
    std::vector<int32_t> bias;           // at scale s_in*s_w*|t_c|
    std::vector<RequantParams> rq_pos;   // per out channel
    std::vector<RequantParams> rq_neg;   // empty = linear output (heads)
    int out_qmin = 0, out_qmax = 0;
    float out_step = 1.0f;
    int source_node = -1; // node in the float graph whose output this realizes
};

struct IntegerNetwork {
    std::vector<IntNode> nodes;
    int input_node = 0;
    int cls_out = -1;
    int box_out = -1;
};

// Folded + fully-quantized graph -> integer execution plan. Performs the
// static accumulator overflow check and rejects graphs that could exceed
// int32 range.
IntegerNetwork freeze_integer(const NetworkGraph& g);

struct IntegerResult {
    Tensor cls_logits; // dequantized rows (N*anchors, 2)
    Tensor box_deltas;
    std::vector<IntTensor> node_codes;  // per int node when keep_intermediates
    std::vector<float> node_steps;
    std::vector<int> node_sources;
};

IntegerResult run_integer(const IntegerNetwork& net, const IntTensor& input,
                          bool keep_intermediates = false);

// ---- pre/post processing ----

// Pads to stride multiples (black) and scales to [0,1].
Tensor raw_to_input(const Image8& raw, int stride);
// Same, but emitting input-grid codes round(x/step) clamped to [qmin,qmax].
IntTensor raw_to_input_codes(const Image8& raw, int stride, float step, int qmin, int qmax);

struct Detection {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    double score = 0;
    int index = 0; // anchor index, used for deterministic tie-breaks
};

// cx = a_cx + d_x*v0*a_w (cy analog); w = a_w*exp(d_w*v1) (h analog);
// corners clipped to [0,w]x[0,h].
std::vector<Detection> decode_boxes(const std::vector<Anchor>& anchors, const Tensor& deltas,
                                    float variance_center, float variance_size,
                                    int img_w, int img_h);

std::vector<float> face_scores(const Tensor& cls_logits);

double iou_corners(double ax1, double ay1, double ax2, double ay2,
                   double bx1, double by1, double bx2, double by2);

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh, int max_keep);

struct DetectParams {
    Engine engine = Engine::kFloat;
    double score_thresh = 0.5;
    double iou_thresh = 0.4;
    int max_keep = 200;
};

// Full pipeline on one RAW image: pad, forward, decode, threshold, NMS.
// `intnet` may be null unless engine == kInteger.
std::vector<Detection> detect(const NetworkGraph& g, const IntegerNetwork* intnet,
                              const ArchConfig& arch, const Image8& raw,
                              const DetectParams& params);

// JSONL detection dumps: {"file", "boxes": [[x1,y1,x2,y2,score],...]}.
struct DetectionRecord {
    std::string file;
    std::vector<Detection> dets;
};
void save_detections(const std::vector<DetectionRecord>& recs, const std::string& path);
std::vector<DetectionRecord> load_detections(const std::string& path);

// 2-bit ternary codes, 4 per byte: 00=0, 01=+1, 11=-1; 10 rejected on unpack.
std::vector<uint8_t> pack_ternary(const std::vector<int32_t>& codes);
std::vector<int32_t> unpack_ternary(const std::vector<uint8_t>& bytes, size_t count);

} // namespace tfd
