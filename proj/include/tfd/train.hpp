#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tfd/image.hpp"
#include "tfd/infer.hpp"
#include "tfd/model.hpp"
#include "tfd/quant.hpp"

namespace tfd {

// ---- reverse-mode tape over the graph ----

struct TapeNode {
    Tensor value;   // node output as seen downstream (post fake-quant)
    Tensor pre_act; // value before the activation fake-quant (when applied)
    Tensor grad;    // dL/d(value)
    // BN batch-statistics cache
    std::vector<float> mu, inv_std;
    Tensor xhat;
    // conv cache: quant-dequant weights used in the forward pass
    Tensor fq_weight;
    bool used_fq_w = false;
    bool used_fq_a = false;
};

struct Tape {
    std::vector<TapeNode> nodes;
    Tensor cls_rows; // (N*anchors, 2)
    Tensor box_rows; // (N*anchors, 4)
};

// Training forward: BN uses batch statistics (biased variance) and, when
// update_ema, folds them into the running stats with the given momentum.
// Fake-quant is applied wherever node specs are enabled.
Tape forward_train(NetworkGraph& g, const Tensor& input, bool update_ema,
                   float ema_momentum = 0.99f);

struct NodeGrad {
    Tensor w;
    std::vector<float> b, gamma, beta;
    double wstep = 0.0;
    double astep = 0.0;
};

struct GradientSet {
    std::vector<NodeGrad> nodes;
};

// Chain rule in reverse node order; seeds the two heads from row-space
// gradients shaped like Tape::cls_rows/box_rows.
GradientSet backward(const NetworkGraph& g, Tape& tape, const Tensor& grad_cls_rows,
                     const Tensor& grad_box_rows);

// ---- anchor matching and losses ----

enum class AnchorLabel : int8_t { kNegative = 0, kPositive = 1, kIgnore = 2 };

struct MatchResult {
    std::vector<AnchorLabel> labels;
    std::vector<int> matched_gt; // -1 unless positive
    Tensor targets;              // (A, 4) encoded regression targets
    int n_pos = 0;
};

struct MatchConfig {
    float iou_pos = 0.5f;
    float iou_neg = 0.3f;
    float variance_center = 0.1f;
    float variance_size = 0.2f;
};

MatchResult match_anchors(const std::vector<Anchor>& anchors, const std::vector<BoxXYWH>& gts,
                          const MatchConfig& cfg);

// Encode a ground-truth box against an anchor (inverse of decode_boxes).
void encode_box(const Anchor& a, const BoxXYWH& gt, float v_center, float v_size, float out[4]);

struct LossResult {
    double total = 0, cls_term = 0, box_term = 0;
    Tensor grad_cls; // (A, 2)
    Tensor grad_box; // (A, 4)
    int n_pos = 0;
};

// Softmax CE over positives plus the hardest max(1, ratio*n_pos) negatives,
// smooth-L1 over positives; both terms divided by max(1, n_pos).
LossResult detector_loss(const Tensor& cls_rows, const Tensor& box_rows, const MatchResult& m,
                         int neg_pos_ratio);

// ---- schedule / optimizer / parameter plumbing ----

double lr_at(int64_t step, int64_t total_steps, int64_t warm_steps, double base_lr,
             double min_lr);

struct ParamView {
    std::vector<float*> values;
    std::vector<uint8_t> decay; // 1 where weight decay applies (conv weights)
};

// Fixed traversal order: per node — weights, bias, BN gamma, BN beta, weight
// step, activation step. Quantizer steps included only when the spec is
// enabled; the input node's step stays fixed.
ParamView collect_params(NetworkGraph& g);
std::vector<float> flatten_grads(const NetworkGraph& g, const GradientSet& gs);

struct SgdMomentum {
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::vector<float> velocity;

    void step(ParamView& params, const std::vector<float>& grads, double lr);
};

// ---- datasets ----

struct Sample {
    Image8 raw;
    std::vector<BoxXYWH> boxes;
    std::string id;
};

struct Dataset {
    std::vector<Sample> samples;
    int width = 0, height = 0;
};

// Reads a synthesized corpus directory (annotations.jsonl + PGM files).
Dataset load_raw_dataset(const std::string& dir);

// ---- QAT driver ----

struct StageSpec {
    int w_bits = 32;
    int a_bits = 32;
    bool ternary = false;
    int epochs = 2;

    bool quantized() const { return w_bits != kQuantDisabled; }
    std::string tag() const;
};

struct TrainConfig {
    std::vector<StageSpec> schedule; // default: float, 8, 4, 3, ternary
    int batch_size = 16;
    double base_lr = 0.02;
    double min_lr = 2e-4;
    double warmup_frac = 0.05; // fraction of each stage's steps
    double momentum = 0.9;
    double weight_decay = 0.0;
    SamConfig sam; // rho = 0 => exact LSQ trajectory
    MatchConfig match;
    int neg_pos_ratio = 3;
    float ema_momentum = 0.99f;
    uint64_t seed = 1;

    void validate() const;
};

TrainConfig default_train_config();

struct StageResult {
    StageSpec spec;
    double final_loss = 0;
    bool aborted = false; // non-finite loss; parameters rolled back
    int steps = 0;
};

using StageSink = std::function<void(int stage_idx, const StageSpec&, const NetworkGraph&)>;

// Runs the progressive schedule in place on `g`. Calibrates quantizers at
// each stage entry, trains with SAM-wrapped SGD steps, logs CSV rows to
// `log` when non-null, and hands each stage's final graph to `sink`.
std::vector<StageResult> train_qat(NetworkGraph& g, const ArchConfig& arch, const Dataset& data,
                                   const TrainConfig& cfg, std::ostream* log,
                                   const StageSink& sink);

// Weight steps from 2*mean|w|/sqrt(qmax); activation steps from max|a| on one
// float-mode batch. Input-node step is left at its fixed value.
void calibrate_quantizers(NetworkGraph& g, const Tensor& batch_input);

struct StepStats {
    double loss = 0, cls_term = 0, box_term = 0;
    int n_pos = 0;
};

// One SAM-wrapped SGD step on a batch (rho = 0 skips the second pass).
StepStats salsq_step(NetworkGraph& g, const std::vector<Anchor>& anchors, const Tensor& input,
                     const std::vector<const std::vector<BoxXYWH>*>& gt_per_image,
                     const TrainConfig& cfg, ParamView& params, SgdMomentum& opt, double lr);

} // namespace tfd
