#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tfd/quant.hpp"
#include "tfd/rng.hpp"
#include "tfd/tensor.hpp"

namespace tfd {

constexpr int kMaxChannels = 128;
constexpr float kLeakySlope = 0.125f;
constexpr float kBnEps = 1e-5f;

struct BNParams {
    std::vector<float> gamma, beta, mean, var;
    float eps = kBnEps;
    int channels() const { return int(gamma.size()); }
};

enum class NodeKind { kInput, kConv, kBN, kLeaky, kConcat };

// One SSA-style graph node. Conv nodes own weights (OIHW), optional bias,
// a weight quantizer and (post-fold) per-output-channel fold scales. Any
// node may carry an output activation quantizer `aq`; float execution
// ignores it, fake-quant applies it, integer execution requantizes onto it.
struct Node {
    NodeKind kind = NodeKind::kInput;
    std::vector<int> inputs;
    std::string name;
    std::string region; // backbone | feature | ssh | head_cls | head_box

    Tensor weight;            // conv: (out_ch, in_ch/groups, k, k)
    std::vector<float> bias;  // empty when absent
    int stride = 1, pad = 0, groups = 1;
    QuantSpec wq{kQuantDisabled, false, 1.0f, 0, QuantSpec::Target::kWeight};
    std::vector<float> fold_scale; // set by fold_bn on conv nodes

    BNParams bn;
    float slope = kLeakySlope;
    QuantSpec aq{kQuantDisabled, false, 1.0f, 0, QuantSpec::Target::kActivation};

    bool is_conv() const { return kind == NodeKind::kConv; }
};

struct NetworkGraph {
    std::vector<Node> nodes;
    int input_node = 0;
    int cls_out = -1;
    int box_out = -1;
    bool folded = false;

    Node& node(int i) { return nodes[size_t(i)]; }
    const Node& node(int i) const { return nodes[size_t(i)]; }
};

// Versioned block table; the default reproduces the published layer/weight
// counts (56 weight layers, 47 BN, 190000 weights, 240 anchors at 160x120).
struct ArchConfig {
    int version = 1;
    int in_ch = 1;
    int stem_ch = 16;
    int stem_stride = 2;
    std::vector<std::pair<int, int>> blocks; // (out_ch, stride) per dw-separable block
    int feature_ch = 64;
    int ssh_c3 = 32;
    int ssh_c5 = 16;
    int ssh_c7 = 16;
    int scales_per_cell = 3;
    float leaky_slope = kLeakySlope;
    int stride = 16;
    std::vector<float> anchor_sizes = {24.0f, 48.0f, 96.0f};
    float variance_center = 0.1f;
    float variance_size = 0.2f;
    int input_w = 160;
    int input_h = 120;

    void validate() const;
};

ArchConfig default_arch_config();
ArchConfig arch_config_from_json_string(const std::string& text);
std::string arch_config_to_json_string(const ArchConfig& cfg);
ArchConfig arch_config_from_file(const std::string& path);
// FNV-1a over the canonical JSON form; stored in checkpoints.
uint64_t arch_hash(const ArchConfig& cfg);

NetworkGraph build_network(const ArchConfig& cfg);
void init_weights(NetworkGraph& g, uint64_t seed);

int num_weight_layers(const NetworkGraph& g);
int count_bn(const NetworkGraph& g);
int64_t count_weights(const NetworkGraph& g);
int64_t count_biases(const NetworkGraph& g);

// Per-conv MAC counts at the given input size (after padding to stride
// multiples); index = node id, zero for non-conv nodes.
struct CostProfile {
    std::vector<int64_t> macs_per_node;
    int64_t total_macs = 0;
};
CostProfile profile_macs(const NetworkGraph& g, const ArchConfig& cfg, int input_h, int input_w);

struct Anchor {
    float cx, cy, w, h;
};

struct AnchorConfig {
    int input_w = 160;
    int input_h = 120;
    int stride = 16;
    std::vector<float> sizes = {24.0f, 48.0f, 96.0f};
    float variance_center = 0.1f;
    float variance_size = 0.2f;
};

AnchorConfig anchor_config_from(const ArchConfig& cfg, int input_w, int input_h);
// Row-major over cells, then scale; centers at ((j+0.5)s, (i+0.5)s).
std::vector<Anchor> anchor_grid(const AnchorConfig& cfg);

// Folds every BN into its producing conv (W' = W*g/sqrt(v+eps),
// b' = g/sqrt(v+eps)*(b-mu)+beta, bias zero-initialized when absent),
// records the per-channel fold scale on the conv, removes BN nodes.
NetworkGraph fold_bn(const NetworkGraph& g);

// Assigns quantizers: weight spec on every conv, activation spec on the
// input node, every leaky node and both heads. Pass kQuantDisabled to clear.
void set_quantization(NetworkGraph& g, int weight_bits, int act_bits, bool ternary_weights);

int round_up(int v, int multiple);

} // namespace tfd
