#include "tfd/model.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace tfd {

int round_up(int v, int multiple) {
    return (v + multiple - 1) / multiple * multiple;
}

void ArchConfig::validate() const {
    auto check_ch = [](int c, const char* what) {
        if (c < 1 || c > kMaxChannels)
            throw std::invalid_argument(std::string("ArchConfig: ") + what + " = " +
                                        std::to_string(c) + " outside [1, " +
                                        std::to_string(kMaxChannels) + "]");
    };
    check_ch(in_ch, "in_ch");
    check_ch(stem_ch, "stem_ch");
    if (blocks.empty()) throw std::invalid_argument("ArchConfig: empty block table");
    int downsample = stem_stride;
    for (const auto& [ch, s] : blocks) {
        check_ch(ch, "block out_ch");
        if (s != 1 && s != 2) throw std::invalid_argument("ArchConfig: block stride must be 1 or 2");
        downsample *= s;
    }
    check_ch(feature_ch, "feature_ch");
    check_ch(ssh_c3, "ssh_c3");
    check_ch(ssh_c5, "ssh_c5");
    check_ch(ssh_c7, "ssh_c7");
    if (ssh_c3 + ssh_c5 + ssh_c7 > kMaxChannels)
        throw std::invalid_argument("ArchConfig: SSH concat exceeds channel cap");
    if (scales_per_cell < 1) throw std::invalid_argument("ArchConfig: scales_per_cell must be >= 1");
    if (int(anchor_sizes.size()) != scales_per_cell)
        throw std::invalid_argument("ArchConfig: anchor_sizes must have scales_per_cell entries");
    if (leaky_slope <= 0 || leaky_slope >= 1)
        throw std::invalid_argument("ArchConfig: leaky_slope must be in (0,1)");
    if (stride <= 0 || downsample != stride)
        throw std::invalid_argument("ArchConfig: stride " + std::to_string(stride) +
                                    " does not match cumulative downsample " +
                                    std::to_string(downsample));
    if (input_w <= 0 || input_h <= 0)
        throw std::invalid_argument("ArchConfig: input size must be positive");
}

ArchConfig default_arch_config() {
    ArchConfig cfg;
    cfg.blocks = {{16, 1}, {32, 2}, {32, 1}, {64, 2}, {64, 1}, {64, 2}};
    for (int i = 0; i < 8; ++i) cfg.blocks.push_back({64, 1});
    cfg.blocks.push_back({96, 1});
    for (int i = 0; i < 8; ++i) cfg.blocks.push_back({96, 1});
    cfg.validate();
    return cfg;
}

std::string arch_config_to_json_string(const ArchConfig& cfg) {
    json blocks = json::array();
    for (const auto& [ch, s] : cfg.blocks) blocks.push_back({ch, s});
    json j{{"version", cfg.version},
           {"in_ch", cfg.in_ch},
           {"stem_ch", cfg.stem_ch},
           {"stem_stride", cfg.stem_stride},
           {"blocks", blocks},
           {"feature_ch", cfg.feature_ch},
           {"ssh_c3", cfg.ssh_c3},
           {"ssh_c5", cfg.ssh_c5},
           {"ssh_c7", cfg.ssh_c7},
           {"scales_per_cell", cfg.scales_per_cell},
           {"leaky_slope", cfg.leaky_slope},
           {"stride", cfg.stride},
           {"anchor_sizes", cfg.anchor_sizes},
           {"variance_center", cfg.variance_center},
           {"variance_size", cfg.variance_size},
           {"input_w", cfg.input_w},
           {"input_h", cfg.input_h}};
    return j.dump(2);
}

ArchConfig arch_config_from_json_string(const std::string& text) {
    json j = json::parse(text);
    ArchConfig cfg;
    cfg.version = j.value("version", 1);
    cfg.in_ch = j.value("in_ch", cfg.in_ch);
    cfg.stem_ch = j.value("stem_ch", cfg.stem_ch);
    cfg.stem_stride = j.value("stem_stride", cfg.stem_stride);
    if (j.contains("blocks")) {
        cfg.blocks.clear();
        for (const auto& b : j.at("blocks"))
            cfg.blocks.push_back({b.at(0).get<int>(), b.at(1).get<int>()});
    } else {
        cfg.blocks = default_arch_config().blocks;
    }
    cfg.feature_ch = j.value("feature_ch", cfg.feature_ch);
    cfg.ssh_c3 = j.value("ssh_c3", cfg.ssh_c3);
    cfg.ssh_c5 = j.value("ssh_c5", cfg.ssh_c5);
    cfg.ssh_c7 = j.value("ssh_c7", cfg.ssh_c7);
    cfg.scales_per_cell = j.value("scales_per_cell", cfg.scales_per_cell);
    cfg.leaky_slope = j.value("leaky_slope", cfg.leaky_slope);
    cfg.stride = j.value("stride", cfg.stride);
    if (j.contains("anchor_sizes")) cfg.anchor_sizes = j.at("anchor_sizes").get<std::vector<float>>();
    cfg.variance_center = j.value("variance_center", cfg.variance_center);
    cfg.variance_size = j.value("variance_size", cfg.variance_size);
    cfg.input_w = j.value("input_w", cfg.input_w);
    cfg.input_h = j.value("input_h", cfg.input_h);
    cfg.validate();
    return cfg;
}

ArchConfig arch_config_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    std::ostringstream ss;
    ss << in.rdbuf();
    return arch_config_from_json_string(ss.str());
}

uint64_t arch_hash(const ArchConfig& cfg) {
    return fnv1a64(arch_config_to_json_string(cfg));
}

namespace {

struct Builder {
    NetworkGraph g;

    int add(Node n) {
        g.nodes.push_back(std::move(n));
        return int(g.nodes.size()) - 1;
    }

    int conv(const std::string& name, const std::string& region, int input, int in_ch, int out_ch,
             int k, int stride, int pad, int groups, bool bias) {
        Node n;
        n.kind = NodeKind::kConv;
        n.inputs = {input};
        n.name = name;
        n.region = region;
        n.weight = Tensor(Shape{{out_ch, in_ch / groups, k, k}});
        if (bias) n.bias.assign(size_t(out_ch), 0.0f);
        n.stride = stride;
        n.pad = pad;
        n.groups = groups;
        return add(std::move(n));
    }

    int bn(const std::string& name, const std::string& region, int input, int channels) {
        Node n;
        n.kind = NodeKind::kBN;
        n.inputs = {input};
        n.name = name;
        n.region = region;
        n.bn.gamma.assign(size_t(channels), 1.0f);
        n.bn.beta.assign(size_t(channels), 0.0f);
        n.bn.mean.assign(size_t(channels), 0.0f);
        n.bn.var.assign(size_t(channels), 1.0f);
        return add(std::move(n));
    }

    int leaky(const std::string& name, const std::string& region, int input, float slope) {
        Node n;
        n.kind = NodeKind::kLeaky;
        n.inputs = {input};
        n.name = name;
        n.region = region;
        n.slope = slope;
        return add(std::move(n));
    }

    // conv + BN + leaky (the backbone unit)
    int cbl(const std::string& name, const std::string& region, int input, int in_ch, int out_ch,
            int k, int stride, int groups, float slope) {
        int c = conv(name, region, input, in_ch, out_ch, k, stride, k / 2, groups, false);
        int b = bn(name + "_bn", region, c, out_ch);
        return leaky(name + "_act", region, b, slope);
    }
};

} // namespace

NetworkGraph build_network(const ArchConfig& cfg) {
    cfg.validate();
    Builder b;

    Node input;
    input.kind = NodeKind::kInput;
    input.name = "input";
    input.region = "input";
    b.g.input_node = b.add(std::move(input));

    int cur = b.cbl("stem", "backbone", b.g.input_node, cfg.in_ch, cfg.stem_ch, 3,
                    cfg.stem_stride, 1, cfg.leaky_slope);
    int ch = cfg.stem_ch;
    for (size_t i = 0; i < cfg.blocks.size(); ++i) {
        auto [out_ch, stride] = cfg.blocks[i];
        std::ostringstream name;
        name << "b" << (i + 1 < 10 ? "0" : "") << (i + 1);
        cur = b.cbl(name.str() + "_dw", "backbone", cur, ch, ch, 3, stride, ch, cfg.leaky_slope);
        cur = b.cbl(name.str() + "_pw", "backbone", cur, ch, out_ch, 1, 1, 1, cfg.leaky_slope);
        ch = out_ch;
    }

    int feat_conv = b.conv("feature", "feature", cur, ch, cfg.feature_ch, 1, 1, 0, 1, true);
    int feat = b.leaky("feature_act", "feature", feat_conv, cfg.leaky_slope);

    int c3 = b.conv("ssh_c3", "ssh", feat, cfg.feature_ch, cfg.ssh_c3, 3, 1, 1, 1, true);
    int c5_1 = b.conv("ssh_c5_1", "ssh", feat, cfg.feature_ch, cfg.ssh_c5, 3, 1, 1, 1, true);
    int c5_1a = b.leaky("ssh_c5_1_act", "ssh", c5_1, cfg.leaky_slope);
    int c5_2 = b.conv("ssh_c5_2", "ssh", c5_1a, cfg.ssh_c5, cfg.ssh_c5, 3, 1, 1, 1, true);
    int c7_1 = b.conv("ssh_c7_1", "ssh", feat, cfg.feature_ch, cfg.ssh_c7, 3, 1, 1, 1, true);
    int c7_1a = b.leaky("ssh_c7_1_act", "ssh", c7_1, cfg.leaky_slope);
    int c7_2 = b.conv("ssh_c7_2", "ssh", c7_1a, cfg.ssh_c7, cfg.ssh_c7, 3, 1, 1, 1, true);
    int c7_2a = b.leaky("ssh_c7_2_act", "ssh", c7_2, cfg.leaky_slope);
    int c7_3 = b.conv("ssh_c7_3", "ssh", c7_2a, cfg.ssh_c7, cfg.ssh_c7, 3, 1, 1, 1, true);

    Node cat;
    cat.kind = NodeKind::kConcat;
    cat.inputs = {c3, c5_2, c7_3};
    cat.name = "ssh_concat";
    cat.region = "ssh";
    int catn = b.add(std::move(cat));
    int ssh_out = b.leaky("ssh_act", "ssh", catn, cfg.leaky_slope);

    int ssh_ch = cfg.ssh_c3 + cfg.ssh_c5 + cfg.ssh_c7;
    b.g.cls_out = b.conv("head_cls", "head_cls", ssh_out, ssh_ch, 2 * cfg.scales_per_cell,
                         1, 1, 0, 1, true);
    b.g.box_out = b.conv("head_box", "head_box", ssh_out, ssh_ch, 4 * cfg.scales_per_cell,
                         1, 1, 0, 1, true);
    return b.g;
}

void init_weights(NetworkGraph& g, uint64_t seed) {
    Rng rng(seed);
    for (auto& n : g.nodes) {
        if (!n.is_conv()) continue;
        int64_t fan_in = n.weight.shape.dims[1] * n.weight.shape.dims[2] * n.weight.shape.dims[3];
        float std_dev = std::sqrt(2.0f / float(fan_in));
        for (auto& w : n.weight.data) w = float(rng.normal()) * std_dev;
        for (auto& v : n.bias) v = 0.0f;
    }
}

int num_weight_layers(const NetworkGraph& g) {
    int n = 0;
    for (const auto& node : g.nodes) n += node.is_conv() ? 1 : 0;
    return n;
}

int count_bn(const NetworkGraph& g) {
    int n = 0;
    for (const auto& node : g.nodes) n += node.kind == NodeKind::kBN ? 1 : 0;
    return n;
}

int64_t count_weights(const NetworkGraph& g) {
    int64_t n = 0;
    for (const auto& node : g.nodes)
        if (node.is_conv()) n += node.weight.shape.numel();
    return n;
}

int64_t count_biases(const NetworkGraph& g) {
    int64_t n = 0;
    for (const auto& node : g.nodes)
        if (node.is_conv()) n += int64_t(node.bias.size());
    return n;
}

CostProfile profile_macs(const NetworkGraph& g, const ArchConfig& cfg, int input_h, int input_w) {
    int H = round_up(input_h, cfg.stride);
    int W = round_up(input_w, cfg.stride);
    CostProfile prof;
    prof.macs_per_node.assign(g.nodes.size(), 0);
    // (channels, h, w) per node
    std::vector<std::array<int, 3>> shapes(g.nodes.size(), {0, 0, 0});
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const Node& n = g.nodes[i];
        switch (n.kind) {
            case NodeKind::kInput:
                shapes[i] = {cfg.in_ch, H, W};
                break;
            case NodeKind::kConv: {
                auto [ic, ih, iw] = shapes[size_t(n.inputs[0])];
                int k = int(n.weight.shape.dims[2]);
                int oc = int(n.weight.shape.dims[0]);
                int oh = (ih + 2 * n.pad - k) / n.stride + 1;
                int ow = (iw + 2 * n.pad - k) / n.stride + 1;
                shapes[i] = {oc, oh, ow};
                prof.macs_per_node[i] =
                    int64_t(oc) * oh * ow * (int64_t(ic) / n.groups) * k * k;
                prof.total_macs += prof.macs_per_node[i];
                break;
            }
            case NodeKind::kBN:
            case NodeKind::kLeaky:
                shapes[i] = shapes[size_t(n.inputs[0])];
                break;
            case NodeKind::kConcat: {
                auto [c0, h0, w0] = shapes[size_t(n.inputs[0])];
                int total_c = 0;
                for (int in : n.inputs) total_c += shapes[size_t(in)][0];
                shapes[i] = {total_c, h0, w0};
                break;
            }
        }
    }
    return prof;
}

AnchorConfig anchor_config_from(const ArchConfig& cfg, int input_w, int input_h) {
    AnchorConfig a;
    a.input_w = input_w;
    a.input_h = input_h;
    a.stride = cfg.stride;
    a.sizes = cfg.anchor_sizes;
    a.variance_center = cfg.variance_center;
    a.variance_size = cfg.variance_size;
    return a;
}

std::vector<Anchor> anchor_grid(const AnchorConfig& cfg) {
    if (cfg.stride <= 0) throw std::invalid_argument("anchor_grid: stride must be positive");
    int rows = (cfg.input_h + cfg.stride - 1) / cfg.stride;
    int cols = (cfg.input_w + cfg.stride - 1) / cfg.stride;
    std::vector<Anchor> anchors;
    anchors.reserve(size_t(rows) * size_t(cols) * cfg.sizes.size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            for (float s : cfg.sizes)
                anchors.push_back({(j + 0.5f) * cfg.stride, (i + 0.5f) * cfg.stride, s, s});
    return anchors;
}

NetworkGraph fold_bn(const NetworkGraph& g) {
    if (g.folded) throw std::invalid_argument("fold_bn: graph already folded");

    NetworkGraph out;
    out.folded = true;
    std::vector<int> remap(g.nodes.size(), -1);

    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const Node& n = g.nodes[i];
        if (n.kind == NodeKind::kBN) {
            int src = n.inputs[0];
            if (!g.nodes[size_t(src)].is_conv())
                throw std::invalid_argument("fold_bn: BN node '" + n.name +
                                            "' not preceded by a conv");
            int conv_new = remap[size_t(src)];
            Node& conv = out.nodes[size_t(conv_new)];
            int oc = int(conv.weight.shape.dims[0]);
            if (n.bn.channels() != oc)
                throw std::invalid_argument("fold_bn: channel mismatch at '" + n.name + "'");
            if (conv.bias.empty()) conv.bias.assign(size_t(oc), 0.0f);
            conv.fold_scale.assign(size_t(oc), 1.0f);
            int64_t per_ch = conv.weight.shape.numel() / oc;
            for (int c = 0; c < oc; ++c) {
                float t = n.bn.gamma[size_t(c)] /
                          std::sqrt(n.bn.var[size_t(c)] + n.bn.eps);
                conv.fold_scale[size_t(c)] = t;
                for (int64_t k = 0; k < per_ch; ++k)
                    conv.weight.data[size_t(c * per_ch + k)] *= t;
                conv.bias[size_t(c)] =
                    t * (conv.bias[size_t(c)] - n.bn.mean[size_t(c)]) + n.bn.beta[size_t(c)];
            }
            remap[i] = conv_new; // consumers of the BN read the conv output
            continue;
        }
        Node copy = n;
        for (int& in : copy.inputs) in = remap[size_t(in)];
        out.nodes.push_back(std::move(copy));
        remap[i] = int(out.nodes.size()) - 1;
    }

    out.input_node = remap[size_t(g.input_node)];
    out.cls_out = remap[size_t(g.cls_out)];
    out.box_out = remap[size_t(g.box_out)];
    return out;
}

void set_quantization(NetworkGraph& g, int weight_bits, int act_bits, bool ternary_weights) {
    for (auto& n : g.nodes) {
        if (n.is_conv()) {
            n.wq = QuantSpec{};
            n.wq.bits = weight_bits;
            n.wq.ternary = ternary_weights;
            n.wq.step = 0.0f; // must be calibrated before use
            n.wq.target = QuantSpec::Target::kWeight;
        }
        bool act_site = n.kind == NodeKind::kLeaky || n.kind == NodeKind::kInput ||
                        (n.is_conv() && (n.region == "head_cls" || n.region == "head_box"));
        if (act_site) {
            n.aq = QuantSpec{};
            n.aq.target = QuantSpec::Target::kActivation;
            if (n.kind == NodeKind::kInput) {
                n.aq.bits = act_bits == kQuantDisabled ? kQuantDisabled : 8;
                n.aq.step = 1.0f / 127.0f;
            } else {
                n.aq.bits = act_bits;
                n.aq.step = 0.0f; // must be calibrated before use
            }
        }
    }
}

} // namespace tfd
