#include "tfd/infer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace tfd {

namespace {

Tensor bn_forward_eval(const Tensor& x, const BNParams& bn, const std::string& name) {
    if (x.shape.dims.size() != 4 || x.shape.dims[1] != bn.channels())
        throw std::invalid_argument(name + ": BN channel mismatch");
    Tensor y = x;
    int64_t N = x.shape.dims[0], C = x.shape.dims[1];
    int64_t hw = x.shape.dims[2] * x.shape.dims[3];
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            float inv = 1.0f / std::sqrt(bn.var[size_t(c)] + bn.eps);
            float a = bn.gamma[size_t(c)] * inv;
            float b = bn.beta[size_t(c)] - a * bn.mean[size_t(c)];
            float* p = y.data.data() + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) p[i] = a * p[i] + b;
        }
    return y;
}

} // namespace

// Quantize-dequantize conv weights on the per-channel effective grid
// step*fold_scale (fold_scale == 1 on unfolded graphs).
Tensor fake_quant_weights(const Node& n) {
    if (n.wq.step <= 0)
        throw std::invalid_argument(n.name + ": weight quantizer has no calibrated step");
    auto [qmin, qmax] = qrange(n.wq);
    Tensor w = n.weight;
    int64_t oc = w.shape.dims[0];
    int64_t per = w.shape.numel() / oc;
    for (int64_t c = 0; c < oc; ++c) {
        float t = n.fold_scale.empty() ? 1.0f : n.fold_scale[size_t(c)];
        float step = n.wq.step * t;
        float* p = w.data.data() + c * per;
        if (step == 0.0f) {
            std::fill(p, p + per, 0.0f);
            continue;
        }
        for (int64_t i = 0; i < per; ++i) {
            long code = std::lround(double(p[i]) / double(step));
            code = std::clamp(code, long(qmin), long(qmax));
            p[i] = step * float(code);
        }
    }
    return w;
}

namespace {

enum class ExecMode { kFloat, kFakeQuant };

std::vector<Tensor> exec_graph(const NetworkGraph& g, const Tensor& input, ExecMode mode) {
    std::vector<Tensor> values(g.nodes.size());
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const Node& n = g.nodes[i];
        Tensor y;
        switch (n.kind) {
            case NodeKind::kInput:
                y = input;
                break;
            case NodeKind::kConv: {
                const Tensor& x = values[size_t(n.inputs[0])];
                Tensor w = (mode == ExecMode::kFakeQuant && n.wq.enabled()) ? fake_quant_weights(n)
                                                                            : n.weight;
                y = conv2d(x, w, n.bias.empty() ? nullptr : &n.bias, n.stride, n.pad, n.groups,
                           n.name);
                break;
            }
            case NodeKind::kBN:
                y = bn_forward_eval(values[size_t(n.inputs[0])], n.bn, n.name);
                break;
            case NodeKind::kLeaky:
                y = leaky_relu(values[size_t(n.inputs[0])], n.slope);
                break;
            case NodeKind::kConcat: {
                std::vector<const Tensor*> parts;
                for (int in : n.inputs) parts.push_back(&values[size_t(in)]);
                y = concat(parts, 1);
                break;
            }
        }
        if (mode == ExecMode::kFakeQuant && n.aq.enabled()) {
            if (n.aq.step <= 0)
                throw std::invalid_argument(n.name + ": activation quantizer has no calibrated step");
            y = fake_quant_forward(y, n.aq);
        }
        values[i] = std::move(y);
    }
    return values;
}

ForwardResult extract_heads(const NetworkGraph& g, std::vector<Tensor> values,
                            bool keep_intermediates) {
    ForwardResult r;
    r.cls_logits = head_rows(values[size_t(g.cls_out)], 2);
    r.box_deltas = head_rows(values[size_t(g.box_out)], 4);
    if (keep_intermediates) r.node_values = std::move(values);
    return r;
}

} // namespace

Engine engine_from_string(const std::string& s) {
    if (s == "float") return Engine::kFloat;
    if (s == "fakequant") return Engine::kFakeQuant;
    if (s == "integer") return Engine::kInteger;
    throw std::invalid_argument("unknown engine '" + s + "' (float|fakequant|integer)");
}

std::string engine_to_string(Engine e) {
    switch (e) {
        case Engine::kFloat: return "float";
        case Engine::kFakeQuant: return "fakequant";
        case Engine::kInteger: return "integer";
    }
    return "float";
}

ForwardResult run_float(const NetworkGraph& g, const Tensor& input, bool keep_intermediates) {
    return extract_heads(g, exec_graph(g, input, ExecMode::kFloat), keep_intermediates);
}

ForwardResult run_fake_quant(const NetworkGraph& g, const Tensor& input, bool keep_intermediates) {
    return extract_heads(g, exec_graph(g, input, ExecMode::kFakeQuant), keep_intermediates);
}

Tensor head_rows(const Tensor& head_out, int group) {
    const auto& d = head_out.shape.dims;
    if (d.size() != 4 || d[1] % group != 0)
        throw std::invalid_argument("head_rows: need NCHW with C divisible by group");
    int64_t N = d[0], C = d[1], H = d[2], W = d[3];
    int64_t S = C / group;
    Tensor out(Shape{{N * H * W * S, group}});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j)
                for (int64_t s = 0; s < S; ++s) {
                    int64_t row = ((n * H + i) * W + j) * S + s;
                    for (int64_t c = 0; c < group; ++c)
                        out.data[size_t(row * group + c)] =
                            head_out.data[size_t(((n * C + s * group + c) * H + i) * W + j)];
                }
    return out;
}

RequantParams make_requant(double m) {
    if (!(m > 0) || !std::isfinite(m))
        throw std::domain_error("requant scale must be positive and finite, got " +
                                std::to_string(m));
    int e = 0;
    double f = std::frexp(m, &e); // m = f * 2^e, f in [0.5, 1)
    int64_t mult = std::llround(f * double(int64_t(1) << 31));
    int shift = 31 - e;
    if (mult == (int64_t(1) << 31)) {
        mult >>= 1;
        shift -= 1;
    }
    if (shift < 0)
        throw std::domain_error("requant scale too large for nonnegative shift: " +
                                std::to_string(m));
    if (shift > 62)
        throw std::domain_error("requant scale too small: " + std::to_string(m));
    double approx = double(mult) * std::ldexp(1.0, -shift);
    if (std::abs(approx - m) / m > std::ldexp(1.0, -30))
        throw std::logic_error("requant approximation error exceeds 2^-30");
    return {int32_t(mult), shift};
}

int64_t apply_requant(int64_t value, const RequantParams& rp) {
    int64_t prod = value * int64_t(rp.multiplier);
    if (rp.shift == 0) return prod;
    return (prod + (int64_t(1) << (rp.shift - 1))) >> rp.shift;
}

IntegerNetwork freeze_integer(const NetworkGraph& g) {
    if (!g.folded) throw std::invalid_argument("freeze_integer: graph must be folded first");

    std::vector<std::vector<int>> consumers(g.nodes.size());
    for (size_t i = 0; i < g.nodes.size(); ++i)
        for (int in : g.nodes[i].inputs) consumers[size_t(in)].push_back(int(i));

    auto checked_aq = [](const Node& n, const std::string& site) -> const QuantSpec& {
        if (!n.aq.enabled() || n.aq.step <= 0)
            throw std::invalid_argument("freeze_integer: no calibrated activation quantizer at " +
                                        site);
        return n.aq;
    };

    IntegerNetwork net;
    std::vector<int> remap(g.nodes.size(), -1);

    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const Node& n = g.nodes[i];
        switch (n.kind) {
            case NodeKind::kBN:
                throw std::invalid_argument("freeze_integer: BN node '" + n.name +
                                            "' in a folded graph");
            case NodeKind::kInput: {
                const QuantSpec& aq = checked_aq(n, n.name);
                IntNode node;
                node.kind = IntNode::Kind::kInput;
                node.name = n.name;
                node.out_step = aq.step;
                std::tie(node.out_qmin, node.out_qmax) = qrange(aq);
                node.source_node = int(i);
                net.nodes.push_back(std::move(node));
                remap[i] = int(net.nodes.size()) - 1;
                break;
            }
            case NodeKind::kLeaky: {
                int src = remap[size_t(n.inputs[0])];
                if (src < 0)
                    throw std::invalid_argument("freeze_integer: dangling activation '" + n.name +
                                                "'");
                remap[i] = src; // fused into the producing conv / concat
                break;
            }
            case NodeKind::kConcat: {
                const std::vector<int>& cons = consumers[i];
                if (cons.size() != 1 || g.nodes[size_t(cons[0])].kind != NodeKind::kLeaky)
                    throw std::invalid_argument(
                        "freeze_integer: concat '" + n.name +
                        "' must feed exactly one activation");
                const Node& act = g.nodes[size_t(cons[0])];
                const QuantSpec& aq = checked_aq(act, act.name);
                IntNode node;
                node.kind = IntNode::Kind::kConcat;
                node.name = n.name;
                for (int in : n.inputs) {
                    if (remap[size_t(in)] < 0)
                        throw std::invalid_argument("freeze_integer: concat input not frozen");
                    node.inputs.push_back(remap[size_t(in)]);
                }
                node.out_step = aq.step;
                std::tie(node.out_qmin, node.out_qmax) = qrange(aq);
                node.source_node = cons[0];
                net.nodes.push_back(std::move(node));
                remap[i] = int(net.nodes.size()) - 1;
                break;
            }
            case NodeKind::kConv: {
                if (!n.wq.enabled() || n.wq.step <= 0)
                    throw std::invalid_argument("freeze_integer: conv '" + n.name +
                                                "' has no calibrated weight quantizer");
                bool is_head = int(i) == g.cls_out || int(i) == g.box_out;
                const Node* act_site = nullptr;
                float slope = 0.0f;
                bool fused = false;
                int source = -1;
                if (is_head) {
                    act_site = &n;
                    source = int(i);
                } else if (consumers[i].size() == 1) {
                    const Node& c = g.nodes[size_t(consumers[i][0])];
                    if (c.kind == NodeKind::kLeaky) {
                        act_site = &c;
                        slope = c.slope;
                        fused = true;
                        source = consumers[i][0];
                    } else if (c.kind == NodeKind::kConcat) {
                        int ci = consumers[i][0];
                        if (consumers[size_t(ci)].size() != 1 ||
                            g.nodes[size_t(consumers[size_t(ci)][0])].kind != NodeKind::kLeaky)
                            throw std::invalid_argument(
                                "freeze_integer: concat after '" + n.name +
                                "' must feed exactly one activation");
                        const Node& act = g.nodes[size_t(consumers[size_t(ci)][0])];
                        act_site = &act;
                        slope = act.slope;
                        fused = true;
                        source = -1; // output is a slice of the concat tensor
                    } else {
                        throw std::invalid_argument("freeze_integer: conv '" + n.name +
                                                    "' feeds an unsupported node");
                    }
                } else {
                    throw std::invalid_argument("freeze_integer: conv '" + n.name +
                                                "' must have exactly one consumer");
                }
                const QuantSpec& aq = checked_aq(*act_site, act_site->name);

                const IntNode& prod = net.nodes[size_t(remap[size_t(n.inputs[0])])];
                float s_in = prod.out_step;
                int64_t in_amax = std::max<int64_t>(std::abs(prod.out_qmin), prod.out_qmax);

                auto [wqmin, wqmax] = qrange(n.wq);
                int64_t oc = n.weight.shape.dims[0];
                int64_t per = n.weight.shape.numel() / oc;

                IntNode node;
                node.kind = IntNode::Kind::kConv;
                node.name = n.name;
                node.inputs = {remap[size_t(n.inputs[0])]};
                node.wshape = n.weight.shape;
                node.wcodes.resize(size_t(n.weight.shape.numel()));
                node.stride = n.stride;
                node.pad = n.pad;
                node.groups = n.groups;
                node.bias.resize(size_t(oc));
                node.rq_pos.resize(size_t(oc));
                if (fused) node.rq_neg.resize(size_t(oc));
                node.out_step = aq.step;
                std::tie(node.out_qmin, node.out_qmax) = qrange(aq);
                node.source_node = source;

                for (int64_t c = 0; c < oc; ++c) {
                    float t = n.fold_scale.empty() ? 1.0f : n.fold_scale[size_t(c)];
                    float t_eff = t == 0.0f ? 1.0f : std::abs(t);
                    int sign = t < 0.0f ? -1 : 1;
                    int64_t sum_abs = 0;
                    for (int64_t k = 0; k < per; ++k) {
                        long code = 0;
                        if (t != 0.0f)
                            code = std::lround(double(n.weight.data[size_t(c * per + k)]) /
                                               (double(n.wq.step) * double(t)));
                        code = std::clamp(code * sign, long(wqmin), long(wqmax));
                        node.wcodes[size_t(c * per + k)] = int8_t(code);
                        sum_abs += std::abs(code);
                    }
                    double bias_f = n.bias.empty() ? 0.0 : double(n.bias[size_t(c)]);
                    double s_eff = double(s_in) * double(n.wq.step) * double(t_eff);
                    node.bias[size_t(c)] = int32_t(std::llround(bias_f / s_eff));

                    int64_t bound = sum_abs * in_amax + std::abs(int64_t(node.bias[size_t(c)]));
                    if (bound >= (int64_t(1) << 31))
                        throw std::overflow_error(
                            "freeze_integer: int32 accumulator can overflow in '" + n.name +
                            "' (worst case " + std::to_string(bound) + ")");

                    double m = s_eff / double(aq.step);
                    try {
                        node.rq_pos[size_t(c)] = make_requant(m);
                        if (fused) node.rq_neg[size_t(c)] = make_requant(m * double(slope));
                    } catch (const std::exception& e) {
                        throw std::domain_error("freeze_integer: '" + n.name + "': " + e.what());
                    }
                }
                net.nodes.push_back(std::move(node));
                remap[i] = int(net.nodes.size()) - 1;
                break;
            }
        }
    }

    net.input_node = remap[size_t(g.input_node)];
    net.cls_out = remap[size_t(g.cls_out)];
    net.box_out = remap[size_t(g.box_out)];
    if (net.cls_out < 0 || net.box_out < 0)
        throw std::invalid_argument("freeze_integer: heads not reachable");
    return net;
}

namespace {

IntTensor int_conv(const IntNode& n, const IntTensor& x) {
    const auto& xd = x.shape.dims;
    const auto& wd = n.wshape.dims;
    if (xd.size() != 4) throw std::invalid_argument(n.name + ": integer conv needs NCHW input");
    int64_t N = xd[0], C = xd[1], H = xd[2], W = xd[3];
    int64_t OC = wd[0], ICg = wd[1], K = wd[2];
    if (C != ICg * n.groups)
        throw std::invalid_argument(n.name + ": channel mismatch in integer conv");
    int64_t OH = (H + 2 * n.pad - K) / n.stride + 1;
    int64_t OW = (W + 2 * n.pad - K) / n.stride + 1;
    IntTensor y;
    y.shape = Shape{{N, OC, OH, OW}};
    y.v.assign(size_t(y.shape.numel()), 0);

    int64_t oc_per_group = OC / n.groups;
    parallel_for(N * OC, [&](int64_t job) {
        int64_t nb = job / OC, oc = job % OC;
        int64_t grp = oc / oc_per_group;
        int32_t bias = n.bias[size_t(oc)];
        const RequantParams& rp_pos = n.rq_pos[size_t(oc)];
        const RequantParams* rp_neg = n.rq_neg.empty() ? nullptr : &n.rq_neg[size_t(oc)];
        for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
                int32_t acc = 0;
                for (int64_t ic = 0; ic < ICg; ++ic) {
                    int64_t in_c = grp * ICg + ic;
                    for (int64_t ky = 0; ky < K; ++ky) {
                        int64_t iy = oy * n.stride + ky - n.pad;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t kx = 0; kx < K; ++kx) {
                            int64_t ix = ox * n.stride + kx - n.pad;
                            if (ix < 0 || ix >= W) continue;
                            int32_t w = n.wcodes[size_t(((oc * ICg + ic) * K + ky) * K + kx)];
                            if (w == 0) continue;
                            acc += w * x.v[size_t(((nb * C + in_c) * H + iy) * W + ix)];
                        }
                    }
                }
                int64_t t = int64_t(acc) + bias;
                const RequantParams& rp = (rp_neg && t < 0) ? *rp_neg : rp_pos;
                int64_t code = apply_requant(t, rp);
                code = std::clamp<int64_t>(code, n.out_qmin, n.out_qmax);
                y.v[size_t(((nb * OC + oc) * OH + oy) * OW + ox)] = int32_t(code);
            }
    });
    return y;
}

Tensor dequant_int(const IntTensor& t, float step) {
    Tensor out(t.shape);
    for (size_t i = 0; i < t.v.size(); ++i) out.data[i] = float(t.v[i]) * step;
    return out;
}

} // namespace

IntegerResult run_integer(const IntegerNetwork& net, const IntTensor& input,
                          bool keep_intermediates) {
    std::vector<IntTensor> values(net.nodes.size());
    for (size_t i = 0; i < net.nodes.size(); ++i) {
        const IntNode& n = net.nodes[i];
        switch (n.kind) {
            case IntNode::Kind::kInput:
                values[i] = input;
                break;
            case IntNode::Kind::kConv:
                values[i] = int_conv(n, values[size_t(n.inputs[0])]);
                break;
            case IntNode::Kind::kConcat: {
                const auto& first = values[size_t(n.inputs[0])].shape.dims;
                int64_t N = first[0], H = first[2], W = first[3];
                int64_t total_c = 0;
                for (int in : n.inputs) total_c += values[size_t(in)].shape.dims[1];
                IntTensor y;
                y.shape = Shape{{N, total_c, H, W}};
                y.v.resize(size_t(y.shape.numel()));
                for (int64_t nb = 0; nb < N; ++nb) {
                    int64_t off_c = 0;
                    for (int in : n.inputs) {
                        const IntTensor& part = values[size_t(in)];
                        int64_t pc = part.shape.dims[1];
                        std::copy(part.v.begin() + nb * pc * H * W,
                                  part.v.begin() + (nb + 1) * pc * H * W,
                                  y.v.begin() + (nb * total_c + off_c) * H * W);
                        off_c += pc;
                    }
                }
                values[i] = std::move(y);
                break;
            }
        }
    }

    IntegerResult r;
    r.cls_logits = head_rows(dequant_int(values[size_t(net.cls_out)],
                                         net.nodes[size_t(net.cls_out)].out_step), 2);
    r.box_deltas = head_rows(dequant_int(values[size_t(net.box_out)],
                                         net.nodes[size_t(net.box_out)].out_step), 4);
    if (keep_intermediates) {
        r.node_codes = std::move(values);
        r.node_steps.resize(net.nodes.size());
        r.node_sources.resize(net.nodes.size());
        for (size_t i = 0; i < net.nodes.size(); ++i) {
            r.node_steps[i] = net.nodes[i].out_step;
            r.node_sources[i] = net.nodes[i].source_node;
        }
    }
    return r;
}

Tensor raw_to_input(const Image8& raw, int stride) {
    if (raw.channels != 1) throw std::invalid_argument("raw_to_input: expected 1-channel RAW");
    int H = round_up(raw.height, stride);
    int W = round_up(raw.width, stride);
    Tensor x(Shape{{1, 1, H, W}});
    for (int y = 0; y < raw.height; ++y)
        for (int xx = 0; xx < raw.width; ++xx)
            x.data[size_t(y) * size_t(W) + size_t(xx)] = float(raw.at(y, xx)) / 255.0f;
    return x;
}

IntTensor raw_to_input_codes(const Image8& raw, int stride, float step, int qmin, int qmax) {
    if (step <= 0) throw std::invalid_argument("raw_to_input_codes: step must be positive");
    Tensor x = raw_to_input(raw, stride);
    IntTensor out;
    out.shape = x.shape;
    out.v.resize(x.data.size());
    for (size_t i = 0; i < x.data.size(); ++i) {
        long code = std::lround(double(x.data[i]) / double(step));
        out.v[i] = int32_t(std::clamp(code, long(qmin), long(qmax)));
    }
    return out;
}

std::vector<Detection> decode_boxes(const std::vector<Anchor>& anchors, const Tensor& deltas,
                                    float variance_center, float variance_size,
                                    int img_w, int img_h) {
    const auto& d = deltas.shape.dims;
    if (d.size() != 2 || d[1] != 4 || size_t(d[0]) != anchors.size())
        throw std::invalid_argument("decode_boxes: deltas must be (num_anchors, 4)");
    std::vector<Detection> out(anchors.size());
    for (size_t a = 0; a < anchors.size(); ++a) {
        const Anchor& an = anchors[a];
        float dx = deltas.data[a * 4 + 0], dy = deltas.data[a * 4 + 1];
        float dw = deltas.data[a * 4 + 2], dh = deltas.data[a * 4 + 3];
        double cx = an.cx + double(dx) * variance_center * an.w;
        double cy = an.cy + double(dy) * variance_center * an.h;
        double w = an.w * std::exp(double(dw) * variance_size);
        double h = an.h * std::exp(double(dh) * variance_size);
        Detection det;
        det.x1 = std::clamp(cx - w / 2, 0.0, double(img_w));
        det.y1 = std::clamp(cy - h / 2, 0.0, double(img_h));
        det.x2 = std::clamp(cx + w / 2, 0.0, double(img_w));
        det.y2 = std::clamp(cy + h / 2, 0.0, double(img_h));
        det.index = int(a);
        out[a] = det;
    }
    return out;
}

std::vector<float> face_scores(const Tensor& cls_logits) {
    const auto& d = cls_logits.shape.dims;
    if (d.size() != 2 || d[1] != 2)
        throw std::invalid_argument("face_scores: logits must be (N, 2)");
    std::vector<float> s(static_cast<size_t>(d[0]));
    for (int64_t i = 0; i < d[0]; ++i) {
        float l0 = cls_logits.data[size_t(i * 2)], l1 = cls_logits.data[size_t(i * 2 + 1)];
        float m = std::max(l0, l1);
        float e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        s[size_t(i)] = e1 / (e0 + e1);
    }
    return s;
}

double iou_corners(double ax1, double ay1, double ax2, double ay2,
                   double bx1, double by1, double bx2, double by2) {
    double ix = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    double iy = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    double inter = ix * iy;
    double a = std::max(0.0, ax2 - ax1) * std::max(0.0, ay2 - ay1);
    double b = std::max(0.0, bx2 - bx1) * std::max(0.0, by2 - by1);
    double uni = a + b - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh, int max_keep) {
    if (!(iou_thresh > 0 && iou_thresh < 1))
        throw std::invalid_argument("nms: iou_thresh must be in (0,1)");
    std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.index < b.index;
    });
    std::vector<Detection> kept;
    for (const Detection& d : dets) {
        bool suppressed = false;
        for (const Detection& k : kept)
            if (iou_corners(d.x1, d.y1, d.x2, d.y2, k.x1, k.y1, k.x2, k.y2) > iou_thresh) {
                suppressed = true;
                break;
            }
        if (!suppressed) {
            kept.push_back(d);
            if (max_keep > 0 && int(kept.size()) >= max_keep) break;
        }
    }
    return kept;
}

std::vector<Detection> detect(const NetworkGraph& g, const IntegerNetwork* intnet,
                              const ArchConfig& arch, const Image8& raw,
                              const DetectParams& params) {
    Tensor cls, box;
    if (params.engine == Engine::kInteger) {
        if (!intnet) throw std::invalid_argument("detect: integer engine needs a frozen network");
        const IntNode& in = intnet->nodes[size_t(intnet->input_node)];
        IntTensor codes = raw_to_input_codes(raw, arch.stride, in.out_step, in.out_qmin,
                                             in.out_qmax);
        IntegerResult r = run_integer(*intnet, codes);
        cls = std::move(r.cls_logits);
        box = std::move(r.box_deltas);
    } else {
        Tensor x = raw_to_input(raw, arch.stride);
        ForwardResult r = params.engine == Engine::kFloat ? run_float(g, x)
                                                          : run_fake_quant(g, x);
        cls = std::move(r.cls_logits);
        box = std::move(r.box_deltas);
    }

    std::vector<Anchor> anchors = anchor_grid(anchor_config_from(arch, raw.width, raw.height));
    if (int64_t(anchors.size()) != cls.shape.dims[0])
        throw std::logic_error("detect: anchor count does not match head rows");

    std::vector<Detection> dets = decode_boxes(anchors, box, arch.variance_center,
                                               arch.variance_size, raw.width, raw.height);
    std::vector<float> scores = face_scores(cls);
    std::vector<Detection> cand;
    for (size_t i = 0; i < dets.size(); ++i) {
        if (scores[i] < params.score_thresh) continue;
        Detection d = dets[i];
        d.score = scores[i];
        if (d.x2 <= d.x1 || d.y2 <= d.y1) continue;
        cand.push_back(d);
    }
    return nms(std::move(cand), params.iou_thresh, params.max_keep);
}

void save_detections(const std::vector<DetectionRecord>& recs, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error(path + ": cannot open for write");
    for (const auto& r : recs) {
        json boxes = json::array();
        for (const auto& d : r.dets) boxes.push_back({d.x1, d.y1, d.x2, d.y2, d.score});
        out << json{{"file", r.file}, {"boxes", boxes}}.dump() << "\n";
    }
}

std::vector<DetectionRecord> load_detections(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    std::vector<DetectionRecord> recs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        DetectionRecord r;
        r.file = j.at("file").get<std::string>();
        int idx = 0;
        for (const auto& b : j.at("boxes")) {
            Detection d;
            d.x1 = b.at(0).get<double>();
            d.y1 = b.at(1).get<double>();
            d.x2 = b.at(2).get<double>();
            d.y2 = b.at(3).get<double>();
            d.score = b.at(4).get<double>();
            d.index = idx++;
            r.dets.push_back(d);
        }
        recs.push_back(std::move(r));
    }
    return recs;
}

std::vector<uint8_t> pack_ternary(const std::vector<int32_t>& codes) {
    std::vector<uint8_t> out((codes.size() + 3) / 4, 0);
    for (size_t i = 0; i < codes.size(); ++i) {
        uint8_t enc;
        switch (codes[i]) {
            case 0: enc = 0b00; break;
            case 1: enc = 0b01; break;
            case -1: enc = 0b11; break;
            default:
                throw std::invalid_argument("pack_ternary: code " + std::to_string(codes[i]) +
                                            " not in {-1,0,1}");
        }
        out[i / 4] |= uint8_t(enc << (2 * (i % 4)));
    }
    return out;
}

std::vector<int32_t> unpack_ternary(const std::vector<uint8_t>& bytes, size_t count) {
    if (bytes.size() < (count + 3) / 4)
        throw std::invalid_argument("unpack_ternary: byte buffer too small");
    std::vector<int32_t> out(count);
    for (size_t i = 0; i < count; ++i) {
        uint8_t enc = (bytes[i / 4] >> (2 * (i % 4))) & 0b11;
        switch (enc) {
            case 0b00: out[i] = 0; break;
            case 0b01: out[i] = 1; break;
            case 0b11: out[i] = -1; break;
            default: throw std::runtime_error("unpack_ternary: reserved code 0b10 at index " +
                                              std::to_string(i));
        }
    }
    return out;
}

} // namespace tfd
