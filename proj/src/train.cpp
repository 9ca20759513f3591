#include "tfd/train.hpp"

#include "tfd/rawsim.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace tfd {

namespace {

void tensor_accumulate(Tensor& dst, const Tensor& src) {
    if (dst.shape.numel() != src.shape.numel())
        throw std::logic_error("gradient accumulation shape mismatch");
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

// (N*H*W*S, group) rows back to (N, S*group, H, W)
Tensor rows_to_head(const Tensor& rows, int64_t N, int64_t C, int64_t H, int64_t W) {
    int64_t group = rows.shape.dims[1];
    int64_t S = C / group;
    Tensor out(Shape{{N, C, H, W}});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j)
                for (int64_t s = 0; s < S; ++s) {
                    int64_t row = ((n * H + i) * W + j) * S + s;
                    for (int64_t c = 0; c < group; ++c)
                        out.data[size_t(((n * C + s * group + c) * H + i) * W + j)] =
                            rows.data[size_t(row * group + c)];
                }
    return out;
}

void conv_backward(const Tensor& x, const Tensor& w, const Tensor& gy, int stride, int pad,
                   int groups, Tensor& gx, Tensor& gw, std::vector<float>* gb) {
    const auto& xd = x.shape.dims;
    const auto& wd = w.shape.dims;
    const auto& yd = gy.shape.dims;
    int64_t N = xd[0], C = xd[1], H = xd[2], W = xd[3];
    int64_t OC = wd[0], ICg = wd[1], K = wd[2];
    int64_t OH = yd[2], OW = yd[3];
    int64_t oc_per_group = OC / groups;

    gx = Tensor(x.shape);
    gw = Tensor(w.shape);
    if (gb) gb->assign(size_t(OC), 0.0f);

    parallel_for(OC, [&](int64_t oc) {
        int64_t grp = oc / oc_per_group;
        for (int64_t ic = 0; ic < ICg; ++ic) {
            int64_t in_c = grp * ICg + ic;
            for (int64_t ky = 0; ky < K; ++ky)
                for (int64_t kx = 0; kx < K; ++kx) {
                    double acc = 0.0;
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t oy = 0; oy < OH; ++oy) {
                            int64_t iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            const float* grow = gy.data.data() + ((n * OC + oc) * OH + oy) * OW;
                            const float* xrow = x.data.data() + ((n * C + in_c) * H + iy) * W;
                            for (int64_t ox = 0; ox < OW; ++ox) {
                                int64_t ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= W) continue;
                                acc += double(grow[ox]) * double(xrow[ix]);
                            }
                        }
                    gw.data[size_t(((oc * ICg + ic) * K + ky) * K + kx)] = float(acc);
                }
        }
        if (gb) {
            double acc = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const float* gplane = gy.data.data() + (n * OC + oc) * OH * OW;
                for (int64_t i = 0; i < OH * OW; ++i) acc += double(gplane[i]);
            }
            (*gb)[size_t(oc)] = float(acc);
        }
    });

    parallel_for(N * C, [&](int64_t job) {
        int64_t n = job / C, in_c = job % C;
        int64_t grp = in_c / ICg, ic = in_c % ICg;
        float* gplane = gx.data.data() + (n * C + in_c) * H * W;
        for (int64_t oc = grp * oc_per_group; oc < (grp + 1) * oc_per_group; ++oc) {
            const float* gyp = gy.data.data() + (n * OC + oc) * OH * OW;
            const float* wp = w.data.data() + (oc * ICg + ic) * K * K;
            for (int64_t oy = 0; oy < OH; ++oy)
                for (int64_t ox = 0; ox < OW; ++ox) {
                    float gv = gyp[oy * OW + ox];
                    if (gv == 0.0f) continue;
                    for (int64_t ky = 0; ky < K; ++ky) {
                        int64_t iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t kx = 0; kx < K; ++kx) {
                            int64_t ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            gplane[iy * W + ix] += gv * wp[ky * K + kx];
                        }
                    }
                }
        }
    });
}

} // namespace

Tape forward_train(NetworkGraph& g, const Tensor& input, bool update_ema, float ema_momentum) {
    Tape tape;
    tape.nodes.resize(g.nodes.size());
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        Node& n = g.nodes[i];
        TapeNode& t = tape.nodes[i];
        Tensor y;
        switch (n.kind) {
            case NodeKind::kInput:
                y = input;
                break;
            case NodeKind::kConv: {
                const Tensor& x = tape.nodes[size_t(n.inputs[0])].value;
                if (n.wq.enabled()) {
                    t.fq_weight = fake_quant_weights(n);
                    t.used_fq_w = true;
                }
                y = conv2d(x, t.used_fq_w ? t.fq_weight : n.weight,
                           n.bias.empty() ? nullptr : &n.bias, n.stride, n.pad, n.groups, n.name);
                break;
            }
            case NodeKind::kBN: {
                const Tensor& x = tape.nodes[size_t(n.inputs[0])].value;
                const auto& d = x.shape.dims;
                int64_t N = d[0], C = d[1], HW = d[2] * d[3];
                if (C != n.bn.channels())
                    throw std::invalid_argument(n.name + ": BN channel mismatch");
                int64_t m = N * HW;
                t.mu.assign(size_t(C), 0.0f);
                t.inv_std.assign(size_t(C), 0.0f);
                t.xhat = Tensor(x.shape);
                y = Tensor(x.shape);
                parallel_for(C, [&](int64_t c) {
                    double sum = 0.0, sumsq = 0.0;
                    for (int64_t nb = 0; nb < N; ++nb) {
                        const float* p = x.data.data() + (nb * C + c) * HW;
                        for (int64_t k = 0; k < HW; ++k) {
                            sum += double(p[k]);
                            sumsq += double(p[k]) * double(p[k]);
                        }
                    }
                    double mu = sum / double(m);
                    double var = std::max(0.0, sumsq / double(m) - mu * mu);
                    float inv = float(1.0 / std::sqrt(var + double(n.bn.eps)));
                    t.mu[size_t(c)] = float(mu);
                    t.inv_std[size_t(c)] = inv;
                    float gam = n.bn.gamma[size_t(c)], bet = n.bn.beta[size_t(c)];
                    for (int64_t nb = 0; nb < N; ++nb) {
                        const float* p = x.data.data() + (nb * C + c) * HW;
                        float* xh = t.xhat.data.data() + (nb * C + c) * HW;
                        float* yp = y.data.data() + (nb * C + c) * HW;
                        for (int64_t k = 0; k < HW; ++k) {
                            xh[k] = (p[k] - float(mu)) * inv;
                            yp[k] = gam * xh[k] + bet;
                        }
                    }
                    if (update_ema) {
                        n.bn.mean[size_t(c)] = ema_momentum * n.bn.mean[size_t(c)] +
                                               (1.0f - ema_momentum) * float(mu);
                        n.bn.var[size_t(c)] = ema_momentum * n.bn.var[size_t(c)] +
                                              (1.0f - ema_momentum) * float(var);
                    }
                });
                break;
            }
            case NodeKind::kLeaky:
                y = leaky_relu(tape.nodes[size_t(n.inputs[0])].value, n.slope);
                break;
            case NodeKind::kConcat: {
                std::vector<const Tensor*> parts;
                for (int in : n.inputs) parts.push_back(&tape.nodes[size_t(in)].value);
                y = concat(parts, 1);
                break;
            }
        }
        if (n.aq.enabled()) {
            if (n.aq.step <= 0)
                throw std::invalid_argument(n.name + ": activation quantizer not calibrated");
            t.pre_act = y;
            t.used_fq_a = true;
            y = fake_quant_forward(y, n.aq);
        }
        t.value = std::move(y);
    }
    tape.cls_rows = head_rows(tape.nodes[size_t(g.cls_out)].value, 2);
    tape.box_rows = head_rows(tape.nodes[size_t(g.box_out)].value, 4);
    return tape;
}

GradientSet backward(const NetworkGraph& g, Tape& tape, const Tensor& grad_cls_rows,
                     const Tensor& grad_box_rows) {
    GradientSet gs;
    gs.nodes.resize(g.nodes.size());
    for (size_t i = 0; i < g.nodes.size(); ++i)
        tape.nodes[i].grad = Tensor(tape.nodes[i].value.shape);

    {
        const auto& d = tape.nodes[size_t(g.cls_out)].value.shape.dims;
        tape.nodes[size_t(g.cls_out)].grad = rows_to_head(grad_cls_rows, d[0], d[1], d[2], d[3]);
    }
    {
        const auto& d = tape.nodes[size_t(g.box_out)].value.shape.dims;
        tape.nodes[size_t(g.box_out)].grad = rows_to_head(grad_box_rows, d[0], d[1], d[2], d[3]);
    }

    for (int64_t i = int64_t(g.nodes.size()) - 1; i >= 0; --i) {
        const Node& n = g.nodes[size_t(i)];
        TapeNode& t = tape.nodes[size_t(i)];
        Tensor gout = std::move(t.grad);
        if (t.used_fq_a) {
            FakeQuantGrad fq = fake_quant_backward(t.pre_act, n.aq, gout);
            gs.nodes[size_t(i)].astep = fq.grad_step;
            gout = std::move(fq.grad_x);
        }
        switch (n.kind) {
            case NodeKind::kInput:
                break;
            case NodeKind::kConv: {
                const Tensor& x = tape.nodes[size_t(n.inputs[0])].value;
                const Tensor& w_used = t.used_fq_w ? t.fq_weight : n.weight;
                Tensor gx, gw_used;
                std::vector<float> gb;
                conv_backward(x, w_used, gout, n.stride, n.pad, n.groups, gx, gw_used,
                              n.bias.empty() ? nullptr : &gb);
                if (t.used_fq_w) {
                    FakeQuantGrad fq = fake_quant_backward(n.weight, n.wq, gw_used);
                    gs.nodes[size_t(i)].w = std::move(fq.grad_x);
                    gs.nodes[size_t(i)].wstep = fq.grad_step;
                } else {
                    gs.nodes[size_t(i)].w = std::move(gw_used);
                }
                gs.nodes[size_t(i)].b = std::move(gb);
                tensor_accumulate(tape.nodes[size_t(n.inputs[0])].grad, gx);
                break;
            }
            case NodeKind::kBN: {
                const auto& d = gout.shape.dims;
                int64_t N = d[0], C = d[1], HW = d[2] * d[3];
                int64_t m = N * HW;
                Tensor gx(gout.shape);
                auto& ng = gs.nodes[size_t(i)];
                ng.gamma.assign(size_t(C), 0.0f);
                ng.beta.assign(size_t(C), 0.0f);
                parallel_for(C, [&](int64_t c) {
                    double sum_gy = 0.0, sum_gyx = 0.0;
                    for (int64_t nb = 0; nb < N; ++nb) {
                        const float* gp = gout.data.data() + (nb * C + c) * HW;
                        const float* xh = t.xhat.data.data() + (nb * C + c) * HW;
                        for (int64_t k = 0; k < HW; ++k) {
                            sum_gy += double(gp[k]);
                            sum_gyx += double(gp[k]) * double(xh[k]);
                        }
                    }
                    ng.beta[size_t(c)] = float(sum_gy);
                    ng.gamma[size_t(c)] = float(sum_gyx);
                    float gam = n.bn.gamma[size_t(c)];
                    float inv = t.inv_std[size_t(c)];
                    float mean_gy = float(sum_gy / double(m));
                    float mean_gyx = float(sum_gyx / double(m));
                    for (int64_t nb = 0; nb < N; ++nb) {
                        const float* gp = gout.data.data() + (nb * C + c) * HW;
                        const float* xh = t.xhat.data.data() + (nb * C + c) * HW;
                        float* gxp = gx.data.data() + (nb * C + c) * HW;
                        for (int64_t k = 0; k < HW; ++k)
                            gxp[k] = gam * inv * (gp[k] - mean_gy - xh[k] * mean_gyx);
                    }
                });
                tensor_accumulate(tape.nodes[size_t(n.inputs[0])].grad, gx);
                break;
            }
            case NodeKind::kLeaky: {
                const Tensor& x = tape.nodes[size_t(n.inputs[0])].value;
                Tensor gx(gout.shape);
                for (size_t k = 0; k < gx.data.size(); ++k)
                    gx.data[k] = gout.data[k] * (x.data[k] > 0.0f ? 1.0f : n.slope);
                tensor_accumulate(tape.nodes[size_t(n.inputs[0])].grad, gx);
                break;
            }
            case NodeKind::kConcat: {
                std::vector<int64_t> sizes;
                for (int in : n.inputs)
                    sizes.push_back(tape.nodes[size_t(in)].value.shape.dims[1]);
                std::vector<Tensor> parts = split(gout, 1, sizes);
                for (size_t p = 0; p < parts.size(); ++p)
                    tensor_accumulate(tape.nodes[size_t(n.inputs[p])].grad, parts[p]);
                break;
            }
        }
    }
    return gs;
}

void encode_box(const Anchor& a, const BoxXYWH& gt, float v_center, float v_size, float out[4]) {
    double g_cx = gt.x + gt.w / 2.0, g_cy = gt.y + gt.h / 2.0;
    out[0] = float((g_cx - a.cx) / (double(v_center) * a.w));
    out[1] = float((g_cy - a.cy) / (double(v_center) * a.h));
    out[2] = float(std::log(gt.w / double(a.w)) / double(v_size));
    out[3] = float(std::log(gt.h / double(a.h)) / double(v_size));
}

MatchResult match_anchors(const std::vector<Anchor>& anchors, const std::vector<BoxXYWH>& gts,
                          const MatchConfig& cfg) {
    size_t A = anchors.size(), G = gts.size();
    MatchResult m;
    m.labels.assign(A, AnchorLabel::kNegative);
    m.matched_gt.assign(A, -1);
    m.targets = Tensor(Shape{{int64_t(A), 4}});
    if (G == 0) return m;

    std::vector<double> best_iou(A, 0.0);
    std::vector<int> best_gt(A, -1);
    std::vector<double> gt_best_iou(G, -1.0);
    std::vector<int> gt_best_anchor(G, -1);

    for (size_t a = 0; a < A; ++a) {
        double ax1 = anchors[a].cx - anchors[a].w / 2.0, ay1 = anchors[a].cy - anchors[a].h / 2.0;
        double ax2 = anchors[a].cx + anchors[a].w / 2.0, ay2 = anchors[a].cy + anchors[a].h / 2.0;
        for (size_t g = 0; g < G; ++g) {
            double iou = iou_corners(ax1, ay1, ax2, ay2, gts[g].x, gts[g].y, gts[g].x2(),
                                     gts[g].y2());
            if (iou > best_iou[a]) {
                best_iou[a] = iou;
                best_gt[a] = int(g);
            }
            if (iou > gt_best_iou[g]) {
                gt_best_iou[g] = iou;
                gt_best_anchor[g] = int(a);
            }
        }
    }

    for (size_t a = 0; a < A; ++a) {
        if (best_iou[a] >= cfg.iou_pos) {
            m.labels[a] = AnchorLabel::kPositive;
            m.matched_gt[a] = best_gt[a];
        } else if (best_iou[a] < cfg.iou_neg) {
            m.labels[a] = AnchorLabel::kNegative;
        } else {
            m.labels[a] = AnchorLabel::kIgnore;
        }
    }
    // Each GT claims its argmax anchor, keeping the higher-IoU claim when two
    // ground truths share one.
    std::vector<double> forced_iou(A, -1.0);
    for (size_t g = 0; g < G; ++g) {
        int a = gt_best_anchor[g];
        if (a < 0) continue;
        if (gt_best_iou[g] > forced_iou[size_t(a)]) {
            forced_iou[size_t(a)] = gt_best_iou[g];
            m.labels[size_t(a)] = AnchorLabel::kPositive;
            m.matched_gt[size_t(a)] = int(g);
        }
    }

    for (size_t a = 0; a < A; ++a) {
        if (m.labels[a] != AnchorLabel::kPositive) continue;
        ++m.n_pos;
        encode_box(anchors[a], gts[size_t(m.matched_gt[a])], cfg.variance_center,
                   cfg.variance_size, m.targets.data.data() + a * 4);
    }
    return m;
}

LossResult detector_loss(const Tensor& cls_rows, const Tensor& box_rows, const MatchResult& m,
                         int neg_pos_ratio) {
    int64_t A = cls_rows.shape.dims[0];
    if (cls_rows.shape.dims[1] != 2 || box_rows.shape.dims[0] != A ||
        box_rows.shape.dims[1] != 4 || size_t(A) != m.labels.size())
        throw std::invalid_argument("detector_loss: shape mismatch with match result");

    LossResult r;
    r.n_pos = m.n_pos;
    r.grad_cls = Tensor(cls_rows.shape);
    r.grad_box = Tensor(box_rows.shape);
    double norm = double(std::max(1, m.n_pos));

    std::vector<float> p1(static_cast<size_t>(A)); // face probability per anchor
    for (int64_t a = 0; a < A; ++a) {
        float l0 = cls_rows.data[size_t(a * 2)], l1 = cls_rows.data[size_t(a * 2 + 1)];
        float mx = std::max(l0, l1);
        float e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
        p1[size_t(a)] = e1 / (e0 + e1);
    }

    // hard-negative mining: rank negatives by CE = -log(1 - p1)
    std::vector<int64_t> negs;
    for (int64_t a = 0; a < A; ++a)
        if (m.labels[size_t(a)] == AnchorLabel::kNegative) negs.push_back(a);
    int64_t n_neg = std::min<int64_t>(int64_t(negs.size()),
                                      std::max<int64_t>(1, int64_t(neg_pos_ratio) * m.n_pos));
    std::partial_sort(negs.begin(), negs.begin() + n_neg, negs.end(),
                      [&](int64_t a, int64_t b) {
                          if (p1[size_t(a)] != p1[size_t(b)]) return p1[size_t(a)] > p1[size_t(b)];
                          return a < b;
                      });
    negs.resize(size_t(n_neg));

    auto add_ce = [&](int64_t a, int target) {
        float p = target == 1 ? p1[size_t(a)] : 1.0f - p1[size_t(a)];
        r.cls_term += -std::log(std::max(double(p), 1e-12)) / norm;
        float pt = p1[size_t(a)];
        // d(CE)/d(logit) = softmax - onehot
        r.grad_cls.data[size_t(a * 2)] = float(((1.0f - pt) - (target == 0 ? 1.0f : 0.0f)) / norm);
        r.grad_cls.data[size_t(a * 2 + 1)] = float((pt - (target == 1 ? 1.0f : 0.0f)) / norm);
    };

    for (int64_t a = 0; a < A; ++a)
        if (m.labels[size_t(a)] == AnchorLabel::kPositive) add_ce(a, 1);
    for (int64_t a : negs) add_ce(a, 0);

    for (int64_t a = 0; a < A; ++a) {
        if (m.labels[size_t(a)] != AnchorLabel::kPositive) continue;
        for (int64_t k = 0; k < 4; ++k) {
            float d = box_rows.data[size_t(a * 4 + k)] - m.targets.data[size_t(a * 4 + k)];
            double ad = std::abs(double(d));
            r.box_term += (ad < 1.0 ? 0.5 * ad * ad : ad - 0.5) / norm;
            r.grad_box.data[size_t(a * 4 + k)] =
                float((ad < 1.0 ? double(d) : (d > 0 ? 1.0 : -1.0)) / norm);
        }
    }
    r.total = r.cls_term + r.box_term;
    return r;
}

double lr_at(int64_t step, int64_t total_steps, int64_t warm_steps, double base_lr,
             double min_lr) {
    if (step < warm_steps) return base_lr * double(step + 1) / double(warm_steps);
    if (total_steps <= warm_steps) return min_lr;
    double progress = double(step - warm_steps) / double(total_steps - warm_steps);
    progress = std::clamp(progress, 0.0, 1.0);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(progress * 3.14159265358979323846));
}

ParamView collect_params(NetworkGraph& g) {
    ParamView pv;
    for (auto& n : g.nodes) {
        if (n.is_conv()) {
            for (auto& w : n.weight.data) {
                pv.values.push_back(&w);
                pv.decay.push_back(1);
            }
            for (auto& b : n.bias) {
                pv.values.push_back(&b);
                pv.decay.push_back(0);
            }
        }
        if (n.kind == NodeKind::kBN) {
            for (auto& v : n.bn.gamma) {
                pv.values.push_back(&v);
                pv.decay.push_back(0);
            }
            for (auto& v : n.bn.beta) {
                pv.values.push_back(&v);
                pv.decay.push_back(0);
            }
        }
        if (n.is_conv() && n.wq.enabled()) {
            pv.values.push_back(&n.wq.step);
            pv.decay.push_back(0);
        }
        if (n.aq.enabled() && n.kind != NodeKind::kInput) {
            pv.values.push_back(&n.aq.step);
            pv.decay.push_back(0);
        }
    }
    return pv;
}

std::vector<float> flatten_grads(const NetworkGraph& g, const GradientSet& gs) {
    std::vector<float> out;
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const Node& n = g.nodes[i];
        const NodeGrad& ng = gs.nodes[i];
        if (n.is_conv()) {
            if (ng.w.data.empty()) {
                out.insert(out.end(), n.weight.data.size(), 0.0f);
            } else {
                out.insert(out.end(), ng.w.data.begin(), ng.w.data.end());
            }
            if (ng.b.empty()) {
                out.insert(out.end(), n.bias.size(), 0.0f);
            } else {
                out.insert(out.end(), ng.b.begin(), ng.b.end());
            }
        }
        if (n.kind == NodeKind::kBN) {
            if (ng.gamma.empty()) {
                out.insert(out.end(), n.bn.gamma.size() * 2, 0.0f);
            } else {
                out.insert(out.end(), ng.gamma.begin(), ng.gamma.end());
                out.insert(out.end(), ng.beta.begin(), ng.beta.end());
            }
        }
        if (n.is_conv() && n.wq.enabled()) out.push_back(float(ng.wstep));
        if (n.aq.enabled() && n.kind != NodeKind::kInput) out.push_back(float(ng.astep));
    }
    return out;
}

void SgdMomentum::step(ParamView& params, const std::vector<float>& grads, double lr) {
    if (params.values.size() != grads.size())
        throw std::logic_error("optimizer: parameter/gradient size mismatch");
    if (velocity.size() != grads.size()) velocity.assign(grads.size(), 0.0f);
    for (size_t i = 0; i < grads.size(); ++i) {
        float gr = grads[i];
        if (weight_decay != 0.0 && params.decay[i]) gr += float(weight_decay) * *params.values[i];
        velocity[i] = float(momentum) * velocity[i] + gr;
        *params.values[i] -= float(lr) * velocity[i];
    }
}

Dataset load_raw_dataset(const std::string& dir) {
    Dataset ds;
    auto recs = load_annotations((fs::path(dir) / "annotations.jsonl").string());
    for (const auto& r : recs) {
        Sample s;
        s.raw = load_pnm((fs::path(dir) / r.file).string());
        s.boxes = r.boxes;
        s.id = r.id;
        if (ds.samples.empty()) {
            ds.width = s.raw.width;
            ds.height = s.raw.height;
        } else if (s.raw.width != ds.width || s.raw.height != ds.height) {
            throw std::runtime_error("dataset images have mixed sizes ('" + r.file + "')");
        }
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw std::runtime_error(dir + ": empty dataset");
    return ds;
}

std::string StageSpec::tag() const {
    if (!quantized()) return "float";
    if (ternary) return "ternary_a" + std::to_string(a_bits);
    return "w" + std::to_string(w_bits) + "a" + std::to_string(a_bits);
}

void TrainConfig::validate() const {
    if (schedule.empty()) throw std::invalid_argument("TrainConfig: empty stage schedule");
    auto eff_w = [](const StageSpec& s) { return s.ternary ? 2 : (s.quantized() ? s.w_bits : 32); };
    auto eff_a = [](const StageSpec& s) { return s.quantized() ? s.a_bits : 32; };
    for (size_t i = 0; i + 1 < schedule.size(); ++i) {
        if (eff_w(schedule[i]) < eff_w(schedule[i + 1]) ||
            eff_a(schedule[i]) < eff_a(schedule[i + 1]))
            throw std::invalid_argument("TrainConfig: bit widths must be nonincreasing");
    }
    for (const auto& s : schedule)
        if (s.epochs <= 0) throw std::invalid_argument("TrainConfig: stage epochs must be positive");
    if (batch_size <= 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (base_lr <= 0 || min_lr < 0) throw std::invalid_argument("TrainConfig: bad learning rates");
    if (warmup_frac < 0 || warmup_frac >= 1)
        throw std::invalid_argument("TrainConfig: warmup_frac must be in [0,1)");
    if (neg_pos_ratio < 1) throw std::invalid_argument("TrainConfig: neg_pos_ratio must be >= 1");
    if (sam.rho < 0) throw std::invalid_argument("TrainConfig: sam rho must be >= 0");
}

TrainConfig default_train_config() {
    TrainConfig cfg;
    cfg.schedule = {{kQuantDisabled, kQuantDisabled, false, 6},
                    {8, 8, false, 2},
                    {4, 4, false, 2},
                    {3, 3, false, 2},
                    {2, 3, true, 2}};
    return cfg;
}

namespace {

// Float forward with batch-stat BN (no EMA, no fake quant), recording the
// per-site absolute maxima used to seed activation steps.
void calibration_maxima(const NetworkGraph& g, const Tensor& input, std::vector<float>& amax) {
    std::vector<Tensor> values(g.nodes.size());
    amax.assign(g.nodes.size(), 0.0f);
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const Node& n = g.nodes[i];
        Tensor y;
        switch (n.kind) {
            case NodeKind::kInput:
                y = input;
                break;
            case NodeKind::kConv:
                y = conv2d(values[size_t(n.inputs[0])], n.weight,
                           n.bias.empty() ? nullptr : &n.bias, n.stride, n.pad, n.groups, n.name);
                break;
            case NodeKind::kBN: {
                const Tensor& x = values[size_t(n.inputs[0])];
                const auto& d = x.shape.dims;
                int64_t N = d[0], C = d[1], HW = d[2] * d[3];
                y = Tensor(x.shape);
                for (int64_t c = 0; c < C; ++c) {
                    double sum = 0.0, sumsq = 0.0;
                    for (int64_t nb = 0; nb < N; ++nb) {
                        const float* p = x.data.data() + (nb * C + c) * HW;
                        for (int64_t k = 0; k < HW; ++k) {
                            sum += p[k];
                            sumsq += double(p[k]) * double(p[k]);
                        }
                    }
                    double mu = sum / double(N * HW);
                    double var = std::max(0.0, sumsq / double(N * HW) - mu * mu);
                    float inv = float(1.0 / std::sqrt(var + double(n.bn.eps)));
                    for (int64_t nb = 0; nb < N; ++nb) {
                        const float* p = x.data.data() + (nb * C + c) * HW;
                        float* yp = y.data.data() + (nb * C + c) * HW;
                        for (int64_t k = 0; k < HW; ++k)
                            yp[k] = n.bn.gamma[size_t(c)] * (p[k] - float(mu)) * inv +
                                    n.bn.beta[size_t(c)];
                    }
                }
                break;
            }
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
        float mx = 0.0f;
        for (float v : y.data) mx = std::max(mx, std::abs(v));
        amax[i] = mx;
        values[i] = std::move(y);
    }
}

} // namespace

void calibrate_quantizers(NetworkGraph& g, const Tensor& batch_input) {
    for (auto& n : g.nodes) {
        if (n.is_conv() && n.wq.enabled()) {
            auto [qmin, qmax] = qrange(n.wq);
            double mean_abs = 0.0;
            for (float w : n.weight.data) mean_abs += std::abs(double(w));
            mean_abs /= double(n.weight.data.size());
            n.wq.step = std::max(float(2.0 * mean_abs / std::sqrt(double(qmax))), 1e-8f);
        }
    }
    std::vector<float> amax;
    calibration_maxima(g, batch_input, amax);
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        Node& n = g.nodes[i];
        if (n.kind == NodeKind::kInput || !n.aq.enabled()) continue;
        auto [qmin, qmax] = qrange(n.aq);
        n.aq.step = std::max(amax[i] / float(qmax), 1e-6f);
    }
}

StepStats salsq_step(NetworkGraph& g, const std::vector<Anchor>& anchors, const Tensor& input,
                     const std::vector<const std::vector<BoxXYWH>*>& gt_per_image,
                     const TrainConfig& cfg, ParamView& params, SgdMomentum& opt, double lr) {
    int64_t B = input.shape.dims[0];
    int64_t A = int64_t(anchors.size());

    auto run_pass = [&](bool update_ema, StepStats& stats) {
        Tape tape = forward_train(g, input, update_ema, cfg.ema_momentum);
        Tensor gcls(Shape{{B * A, 2}});
        Tensor gbox(Shape{{B * A, 4}});
        stats = StepStats{};
        for (int64_t b = 0; b < B; ++b) {
            Tensor cls(Shape{{A, 2}});
            Tensor box(Shape{{A, 4}});
            std::copy_n(tape.cls_rows.data.begin() + b * A * 2, A * 2, cls.data.begin());
            std::copy_n(tape.box_rows.data.begin() + b * A * 4, A * 4, box.data.begin());
            MatchResult m = match_anchors(anchors, *gt_per_image[size_t(b)], cfg.match);
            LossResult lres = detector_loss(cls, box, m, cfg.neg_pos_ratio);
            stats.loss += lres.total / double(B);
            stats.cls_term += lres.cls_term / double(B);
            stats.box_term += lres.box_term / double(B);
            stats.n_pos += lres.n_pos;
            for (int64_t k = 0; k < A * 2; ++k)
                gcls.data[size_t(b * A * 2 + k)] = lres.grad_cls.data[size_t(k)] / float(B);
            for (int64_t k = 0; k < A * 4; ++k)
                gbox.data[size_t(b * A * 4 + k)] = lres.grad_box.data[size_t(k)] / float(B);
        }
        GradientSet gs = backward(g, tape, gcls, gbox);
        return flatten_grads(g, gs);
    };

    StepStats stats;
    std::vector<float> g1 = run_pass(true, stats);
    std::vector<float> use = std::move(g1);

    if (cfg.sam.rho > 0) {
        std::vector<float> saved(params.values.size());
        for (size_t i = 0; i < params.values.size(); ++i) saved[i] = *params.values[i];
        std::vector<float> vals = saved;
        sam_perturb(vals, use, cfg.sam);
        for (size_t i = 0; i < params.values.size(); ++i) *params.values[i] = vals[i];
        StepStats stats2;
        use = run_pass(false, stats2);
        for (size_t i = 0; i < params.values.size(); ++i) *params.values[i] = saved[i];
    }

    opt.step(params, use, lr);
    return stats;
}

std::vector<StageResult> train_qat(NetworkGraph& g, const ArchConfig& arch, const Dataset& data,
                                   const TrainConfig& cfg, std::ostream* log,
                                   const StageSink& sink) {
    cfg.validate();
    Rng rng(cfg.seed);
    std::vector<StageResult> results;

    std::vector<Anchor> anchors = anchor_grid(anchor_config_from(arch, data.width, data.height));
    int64_t n = int64_t(data.samples.size());

    auto make_batch = [&](const std::vector<int64_t>& idx, int64_t lo, int64_t hi, Tensor& input,
                          std::vector<const std::vector<BoxXYWH>*>& gts) {
        int64_t B = hi - lo;
        Tensor first = raw_to_input(data.samples[size_t(idx[size_t(lo)])].raw, arch.stride);
        int64_t H = first.shape.dims[2], W = first.shape.dims[3];
        input = Tensor(Shape{{B, 1, H, W}});
        gts.clear();
        for (int64_t b = 0; b < B; ++b) {
            const Sample& s = data.samples[size_t(idx[size_t(lo + b)])];
            Tensor one = b == 0 ? first : raw_to_input(s.raw, arch.stride);
            std::copy(one.data.begin(), one.data.end(), input.data.begin() + b * H * W);
            gts.push_back(&s.boxes);
        }
    };

    if (log)
        *log << "stage,epoch,step,lr,loss,cls,box,n_pos\n";

    for (size_t stage_idx = 0; stage_idx < cfg.schedule.size(); ++stage_idx) {
        const StageSpec& spec = cfg.schedule[stage_idx];
        if (spec.quantized()) {
            set_quantization(g, spec.w_bits, spec.a_bits, spec.ternary);
            Tensor calib_input;
            std::vector<const std::vector<BoxXYWH>*> calib_gts;
            std::vector<int64_t> ident(static_cast<size_t>(n));
            std::iota(ident.begin(), ident.end(), 0);
            make_batch(ident, 0, std::min<int64_t>(cfg.batch_size, n), calib_input, calib_gts);
            calibrate_quantizers(g, calib_input);
        } else {
            set_quantization(g, kQuantDisabled, kQuantDisabled, false);
        }
        ParamView params = collect_params(g);
        SgdMomentum opt;
        opt.momentum = cfg.momentum;
        opt.weight_decay = cfg.weight_decay;

        int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
        int64_t total_steps = steps_per_epoch * spec.epochs;
        int64_t warm_steps = int64_t(std::llround(double(total_steps) * cfg.warmup_frac));

        StageResult res;
        res.spec = spec;
        std::vector<float> snapshot(params.values.size());
        int64_t step_idx = 0;
        bool aborted = false;

        for (int epoch = 0; epoch < spec.epochs && !aborted; ++epoch) {
            std::vector<int64_t> idx(static_cast<size_t>(n));
            std::iota(idx.begin(), idx.end(), 0);
            // Fisher-Yates with the run RNG keeps the order reproducible.
            for (int64_t i = n - 1; i > 0; --i)
                std::swap(idx[size_t(i)], idx[size_t(rng.below(uint64_t(i + 1)))]);

            for (int64_t lo = 0; lo < n && !aborted; lo += cfg.batch_size) {
                int64_t hi = std::min<int64_t>(lo + cfg.batch_size, n);
                Tensor input;
                std::vector<const std::vector<BoxXYWH>*> gts;
                make_batch(idx, lo, hi, input, gts);

                for (size_t i = 0; i < params.values.size(); ++i)
                    snapshot[i] = *params.values[i];
                double lr = lr_at(step_idx, total_steps, warm_steps, cfg.base_lr, cfg.min_lr);
                StepStats st = salsq_step(g, anchors, input, gts, cfg, params, opt, lr);
                if (!std::isfinite(st.loss)) {
                    for (size_t i = 0; i < params.values.size(); ++i)
                        *params.values[i] = snapshot[i];
                    aborted = true;
                    res.aborted = true;
                    break;
                }
                res.final_loss = st.loss;
                ++step_idx;
                if (log) {
                    *log << spec.tag() << ',' << epoch << ',' << step_idx << ',' << lr << ','
                         << st.loss << ',' << st.cls_term << ',' << st.box_term << ','
                         << st.n_pos << '\n';
                }
            }
        }
        res.steps = int(step_idx);
        results.push_back(res);
        if (sink) sink(int(stage_idx), spec, g);
        if (aborted) break;
    }
    return results;
}

} // namespace tfd
