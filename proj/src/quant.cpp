#include "tfd/quant.hpp"

#include <cmath>
#include <stdexcept>

namespace tfd {

std::pair<int32_t, int32_t> qrange(const QuantSpec& spec) {
    if (spec.ternary) return {-1, 1};
    if (spec.bits < 2 || spec.bits > 8)
        throw std::invalid_argument("qrange: bit width must be 2..8 or ternary, got " +
                                    std::to_string(spec.bits));
    const int32_t half = int32_t(1) << (spec.bits - 1);
    return {-half, half - 1};
}

QTensor quantize(const Tensor& x, const QuantSpec& spec) {
    if (!(spec.step > 0.0f)) throw std::invalid_argument("quantize: step must be positive");
    auto [qmin, qmax] = qrange(spec);
    QTensor out;
    out.shape = x.shape;
    out.step = spec.step;
    out.zero_point = spec.zero_point;
    out.bits = spec.ternary ? 2 : spec.bits;
    out.ternary = spec.ternary;
    out.idata.resize(size_t(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i)
        out.idata[size_t(i)] = quantize_value(x.data[size_t(i)], spec.step, spec.zero_point, qmin, qmax);
    return out;
}

Tensor dequantize(const QTensor& q, const QuantSpec& spec) {
    auto [qmin, qmax] = qrange(spec);
    Tensor out(q.shape);
    for (size_t i = 0; i < q.idata.size(); ++i) {
        const int32_t v = q.idata[i];
        if (v < qmin || v > qmax)
            throw std::out_of_range("dequantize: element " + std::to_string(v) +
                                    " outside [" + std::to_string(qmin) + ", " +
                                    std::to_string(qmax) + "]");
        out.data[i] = float(double(v + spec.zero_point) * double(spec.step));
    }
    return out;
}

Tensor fake_quant_forward(const Tensor& x, const QuantSpec& spec) {
    if (!spec.enabled()) return x;
    if (!(spec.step > 0.0f)) throw std::invalid_argument("fake_quant: step must be positive");
    auto [qmin, qmax] = qrange(spec);
    Tensor out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        const int32_t q = quantize_value(x.data[size_t(i)], spec.step, spec.zero_point, qmin, qmax);
        out.data[size_t(i)] = float(double(q + spec.zero_point) * double(spec.step));
    }
    return out;
}

FakeQuantGrad fake_quant_backward(const Tensor& x, const QuantSpec& spec, const Tensor& grad_out) {
    if (x.shape != grad_out.shape)
        throw std::invalid_argument("fake_quant_backward: shape mismatch");
    FakeQuantGrad g;
    if (!spec.enabled()) {
        g.grad_x = grad_out;
        g.grad_step = 0.0f;
        return g;
    }
    auto [qmin, qmax] = qrange(spec);
    g.grad_x = Tensor(x.shape);
    double step_sum = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double t = double(x.data[size_t(i)]) / double(spec.step) - spec.zero_point;
        double ds;
        if (t < qmin) {
            ds = qmin;
        } else if (t > qmax) {
            ds = qmax;
        } else {
            g.grad_x.data[size_t(i)] = grad_out.data[size_t(i)];
            ds = std::round(t) - t;
        }
        step_sum += ds * double(grad_out.data[size_t(i)]);
    }
    const double norm = 1.0 / std::sqrt(double(x.numel()) * double(qmax));
    g.grad_step = float(step_sum * norm);
    return g;
}

QTensor ternary_quantize(const Tensor& w, float step) {
    QuantSpec spec;
    spec.ternary = true;
    spec.bits = 2;
    spec.step = step;
    spec.zero_point = 0;
    return quantize(w, spec);
}

double sam_perturb(std::span<float> params, std::span<const float> grads, const SamConfig& cfg) {
    if (params.size() != grads.size())
        throw std::invalid_argument("sam_perturb: size mismatch");
    double sq = 0.0;
    for (float g : grads) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    const double scale = double(cfg.rho) / (norm + 1e-12);
    for (size_t i = 0; i < params.size(); ++i)
        params[i] = float(double(params[i]) + scale * double(grads[i]));
    return scale * norm;
}

} // namespace tfd
