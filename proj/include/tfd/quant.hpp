#pragma once

#include "tfd/tensor.hpp"

#include <cmath>
#include <span>
#include <utility>

namespace tfd {

// bits == kQuantDisabled turns a quantizer into a passthrough.
constexpr int kQuantDisabled = 32;

struct QuantSpec {
    enum class Target { kWeight, kActivation };

    int bits = 8;            // 2..8, or kQuantDisabled
    bool ternary = false;    // levels exactly {-1, 0, 1}; storage charged 2 bits
    float step = 1.0f;       // learnable under LSQ
    int32_t zero_point = 0;  // 0 under the symmetric policy
    Target target = Target::kWeight;

    bool enabled() const { return bits != kQuantDisabled; }
};

struct SamConfig {
    float rho = 0.05f; // perturbation radius; 0 degenerates to a plain step
};

// (q_min, q_max): integer grids get (-2^(b-1), 2^(b-1)-1); ternary gets (-1, 1).
std::pair<int32_t, int32_t> qrange(const QuantSpec& spec);

// clamp(round(x/s) - z, q_min, q_max), round half away from zero.
QTensor quantize(const Tensor& x, const QuantSpec& spec);

Tensor dequantize(const QTensor& q, const QuantSpec& spec);

// dequantize(quantize(x)); idempotent, passthrough when disabled.
Tensor fake_quant_forward(const Tensor& x, const QuantSpec& spec);

struct FakeQuantGrad {
    Tensor grad_x;
    float grad_step = 0.0f;
};

// Straight-through gradient for x plus the learned-step gradient:
// in-range elements pass grad_out through; the step picks up
// (round(x/s) - x/s) in range and q_min/q_max outside, summed and scaled by
// 1/sqrt(N * q_max).
FakeQuantGrad fake_quant_backward(const Tensor& x, const QuantSpec& spec, const Tensor& grad_out);

// Ternary grid: equivalent to quantize() with range (-1, 1).
QTensor ternary_quantize(const Tensor& w, float step);

// Scalar helpers shared by the integer path and the tests.
inline int32_t quantize_value(float x, float step, int32_t zero_point, int32_t qmin, int32_t qmax) {
    double r = std::round(double(x) / double(step)) - zero_point;
    if (r < qmin) r = qmin;
    if (r > qmax) r = qmax;
    return int32_t(r);
}

// Ascend along the normalized gradient: params + rho * g / (||g||_2 + 1e-12).
// Returns the applied offset norm (<= rho).
double sam_perturb(std::span<float> params, std::span<const float> grads, const SamConfig& cfg);

} // namespace tfd
