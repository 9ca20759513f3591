#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

namespace tfd {

// Canonical layout is batch-channel-height-width, row-major.
struct Shape {
    std::vector<int64_t> dims;

    Shape() = default;
    Shape(std::initializer_list<int64_t> d) : dims(d) { validate(); }
    explicit Shape(std::vector<int64_t> d) : dims(std::move(d)) { validate(); }

    int64_t rank() const { return int64_t(dims.size()); }
    int64_t operator[](int64_t i) const { return dims[size_t(i)]; }
    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }
    bool operator==(const Shape& o) const { return dims == o.dims; }
    bool operator!=(const Shape& o) const { return !(*this == o); }
    std::string str() const;

private:
    void validate() const;
};

struct Tensor {
    Shape shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(Shape s, float fill = 0.0f)
        : shape(std::move(s)), data(size_t(shape.numel()), fill) {}
    Tensor(Shape s, std::vector<float> d);

    int64_t numel() const { return int64_t(data.size()); }

    // NCHW accessor for rank-4 tensors
    float at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data[size_t(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    float& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data[size_t(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }

    Tensor reshaped(Shape s) const;
    bool all_finite() const;
};

// Integer tensor with per-tensor quantization parameters.
struct QTensor {
    Shape shape;
    std::vector<int32_t> idata;
    float step = 1.0f;
    int32_t zero_point = 0;
    int bits = 8;
    bool ternary = false;
};

// Cross-correlation, NCHW, zero padding, double-width accumulation.
Tensor conv2d(const Tensor& input, const Tensor& weight, const std::vector<float>* bias,
              int stride, int pad, int groups, const std::string& layer_name = "conv2d");

Tensor leaky_relu(const Tensor& input, float slope);

Tensor concat(const std::vector<const Tensor*>& inputs, int axis);
inline Tensor concat(const std::vector<Tensor>& inputs, int axis) {
    std::vector<const Tensor*> p;
    p.reserve(inputs.size());
    for (const auto& t : inputs) p.push_back(&t);
    return concat(p, axis);
}

// Inverse of concat: slice back into pieces with the given axis extents.
std::vector<Tensor> split(const Tensor& input, int axis, const std::vector<int64_t>& sizes);

// Pads H and W (rank-4) at the bottom/right with a constant.
Tensor pad_hw(const Tensor& input, int64_t new_h, int64_t new_w, float value = 0.0f);

// Thread cap: min(hardware_concurrency, TFD_THREADS if set). Always >= 1.
int worker_thread_count();

// Deterministic parallel loop: [0, n) split into contiguous chunks; results
// must not depend on chunk assignment (callers write disjoint outputs).
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);
// Per-index form of the same loop.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

} // namespace tfd
