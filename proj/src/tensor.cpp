#include "tfd/tensor.hpp"

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace tfd {

void Shape::validate() const {
    for (int64_t d : dims) {
        if (d < 1) throw std::invalid_argument("Shape: all dims must be >= 1, got " + str());
    }
}

std::string Shape::str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
    os << ")";
    return os.str();
}

Tensor::Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (int64_t(data.size()) != shape.numel())
        throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape.str());
}

Tensor Tensor::reshaped(Shape s) const {
    if (s.numel() != shape.numel())
        throw std::invalid_argument("reshape: element count mismatch " + shape.str() + " -> " + s.str());
    Tensor out;
    out.shape = std::move(s);
    out.data = data;
    return out;
}

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

int worker_thread_count() {
    static const int cached = [] {
        int n = int(std::thread::hardware_concurrency());
        if (n < 1) n = 1;
        if (const char* env = std::getenv("TFD_THREADS")) {
            int cap = std::atoi(env);
            if (cap >= 1 && cap < n) n = cap;
        }
        return n;
    }();
    return cached;
}

namespace {

// Persistent pool; jobs are (begin, end) ranges over a shared counter-free
// static partition so results never depend on scheduling.
class Pool {
public:
    static Pool& instance() {
        static Pool p;
        return p;
    }

    void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
        int workers = worker_thread_count();
        if (n <= 0) return;
        if (workers <= 1 || n == 1) {
            fn(0, n);
            return;
        }
        ensure_threads(workers - 1);
        std::unique_lock lk(m_);
        fn_ = &fn;
        total_ = n;
        chunks_ = std::min<int64_t>(workers, n);
        next_chunk_ = 1; // chunk 0 runs on the caller
        pending_ = int(chunks_ - 1);
        ++generation_;
        lk.unlock();
        cv_.notify_all();

        run_chunk(0);

        std::unique_lock lk2(m_);
        done_cv_.wait(lk2, [&] { return pending_ == 0; });
        fn_ = nullptr;
    }

private:
    Pool() = default;

    void ensure_threads(int n) {
        while (int(threads_.size()) < n)
            threads_.emplace_back([this] { worker_loop(); });
    }

    void run_chunk(int64_t c) {
        int64_t per = total_ / chunks_, rem = total_ % chunks_;
        int64_t begin = c * per + std::min(c, rem);
        int64_t end = begin + per + (c < rem ? 1 : 0);
        (*fn_)(begin, end);
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            int64_t chunk = -1;
            {
                std::unique_lock lk(m_);
                cv_.wait(lk, [&] { return generation_ != seen; });
                if (next_chunk_ < chunks_) {
                    chunk = next_chunk_++;
                } else {
                    seen = generation_;
                    continue;
                }
            }
            run_chunk(chunk);
            std::unique_lock lk(m_);
            if (--pending_ == 0) done_cv_.notify_all();
            if (next_chunk_ >= chunks_) seen = generation_;
        }
    }

    std::mutex m_;
    std::condition_variable cv_, done_cv_;
    std::vector<std::jthread> threads_;
    const std::function<void(int64_t, int64_t)>* fn_ = nullptr;
    int64_t total_ = 0, chunks_ = 0, next_chunk_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
};

} // namespace

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    Pool::instance().run(n, fn);
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    Pool::instance().run(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) fn(i);
    });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const std::vector<float>* bias,
              int stride, int pad, int groups, const std::string& layer_name) {
    if (input.shape.rank() != 4 || weight.shape.rank() != 4)
        throw std::invalid_argument(layer_name + ": conv2d expects rank-4 input and weight");
    if (stride < 1 || pad < 0 || groups < 1)
        throw std::invalid_argument(layer_name + ": invalid stride/pad/groups");

    const int64_t N = input.shape[0], Cin = input.shape[1];
    const int64_t H = input.shape[2], W = input.shape[3];
    const int64_t Cout = weight.shape[0], Cin_g = weight.shape[1];
    const int64_t kH = weight.shape[2], kW = weight.shape[3];

    if (Cin % groups != 0 || Cout % groups != 0 || Cin / groups != Cin_g)
        throw std::invalid_argument(layer_name + ": channel/group mismatch, input " +
                                    input.shape.str() + " weight " + weight.shape.str() +
                                    " groups " + std::to_string(groups));
    if (bias && int64_t(bias->size()) != Cout)
        throw std::invalid_argument(layer_name + ": bias must have " + std::to_string(Cout) +
                                    " entries");

    const int64_t Ho = (H + 2 * pad - kH) / stride + 1;
    const int64_t Wo = (W + 2 * pad - kW) / stride + 1;
    if (Ho < 1 || Wo < 1)
        throw std::invalid_argument(layer_name + ": kernel " + weight.shape.str() +
                                    " does not fit input " + input.shape.str());

    Tensor out(Shape{N, Cout, Ho, Wo});
    const int64_t co_per_g = Cout / groups;

    parallel_for(N * Cout, [&](int64_t lo, int64_t hi) {
        std::vector<double> acc(size_t(Ho * Wo));
        for (int64_t idx = lo; idx < hi; ++idx) {
            const int64_t n = idx / Cout, oc = idx % Cout;
            const int64_t g = oc / co_per_g;
            const double b = bias ? double((*bias)[size_t(oc)]) : 0.0;
            std::fill(acc.begin(), acc.end(), b);
            for (int64_t ic = 0; ic < Cin_g; ++ic) {
                const float* in_plane = input.data.data() + ((n * Cin + g * Cin_g + ic) * H) * W;
                const float* w_plane = weight.data.data() + ((oc * Cin_g + ic) * kH) * kW;
                for (int64_t ky = 0; ky < kH; ++ky) {
                    for (int64_t kx = 0; kx < kW; ++kx) {
                        const double w = w_plane[ky * kW + kx];
                        if (w == 0.0) continue;
                        for (int64_t oy = 0; oy < Ho; ++oy) {
                            const int64_t iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            const float* in_row = in_plane + iy * W;
                            double* acc_row = acc.data() + oy * Wo;
                            for (int64_t ox = 0; ox < Wo; ++ox) {
                                const int64_t ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= W) continue;
                                acc_row[ox] += w * double(in_row[ix]);
                            }
                        }
                    }
                }
            }
            float* out_plane = out.data.data() + ((n * Cout + oc) * Ho) * Wo;
            for (int64_t i = 0; i < Ho * Wo; ++i) out_plane[i] = float(acc[size_t(i)]);
        }
    });
    return out;
}

Tensor leaky_relu(const Tensor& input, float slope) {
    if (!(slope > 0.0f && slope < 1.0f))
        throw std::invalid_argument("leaky_relu: slope must be in (0,1)");
    Tensor out(input.shape);
    const float* in = input.data.data();
    float* o = out.data.data();
    for (int64_t i = 0, n = input.numel(); i < n; ++i)
        o[i] = in[i] >= 0.0f ? in[i] : slope * in[i];
    return out;
}

Tensor concat(const std::vector<const Tensor*>& inputs, int axis) {
    if (inputs.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& s0 = inputs[0]->shape;
    if (axis < 0 || axis >= s0.rank()) throw std::invalid_argument("concat: bad axis");

    int64_t axis_total = 0;
    for (const Tensor* t : inputs) {
        if (t->shape.rank() != s0.rank())
            throw std::invalid_argument("concat: rank mismatch");
        for (int64_t d = 0; d < s0.rank(); ++d) {
            if (d != axis && t->shape[d] != s0[d])
                throw std::invalid_argument("concat: non-axis dim mismatch at axis " +
                                            std::to_string(d) + ": " + t->shape.str() +
                                            " vs " + s0.str());
        }
        axis_total += t->shape[axis];
    }

    std::vector<int64_t> out_dims = s0.dims;
    out_dims[size_t(axis)] = axis_total;
    Tensor out(Shape{out_dims});

    // outer = product of dims before axis, inner = product after
    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= s0[d];
    for (int64_t d = axis + 1; d < s0.rank(); ++d) inner *= s0[d];

    int64_t offset = 0;
    for (const Tensor* t : inputs) {
        const int64_t a = t->shape[axis];
        for (int64_t o = 0; o < outer; ++o) {
            const float* src = t->data.data() + o * a * inner;
            float* dst = out.data.data() + (o * axis_total + offset) * inner;
            std::copy(src, src + a * inner, dst);
        }
        offset += a;
    }
    return out;
}

std::vector<Tensor> split(const Tensor& input, int axis, const std::vector<int64_t>& sizes) {
    const Shape& s = input.shape;
    if (axis < 0 || axis >= s.rank()) throw std::invalid_argument("split: bad axis");
    int64_t total = 0;
    for (int64_t sz : sizes) total += sz;
    if (total != s[axis]) throw std::invalid_argument("split: sizes do not sum to axis dim");

    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= s[d];
    for (int64_t d = axis + 1; d < s.rank(); ++d) inner *= s[d];

    std::vector<Tensor> out;
    int64_t offset = 0;
    for (int64_t sz : sizes) {
        std::vector<int64_t> dims = s.dims;
        dims[size_t(axis)] = sz;
        Tensor piece(Shape{dims});
        for (int64_t o = 0; o < outer; ++o) {
            const float* src = input.data.data() + (o * s[axis] + offset) * inner;
            std::copy(src, src + sz * inner, piece.data.data() + o * sz * inner);
        }
        offset += sz;
        out.push_back(std::move(piece));
    }
    return out;
}

Tensor pad_hw(const Tensor& input, int64_t new_h, int64_t new_w, float value) {
    const Shape& s = input.shape;
    if (s.rank() != 4) throw std::invalid_argument("pad_hw: expects rank-4");
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    if (new_h < H || new_w < W) throw std::invalid_argument("pad_hw: target smaller than input");
    if (new_h == H && new_w == W) return input;
    Tensor out(Shape{N, C, new_h, new_w}, value);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H; ++y) {
                const float* src = input.data.data() + ((n * C + c) * H + y) * W;
                float* dst = out.data.data() + ((n * C + c) * new_h + y) * new_w;
                std::copy(src, src + W, dst);
            }
    return out;
}

} // namespace tfd
