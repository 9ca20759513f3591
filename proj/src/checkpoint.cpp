#include "tfd/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "tfd/infer.hpp"

namespace tfd {

namespace {

constexpr char kMagic[5] = {'T', 'F', 'D', 'W', '1'};
constexpr uint32_t kVersion = 1;

enum WeightEnc : uint8_t { kNoWeight = 0, kF32 = 1, kPackedTernary = 2 };

struct Writer {
    std::ofstream out;

    explicit Writer(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw std::runtime_error(path + ": cannot open for writing");
    }
    void bytes(const void* p, size_t n) { out.write(static_cast<const char*>(p), std::streamsize(n)); }
    void u8(uint8_t v) { bytes(&v, 1); }
    void u32(uint32_t v) {
        uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
        bytes(b, 4);
    }
    void u64(uint64_t v) {
        u32(uint32_t(v));
        u32(uint32_t(v >> 32));
    }
    void i32(int32_t v) { u32(uint32_t(v)); }
    void i64(int64_t v) { u64(uint64_t(v)); }
    void f32(float v) {
        uint32_t u;
        std::memcpy(&u, &v, 4);
        u32(u);
    }
    void str(const std::string& s) {
        u32(uint32_t(s.size()));
        bytes(s.data(), s.size());
    }
    void f32_array(const std::vector<float>& v) {
        u32(uint32_t(v.size()));
        for (float x : v) f32(x);
    }
};

struct Reader {
    std::ifstream in;
    std::string path;

    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw std::runtime_error(p + ": cannot open");
    }
    void bytes(void* p, size_t n) {
        in.read(static_cast<char*>(p), std::streamsize(n));
        if (size_t(in.gcount()) != n) throw std::runtime_error(path + ": truncated checkpoint");
    }
    uint8_t u8() {
        uint8_t v;
        bytes(&v, 1);
        return v;
    }
    uint32_t u32() {
        uint8_t b[4];
        bytes(b, 4);
        return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
    }
    uint64_t u64() {
        uint64_t lo = u32();
        return lo | uint64_t(u32()) << 32;
    }
    int32_t i32() { return int32_t(u32()); }
    int64_t i64() { return int64_t(u64()); }
    float f32() {
        uint32_t u = u32();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        if (n > (1u << 24)) throw std::runtime_error(path + ": corrupt string length");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    std::vector<float> f32_array() {
        uint32_t n = u32();
        if (n > (1u << 28)) throw std::runtime_error(path + ": corrupt array length");
        std::vector<float> v(n);
        for (auto& x : v) x = f32();
        return v;
    }
};

void write_quant(Writer& w, const QuantSpec& q) {
    w.i32(q.bits);
    w.u8(q.ternary ? 1 : 0);
    w.f32(q.step);
    w.i32(q.zero_point);
}

void read_quant(Reader& r, QuantSpec& q) {
    q.bits = r.i32();
    q.ternary = r.u8() != 0;
    q.step = r.f32();
    q.zero_point = r.i32();
}

// Per-channel ternary codes on the step*fold_scale grid.
std::vector<int32_t> ternary_codes(const Node& n) {
    int64_t oc = n.weight.shape.dims[0];
    int64_t per = n.weight.shape.numel() / oc;
    std::vector<int32_t> codes(size_t(n.weight.shape.numel()));
    for (int64_t c = 0; c < oc; ++c) {
        float t = n.fold_scale.empty() ? 1.0f : n.fold_scale[size_t(c)];
        double step = double(n.wq.step) * t;
        for (int64_t k = 0; k < per; ++k) {
            int32_t code = 0;
            if (step != 0.0) {
                long v = std::lround(double(n.weight.data[size_t(c * per + k)]) / step);
                code = int32_t(std::clamp(v, -1L, 1L));
            }
            codes[size_t(c * per + k)] = code;
        }
    }
    return codes;
}

void expect(bool cond, const std::string& path, const std::string& what) {
    if (!cond) throw std::runtime_error(path + ": checkpoint does not match its architecture (" +
                                        what + ")");
}

} // namespace

void save_checkpoint(const std::string& path, const NetworkGraph& g, const ArchConfig& arch,
                     const StageTag& stage, bool pack_ternary_weights) {
    Writer w(path);
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kVersion);
    std::string arch_json = arch_config_to_json_string(arch);
    w.u64(arch_hash(arch));
    w.str(arch_json);
    w.u8(g.folded ? 1 : 0);
    w.i32(stage.w_bits);
    w.i32(stage.a_bits);
    w.u8(stage.ternary ? 1 : 0);

    w.u32(uint32_t(g.nodes.size()));
    for (const Node& n : g.nodes) {
        w.u8(uint8_t(n.kind));
        w.str(n.name);
        w.str(n.region);
        w.u32(uint32_t(n.inputs.size()));
        for (int in : n.inputs) w.i32(in);
        w.i32(n.stride);
        w.i32(n.pad);
        w.i32(n.groups);
        w.f32(n.slope);

        if (!n.is_conv() || n.weight.data.empty()) {
            w.u8(kNoWeight);
        } else {
            bool pack = pack_ternary_weights && n.wq.enabled() && n.wq.ternary && n.wq.step > 0;
            w.u8(pack ? kPackedTernary : kF32);
            w.u32(uint32_t(n.weight.shape.dims.size()));
            for (int64_t d : n.weight.shape.dims) w.i64(d);
            if (pack) {
                std::vector<uint8_t> packed = pack_ternary(ternary_codes(n));
                w.u32(uint32_t(packed.size()));
                w.bytes(packed.data(), packed.size());
            } else {
                for (float v : n.weight.data) w.f32(v);
            }
        }
        w.f32_array(n.bias);
        w.f32_array(n.fold_scale);

        bool has_bn = n.kind == NodeKind::kBN;
        w.u8(has_bn ? 1 : 0);
        if (has_bn) {
            w.u32(uint32_t(n.bn.channels()));
            w.f32(n.bn.eps);
            for (const auto* arr : {&n.bn.gamma, &n.bn.beta, &n.bn.mean, &n.bn.var})
                for (float v : *arr) w.f32(v);
        }
        w.u8(n.wq.enabled() ? 1 : 0);
        if (n.wq.enabled()) write_quant(w, n.wq);
        w.u8(n.aq.enabled() ? 1 : 0);
        if (n.aq.enabled()) write_quant(w, n.aq);
    }
    w.out.flush();
    if (!w.out) throw std::runtime_error(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[5];
    r.bytes(magic, 5);
    if (std::memcmp(magic, kMagic, 5) != 0)
        throw std::runtime_error(path + ": not a TFDW1 checkpoint");
    uint32_t version = r.u32();
    if (version != kVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));
    uint64_t stored_hash = r.u64();
    std::string arch_json = r.str();

    Checkpoint ck;
    ck.arch = arch_config_from_json_string(arch_json);
    if (arch_hash(ck.arch) != stored_hash)
        throw std::runtime_error(path + ": architecture hash mismatch, refusing to load");

    bool folded = r.u8() != 0;
    ck.stage.w_bits = r.i32();
    ck.stage.a_bits = r.i32();
    ck.stage.ternary = r.u8() != 0;

    // Structural template the records must match.
    NetworkGraph expected = build_network(ck.arch);
    if (folded) expected = fold_bn(expected);

    uint32_t count = r.u32();
    expect(count == expected.nodes.size(), path, "node count");

    NetworkGraph g;
    g.folded = folded;
    g.input_node = expected.input_node;
    g.cls_out = expected.cls_out;
    g.box_out = expected.box_out;
    g.nodes.resize(count);

    for (uint32_t i = 0; i < count; ++i) {
        Node& n = g.nodes[i];
        const Node& e = expected.nodes[i];
        n.kind = NodeKind(r.u8());
        n.name = r.str();
        n.region = r.str();
        uint32_t ninputs = r.u32();
        expect(ninputs < 16, path, "input arity");
        n.inputs.resize(ninputs);
        for (auto& in : n.inputs) in = r.i32();
        n.stride = r.i32();
        n.pad = r.i32();
        n.groups = r.i32();
        n.slope = r.f32();

        expect(n.kind == e.kind && n.name == e.name && n.inputs == e.inputs, path,
               "node '" + n.name + "' topology");
        expect(n.stride == e.stride && n.pad == e.pad && n.groups == e.groups, path,
               "node '" + n.name + "' geometry");

        uint8_t enc = r.u8();
        if (enc != kNoWeight) {
            uint32_t ndim = r.u32();
            expect(ndim == e.weight.shape.dims.size(), path, "weight rank of '" + n.name + "'");
            std::vector<int64_t> dims(ndim);
            for (auto& d : dims) d = r.i64();
            expect(dims == e.weight.shape.dims, path, "weight shape of '" + n.name + "'");
            n.weight = Tensor(Shape{dims});
            if (enc == kF32) {
                for (auto& v : n.weight.data) v = r.f32();
            } else if (enc == kPackedTernary) {
                uint32_t nbytes = r.u32();
                std::vector<uint8_t> packed(nbytes);
                r.bytes(packed.data(), nbytes);
                std::vector<int32_t> codes =
                    unpack_ternary(packed, size_t(n.weight.shape.numel()));
                // weights rebuilt on the stored grid below, once wq/fold_scale are read
                for (size_t k = 0; k < codes.size(); ++k) n.weight.data[k] = float(codes[k]);
            } else {
                throw std::runtime_error(path + ": unknown weight encoding");
            }
        } else {
            expect(e.weight.data.empty(), path, "missing weights for '" + n.name + "'");
        }
        n.bias = r.f32_array();
        expect(n.bias.size() == e.bias.size(), path, "bias size of '" + n.name + "'");
        n.fold_scale = r.f32_array();
        expect(n.fold_scale.size() == e.fold_scale.size(), path,
               "fold scales of '" + n.name + "'");

        if (r.u8()) {
            expect(e.kind == NodeKind::kBN, path, "unexpected BN block on '" + n.name + "'");
            uint32_t ch = r.u32();
            expect(int(ch) == e.bn.channels(), path, "BN channels of '" + n.name + "'");
            n.bn.eps = r.f32();
            for (auto* arr : {&n.bn.gamma, &n.bn.beta, &n.bn.mean, &n.bn.var}) {
                arr->resize(ch);
                for (auto& v : *arr) v = r.f32();
            }
        } else {
            expect(e.kind != NodeKind::kBN, path, "missing BN block on '" + n.name + "'");
        }
        if (r.u8()) read_quant(r, n.wq);
        n.wq.target = QuantSpec::Target::kWeight;
        if (r.u8()) read_quant(r, n.aq);
        n.aq.target = QuantSpec::Target::kActivation;

        if (enc == kPackedTernary) {
            expect(n.wq.enabled() && n.wq.ternary && n.wq.step > 0, path,
                   "packed weights without a ternary quantizer on '" + n.name + "'");
            int64_t oc = n.weight.shape.dims[0];
            int64_t per = n.weight.shape.numel() / oc;
            for (int64_t c = 0; c < oc; ++c) {
                float t = n.fold_scale.empty() ? 1.0f : n.fold_scale[size_t(c)];
                float step = n.wq.step * t;
                for (int64_t k = 0; k < per; ++k) n.weight.data[size_t(c * per + k)] *= step;
            }
        }
    }
    ck.graph = std::move(g);
    return ck;
}

} // namespace tfd
