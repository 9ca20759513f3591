#pragma once

#include <string>

#include "tfd/model.hpp"

namespace tfd {

struct StageTag {
    int w_bits = kQuantDisabled;
    int a_bits = kQuantDisabled;
    bool ternary = false;
};

struct Checkpoint {
    NetworkGraph graph;
    ArchConfig arch;
    StageTag stage;
};

// "TFDW1" container, little-endian, embedding the architecture config (JSON)
// and its hash. pack_ternary_weights stores conv weights as 2-bit codes on
// the calibrated per-channel grid instead of raw fp32; reloading such a file
// yields the quantize-dequantize weights, which is exactly what the
// fake-quant and integer engines consume.
void save_checkpoint(const std::string& path, const NetworkGraph& g, const ArchConfig& arch,
                     const StageTag& stage, bool pack_ternary_weights = false);

// Refuses on bad magic/version, arch-hash mismatch, or any structural
// deviation from the graph the embedded config builds.
Checkpoint load_checkpoint(const std::string& path);

} // namespace tfd
