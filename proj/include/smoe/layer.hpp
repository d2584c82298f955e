#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "smoe/heatgen.hpp"
#include "smoe/rng.hpp"
#include "smoe/tensor.hpp"

namespace smoe {

// Selection produced by one routing pass. Tensor routing is input-independent,
// so one record covers every sample in the batch.
struct RoutingRecord {
    int num_experts = 0;
    int e_select = 0;
    int height = 0;
    int width = 0;
    // Slot-major [E, H, W]; slots at each point are ordered by descending
    // score, ties broken toward the lower expert index.
    std::vector<int32_t> selected;
    std::vector<float> scores;
    // Copy of the logits the selection was made from (noisy when routing
    // noise was applied); the load loss reads its threshold from here.
    std::vector<float> raw_logits;

    int64_t slot_index(int s, int i, int j) const {
        return (int64_t(s) * height + i) * width + j;
    }
    int32_t index_at(int s, int i, int j) const { return selected[size_t(slot_index(s, i, j))]; }
    float score_at(int s, int i, int j) const { return scores[size_t(slot_index(s, i, j))]; }
    float logit_at(int e, int i, int j) const {
        return raw_logits[size_t((int64_t(e) * height + i) * width + j)];
    }
    bool is_selected(int e, int i, int j) const {
        for (int s = 0; s < e_select; ++s)
            if (index_at(s, i, j) == e) return true;
        return false;
    }
};

enum class GateInit { uniform, from_map, fixed_random };

// Mixture layer: a bank of 3x3 convolution experts and a routing tensor D of
// shape [num_experts, H, W] that picks e_select experts per spatial point.
struct SmoeLayer {
    int num_experts = 0;   // |E| in the mixture sense
    int e_select = 0;      // experts applied per point
    int f_out = 0;         // output channels per expert
    int in_channels = 0;
    int height = 0;
    int width = 0;
    bool weighted = false;      // scale expert outputs by routing scores
    bool gate_frozen = false;
    bool experts_frozen = false;

    // Bank row e*f_out + f holds expert e's kernel for output channel f.
    Tensor kernels;
    std::vector<float> biases;
    // Shared pointer so bind_shared_gate can alias D across layers.
    std::shared_ptr<Tensor> gate;  // [1, num_experts, H, W]

    Tensor& gate_ref() { return *gate; }
    const Tensor& gate_ref() const { return *gate; }
    int bank_rows() const { return num_experts * f_out; }
};

SmoeLayer make_smoe_layer(int num_experts, int e_select, int f_out, int in_channels, int height,
                          int width, bool weighted, Rng& rng);

// Fills layer.gate. uniform: i.i.d. over +-3*|E|/(E*F), the fan-in bound for
// this layer family. from_map: +bound for the expert group assigned to the
// cell's region type, -bound elsewhere (a trainable prior). fixed_random:
// uniform draw, then the gate is flagged frozen.
void init_gate(SmoeLayer& layer, GateInit mode, Rng& rng, const RegionMap* map = nullptr);

float gate_init_bound(int num_experts, int e_select, int f_out);

// Contiguous block partition of experts over region types; expert_group(e)
// is the type whose block contains e.
int expert_group(int expert, int num_experts, int num_types);

// Per point: the E largest logits win; ties go to the lower expert index;
// slots come out in descending score order.
RoutingRecord top_e_select(const Tensor& logits, int e_select);

struct SmoeForward {
    Tensor y;  // [N, E*F, H, W], slot-major concatenation in sorted-score order
    RoutingRecord routing;
};

// Sparse dispatch: convolves only the selected expert at each point.
// logits_override substitutes for the gate tensor (noisy routing); the clean
// gate stays the trainable parameter.
SmoeForward smoe_forward(const Tensor& x, const SmoeLayer& layer,
                         const Tensor* logits_override = nullptr);

// Reference path: run every expert everywhere, then gather the selected
// rows. Must match smoe_forward bit for bit.
SmoeForward smoe_forward_apply_all(const Tensor& x, const SmoeLayer& layer,
                                   const Tensor* logits_override = nullptr);

struct DampingSpec {
    float factor = 1.0f;
    // Slot-major [E, H, W]; true marks a misrouted slot. Null disables damping.
    const std::vector<uint8_t>* incorrect_mask = nullptr;
};

struct SmoeGrads {
    Tensor dx;
    Tensor dkernels;
    std::vector<float> dbias;
    // End-to-end gate gradient; zero for the unweighted variant, which gives
    // the gate no signal at all.
    Tensor dgate;  // [1, num_experts, H, W]
};

// Adjoint of smoe_forward over the selected paths only. Where the mask is
// set, dy is scaled by damping.factor first, and that one damped signal
// feeds dkernels, dbias, dx, and dgate alike.
SmoeGrads smoe_backward(const Tensor& dy, const Tensor& x, const SmoeLayer& layer,
                        const RoutingRecord& routing, const DampingSpec& damping = {});

// Aliases one D across layers with matching [num_experts, H, W]; updates
// through any bound layer are visible to all. Gradients accumulate because
// callers key parameter buffers by the shared tensor.
std::shared_ptr<Tensor> bind_shared_gate(std::vector<SmoeLayer*>& layers);

// Fraction of cells whose top-slot expert matches the cell's region type
// under the best injective assignment of types to experts (exact bitmask-DP
// matching; expert count limited to 16 region types anyway).
double routing_map_agreement(const RoutingRecord& routing, const RegionMap& map);

// H rows by W comma-separated columns of winning expert indices; for E > 1
// the E-tuple at a point is joined by '|'.
void export_routing_csv(const RoutingRecord& routing, const std::string& path);
// 8-bit binary PGM of the top-slot expert index scaled onto 0..255.
void export_routing_pgm(const RoutingRecord& routing, const std::string& path);
// One CSV per expert (expert_<e>.csv): 3 rows by 3 columns per (output
// channel, input channel) block, blocks separated by a blank line.
void export_expert_kernels(const SmoeLayer& layer, const std::string& dir);

}  // namespace smoe
