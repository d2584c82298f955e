#pragma once

#include <cstdint>
#include <vector>

#include "smoe/layer.hpp"
#include "smoe/rng.hpp"
#include "smoe/tensor.hpp"

namespace smoe {

struct MseResult {
    double loss = 0.0;
    Tensor error_signal;  // (2/N) * (prediction - target), N = element count
};

MseResult mse_loss(const Tensor& prediction, const Tensor& target);

// Per-slot routing verdicts and the classification targets built from them.
struct RcLabels {
    int num_experts = 0;
    int e_select = 0;
    int height = 0;
    int width = 0;
    std::vector<float> labels;        // [num_experts, H, W], each in [0, 1]
    std::vector<uint8_t> incorrect;   // slot-major [E, H, W], feeds damping
    float threshold = 0.0f;           // the quantile the verdicts compared against
    int64_t incorrect_count = 0;

    float label_at(int e, int i, int j) const {
        return labels[size_t((int64_t(e) * height + i) * width + j)];
    }
};

// Slot error magnitude = mean over batch and the slot's F channels of
// |error_signal| (raw signed values when use_abs is false). A slot is
// incorrect where its magnitude strictly exceeds the q-quantile of all
// E*H*W magnitudes. Labels: correct selected 1, incorrect selected 0, and
// each unselected expert at a point with k incorrect slots gets
// min(1, k/(|E|-E)).
RcLabels build_rc_labels(const Tensor& error_signal, const RoutingRecord& routing, double q,
                         bool use_abs = true);

struct RcLossResult {
    double loss = 0.0;
    Tensor dgate;  // [1, num_experts, H, W]
};

// Mean binary cross-entropy of sigmoid(gate logits) against the labels,
// probabilities clamped to [1e-7, 1-1e-7]; gradient is the logits-form
// (p - label)/count.
RcLossResult rc_loss(const Tensor& gate_logits, const RcLabels& labels);

struct AuxConfig {
    bool use_importance = false;
    bool use_load = false;
    bool use_spatial_agreement = false;
    double noise_std = 0.0;
    double aux_scale = 0.01;

    bool any_enabled() const { return use_importance || use_load || use_spatial_agreement; }
};

// Squared coefficient of variation of per-expert importance (population
// std); degenerate all-zero importance scores 0.
double importance_loss(const std::vector<double>& importance);

// Importance under tensor routing: batch_size * sum of selected scores per
// expert (unselected contribute 0).
std::vector<double> importance_from_routing(const RoutingRecord& routing, int batch_size);

struct ImportanceGrad {
    double loss = 0.0;
    std::vector<double> d_importance;
};
ImportanceGrad importance_loss_with_grad(const std::vector<double>& importance);

// Squared coefficient of variation of expected selection counts. At each
// point the threshold T is the E-th largest noisy logit from the routing
// record, and p_e = normal survival at (T - clean_logit_e)/noise_std.
double load_loss(const Tensor& clean_logits, const RoutingRecord& routing, double noise_std);

struct LoadGrad {
    double loss = 0.0;
    Tensor dgate;  // treats each point's threshold as a constant of the op
};
LoadGrad load_loss_with_grad(const Tensor& clean_logits, const RoutingRecord& routing,
                             double noise_std);

// Population std over the batch per (expert, point), averaged over points,
// summed over experts. Identically zero for input-independent routing; its
// gradient with respect to a batch-shared gate is zero by shift invariance,
// so only the value is exposed.
double spatial_agreement_loss(const Tensor& per_sample_scores);

// aux_scale * mean of the enabled loss values; 0 when none are enabled.
double combine_aux(const std::vector<double>& enabled_values, const AuxConfig& cfg);

// Adds i.i.d. Gaussian(0, noise_std^2) per entry; noise_std 0 is identity.
Tensor routing_noise(const Tensor& logits, double noise_std, Rng& rng);

}  // namespace smoe
