#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "smoe/baselines.hpp"
#include "smoe/heatgen.hpp"
#include "smoe/layer.hpp"
#include "smoe/losses.hpp"

namespace smoe {

enum class ModelKind { smoe, conv, lcn };
enum class GateInitMode { uniform, perfect, fixed_random };
enum class ExpertInitMode { random, perfect };

struct TrainConfig {
    int batch_size = 32;
    double lr = 1e-3;
    int plateau_patience = 15;
    double lr_decay = 10.0;
    int max_lr_decays = 3;
    int early_stop_patience = 30;
    int max_epochs = 50;
    double q = 0.7;
    double damping_factor = 0.1;
    bool rc_enabled = true;
    bool damping_enabled = true;
    AuxConfig aux;
    // Unset picks the variant by training signal: unweighted under the
    // classification loss, weighted otherwise so the gate still receives an
    // end-to-end gradient through the scores.
    std::optional<bool> weighted;
    bool freeze_gate = false;
    bool freeze_experts = false;
    GateInitMode gate_init = GateInitMode::uniform;
    ExpertInitMode expert_init = ExpertInitMode::random;
    uint64_t seed = 1;

    ModelKind model = ModelKind::smoe;
    int num_experts = 3;
    int e_select = 1;
    int f_out = 1;
    int conv_width = 8;
    int conv_layers = 2;

    bool effective_weighted() const { return weighted.value_or(!rc_enabled); }
    // Throws invalid-argument naming every violated field.
    void validate() const;
};

struct Model {
    ModelKind kind = ModelKind::smoe;
    SmoeLayer smoe;
    ConvNet conv;
    LcnLayer lcn;
};

Model make_model(const TrainConfig& cfg, const RegionMap& map, Rng& rng);

// Deep copy; the mixture gate gets its own storage so snapshots do not alias
// the live parameters.
Model clone_model(const Model& model);

// Expert kernels set to the true region stencils (expert k <- type k), gate
// initialized from the map prior. Requires num_experts >= num_types, F = 1,
// single input channel. Idempotent.
void perfect_init(Model& model, const RegionMap& map);

// Inference-only forward (no caches, routing discarded).
Tensor model_forward(const Model& model, const Tensor& x);

// One trainable parameter group; Adam skips frozen groups entirely.
struct ParamGroup {
    float* data = nullptr;
    int64_t size = 0;
    bool frozen = false;
};

struct AdamState {
    std::vector<std::vector<float>> m, v;
    int64_t t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

void adam_step(std::vector<ParamGroup>& params, const std::vector<std::vector<float>>& grads,
               AdamState& state, double lr);

// A location counts as correct when |truth| >= 1e-12 and the relative error
// is <= 1%, or |truth| < 1e-12 and the absolute error is <= 1e-6.
double pct_within_1pct(const Tensor& prediction, const Tensor& truth);

struct MetricReport {
    double pct_within_1 = 0.0;
    double mse = 0.0;
    std::vector<int64_t> utilization;   // selected-point count per expert (mixture only)
    int64_t routing_changes = -1;       // vs. previous epoch; -1 when not tracked
};

MetricReport evaluate(const Model& model, const HeatDataset& ds, int64_t begin_pair,
                      int64_t end_pair, int batch_size = 32);

struct StepStats {
    double mse = 0.0;
    double rc_loss = 0.0;
    double aux_loss = 0.0;
};

// One optimization step: forward, task loss, routing classification and
// damping when enabled, auxiliary gate losses, one Adam update.
StepStats train_step(Model& model, const Tensor& x, const Tensor& y, const TrainConfig& cfg,
                     AdamState& adam, double lr, Rng& noise_rng);

struct HistoryRow {
    int epoch = 0;
    double train_mse = 0.0;
    double val_pct = 0.0;
    double lr = 0.0;
    double rc_loss = 0.0;
    double aux_loss = 0.0;
    double util_entropy = 0.0;
    int64_t routing_changes = -1;
};

struct FitResult {
    Model model;  // best-validation snapshot
    std::vector<HistoryRow> history;
    double best_val_pct = 0.0;
    int best_epoch = 0;
    int lr_decays = 0;
    bool early_stopped = false;
};

// Epoch loop with plateau LR decay and early stopping on the validation
// metric (absolute improvement tolerance 1e-6); returns the best-validation
// snapshot.
FitResult fit(const HeatDataset& ds, const TrainConfig& cfg);

// CSV: epoch,train_mse,val_pct,lr,rc_loss,aux_loss,util_entropy,routing_changes
// preceded by '#' comment lines.
void write_history_csv(const std::vector<HistoryRow>& history,
                       const std::vector<std::string>& comment_lines, const std::string& path);

// Checkpoint container: magic "SMCK", u32 version, named real32/metadata
// sections, trailing checksum (same conventions as the dataset format).
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace smoe
