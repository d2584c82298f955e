#include "smoe/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "smoe/container_io.hpp"

namespace smoe {

namespace {

constexpr char kMagic[4] = {'S', 'M', 'C', 'K'};
constexpr uint32_t kVersion = 1;
constexpr double kImproveTol = 1e-6;

void append_error(std::string& msg, const char* field, const char* what) {
    if (!msg.empty()) msg += "; ";
    msg += field;
    msg += " ";
    msg += what;
}

}  // namespace

void TrainConfig::validate() const {
    std::string msg;
    if (batch_size < 1) append_error(msg, "batch_size", "must be positive");
    if (!(lr > 0.0)) append_error(msg, "lr", "must be positive");
    if (plateau_patience < 1) append_error(msg, "plateau_patience", "must be positive");
    if (!(lr_decay > 1.0)) append_error(msg, "lr_decay", "must exceed 1");
    if (max_lr_decays < 0) append_error(msg, "max_lr_decays", "must be non-negative");
    if (early_stop_patience < 1) append_error(msg, "early_stop_patience", "must be positive");
    if (max_epochs < 1) append_error(msg, "max_epochs", "must be positive");
    if (!(q > 0.0 && q < 1.0)) append_error(msg, "q", "must be in (0, 1)");
    if (!(damping_factor >= 0.0 && damping_factor <= 1.0))
        append_error(msg, "damping_factor", "must be in [0, 1]");
    if (aux.noise_std < 0.0) append_error(msg, "noise_std", "must be non-negative");
    if (aux.any_enabled() && !(aux.aux_scale > 0.0))
        append_error(msg, "aux_scale", "must be positive when any auxiliary loss is enabled");
    if (aux.use_load && !(aux.noise_std > 0.0))
        append_error(msg, "use_load", "requires noise_std > 0");
    if (num_experts < 1) append_error(msg, "num_experts", "must be positive");
    if (e_select < 1 || e_select > num_experts)
        append_error(msg, "e_select", "must be in [1, num_experts]");
    if (f_out < 1) append_error(msg, "f_out", "must be positive");
    if (conv_layers < 1 || conv_layers > 3) append_error(msg, "conv_layers", "must be in [1, 3]");
    if (conv_width < 1 || conv_width > 12) append_error(msg, "conv_width", "must be in [1, 12]");
    if (!msg.empty()) throw std::invalid_argument("invalid config: " + msg);
}

Model make_model(const TrainConfig& cfg, const RegionMap& map, Rng& rng) {
    Model m;
    m.kind = cfg.model;
    switch (cfg.model) {
        case ModelKind::smoe: {
            m.smoe = make_smoe_layer(cfg.num_experts, cfg.e_select, cfg.f_out, 1, map.height,
                                     map.width, cfg.effective_weighted(), rng);
            switch (cfg.gate_init) {
                case GateInitMode::uniform:
                    break;  // make_smoe_layer already drew it
                case GateInitMode::perfect:
                    init_gate(m.smoe, GateInit::from_map, rng, &map);
                    break;
                case GateInitMode::fixed_random:
                    init_gate(m.smoe, GateInit::fixed_random, rng);
                    break;
            }
            if (cfg.expert_init == ExpertInitMode::perfect) {
                perfect_init(m, map);
                // perfect_init resets the gate to the map prior; reapply the
                // requested gate mode on top.
                if (cfg.gate_init == GateInitMode::uniform) init_gate(m.smoe, GateInit::uniform, rng);
                if (cfg.gate_init == GateInitMode::fixed_random)
                    init_gate(m.smoe, GateInit::fixed_random, rng);
            }
            m.smoe.gate_frozen = m.smoe.gate_frozen || cfg.freeze_gate;
            m.smoe.experts_frozen = cfg.freeze_experts;
            break;
        }
        case ModelKind::conv:
            m.conv = make_convnet(1, cfg.conv_width, cfg.conv_layers, rng);
            break;
        case ModelKind::lcn:
            m.lcn = make_lcn_layer(1, map.height, map.width, rng);
            break;
    }
    return m;
}

Model clone_model(const Model& model) {
    Model copy = model;
    if (model.kind == ModelKind::smoe && model.smoe.gate)
        copy.smoe.gate = std::make_shared<Tensor>(*model.smoe.gate);
    return copy;
}

void perfect_init(Model& model, const RegionMap& map) {
    if (model.kind == ModelKind::lcn) {
        lcn_perfect_init(model.lcn, map);
        return;
    }
    if (model.kind != ModelKind::smoe)
        throw std::invalid_argument("perfect init exists only for the mixture and lcn models");
    SmoeLayer& layer = model.smoe;
    if (layer.num_experts < map.num_types())
        throw std::invalid_argument("perfect init needs at least one expert per region type");
    if (layer.f_out != 1 || layer.in_channels != 1 || layer.kernels.height() != 3)
        throw std::invalid_argument("perfect init needs single-channel 3x3 experts");
    for (int t = 0; t < map.num_types(); ++t) {
        float a = map.diffusivities[size_t(t)];
        for (int p = 0; p < 3; ++p)
            for (int q = 0; q < 3; ++q) layer.kernels.at(t, 0, p, q) = 0.0f;
        layer.kernels.at(t, 0, 0, 1) = a;
        layer.kernels.at(t, 0, 1, 0) = a;
        layer.kernels.at(t, 0, 1, 1) = 1.0f - 4.0f * a;
        layer.kernels.at(t, 0, 1, 2) = a;
        layer.kernels.at(t, 0, 2, 1) = a;
    }
    std::fill(layer.biases.begin(), layer.biases.end(), 0.0f);
    Rng unused(0);  // from_map draws nothing
    init_gate(layer, GateInit::from_map, unused, &map);
}

Tensor model_forward(const Model& model, const Tensor& x) {
    switch (model.kind) {
        case ModelKind::smoe:
            return smoe_forward(x, model.smoe).y;
        case ModelKind::conv:
            return convnet_forward(model.conv, x);
        case ModelKind::lcn:
            return lcn_forward(model.lcn, x);
    }
    throw std::logic_error("unreachable model kind");
}

void adam_step(std::vector<ParamGroup>& params, const std::vector<std::vector<float>>& grads,
               AdamState& state, double lr) {
    if (params.size() != grads.size()) throw std::invalid_argument("adam_step: group count mismatch");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t g = 0; g < params.size(); ++g) {
            state.m[g].assign(size_t(params[g].size), 0.0f);
            state.v[g].assign(size_t(params[g].size), 0.0f);
        }
    }
    if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state group count mismatch");
    state.t += 1;
    double bc1 = 1.0 - std::pow(state.beta1, double(state.t));
    double bc2 = 1.0 - std::pow(state.beta2, double(state.t));
    for (size_t g = 0; g < params.size(); ++g) {
        ParamGroup& p = params[g];
        if (int64_t(grads[g].size()) != p.size || int64_t(state.m[g].size()) != p.size)
            throw std::invalid_argument("adam_step: gradient shape mismatch");
        if (p.frozen) continue;
        float* m = state.m[g].data();
        float* v = state.v[g].data();
        for (int64_t i = 0; i < p.size; ++i) {
            double gi = grads[g][size_t(i)];
            m[i] = float(state.beta1 * m[i] + (1.0 - state.beta1) * gi);
            v[i] = float(state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi);
            double mhat = double(m[i]) / bc1;
            double vhat = double(v[i]) / bc2;
            p.data[i] = float(double(p.data[i]) - lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

double pct_within_1pct(const Tensor& prediction, const Tensor& truth) {
    if (!prediction.same_shape(truth)) throw std::invalid_argument("pct_within_1pct: shape mismatch");
    int64_t n = prediction.size();
    if (n == 0) return 0.0;
    int64_t correct = 0;
    for (int64_t i = 0; i < n; ++i) {
        double t = truth[size_t(i)];
        double err = std::abs(double(prediction[size_t(i)]) - t);
        if (std::abs(t) >= 1e-12 ? err / std::abs(t) <= 0.01 : err <= 1e-6) ++correct;
    }
    return 100.0 * double(correct) / double(n);
}

namespace {

void fill_batch(const HeatDataset& ds, const std::vector<int64_t>& order, size_t pos, int count,
                Tensor& x, Tensor& y) {
    int64_t cells = ds.cell_count();
    x = Tensor(count, 1, ds.map.height, ds.map.width);
    y = Tensor(count, 1, ds.map.height, ds.map.width);
    for (int b = 0; b < count; ++b) {
        int64_t p = order[pos + size_t(b)];
        std::memcpy(x.data() + int64_t(b) * cells, ds.input_at(p), sizeof(float) * size_t(cells));
        std::memcpy(y.data() + int64_t(b) * cells, ds.target_at(p), sizeof(float) * size_t(cells));
    }
}

std::vector<int64_t> utilization_counts(const RoutingRecord& routing) {
    std::vector<int64_t> counts(size_t(routing.num_experts), 0);
    for (int32_t e : routing.selected) ++counts[size_t(e)];
    return counts;
}

double utilization_entropy(const std::vector<int64_t>& counts) {
    int64_t total = 0;
    for (int64_t c : counts) total += c;
    if (total == 0) return 0.0;
    double h = 0.0;
    for (int64_t c : counts) {
        if (c == 0) continue;
        double p = double(c) / double(total);
        h -= p * std::log(p);
    }
    return h;
}

// Points whose selected expert set differs (order within the point ignored).
int64_t count_routing_changes(const RoutingRecord& a, const RoutingRecord& b) {
    int64_t changes = 0;
    std::vector<int32_t> sa(size_t(a.e_select)), sb(size_t(b.e_select));
    for (int i = 0; i < a.height; ++i)
        for (int j = 0; j < a.width; ++j) {
            for (int s = 0; s < a.e_select; ++s) {
                sa[size_t(s)] = a.index_at(s, i, j);
                sb[size_t(s)] = b.index_at(s, i, j);
            }
            std::sort(sa.begin(), sa.end());
            std::sort(sb.begin(), sb.end());
            if (sa != sb) ++changes;
        }
    return changes;
}

struct GroupedGrads {
    std::vector<ParamGroup> params;
    std::vector<std::vector<float>> grads;

    void add(float* data, int64_t size, bool frozen, const float* grad) {
        params.push_back({data, size, frozen});
        grads.emplace_back(grad, grad + size);
    }
};

StepStats smoe_train_step(SmoeLayer& layer, const Tensor& x, const Tensor& y,
                          const TrainConfig& cfg, AdamState& adam, double lr, Rng& noise_rng) {
    StepStats stats;
    Tensor noisy;
    const Tensor* logits_override = nullptr;
    if (cfg.aux.noise_std > 0.0) {
        noisy = routing_noise(*layer.gate, cfg.aux.noise_std, noise_rng);
        logits_override = &noisy;
    }
    SmoeForward fwd = smoe_forward(x, layer, logits_override);
    MseResult mse = mse_loss(fwd.y, y);
    stats.mse = mse.loss;

    RcLabels labels;
    bool need_labels = cfg.rc_enabled || cfg.damping_enabled;
    if (need_labels) labels = build_rc_labels(mse.error_signal, fwd.routing, cfg.q);

    DampingSpec damping;
    if (cfg.damping_enabled) {
        damping.factor = float(cfg.damping_factor);
        damping.incorrect_mask = &labels.incorrect;
    }
    SmoeGrads grads = smoe_backward(mse.error_signal, x, layer, fwd.routing, damping);

    Tensor dgate(1, layer.num_experts, layer.height, layer.width);
    if (cfg.rc_enabled) {
        RcLossResult rc = rc_loss(*layer.gate, labels);
        stats.rc_loss = rc.loss;
        // The classification signal reaches the gate through the routed
        // output, so only selected slots update; a correct cell's logit can
        // then grow without later erosion from unselected-slot pressure.
        for (int e = 0; e < layer.num_experts; ++e)
            for (int i = 0; i < layer.height; ++i)
                for (int j = 0; j < layer.width; ++j)
                    if (!fwd.routing.is_selected(e, i, j)) rc.dgate.at(0, e, i, j) = 0.0f;
        dgate = add(dgate, rc.dgate);
    } else if (layer.weighted) {
        // Without the classification loss the only gate signal is the
        // end-to-end gradient through the scores.
        dgate = add(dgate, grads.dgate);
    }

    if (cfg.aux.any_enabled()) {
        std::vector<double> values;
        Tensor aux_grad(1, layer.num_experts, layer.height, layer.width);
        if (cfg.aux.use_importance) {
            ImportanceGrad ig =
                importance_loss_with_grad(importance_from_routing(fwd.routing, x.batch()));
            values.push_back(ig.loss);
            for (int s = 0; s < fwd.routing.e_select; ++s)
                for (int i = 0; i < layer.height; ++i)
                    for (int j = 0; j < layer.width; ++j) {
                        int e = fwd.routing.index_at(s, i, j);
                        aux_grad.at(0, e, i, j) += float(ig.d_importance[size_t(e)] * double(x.batch()));
                    }
        }
        if (cfg.aux.use_load) {
            LoadGrad lg = load_loss_with_grad(*layer.gate, fwd.routing, cfg.aux.noise_std);
            values.push_back(lg.loss);
            aux_grad = add(aux_grad, lg.dgate);
        }
        if (cfg.aux.use_spatial_agreement) {
            // Input-independent routing repeats one score row across the
            // batch, so the value is 0 and the gate gradient is exactly 0 by
            // shift invariance; computed anyway to keep the metric honest.
            if (x.batch() >= 2) {
                Tensor per_sample(x.batch(), layer.num_experts, layer.height, layer.width);
                for (int n = 0; n < x.batch(); ++n)
                    for (int s = 0; s < fwd.routing.e_select; ++s)
                        for (int i = 0; i < layer.height; ++i)
                            for (int j = 0; j < layer.width; ++j)
                                per_sample.at(n, fwd.routing.index_at(s, i, j), i, j) =
                                    fwd.routing.score_at(s, i, j);
                values.push_back(spatial_agreement_loss(per_sample));
            } else {
                values.push_back(0.0);
            }
        }
        stats.aux_loss = combine_aux(values, cfg.aux);
        float scale = float(cfg.aux.aux_scale / double(values.size()));
        dgate = add(dgate, mul_scalar(aux_grad, scale));
    }

    GroupedGrads g;
    g.add(layer.kernels.data(), layer.kernels.size(), layer.experts_frozen, grads.dkernels.data());
    // Mixture experts are pure 3x3 stencils: the bias stays at its zero init so
    // quiet regions keep exactly-zero predictions and error signals.
    g.add(layer.biases.data(), int64_t(layer.biases.size()), true, grads.dbias.data());
    g.add(layer.gate->data(), layer.gate->size(), layer.gate_frozen, dgate.data());
    adam_step(g.params, g.grads, adam, lr);
    return stats;
}

StepStats conv_train_step(ConvNet& net, const Tensor& x, const Tensor& y, AdamState& adam,
                          double lr) {
    ConvNetCache cache;
    Tensor pred = convnet_forward(net, x, &cache);
    MseResult mse = mse_loss(pred, y);
    ConvNetGrads grads = convnet_backward(net, mse.error_signal, cache);
    GroupedGrads g;
    for (int l = 0; l < net.num_layers(); ++l) {
        g.add(net.kernels[size_t(l)].data(), net.kernels[size_t(l)].size(), false,
              grads.dkernels[size_t(l)].data());
        g.add(net.biases[size_t(l)].data(), int64_t(net.biases[size_t(l)].size()), false,
              grads.dbiases[size_t(l)].data());
    }
    adam_step(g.params, g.grads, adam, lr);
    return {mse.loss, 0.0, 0.0};
}

StepStats lcn_train_step(LcnLayer& layer, const Tensor& x, const Tensor& y, AdamState& adam,
                         double lr) {
    Tensor pred = lcn_forward(layer, x);
    MseResult mse = mse_loss(pred, y);
    LcnGrads grads = lcn_backward(layer, mse.error_signal, x);
    GroupedGrads g;
    g.add(layer.kernels.data(), int64_t(layer.kernels.size()), false, grads.dkernels.data());
    g.add(layer.bias.data(), int64_t(layer.bias.size()), false, grads.dbias.data());
    adam_step(g.params, g.grads, adam, lr);
    return {mse.loss, 0.0, 0.0};
}

}  // namespace

StepStats train_step(Model& model, const Tensor& x, const Tensor& y, const TrainConfig& cfg,
                     AdamState& adam, double lr, Rng& noise_rng) {
    switch (model.kind) {
        case ModelKind::smoe:
            return smoe_train_step(model.smoe, x, y, cfg, adam, lr, noise_rng);
        case ModelKind::conv:
            return conv_train_step(model.conv, x, y, adam, lr);
        case ModelKind::lcn:
            return lcn_train_step(model.lcn, x, y, adam, lr);
    }
    throw std::logic_error("unreachable model kind");
}

MetricReport evaluate(const Model& model, const HeatDataset& ds, int64_t begin_pair,
                      int64_t end_pair, int batch_size) {
    if (begin_pair < 0 || end_pair > ds.n_pairs || begin_pair >= end_pair)
        throw std::invalid_argument("evaluate: empty pair range");
    MetricReport report;
    int64_t correct = 0, total = 0;
    double sq_sum = 0.0;
    std::vector<int64_t> order;
    for (int64_t p = begin_pair; p < end_pair; ++p) order.push_back(p);
    for (size_t pos = 0; pos < order.size(); pos += size_t(batch_size)) {
        int count = int(std::min<size_t>(size_t(batch_size), order.size() - pos));
        Tensor x, y;
        fill_batch(ds, order, pos, count, x, y);
        Tensor pred = model_forward(model, x);
        if (!pred.same_shape(y))
            throw std::invalid_argument("evaluate: model output shape does not match targets");
        for (int64_t i = 0; i < pred.size(); ++i) {
            double t = y[size_t(i)];
            double err = std::abs(double(pred[size_t(i)]) - t);
            if (std::abs(t) >= 1e-12 ? err / std::abs(t) <= 0.01 : err <= 1e-6) ++correct;
            sq_sum += err * err;
        }
        total += pred.size();
    }
    report.pct_within_1 = 100.0 * double(correct) / double(total);
    report.mse = sq_sum / double(total);
    if (model.kind == ModelKind::smoe) {
        RoutingRecord routing = top_e_select(*model.smoe.gate, model.smoe.e_select);
        report.utilization = utilization_counts(routing);
    }
    return report;
}

FitResult fit(const HeatDataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    if (ds.train_end <= 0 || ds.val_end <= ds.train_end)
        throw std::invalid_argument("fit: dataset needs non-empty train and validation splits");
    if (cfg.model == ModelKind::smoe && cfg.e_select * cfg.f_out != 1)
        throw std::invalid_argument("fit: this task has 1 target channel, so e_select * f_out must be 1");

    Rng root(cfg.seed);
    Rng init_rng = root.fork(0);
    Rng shuffle_rng = root.fork(1);
    Rng noise_rng = root.fork(2);

    FitResult result;
    Model model = make_model(cfg, ds.map, init_rng);
    AdamState adam;
    double lr = cfg.lr;
    int decays = 0;
    double best = -1.0;
    int no_improve = 0, plateau = 0;

    RoutingRecord prev_routing;
    if (model.kind == ModelKind::smoe)
        prev_routing = top_e_select(*model.smoe.gate, model.smoe.e_select);

    std::vector<int64_t> order(size_t(ds.train_end));
    for (int64_t i = 0; i < ds.train_end; ++i) order[size_t(i)] = i;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        // Fisher-Yates on the training pair order.
        for (int64_t i = ds.train_end - 1; i > 0; --i)
            std::swap(order[size_t(i)], order[size_t(shuffle_rng.uniform_int(i + 1))]);

        double mse_sum = 0.0, rc_sum = 0.0, aux_sum = 0.0;
        int64_t seen = 0;
        for (size_t pos = 0; pos < order.size(); pos += size_t(cfg.batch_size)) {
            int count = int(std::min<size_t>(size_t(cfg.batch_size), order.size() - pos));
            Tensor x, y;
            fill_batch(ds, order, pos, count, x, y);
            StepStats s = train_step(model, x, y, cfg, adam, lr, noise_rng);
            mse_sum += s.mse * count;
            rc_sum += s.rc_loss * count;
            aux_sum += s.aux_loss * count;
            seen += count;
        }

        MetricReport val = evaluate(model, ds, ds.train_end, ds.val_end, cfg.batch_size);

        HistoryRow row;
        row.epoch = epoch;
        row.train_mse = mse_sum / double(seen);
        row.val_pct = val.pct_within_1;
        row.lr = lr;
        row.rc_loss = rc_sum / double(seen);
        row.aux_loss = aux_sum / double(seen);
        if (model.kind == ModelKind::smoe) {
            RoutingRecord now = top_e_select(*model.smoe.gate, model.smoe.e_select);
            row.util_entropy = utilization_entropy(utilization_counts(now));
            row.routing_changes = count_routing_changes(prev_routing, now);
            prev_routing = std::move(now);
        }
        result.history.push_back(row);

        if (val.pct_within_1 > best + kImproveTol) {
            best = val.pct_within_1;
            result.model = clone_model(model);
            result.best_epoch = epoch;
            no_improve = 0;
            plateau = 0;
        } else {
            ++no_improve;
            ++plateau;
            if (no_improve >= cfg.early_stop_patience) {
                result.early_stopped = true;
                break;
            }
            if (plateau >= cfg.plateau_patience && decays < cfg.max_lr_decays) {
                lr /= cfg.lr_decay;
                ++decays;
                plateau = 0;
            }
        }
    }
    result.best_val_pct = best;
    result.lr_decays = decays;
    return result;
}

void write_history_csv(const std::vector<HistoryRow>& history,
                       const std::vector<std::string>& comment_lines, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const std::string& line : comment_lines) out << "# " << line << '\n';
    out << "epoch,train_mse,val_pct,lr,rc_loss,aux_loss,util_entropy,routing_changes\n";
    char buf[256];
    for (const HistoryRow& r : history) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%lld\n", r.epoch,
                      r.train_mse, r.val_pct, r.lr, r.rc_loss, r.aux_loss, r.util_entropy,
                      (long long)r.routing_changes);
        out << buf;
    }
}

namespace {

void write_section(HashedWriter& w, const std::string& name, const void* data, size_t bytes) {
    w.u32(uint32_t(name.size()));
    w.bytes(name.data(), name.size());
    w.u64(uint64_t(bytes));
    w.bytes(data, bytes);
}

struct Section {
    std::vector<char> payload;
    int64_t offset = 0;  // of the payload, for error reporting
};

const Section& need_section(const std::map<std::string, Section>& sections, const std::string& name) {
    auto it = sections.find(name);
    if (it == sections.end()) throw FormatError("missing checkpoint section '" + name + "'", 8);
    return it->second;
}

void check_size(const Section& s, const std::string& name, size_t expected) {
    if (s.payload.size() != expected)
        throw FormatError("checkpoint section '" + name + "' has wrong size", s.offset);
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    HashedWriter w(path);
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(uint32_t(model.kind));
    switch (model.kind) {
        case ModelKind::smoe: {
            const SmoeLayer& l = model.smoe;
            w.u32(4);  // section count
            uint32_t dims[6] = {uint32_t(l.num_experts), uint32_t(l.e_select), uint32_t(l.f_out),
                                uint32_t(l.in_channels), uint32_t(l.height), uint32_t(l.width)};
            uint8_t flags[3] = {uint8_t(l.weighted), uint8_t(l.gate_frozen), uint8_t(l.experts_frozen)};
            std::vector<char> dim_blob(sizeof dims + sizeof flags);
            std::memcpy(dim_blob.data(), dims, sizeof dims);
            std::memcpy(dim_blob.data() + sizeof dims, flags, sizeof flags);
            write_section(w, "dims", dim_blob.data(), dim_blob.size());
            write_section(w, "kernels", l.kernels.data(), sizeof(float) * size_t(l.kernels.size()));
            write_section(w, "biases", l.biases.data(), sizeof(float) * l.biases.size());
            write_section(w, "gate", l.gate->data(), sizeof(float) * size_t(l.gate->size()));
            break;
        }
        case ModelKind::conv: {
            const ConvNet& net = model.conv;
            w.u32(uint32_t(1 + 2 * net.num_layers()));
            std::vector<uint32_t> dims;
            dims.push_back(uint32_t(net.num_layers()));
            for (int l = 0; l < net.num_layers(); ++l) {
                dims.push_back(uint32_t(net.kernels[size_t(l)].batch()));
                dims.push_back(uint32_t(net.kernels[size_t(l)].channels()));
            }
            write_section(w, "dims", dims.data(), dims.size() * 4);
            for (int l = 0; l < net.num_layers(); ++l) {
                write_section(w, "kernels" + std::to_string(l), net.kernels[size_t(l)].data(),
                              sizeof(float) * size_t(net.kernels[size_t(l)].size()));
                write_section(w, "bias" + std::to_string(l), net.biases[size_t(l)].data(),
                              sizeof(float) * net.biases[size_t(l)].size());
            }
            break;
        }
        case ModelKind::lcn: {
            const LcnLayer& l = model.lcn;
            w.u32(3);
            uint32_t dims[3] = {uint32_t(l.in_channels), uint32_t(l.height), uint32_t(l.width)};
            write_section(w, "dims", dims, sizeof dims);
            write_section(w, "kernels", l.kernels.data(), sizeof(float) * l.kernels.size());
            write_section(w, "bias", l.bias.data(), sizeof(float) * l.bias.size());
            break;
        }
    }
    w.finish();
}

Model load_checkpoint(const std::string& path) {
    HashedReader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic, not a checkpoint file", 0);
    if (uint32_t v = r.u32(); v != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(v), 4);
    int64_t kind_at = r.offset;
    uint32_t kind = r.u32();
    if (kind > 2) throw FormatError("unknown model kind", kind_at);
    uint32_t n_sections = r.u32();
    if (n_sections > 64) throw FormatError("implausible section count", kind_at + 4);

    std::map<std::string, Section> sections;
    for (uint32_t s = 0; s < n_sections; ++s) {
        int64_t at = r.offset;
        uint32_t name_len = r.u32();
        if (name_len > 256) throw FormatError("implausible section name length", at);
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len);
        uint64_t bytes = r.u64();
        if (bytes > (uint64_t(1) << 33)) throw FormatError("implausible section size", at);
        Section sec;
        sec.offset = r.offset;
        sec.payload.resize(size_t(bytes));
        r.bytes(sec.payload.data(), size_t(bytes));
        sections[name] = std::move(sec);
    }
    r.verify_trailing_digest();

    auto read_f32s = [](const Section& s, float* dst) {
        std::memcpy(dst, s.payload.data(), s.payload.size());
    };

    Model model;
    model.kind = ModelKind(kind);
    switch (model.kind) {
        case ModelKind::smoe: {
            const Section& d = need_section(sections, "dims");
            check_size(d, "dims", 6 * 4 + 3);
            uint32_t dims[6];
            std::memcpy(dims, d.payload.data(), sizeof dims);
            uint8_t flags[3];
            std::memcpy(flags, d.payload.data() + sizeof dims, sizeof flags);
            SmoeLayer& l = model.smoe;
            l.num_experts = int(dims[0]);
            l.e_select = int(dims[1]);
            l.f_out = int(dims[2]);
            l.in_channels = int(dims[3]);
            l.height = int(dims[4]);
            l.width = int(dims[5]);
            if (l.num_experts < 1 || l.e_select < 1 || l.e_select > l.num_experts || l.f_out < 1 ||
                l.in_channels < 1 || l.height < 1 || l.width < 1)
                throw FormatError("inconsistent mixture dimensions", d.offset);
            l.weighted = flags[0] != 0;
            l.gate_frozen = flags[1] != 0;
            l.experts_frozen = flags[2] != 0;
            l.kernels = Tensor(l.num_experts * l.f_out, l.in_channels, 3, 3);
            const Section& k = need_section(sections, "kernels");
            check_size(k, "kernels", sizeof(float) * size_t(l.kernels.size()));
            read_f32s(k, l.kernels.data());
            l.biases.resize(size_t(l.num_experts) * l.f_out);
            const Section& b = need_section(sections, "biases");
            check_size(b, "biases", sizeof(float) * l.biases.size());
            read_f32s(b, l.biases.data());
            l.gate = std::make_shared<Tensor>(1, l.num_experts, l.height, l.width);
            const Section& g = need_section(sections, "gate");
            check_size(g, "gate", sizeof(float) * size_t(l.gate->size()));
            read_f32s(g, l.gate->data());
            break;
        }
        case ModelKind::conv: {
            const Section& d = need_section(sections, "dims");
            if (d.payload.size() < 4) throw FormatError("conv dims section too small", d.offset);
            uint32_t n_layers;
            std::memcpy(&n_layers, d.payload.data(), 4);
            if (n_layers < 1 || n_layers > 3) throw FormatError("implausible conv layer count", d.offset);
            check_size(d, "dims", 4 + size_t(n_layers) * 8);
            for (uint32_t l = 0; l < n_layers; ++l) {
                uint32_t kc[2];
                std::memcpy(kc, d.payload.data() + 4 + l * 8, 8);
                if (kc[0] < 1 || kc[1] < 1) throw FormatError("implausible conv layer dims", d.offset);
                Tensor kern{int(kc[0]), int(kc[1]), 3, 3};
                const Section& ks = need_section(sections, "kernels" + std::to_string(l));
                check_size(ks, "kernels" + std::to_string(l), sizeof(float) * size_t(kern.size()));
                read_f32s(ks, kern.data());
                model.conv.kernels.push_back(std::move(kern));
                std::vector<float> bias(kc[0]);
                const Section& bs = need_section(sections, "bias" + std::to_string(l));
                check_size(bs, "bias" + std::to_string(l), sizeof(float) * bias.size());
                read_f32s(bs, bias.data());
                model.conv.biases.push_back(std::move(bias));
            }
            break;
        }
        case ModelKind::lcn: {
            const Section& d = need_section(sections, "dims");
            check_size(d, "dims", 12);
            uint32_t dims[3];
            std::memcpy(dims, d.payload.data(), sizeof dims);
            LcnLayer& l = model.lcn;
            l.in_channels = int(dims[0]);
            l.height = int(dims[1]);
            l.width = int(dims[2]);
            if (l.in_channels < 1 || l.height < 1 || l.width < 1)
                throw FormatError("inconsistent lcn dimensions", d.offset);
            l.kernels.resize(size_t(int64_t(l.height) * l.width * l.in_channels * 9));
            const Section& k = need_section(sections, "kernels");
            check_size(k, "kernels", sizeof(float) * l.kernels.size());
            read_f32s(k, l.kernels.data());
            l.bias.resize(size_t(int64_t(l.height) * l.width));
            const Section& b = need_section(sections, "bias");
            check_size(b, "bias", sizeof(float) * l.bias.size());
            read_f32s(b, l.bias.data());
            break;
        }
    }
    return model;
}

}  // namespace smoe
