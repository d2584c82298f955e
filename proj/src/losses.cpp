#include "smoe/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace smoe {

namespace {

constexpr double kProbClamp = 1e-7;

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * 3.14159265358979323846); }

// CV^2 = Var/mean^2 with population variance; all-zero input is degenerate
// and defined as 0.
double cv_squared(const std::vector<double>& v, std::vector<double>* grad) {
    size_t k = v.size();
    if (k < 2) throw std::invalid_argument("coefficient of variation needs at least 2 entries");
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= double(k);
    if (mean == 0.0) {
        if (grad) grad->assign(k, 0.0);
        return 0.0;
    }
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= double(k);
    double loss = var / (mean * mean);
    if (grad) {
        grad->resize(k);
        // d(var/mean^2)/dv_i with var and mean both functions of v_i
        for (size_t i = 0; i < k; ++i)
            (*grad)[i] = 2.0 * (v[i] - mean) / (double(k) * mean * mean) - 2.0 * loss / (double(k) * mean);
    }
    return loss;
}

}  // namespace

MseResult mse_loss(const Tensor& prediction, const Tensor& target) {
    if (!prediction.same_shape(target)) throw std::invalid_argument("mse_loss: shape mismatch");
    MseResult r;
    r.error_signal = Tensor(prediction.batch(), prediction.channels(), prediction.height(),
                            prediction.width());
    int64_t n = prediction.size();
    double acc = 0.0;
    float scale = float(2.0 / double(n));
    for (int64_t i = 0; i < n; ++i) {
        double d = double(prediction[size_t(i)]) - double(target[size_t(i)]);
        acc += d * d;
        r.error_signal[size_t(i)] = scale * (prediction[size_t(i)] - target[size_t(i)]);
    }
    r.loss = acc / double(n);
    ensure_finite(r.error_signal, "mse_loss error signal");
    return r;
}

RcLabels build_rc_labels(const Tensor& error_signal, const RoutingRecord& routing, double q,
                         bool use_abs) {
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("quantile q must be in (0, 1)");
    if (routing.e_select < 1) throw std::invalid_argument("routing record is empty");
    if (error_signal.channels() % routing.e_select != 0)
        throw std::invalid_argument("error signal channels are not a multiple of e_select");
    if (error_signal.height() != routing.height || error_signal.width() != routing.width)
        throw std::invalid_argument("error signal spatial dims do not match routing");
    int f_out = error_signal.channels() / routing.e_select;
    int n_batch = error_signal.batch();

    RcLabels out;
    out.num_experts = routing.num_experts;
    out.e_select = routing.e_select;
    out.height = routing.height;
    out.width = routing.width;

    // Mean error per slot across batch and the slot's channels; the gate
    // decision is per (expert, point), not per sample or channel.
    std::vector<float> magnitude(routing.scores.size());
    for (int s = 0; s < routing.e_select; ++s)
        for (int i = 0; i < routing.height; ++i)
            for (int j = 0; j < routing.width; ++j) {
                double acc = 0.0;
                for (int n = 0; n < n_batch; ++n)
                    for (int f = 0; f < f_out; ++f) {
                        double e = error_signal.at(n, s * f_out + f, i, j);
                        acc += use_abs ? std::abs(e) : e;
                    }
                magnitude[size_t(routing.slot_index(s, i, j))] = float(acc / double(n_batch * f_out));
            }

    out.threshold = quantile(magnitude, q);
    out.incorrect.assign(magnitude.size(), 0);
    for (size_t i = 0; i < magnitude.size(); ++i)
        if (magnitude[i] > out.threshold) {  // strict: an all-zero signal marks nothing
            out.incorrect[i] = 1;
            ++out.incorrect_count;
        }

    out.labels.assign(size_t(routing.num_experts) * routing.height * routing.width, 0.0f);
    int n_unselected = routing.num_experts - routing.e_select;
    for (int i = 0; i < routing.height; ++i)
        for (int j = 0; j < routing.width; ++j) {
            int n_wrong = 0;
            for (int s = 0; s < routing.e_select; ++s) {
                int64_t slot = routing.slot_index(s, i, j);
                int e = routing.selected[size_t(slot)];
                if (out.incorrect[size_t(slot)])
                    ++n_wrong;  // misrouted slot keeps label 0
                else
                    out.labels[size_t((int64_t(e) * routing.height + i) * routing.width + j)] = 1.0f;
            }
            if (n_wrong > 0 && n_unselected > 0) {
                // Uniform prior over the unselected experts; capped at 1 when
                // more slots failed than there are alternatives.
                float l = std::min(1.0f, float(n_wrong) / float(n_unselected));
                for (int e = 0; e < routing.num_experts; ++e) {
                    if (routing.is_selected(e, i, j)) continue;
                    out.labels[size_t((int64_t(e) * routing.height + i) * routing.width + j)] = l;
                }
            }
        }
    return out;
}

RcLossResult rc_loss(const Tensor& gate_logits, const RcLabels& labels) {
    if (gate_logits.batch() != 1 || gate_logits.channels() != labels.num_experts ||
        gate_logits.height() != labels.height || gate_logits.width() != labels.width)
        throw std::invalid_argument("gate logits shape does not match labels");
    for (float l : labels.labels)
        if (!(l >= 0.0f && l <= 1.0f)) throw std::invalid_argument("labels must lie in [0, 1]");

    RcLossResult r;
    r.dgate = Tensor(1, labels.num_experts, labels.height, labels.width);
    int64_t count = gate_logits.size();
    double acc = 0.0;
    for (int64_t idx = 0; idx < count; ++idx) {
        double p = 1.0 / (1.0 + std::exp(-double(gate_logits[size_t(idx)])));
        p = std::min(1.0 - kProbClamp, std::max(kProbClamp, p));
        double l = labels.labels[size_t(idx)];
        acc -= l * std::log(p) + (1.0 - l) * std::log(1.0 - p);
        r.dgate[size_t(idx)] = float((p - l) / double(count));
    }
    r.loss = acc / double(count);
    return r;
}

double importance_loss(const std::vector<double>& importance) {
    return cv_squared(importance, nullptr);
}

ImportanceGrad importance_loss_with_grad(const std::vector<double>& importance) {
    ImportanceGrad g;
    g.loss = cv_squared(importance, &g.d_importance);
    return g;
}

std::vector<double> importance_from_routing(const RoutingRecord& routing, int batch_size) {
    std::vector<double> imp(size_t(routing.num_experts), 0.0);
    for (int s = 0; s < routing.e_select; ++s)
        for (int i = 0; i < routing.height; ++i)
            for (int j = 0; j < routing.width; ++j)
                imp[size_t(routing.index_at(s, i, j))] += double(routing.score_at(s, i, j));
    for (double& v : imp) v *= double(batch_size);
    return imp;
}

double load_loss(const Tensor& clean_logits, const RoutingRecord& routing, double noise_std) {
    return load_loss_with_grad(clean_logits, routing, noise_std).loss;
}

LoadGrad load_loss_with_grad(const Tensor& clean_logits, const RoutingRecord& routing,
                             double noise_std) {
    if (!(noise_std > 0.0))
        throw std::invalid_argument("load loss is defined only with routing noise (noise_std > 0)");
    if (clean_logits.batch() != 1 || clean_logits.channels() != routing.num_experts ||
        clean_logits.height() != routing.height || clean_logits.width() != routing.width)
        throw std::invalid_argument("logits shape does not match routing");

    // Expected selection mass per expert: probability a fresh noise draw
    // lifts the clean logit over the point's realized selection threshold.
    std::vector<double> load(size_t(routing.num_experts), 0.0);
    Tensor dp(1, routing.num_experts, routing.height, routing.width);  // d load_e / d logit
    for (int i = 0; i < routing.height; ++i)
        for (int j = 0; j < routing.width; ++j) {
            double t = routing.score_at(routing.e_select - 1, i, j);  // E-th largest noisy logit
            for (int e = 0; e < routing.num_experts; ++e) {
                double z = (double(clean_logits.at(0, e, i, j)) - t) / noise_std;
                load[size_t(e)] += normal_cdf(z);
                dp.at(0, e, i, j) = float(normal_pdf(z) / noise_std);
            }
        }

    LoadGrad g;
    std::vector<double> dload;
    g.loss = cv_squared(load, &dload);
    g.dgate = Tensor(1, routing.num_experts, routing.height, routing.width);
    for (int e = 0; e < routing.num_experts; ++e)
        for (int i = 0; i < routing.height; ++i)
            for (int j = 0; j < routing.width; ++j)
                g.dgate.at(0, e, i, j) = float(dload[size_t(e)] * double(dp.at(0, e, i, j)));
    return g;
}

double spatial_agreement_loss(const Tensor& per_sample_scores) {
    int n = per_sample_scores.batch();
    if (n < 2) throw std::invalid_argument("spatial agreement needs a batch of at least 2");
    int experts = per_sample_scores.channels();
    int h = per_sample_scores.height(), w = per_sample_scores.width();
    double total = 0.0;
    for (int e = 0; e < experts; ++e) {
        double acc = 0.0;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double mean = 0.0;
                for (int b = 0; b < n; ++b) mean += per_sample_scores.at(b, e, i, j);
                mean /= double(n);
                double var = 0.0;
                for (int b = 0; b < n; ++b) {
                    double d = double(per_sample_scores.at(b, e, i, j)) - mean;
                    var += d * d;
                }
                acc += std::sqrt(var / double(n));
            }
        total += acc / double(h * w);
    }
    return total;
}

double combine_aux(const std::vector<double>& enabled_values, const AuxConfig& cfg) {
    if (enabled_values.empty()) return 0.0;
    double mean = 0.0;
    for (double v : enabled_values) mean += v;
    mean /= double(enabled_values.size());
    return cfg.aux_scale * mean;
}

Tensor routing_noise(const Tensor& logits, double noise_std, Rng& rng) {
    if (noise_std < 0.0) throw std::invalid_argument("noise_std must be non-negative");
    Tensor out = logits;
    if (noise_std == 0.0) return out;
    for (int64_t i = 0; i < out.size(); ++i)
        out[size_t(i)] = float(double(out[size_t(i)]) + rng.normal(0.0, noise_std));
    return out;
}

}  // namespace smoe
