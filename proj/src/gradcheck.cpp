#include "smoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "smoe/baselines.hpp"
#include "smoe/layer.hpp"
#include "smoe/losses.hpp"
#include "smoe/tensor.hpp"

namespace smoe {

namespace {

// Probe step for losses evaluated through the real32 forward passes.  Those
// losses are linear (dot-product objective) or quadratic (MSE) in every probed
// parameter, so central differences carry no truncation error and the step
// only has to beat real32 rounding of the activations: bigger is better as
// long as selection cannot flip (the fixed gate gap is 2, far above 2*step).
constexpr double kLinearStep = 0.05;
// The dense convolution has no routing to flip, so its probes can take a
// much larger step: the finite difference stays exact while the real32
// rounding of the activations gets divided by 2*step.
constexpr double kConvStep = 0.5;
// Step for the double-precision nonlinear losses (BCE, normal CDF, CV^2).
constexpr double kSmoothStep = 1e-3;

double rel_err(double fd, double an) {
    double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
    return std::abs(fd - an) / denom;
}

// L = sum(out . weights): its gradient w.r.t. out is exactly `weights`,
// which makes any backward pass checkable through a scalar loss.
double dot_loss(const Tensor& out, const Tensor& weights) {
    double acc = 0.0;
    for (int64_t i = 0; i < out.size(); ++i) acc += double(out[size_t(i)]) * double(weights[size_t(i)]);
    return acc;
}

// Central difference over every entry of `param`, comparing against
// `analytic` at the same flat index.
double check_param(float* param, int64_t count, const float* analytic,
                   const std::function<double()>& loss, double step = kLinearStep) {
    double worst = 0.0;
    for (int64_t i = 0; i < count; ++i) {
        float saved = param[i];
        param[i] = float(double(saved) + step);
        double up = loss();
        param[i] = float(double(saved) - step);
        double down = loss();
        param[i] = saved;
        double fd = (up - down) / (2.0 * step);
        worst = std::max(worst, rel_err(fd, double(analytic[i])));
    }
    return worst;
}

double check_vec(std::vector<float>& param, const std::vector<float>& analytic,
                 const std::function<double()>& loss, double step = kLinearStep) {
    return check_param(param.data(), int64_t(param.size()), analytic.data(), loss, step);
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck(uint64_t seed) {
    std::vector<GradCheckReport> reports;
    Rng rng(seed);

    {  // dense convolution
        Tensor x = uniform_tensor(2, 2, 5, 5, -1.0, 1.0, rng);
        Tensor w = uniform_tensor(2, 2, 3, 3, -1.0, 1.0, rng);
        std::vector<float> b = {0.3f, -0.2f};
        Tensor dy = uniform_tensor(2, 2, 5, 5, -1.0, 1.0, rng);
        auto loss = [&] { return dot_loss(conv2d_forward(x, w, &b), dy); };
        Conv2dGrads g = conv2d_backward(dy, x, w);
        reports.push_back({"conv2d.dkernels", check_param(w.data(), w.size(), g.dkernels.data(), loss, kConvStep)});
        reports.push_back({"conv2d.dbias", check_vec(b, g.dbias, loss, kConvStep)});
        reports.push_back({"conv2d.dx", check_param(x.data(), x.size(), g.dx.data(), loss, kConvStep)});
    }

    {  // locally connected layer
        Rng lrng = rng.fork(1);
        LcnLayer lcn = make_lcn_layer(1, 4, 4, lrng);
        Tensor x = uniform_tensor(2, 1, 4, 4, -1.0, 1.0, rng);
        Tensor dy = uniform_tensor(2, 1, 4, 4, -1.0, 1.0, rng);
        auto loss = [&] { return dot_loss(lcn_forward(lcn, x), dy); };
        LcnGrads g = lcn_backward(lcn, dy, x);
        reports.push_back({"lcn.dkernels", check_vec(lcn.kernels, g.dkernels, loss)});
        reports.push_back({"lcn.dbias", check_vec(lcn.bias, g.dbias, loss)});
        reports.push_back({"lcn.dx", check_param(x.data(), x.size(), g.dx.data(), loss)});
    }

    auto smoe_case = [&](bool weighted, const char* prefix) {
        Rng srng = rng.fork(weighted ? 2 : 3);
        SmoeLayer layer = make_smoe_layer(2, 1, 1, 1, 4, 4, weighted, srng);
        // Fix the gate with a gap of 2 everywhere, so the +-1e-3 probes can
        // never flip the selection and the loss stays differentiable.
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                float v = ((i + j) % 2) ? 1.0f : -1.0f;
                layer.gate->at(0, 0, i, j) = v;
                layer.gate->at(0, 1, i, j) = -v;
            }
        layer.biases = {0.25f, -0.15f};
        Tensor x = uniform_tensor(2, 1, 4, 4, -1.0, 1.0, rng);
        Tensor dy = uniform_tensor(2, 1, 4, 4, -1.0, 1.0, rng);
        auto loss = [&] { return dot_loss(smoe_forward(x, layer).y, dy); };
        SmoeForward fwd = smoe_forward(x, layer);
        SmoeGrads g = smoe_backward(dy, x, layer, fwd.routing);
        std::string p(prefix);
        reports.push_back({p + ".dkernels",
                           check_param(layer.kernels.data(), layer.kernels.size(), g.dkernels.data(), loss)});
        reports.push_back({p + ".dbias", check_vec(layer.biases, g.dbias, loss)});
        reports.push_back({p + ".dx", check_param(x.data(), x.size(), g.dx.data(), loss)});
        if (weighted)
            reports.push_back({p + ".dgate",
                               check_param(layer.gate->data(), layer.gate->size(), g.dgate.data(), loss)});
    };
    smoe_case(false, "smoe");
    smoe_case(true, "smoe_weighted");

    {  // mse error signal
        Tensor pred = uniform_tensor(2, 1, 4, 4, -1.0, 1.0, rng);
        Tensor target = uniform_tensor(2, 1, 4, 4, -1.0, 1.0, rng);
        auto loss = [&] { return mse_loss(pred, target).loss; };
        Tensor analytic = mse_loss(pred, target).error_signal;
        reports.push_back({"mse.error_signal",
                           check_param(pred.data(), pred.size(), analytic.data(), loss)});
    }

    {  // routing classification loss
        Tensor logits = uniform_tensor(1, 3, 4, 4, -2.0, 2.0, rng);
        RcLabels labels;
        labels.num_experts = 3;
        labels.e_select = 1;
        labels.height = 4;
        labels.width = 4;
        labels.labels.resize(size_t(logits.size()));
        for (float& l : labels.labels) l = float(rng.uniform());
        auto loss = [&] { return rc_loss(logits, labels).loss; };
        Tensor analytic = rc_loss(logits, labels).dgate;
        reports.push_back({"rc.dgate",
                           check_param(logits.data(), logits.size(), analytic.data(), loss, kSmoothStep)});
    }

    {  // load loss (threshold fixed by the routing record)
        Tensor logits = uniform_tensor(1, 3, 4, 4, -1.0, 1.0, rng);
        RoutingRecord routing = top_e_select(logits, 1);
        auto loss = [&] { return load_loss(logits, routing, 1.0); };
        Tensor analytic = load_loss_with_grad(logits, routing, 1.0).dgate;
        reports.push_back({"load.dgate",
                           check_param(logits.data(), logits.size(), analytic.data(), loss, kSmoothStep)});
    }

    {  // importance loss as a function of the importance vector
        std::vector<double> imp = {1.0, 3.0, 2.2};
        ImportanceGrad g = importance_loss_with_grad(imp);
        double worst = 0.0;
        for (size_t i = 0; i < imp.size(); ++i) {
            double saved = imp[i];
            imp[i] = saved + kSmoothStep;
            double up = importance_loss(imp);
            imp[i] = saved - kSmoothStep;
            double down = importance_loss(imp);
            imp[i] = saved;
            worst = std::max(worst, rel_err((up - down) / (2.0 * kSmoothStep), g.d_importance[i]));
        }
        reports.push_back({"importance.dimportance", worst});
    }

    return reports;
}

double gradcheck_worst(const std::vector<GradCheckReport>& reports) {
    double worst = 0.0;
    for (const GradCheckReport& r : reports) worst = std::max(worst, r.max_rel_err);
    return worst;
}

}  // namespace smoe
