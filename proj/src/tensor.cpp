#include "smoe/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

namespace smoe {

Tensor::Tensor(int n, int c, int h, int w) : shape_{n, c, h, w} {
    if (n < 0 || c < 0 || h < 0 || w < 0)
        throw std::invalid_argument("Tensor: dimensions must be non-negative");
    data_.assign(size_t(int64_t(n) * c * h * w), 0.0f);
}

Tensor Tensor::full(int n, int c, int h, int w, float value) {
    Tensor t(n, c, h, w);
    t.fill(value);
    return t;
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

void ensure_finite(const Tensor& t, const char* context) {
    for (int64_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(t[i]))
            throw NumericError(std::string(context) + ": non-finite value at flat index " + std::to_string(i));
    }
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor mul_scalar(const Tensor& a, float s) {
    Tensor out = a;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    Tensor out = a;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

Tensor sigmoid(const Tensor& a) {
    Tensor out = a;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = sigmoid1(out[i]);
    return out;
}

double sum(const Tensor& a) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) acc += a[i];
    return acc;
}

double mean(const Tensor& a) {
    if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
    return sum(a) / double(a.size());
}

float quantile(const std::vector<float>& values, double q) {
    if (values.empty()) throw std::invalid_argument("quantile: empty input");
    if (q < 0.0 || q > 1.0) throw std::invalid_argument("quantile: q outside [0, 1]");
    std::vector<float> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    // The 1e-9 guard keeps ceil from overshooting when q*n lands on an
    // integer that double arithmetic rounds slightly upward (e.g. 0.1 * 10).
    const auto n = int64_t(sorted.size());
    int64_t rank = int64_t(std::ceil(q * double(n) - 1e-9));
    rank = std::clamp<int64_t>(rank, 1, n);
    return sorted[size_t(rank - 1)];
}

Tensor uniform_tensor(int n, int c, int h, int w, double lo, double hi, Rng& rng) {
    Tensor t(n, c, h, w);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = float(rng.uniform(lo, hi));
    return t;
}

Tensor normal_tensor(int n, int c, int h, int w, double mean, double stddev, Rng& rng) {
    Tensor t(n, c, h, w);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = float(rng.normal(mean, stddev));
    return t;
}

namespace flops {

namespace {
std::atomic<uint64_t> g_conv_macs{0};
}

void reset() { g_conv_macs.store(0); }
uint64_t conv_macs() { return g_conv_macs.load(); }
void add_conv_macs(uint64_t macs) { g_conv_macs.fetch_add(macs); }

}  // namespace flops

namespace {

void check_conv_args(const Tensor& x, const Tensor& kernels) {
    if (kernels.height() != kernels.width())
        throw std::invalid_argument("conv2d: kernel must be square");
    if (kernels.height() % 2 == 0 || kernels.height() > 5)
        throw std::invalid_argument("conv2d: kernel size must be odd and <= 5");
    if (x.channels() != kernels.channels())
        throw std::invalid_argument("conv2d: channel mismatch between input and kernels");
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& kernels, const std::vector<float>* bias) {
    check_conv_args(x, kernels);
    const int num_kernels = kernels.batch();
    if (bias && int(bias->size()) != num_kernels)
        throw std::invalid_argument("conv2d_forward: bias length must equal kernel count");

    Tensor out(x.batch(), num_kernels, x.height(), x.width());
    for (int n = 0; n < x.batch(); ++n)
        for (int k = 0; k < num_kernels; ++k) {
            const float b = bias ? (*bias)[size_t(k)] : 0.0f;
            for (int i = 0; i < x.height(); ++i)
                for (int j = 0; j < x.width(); ++j) {
                    float v = conv2d_point(x, kernels, n, k, i, j);
                    if (bias) v += b;
                    out.at(n, k, i, j) = v;
                }
        }
    flops::add_conv_macs(uint64_t(x.batch()) * num_kernels * x.height() * x.width() * x.channels() *
                         kernels.height() * kernels.width());
    ensure_finite(out, "conv2d_forward");
    return out;
}

Conv2dGrads conv2d_backward(const Tensor& dy, const Tensor& x, const Tensor& kernels, bool with_bias) {
    check_conv_args(x, kernels);
    if (dy.batch() != x.batch() || dy.channels() != kernels.batch() || dy.height() != x.height() ||
        dy.width() != x.width())
        throw std::invalid_argument("conv2d_backward: dy shape inconsistent with forward call");

    const int num_kernels = kernels.batch();
    const int radius = kernels.height() / 2;
    Conv2dGrads grads;
    grads.dx = Tensor(x.batch(), x.channels(), x.height(), x.width());
    grads.dkernels = Tensor(num_kernels, kernels.channels(), kernels.height(), kernels.width());
    if (with_bias) grads.dbias.assign(size_t(num_kernels), 0.0f);

    for (int n = 0; n < x.batch(); ++n)
        for (int k = 0; k < num_kernels; ++k)
            for (int i = 0; i < x.height(); ++i)
                for (int j = 0; j < x.width(); ++j) {
                    const float g = dy.at(n, k, i, j);
                    if (with_bias) grads.dbias[size_t(k)] += g;
                    for (int c = 0; c < x.channels(); ++c)
                        for (int di = -radius; di <= radius; ++di) {
                            const int ii = i + di;
                            if (ii < 0 || ii >= x.height()) continue;
                            for (int dj = -radius; dj <= radius; ++dj) {
                                const int jj = j + dj;
                                if (jj < 0 || jj >= x.width()) continue;
                                grads.dkernels.at(k, c, di + radius, dj + radius) += g * x.at(n, c, ii, jj);
                                grads.dx.at(n, c, ii, jj) += g * kernels.at(k, c, di + radius, dj + radius);
                            }
                        }
                }
    flops::add_conv_macs(2 * uint64_t(x.batch()) * num_kernels * x.height() * x.width() * x.channels() *
                         kernels.height() * kernels.width());
    ensure_finite(grads.dx, "conv2d_backward.dx");
    ensure_finite(grads.dkernels, "conv2d_backward.dkernels");
    return grads;
}

}  // namespace smoe
