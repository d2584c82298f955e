#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "smoe/rng.hpp"

namespace smoe {

// Raised when a computation produces NaN/Inf; the CLI maps this to its
// numerical-failure exit code.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dense rank-4 real32 array [N, C, H, W], row-major with N outermost.
// All public operations leave tensors finite; producers of new values call
// ensure_finite before returning.
class Tensor {
public:
    Tensor() : shape_{0, 0, 0, 0} {}
    Tensor(int n, int c, int h, int w);

    static Tensor full(int n, int c, int h, int w, float value);

    int batch() const { return shape_[0]; }
    int channels() const { return shape_[1]; }
    int height() const { return shape_[2]; }
    int width() const { return shape_[3]; }
    const std::array<int, 4>& shape() const { return shape_; }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    int64_t size() const { return int64_t(data_.size()); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& at(int n, int c, int i, int j) { return data_[index(n, c, i, j)]; }
    float at(int n, int c, int i, int j) const { return data_[index(n, c, i, j)]; }

    float& operator[](int64_t flat) { return data_[size_t(flat)]; }
    float operator[](int64_t flat) const { return data_[size_t(flat)]; }

    void fill(float value);
    void zero() { fill(0.0f); }

private:
    int64_t index(int n, int c, int i, int j) const {
        return ((int64_t(n) * shape_[1] + c) * shape_[2] + i) * shape_[3] + j;
    }

    std::array<int, 4> shape_;
    std::vector<float> data_;
};

// Throws NumericError naming `context` if any value is NaN/Inf.
void ensure_finite(const Tensor& t, const char* context);

// Elementwise suite. Binary ops require matching shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, float s);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& a);
double sum(const Tensor& a);
double mean(const Tensor& a);

inline float sigmoid1(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// Nearest-rank quantile: sort ascending, return the element at index
// ceil(q*n) - 1 (index 0 for q = 0). Throws on empty input.
float quantile(const std::vector<float>& values, double q);

// Fills a tensor with i.i.d. uniform draws over [lo, hi).
Tensor uniform_tensor(int n, int c, int h, int w, double lo, double hi, Rng& rng);
// Fills a tensor with i.i.d. normal draws.
Tensor normal_tensor(int n, int c, int h, int w, double mean, double stddev, Rng& rng);

// Nominal convolution multiply-add counters, used to verify that the sparse
// expert dispatch performs the expected fraction of the apply-all work.
namespace flops {
void reset();
uint64_t conv_macs();
void add_conv_macs(uint64_t macs);
}  // namespace flops

// Single output point of a zero-padded cross-correlation. Both the dense
// forward pass and the sparse expert dispatch route through this function,
// which makes their results bit-identical.
inline float conv2d_point(const Tensor& x, const Tensor& kernels, int n, int k, int i, int j) {
    const int channels = x.channels();
    const int height = x.height();
    const int width = x.width();
    const int radius = kernels.height() / 2;
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
        for (int di = -radius; di <= radius; ++di) {
            const int ii = i + di;
            if (ii < 0 || ii >= height) continue;
            for (int dj = -radius; dj <= radius; ++dj) {
                const int jj = j + dj;
                if (jj < 0 || jj >= width) continue;
                acc += double(kernels.at(k, c, di + radius, dj + radius)) * double(x.at(n, c, ii, jj));
            }
        }
    }
    return float(acc);
}

// 2-D cross-correlation with zero padding and same-size output.
// x: [N, C, H, W]; kernels: [K, C, S, S] with S odd and <= 5;
// bias: optional, length K. out[n,k,i,j] = sum_c sum_taps w*x (+ bias[k]).
Tensor conv2d_forward(const Tensor& x, const Tensor& kernels, const std::vector<float>* bias = nullptr);

struct Conv2dGrads {
    Tensor dx;
    Tensor dkernels;
    std::vector<float> dbias;
};

// Adjoint of conv2d_forward. dbias is filled only when with_bias is set.
Conv2dGrads conv2d_backward(const Tensor& dy, const Tensor& x, const Tensor& kernels, bool with_bias = true);

}  // namespace smoe
