#pragma once

#include <vector>

#include "smoe/heatgen.hpp"
#include "smoe/rng.hpp"
#include "smoe/tensor.hpp"

namespace smoe {

// Plain stack of 3x3 convolutions with ReLU between layers (none after the
// last); final layer always maps to 1 channel.
struct ConvNet {
    std::vector<Tensor> kernels;              // layer l: [K_l, C_l, 3, 3]
    std::vector<std::vector<float>> biases;   // per-layer, length K_l

    int num_layers() const { return int(kernels.size()); }
    int64_t param_count() const;
};

ConvNet make_convnet(int in_channels, int width, int n_layers, Rng& rng);

struct ConvNetCache {
    Tensor x;
    std::vector<Tensor> pre_act;  // per-layer outputs before ReLU
};

Tensor convnet_forward(const ConvNet& net, const Tensor& x, ConvNetCache* cache = nullptr);

struct ConvNetGrads {
    std::vector<Tensor> dkernels;
    std::vector<std::vector<float>> dbiases;
    Tensor dx;
};

ConvNetGrads convnet_backward(const ConvNet& net, const Tensor& dy, const ConvNetCache& cache);

// Locally connected layer: an independent 3x3 kernel and bias at every grid
// cell, single output channel. Parameter count H*W*(9*C + 1).
struct LcnLayer {
    int in_channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> kernels;  // [H, W, C, 3, 3] row-major
    std::vector<float> bias;     // [H, W]

    int64_t param_count() const {
        return int64_t(height) * width * (9 * int64_t(in_channels) + 1);
    }
    float& kernel_at(int i, int j, int c, int p, int q) {
        return kernels[size_t((((int64_t(i) * width + j) * in_channels + c) * 3 + p) * 3 + q)];
    }
    float kernel_at(int i, int j, int c, int p, int q) const {
        return kernels[size_t((((int64_t(i) * width + j) * in_channels + c) * 3 + p) * 3 + q)];
    }
};

LcnLayer make_lcn_layer(int in_channels, int height, int width, Rng& rng);

Tensor lcn_forward(const LcnLayer& layer, const Tensor& x);

struct LcnGrads {
    std::vector<float> dkernels;
    std::vector<float> dbias;
    Tensor dx;
};

LcnGrads lcn_backward(const LcnLayer& layer, const Tensor& dy, const Tensor& x);

// Every cell's kernel set to its region's true diffusion stencil
// [[0,a,0],[a,1-4a,a],[0,a,0]], bias 0: the exact next-step predictor.
void lcn_perfect_init(LcnLayer& layer, const RegionMap& map);

}  // namespace smoe
