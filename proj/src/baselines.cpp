#include "smoe/baselines.hpp"

#include <cmath>
#include <stdexcept>

namespace smoe {

int64_t ConvNet::param_count() const {
    int64_t n = 0;
    for (size_t l = 0; l < kernels.size(); ++l) n += kernels[l].size() + int64_t(biases[l].size());
    return n;
}

ConvNet make_convnet(int in_channels, int width, int n_layers, Rng& rng) {
    if (n_layers < 1 || n_layers > 3) throw std::invalid_argument("convnet supports 1 to 3 layers");
    if (width < 1 || width > 12) throw std::invalid_argument("convnet width must be in [1, 12]");
    ConvNet net;
    int c = in_channels;
    for (int l = 0; l < n_layers; ++l) {
        int k = (l == n_layers - 1) ? 1 : width;
        float bound = 1.0f / std::sqrt(float(c) * 9.0f);
        net.kernels.push_back(uniform_tensor(k, c, 3, 3, -bound, bound, rng));
        std::vector<float> b(size_t(k), 0.0f);
        for (float& v : b) v = float(rng.uniform(-bound, bound));
        net.biases.push_back(std::move(b));
        c = k;
    }
    return net;
}

Tensor convnet_forward(const ConvNet& net, const Tensor& x, ConvNetCache* cache) {
    if (net.num_layers() < 1) throw std::invalid_argument("empty convnet");
    if (cache) {
        cache->x = x;
        cache->pre_act.clear();
    }
    Tensor h = x;
    for (int l = 0; l < net.num_layers(); ++l) {
        Tensor z = conv2d_forward(h, net.kernels[size_t(l)], &net.biases[size_t(l)]);
        if (cache) cache->pre_act.push_back(z);
        if (l + 1 < net.num_layers()) {
            for (int64_t i = 0; i < z.size(); ++i)
                if (z[size_t(i)] < 0.0f) z[size_t(i)] = 0.0f;
        }
        h = std::move(z);
    }
    return h;
}

ConvNetGrads convnet_backward(const ConvNet& net, const Tensor& dy, const ConvNetCache& cache) {
    if (int(cache.pre_act.size()) != net.num_layers())
        throw std::invalid_argument("cache does not match network");
    ConvNetGrads g;
    g.dkernels.resize(size_t(net.num_layers()));
    g.dbiases.resize(size_t(net.num_layers()));
    Tensor grad = dy;
    for (int l = net.num_layers() - 1; l >= 0; --l) {
        // Layer input: previous layer's post-ReLU output (the input itself
        // for layer 0), recomputed from the cached pre-activation.
        Tensor input = (l == 0) ? cache.x : cache.pre_act[size_t(l - 1)];
        if (l > 0)
            for (int64_t i = 0; i < input.size(); ++i)
                if (input[size_t(i)] < 0.0f) input[size_t(i)] = 0.0f;
        Conv2dGrads cg = conv2d_backward(grad, input, net.kernels[size_t(l)]);
        g.dkernels[size_t(l)] = std::move(cg.dkernels);
        g.dbiases[size_t(l)] = std::move(cg.dbias);
        if (l > 0) {
            grad = std::move(cg.dx);
            const Tensor& z = cache.pre_act[size_t(l - 1)];
            for (int64_t i = 0; i < grad.size(); ++i)
                if (z[size_t(i)] <= 0.0f) grad[size_t(i)] = 0.0f;
        } else {
            g.dx = std::move(cg.dx);
        }
    }
    return g;
}

LcnLayer make_lcn_layer(int in_channels, int height, int width, Rng& rng) {
    if (in_channels < 1 || height < 1 || width < 1) throw std::invalid_argument("bad lcn dims");
    LcnLayer layer;
    layer.in_channels = in_channels;
    layer.height = height;
    layer.width = width;
    float bound = 1.0f / std::sqrt(float(in_channels) * 9.0f);
    layer.kernels.resize(size_t(int64_t(height) * width * in_channels * 9));
    for (float& v : layer.kernels) v = float(rng.uniform(-bound, bound));
    layer.bias.assign(size_t(int64_t(height) * width), 0.0f);
    return layer;
}

Tensor lcn_forward(const LcnLayer& layer, const Tensor& x) {
    if (x.channels() != layer.in_channels || x.height() != layer.height || x.width() != layer.width)
        throw std::invalid_argument("lcn_forward: input does not match layer");
    Tensor out(x.batch(), 1, layer.height, layer.width);
    for (int n = 0; n < x.batch(); ++n)
        for (int i = 0; i < layer.height; ++i)
            for (int j = 0; j < layer.width; ++j) {
                double acc = 0.0;
                for (int c = 0; c < layer.in_channels; ++c)
                    for (int p = 0; p < 3; ++p) {
                        int ii = i + p - 1;
                        if (ii < 0 || ii >= layer.height) continue;
                        for (int q = 0; q < 3; ++q) {
                            int jj = j + q - 1;
                            if (jj < 0 || jj >= layer.width) continue;
                            acc += double(layer.kernel_at(i, j, c, p, q)) * double(x.at(n, c, ii, jj));
                        }
                    }
                out.at(n, 0, i, j) = float(acc) + layer.bias[size_t(int64_t(i) * layer.width + j)];
            }
    flops::add_conv_macs(uint64_t(x.batch()) * layer.height * layer.width * layer.in_channels * 9);
    ensure_finite(out, "lcn_forward");
    return out;
}

LcnGrads lcn_backward(const LcnLayer& layer, const Tensor& dy, const Tensor& x) {
    if (dy.batch() != x.batch() || dy.channels() != 1 || dy.height() != layer.height ||
        dy.width() != layer.width)
        throw std::invalid_argument("lcn_backward: dy does not match layer output");
    if (x.channels() != layer.in_channels || x.height() != layer.height || x.width() != layer.width)
        throw std::invalid_argument("lcn_backward: input does not match layer");
    LcnGrads g;
    g.dkernels.assign(layer.kernels.size(), 0.0f);
    g.dbias.assign(layer.bias.size(), 0.0f);
    g.dx = Tensor(x.batch(), x.channels(), x.height(), x.width());
    for (int n = 0; n < x.batch(); ++n)
        for (int i = 0; i < layer.height; ++i)
            for (int j = 0; j < layer.width; ++j) {
                float d = dy.at(n, 0, i, j);
                g.dbias[size_t(int64_t(i) * layer.width + j)] += d;
                for (int c = 0; c < layer.in_channels; ++c)
                    for (int p = 0; p < 3; ++p) {
                        int ii = i + p - 1;
                        if (ii < 0 || ii >= layer.height) continue;
                        for (int q = 0; q < 3; ++q) {
                            int jj = j + q - 1;
                            if (jj < 0 || jj >= layer.width) continue;
                            size_t kidx = size_t((((int64_t(i) * layer.width + j) * layer.in_channels + c) * 3 + p) * 3 + q);
                            g.dkernels[kidx] += d * x.at(n, c, ii, jj);
                            g.dx.at(n, c, ii, jj) += d * layer.kernels[kidx];
                        }
                    }
            }
    ensure_finite(g.dx, "lcn_backward dx");
    return g;
}

void lcn_perfect_init(LcnLayer& layer, const RegionMap& map) {
    if (layer.in_channels != 1 || layer.height != map.height || layer.width != map.width)
        throw std::invalid_argument("perfect lcn init needs a matching single-channel layer");
    std::fill(layer.kernels.begin(), layer.kernels.end(), 0.0f);
    std::fill(layer.bias.begin(), layer.bias.end(), 0.0f);
    for (int i = 0; i < layer.height; ++i)
        for (int j = 0; j < layer.width; ++j) {
            float a = map.alpha_at(i, j);
            layer.kernel_at(i, j, 0, 0, 1) = a;
            layer.kernel_at(i, j, 0, 1, 0) = a;
            layer.kernel_at(i, j, 0, 1, 1) = 1.0f - 4.0f * a;
            layer.kernel_at(i, j, 0, 1, 2) = a;
            layer.kernel_at(i, j, 0, 2, 1) = a;
        }
}

}  // namespace smoe
