#include "smoe/layer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace smoe {

namespace {

void check_layer(const SmoeLayer& layer) {
    if (layer.num_experts < 1 || layer.e_select < 1 || layer.e_select > layer.num_experts)
        throw std::invalid_argument("layer needs 1 <= e_select <= num_experts");
    if (layer.f_out < 1 || layer.in_channels < 1) throw std::invalid_argument("layer channel counts must be positive");
    if (!layer.gate) throw std::invalid_argument("layer has no gate tensor");
    const Tensor& d = *layer.gate;
    if (d.batch() != 1 || d.channels() != layer.num_experts || d.height() != layer.height ||
        d.width() != layer.width)
        throw std::invalid_argument("gate tensor shape does not match layer");
}

void check_input(const Tensor& x, const SmoeLayer& layer) {
    if (x.channels() != layer.in_channels) throw std::invalid_argument("input channels do not match layer");
    if (x.height() != layer.height || x.width() != layer.width)
        throw std::invalid_argument("input spatial dims do not match the routing tensor");
}

const Tensor& routing_logits(const SmoeLayer& layer, const Tensor* logits_override) {
    if (!logits_override) return *layer.gate;
    if (!logits_override->same_shape(*layer.gate))
        throw std::invalid_argument("logits override shape does not match the gate");
    return *logits_override;
}

// Gather step shared by both forward paths so they stay bit-identical:
// the expert value is computed elsewhere, this applies score weighting.
inline float weight_value(float value, float score, bool weighted) {
    return weighted ? score * value : value;
}

}  // namespace

float gate_init_bound(int num_experts, int e_select, int f_out) {
    return 3.0f * float(num_experts) / (float(e_select) * float(f_out));
}

int expert_group(int expert, int num_experts, int num_types) {
    int base = num_experts / num_types;
    int rem = num_experts % num_types;
    // First rem types own base+1 experts, the rest base.
    int boundary = rem * (base + 1);
    if (expert < boundary) return expert / (base + 1);
    return rem + (expert - boundary) / base;
}

SmoeLayer make_smoe_layer(int num_experts, int e_select, int f_out, int in_channels, int height,
                          int width, bool weighted, Rng& rng) {
    if (num_experts < 1 || e_select < 1 || e_select > num_experts || f_out < 1 || in_channels < 1)
        throw std::invalid_argument("bad mixture layer sizes");
    SmoeLayer layer;
    layer.num_experts = num_experts;
    layer.e_select = e_select;
    layer.f_out = f_out;
    layer.in_channels = in_channels;
    layer.height = height;
    layer.width = width;
    layer.weighted = weighted;
    float kb = 1.0f / std::sqrt(float(in_channels) * 9.0f);
    layer.kernels = uniform_tensor(num_experts * f_out, in_channels, 3, 3, -kb, kb, rng);
    layer.biases.assign(size_t(num_experts) * f_out, 0.0f);
    layer.gate = std::make_shared<Tensor>(1, num_experts, height, width);
    init_gate(layer, GateInit::uniform, rng);
    return layer;
}

void init_gate(SmoeLayer& layer, GateInit mode, Rng& rng, const RegionMap* map) {
    check_layer(layer);
    float b = gate_init_bound(layer.num_experts, layer.e_select, layer.f_out);
    Tensor& d = *layer.gate;
    switch (mode) {
        case GateInit::uniform:
        case GateInit::fixed_random:
            for (int64_t i = 0; i < d.size(); ++i) d[size_t(i)] = float(rng.uniform(-b, b));
            layer.gate_frozen = (mode == GateInit::fixed_random);
            break;
        case GateInit::from_map: {
            if (!map) throw std::invalid_argument("from_map gate init needs a region map");
            if (map->height != layer.height || map->width != layer.width)
                throw std::invalid_argument("region map dims do not match the gate");
            if (map->num_types() > layer.num_experts)
                throw std::invalid_argument("more region types than experts");
            for (int e = 0; e < layer.num_experts; ++e) {
                int group = expert_group(e, layer.num_experts, map->num_types());
                for (int i = 0; i < layer.height; ++i)
                    for (int j = 0; j < layer.width; ++j)
                        d.at(0, e, i, j) = (map->type_at(i, j) == group) ? b : -b;
            }
            break;
        }
    }
}

RoutingRecord top_e_select(const Tensor& logits, int e_select) {
    if (logits.batch() != 1) throw std::invalid_argument("routing logits must have batch 1");
    int num_experts = logits.channels();
    if (e_select < 1 || e_select > num_experts)
        throw std::invalid_argument("e_select must be in [1, num_experts]");
    RoutingRecord rec;
    rec.num_experts = num_experts;
    rec.e_select = e_select;
    rec.height = logits.height();
    rec.width = logits.width();
    rec.selected.resize(size_t(e_select) * rec.height * rec.width);
    rec.scores.resize(rec.selected.size());
    rec.raw_logits.assign(logits.data(), logits.data() + logits.size());

    std::vector<int> order(size_t(num_experts), 0);
    for (int i = 0; i < rec.height; ++i) {
        for (int j = 0; j < rec.width; ++j) {
            std::iota(order.begin(), order.end(), 0);
            // stable sort on descending score keeps lower indices first on ties
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                return logits.at(0, a, i, j) > logits.at(0, b, i, j);
            });
            for (int s = 0; s < e_select; ++s) {
                int e = order[size_t(s)];
                rec.selected[size_t(rec.slot_index(s, i, j))] = e;
                rec.scores[size_t(rec.slot_index(s, i, j))] = logits.at(0, e, i, j);
            }
        }
    }
    return rec;
}

SmoeForward smoe_forward(const Tensor& x, const SmoeLayer& layer, const Tensor* logits_override) {
    check_layer(layer);
    check_input(x, layer);
    const Tensor& logits = routing_logits(layer, logits_override);
    SmoeForward out;
    out.routing = top_e_select(logits, layer.e_select);
    out.y = Tensor(x.batch(), layer.e_select * layer.f_out, layer.height, layer.width);
    for (int i = 0; i < layer.height; ++i) {
        for (int j = 0; j < layer.width; ++j) {
            for (int s = 0; s < layer.e_select; ++s) {
                int e = out.routing.index_at(s, i, j);
                float score = out.routing.score_at(s, i, j);
                for (int f = 0; f < layer.f_out; ++f) {
                    int k = e * layer.f_out + f;
                    for (int n = 0; n < x.batch(); ++n) {
                        float v = conv2d_point(x, layer.kernels, n, k, i, j) + layer.biases[size_t(k)];
                        out.y.at(n, s * layer.f_out + f, i, j) = weight_value(v, score, layer.weighted);
                    }
                }
            }
        }
    }
    flops::add_conv_macs(uint64_t(x.batch()) * layer.e_select * layer.f_out * layer.height *
                         layer.width * layer.in_channels * 9);
    ensure_finite(out.y, "smoe_forward");
    return out;
}

SmoeForward smoe_forward_apply_all(const Tensor& x, const SmoeLayer& layer,
                                   const Tensor* logits_override) {
    check_layer(layer);
    check_input(x, layer);
    const Tensor& logits = routing_logits(layer, logits_override);
    SmoeForward out;
    out.routing = top_e_select(logits, layer.e_select);
    Tensor all = conv2d_forward(x, layer.kernels, &layer.biases);  // [N, |E|*F, H, W]
    out.y = Tensor(x.batch(), layer.e_select * layer.f_out, layer.height, layer.width);
    for (int i = 0; i < layer.height; ++i)
        for (int j = 0; j < layer.width; ++j)
            for (int s = 0; s < layer.e_select; ++s) {
                int e = out.routing.index_at(s, i, j);
                float score = out.routing.score_at(s, i, j);
                for (int f = 0; f < layer.f_out; ++f)
                    for (int n = 0; n < x.batch(); ++n)
                        out.y.at(n, s * layer.f_out + f, i, j) =
                            weight_value(all.at(n, e * layer.f_out + f, i, j), score, layer.weighted);
            }
    return out;
}

SmoeGrads smoe_backward(const Tensor& dy, const Tensor& x, const SmoeLayer& layer,
                        const RoutingRecord& routing, const DampingSpec& damping) {
    check_layer(layer);
    check_input(x, layer);
    if (dy.batch() != x.batch() || dy.channels() != layer.e_select * layer.f_out ||
        dy.height() != layer.height || dy.width() != layer.width)
        throw std::invalid_argument("dy shape does not match the forward output");
    if (damping.incorrect_mask &&
        damping.incorrect_mask->size() != size_t(layer.e_select) * layer.height * layer.width)
        throw std::invalid_argument("incorrect mask shape does not match [E, H, W]");

    SmoeGrads g;
    g.dx = Tensor(x.batch(), x.channels(), x.height(), x.width());
    g.dkernels = Tensor(layer.bank_rows(), layer.in_channels, 3, 3);
    g.dbias.assign(layer.biases.size(), 0.0f);
    g.dgate = Tensor(1, layer.num_experts, layer.height, layer.width);

    int radius = 1;
    for (int i = 0; i < layer.height; ++i) {
        for (int j = 0; j < layer.width; ++j) {
            for (int s = 0; s < layer.e_select; ++s) {
                int e = routing.index_at(s, i, j);
                float score = routing.score_at(s, i, j);
                bool damp = damping.incorrect_mask &&
                            (*damping.incorrect_mask)[size_t(routing.slot_index(s, i, j))] != 0;
                for (int f = 0; f < layer.f_out; ++f) {
                    int k = e * layer.f_out + f;
                    for (int n = 0; n < x.batch(); ++n) {
                        float d = dy.at(n, s * layer.f_out + f, i, j);
                        if (damp) d *= damping.factor;
                        if (layer.weighted) {
                            // d(score * v)/dscore = v; recomputing v avoids caching
                            // the whole expert output.
                            float v = conv2d_point(x, layer.kernels, n, k, i, j) + layer.biases[size_t(k)];
                            g.dgate.at(0, e, i, j) += d * v;
                        }
                        float dval = layer.weighted ? d * score : d;
                        g.dbias[size_t(k)] += dval;
                        for (int c = 0; c < layer.in_channels; ++c) {
                            for (int di = -radius; di <= radius; ++di) {
                                int ii = i + di;
                                if (ii < 0 || ii >= layer.height) continue;
                                for (int dj = -radius; dj <= radius; ++dj) {
                                    int jj = j + dj;
                                    if (jj < 0 || jj >= layer.width) continue;
                                    g.dkernels.at(k, c, di + radius, dj + radius) += dval * x.at(n, c, ii, jj);
                                    g.dx.at(n, c, ii, jj) += dval * layer.kernels.at(k, c, di + radius, dj + radius);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    flops::add_conv_macs(2 * uint64_t(x.batch()) * layer.e_select * layer.f_out * layer.height *
                         layer.width * layer.in_channels * 9);
    ensure_finite(g.dx, "smoe_backward dx");
    ensure_finite(g.dkernels, "smoe_backward dkernels");
    ensure_finite(g.dgate, "smoe_backward dgate");
    return g;
}

std::shared_ptr<Tensor> bind_shared_gate(std::vector<SmoeLayer*>& layers) {
    if (layers.empty()) throw std::invalid_argument("no layers to bind");
    SmoeLayer* first = layers.front();
    check_layer(*first);
    for (SmoeLayer* l : layers) {
        if (l->num_experts != first->num_experts || l->height != first->height ||
            l->width != first->width)
            throw std::invalid_argument("shared gate requires matching [num_experts, H, W]");
    }
    for (SmoeLayer* l : layers) l->gate = first->gate;
    return first->gate;
}

double routing_map_agreement(const RoutingRecord& routing, const RegionMap& map) {
    if (routing.height != map.height || routing.width != map.width)
        throw std::invalid_argument("routing and region map dims differ");
    int types = map.num_types();
    int experts = routing.num_experts;
    if (types > experts) throw std::invalid_argument("more region types than experts");
    if (experts > 20) throw std::invalid_argument("assignment search supports at most 20 experts");

    std::vector<int64_t> counts(size_t(types) * experts, 0);
    for (int i = 0; i < map.height; ++i)
        for (int j = 0; j < map.width; ++j)
            ++counts[size_t(map.type_at(i, j)) * experts + size_t(routing.index_at(0, i, j))];

    // Exact assignment: dp over subsets of experts already used, one type
    // assigned per round.
    size_t n_masks = size_t(1) << experts;
    std::vector<int64_t> dp(n_masks, -1);
    dp[0] = 0;
    for (int t = 0; t < types; ++t) {
        std::vector<int64_t> next(n_masks, -1);
        for (size_t mask = 0; mask < n_masks; ++mask) {
            if (dp[mask] < 0 || std::popcount(mask) != t) continue;
            for (int e = 0; e < experts; ++e) {
                if (mask & (size_t(1) << e)) continue;
                size_t m2 = mask | (size_t(1) << e);
                int64_t v = dp[mask] + counts[size_t(t) * experts + size_t(e)];
                if (v > next[m2]) next[m2] = v;
            }
        }
        dp = std::move(next);
    }
    int64_t best = 0;
    for (int64_t v : dp) best = std::max(best, v);
    return double(best) / (double(map.height) * double(map.width));
}

void export_routing_csv(const RoutingRecord& routing, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (int i = 0; i < routing.height; ++i) {
        for (int j = 0; j < routing.width; ++j) {
            if (j) out << ',';
            for (int s = 0; s < routing.e_select; ++s) {
                if (s) out << '|';
                out << routing.index_at(s, i, j);
            }
        }
        out << '\n';
    }
}

void export_routing_pgm(const RoutingRecord& routing, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "P5\n" << routing.width << " " << routing.height << "\n255\n";
    int denom = std::max(1, routing.num_experts - 1);
    for (int i = 0; i < routing.height; ++i)
        for (int j = 0; j < routing.width; ++j) {
            unsigned char px = (unsigned char)(routing.index_at(0, i, j) * 255 / denom);
            out.write(reinterpret_cast<const char*>(&px), 1);
        }
}

void export_expert_kernels(const SmoeLayer& layer, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (int e = 0; e < layer.num_experts; ++e) {
        std::string path = dir + "/expert_" + std::to_string(e) + ".csv";
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot open for writing: " + path);
        char buf[64];
        for (int f = 0; f < layer.f_out; ++f) {
            for (int c = 0; c < layer.in_channels; ++c) {
                if (f || c) out << '\n';
                for (int p = 0; p < 3; ++p) {
                    for (int q = 0; q < 3; ++q) {
                        if (q) out << ',';
                        std::snprintf(buf, sizeof buf, "%.9g", double(layer.kernels.at(e * layer.f_out + f, c, p, q)));
                        out << buf;
                    }
                    out << '\n';
                }
            }
        }
    }
}

}  // namespace smoe
