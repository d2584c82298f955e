#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "smoe/heatgen.hpp"
#include "smoe/layer.hpp"

using namespace smoe;

namespace {

SmoeLayer random_layer(int num_experts, int e_select, int f_out, int h, int w, bool weighted,
                       uint64_t seed) {
    Rng rng(seed);
    return make_smoe_layer(num_experts, e_select, f_out, 1, h, w, weighted, rng);
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (int64_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace

TEST_SUITE("layer") {

TEST_CASE("gate init bound follows the fan-in formula") {
    CHECK(gate_init_bound(3, 1, 1) == 9.0f);
    CHECK(gate_init_bound(6, 2, 1) == 9.0f);
    CHECK(gate_init_bound(4, 2, 2) == 3.0f);
}

TEST_CASE("uniform gate init stays inside the bound and is deterministic") {
    SmoeLayer a = random_layer(3, 1, 1, 8, 8, false, 3);
    for (int64_t i = 0; i < a.gate->size(); ++i) {
        CHECK((*a.gate)[i] >= -9.0f);
        CHECK((*a.gate)[i] <= 9.0f);
    }
    SmoeLayer b = random_layer(3, 1, 1, 8, 8, false, 3);
    CHECK(tensors_equal(*a.gate, *b.gate));
}

TEST_CASE("from-map gate init puts the argmax on the cell's region type") {
    Rng rng(5);
    RegionMap map = generate_region_map(10, 10, 3, rng);
    SmoeLayer layer = random_layer(3, 1, 1, 10, 10, false, 6);
    init_gate(layer, GateInit::from_map, rng, &map);
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 10; ++j) {
            int best = 0;
            for (int e = 1; e < 3; ++e)
                if (layer.gate->at(0, e, i, j) > layer.gate->at(0, best, i, j)) best = e;
            CHECK(best == map.type_at(i, j));
        }
}

TEST_CASE("fixed random init freezes the gate") {
    Rng rng(7);
    SmoeLayer layer = random_layer(3, 1, 1, 8, 8, false, 7);
    CHECK_FALSE(layer.gate_frozen);
    init_gate(layer, GateInit::fixed_random, rng);
    CHECK(layer.gate_frozen);
}

TEST_CASE("expert groups partition experts into contiguous type blocks") {
    CHECK(expert_group(0, 3, 3) == 0);
    CHECK(expert_group(1, 3, 3) == 1);
    CHECK(expert_group(2, 3, 3) == 2);
    CHECK(expert_group(0, 6, 3) == 0);
    CHECK(expert_group(1, 6, 3) == 0);
    CHECK(expert_group(5, 6, 3) == 2);
}

TEST_CASE("top-e selection picks the largest logit") {
    Tensor logits(1, 3, 1, 1);
    logits.at(0, 0, 0, 0) = 0.2f;
    logits.at(0, 1, 0, 0) = 0.9f;
    logits.at(0, 2, 0, 0) = 0.5f;
    RoutingRecord r = top_e_select(logits, 1);
    CHECK(r.index_at(0, 0, 0) == 1);
    CHECK(r.score_at(0, 0, 0) == 0.9f);
}

TEST_CASE("top-e selection breaks ties toward the lower expert index") {
    Tensor logits(1, 3, 1, 1);
    logits.at(0, 0, 0, 0) = 0.5f;
    logits.at(0, 1, 0, 0) = 0.5f;
    logits.at(0, 2, 0, 0) = 0.1f;
    RoutingRecord r = top_e_select(logits, 1);
    CHECK(r.index_at(0, 0, 0) == 0);
}

TEST_CASE("selecting all experts yields a descending permutation") {
    Rng rng(11);
    Tensor logits = uniform_tensor(1, 4, 5, 5, -2.0, 2.0, rng);
    RoutingRecord r = top_e_select(logits, 4);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            uint32_t seen = 0;
            for (int s = 0; s < 4; ++s) {
                const int e = r.index_at(s, i, j);
                CHECK(e >= 0);
                CHECK(e < 4);
                seen |= 1u << e;
                if (s > 0) CHECK(r.score_at(s, i, j) <= r.score_at(s - 1, i, j));
            }
            CHECK(seen == 0xF);
        }
}

TEST_CASE("selection is invariant to a constant shift of one point's logits") {
    Rng rng(13);
    Tensor logits = uniform_tensor(1, 3, 4, 4, -1.0, 1.0, rng);
    RoutingRecord before = top_e_select(logits, 2);
    for (int e = 0; e < 3; ++e) logits.at(0, e, 2, 1) += 5.25f;
    RoutingRecord after = top_e_select(logits, 2);
    for (int s = 0; s < 2; ++s) CHECK(before.index_at(s, 2, 1) == after.index_at(s, 2, 1));
}

TEST_CASE("sparse dispatch equals apply-all gather bit-exactly on random instances") {
    for (int trial = 0; trial < 100; ++trial) {
        Rng rng(1000 + uint64_t(trial));
        const int num_experts = 2 + int(rng.uniform_int(4));
        const int e_select = 1 + int(rng.uniform_int(int64_t(num_experts)));
        const int f_out = 1 + int(rng.uniform_int(2));
        const int h = 3 + int(rng.uniform_int(5));
        const int w = 3 + int(rng.uniform_int(5));
        const bool weighted = rng.uniform() < 0.5;
        SmoeLayer layer = make_smoe_layer(num_experts, e_select, f_out, 1, h, w, weighted, rng);
        Tensor x = uniform_tensor(2, 1, h, w, -1.0, 1.0, rng);
        SmoeForward sparse = smoe_forward(x, layer);
        SmoeForward dense = smoe_forward_apply_all(x, layer);
        CHECK(tensors_equal(sparse.y, dense.y));
        CHECK(sparse.routing.selected == dense.routing.selected);
        CHECK(sparse.routing.scores == dense.routing.scores);
    }
}

TEST_CASE("routing is independent of the input") {
    Rng rng(17);
    SmoeLayer layer = random_layer(3, 2, 1, 6, 6, false, 17);
    Tensor x1 = uniform_tensor(1, 1, 6, 6, -1.0, 1.0, rng);
    Tensor x2 = uniform_tensor(1, 1, 6, 6, 5.0, 9.0, rng);
    SmoeForward a = smoe_forward(x1, layer);
    SmoeForward b = smoe_forward(x2, layer);
    CHECK(a.routing.selected == b.routing.selected);
    CHECK(a.routing.scores == b.routing.scores);
}

TEST_CASE("weighted output with unit scores equals the unweighted output") {
    Rng rng(19);
    SmoeLayer layer = random_layer(3, 1, 1, 6, 6, true, 19);
    layer.gate->fill(1.0f);
    Tensor x = uniform_tensor(1, 1, 6, 6, -1.0, 1.0, rng);
    SmoeForward weighted = smoe_forward(x, layer);
    layer.weighted = false;
    SmoeForward plain = smoe_forward(x, layer);
    CHECK(tensors_equal(weighted.y, plain.y));
}

TEST_CASE("a perfectly routed stencil bank reproduces the diffusion step") {
    Rng rng(23);
    RegionMap map = generate_region_map(12, 12, 3, rng);
    SmoeLayer layer = random_layer(3, 1, 1, 12, 12, false, 23);
    init_gate(layer, GateInit::from_map, rng, &map);
    layer.kernels.zero();
    for (int e = 0; e < 3; ++e) {
        const float a = map.diffusivities[size_t(e)];
        layer.kernels.at(e, 0, 0, 1) = a;
        layer.kernels.at(e, 0, 1, 0) = a;
        layer.kernels.at(e, 0, 1, 1) = 1.0f - 4.0f * a;
        layer.kernels.at(e, 0, 1, 2) = a;
        layer.kernels.at(e, 0, 2, 1) = a;
    }
    Tensor x = uniform_tensor(2, 1, 12, 12, 0.0, 1.0, rng);
    SmoeForward fwd = smoe_forward(x, layer);
    for (int n = 0; n < 2; ++n) {
        Tensor one(1, 1, 12, 12);
        for (int64_t i = 0; i < one.size(); ++i) one[i] = x[int64_t(n) * 144 + i];
        Tensor want = diffusion_step(one, map);
        for (int64_t i = 0; i < one.size(); ++i)
            CHECK(std::abs(fwd.y[int64_t(n) * 144 + i] - want[i]) < 1e-6f);
    }
}

TEST_CASE("backward leaves unselected experts with exactly zero kernel gradient") {
    Rng rng(29);
    SmoeLayer layer = random_layer(4, 1, 1, 6, 6, false, 29);
    // Park expert 3 below every competitor so it never wins a point.
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) layer.gate->at(0, 3, i, j) = -100.0f;
    Tensor x = uniform_tensor(1, 1, 6, 6, -1.0, 1.0, rng);
    SmoeForward fwd = smoe_forward(x, layer);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) CHECK(fwd.routing.index_at(0, i, j) != 3);
    Tensor dy = uniform_tensor(1, 1, 6, 6, -1.0, 1.0, rng);
    SmoeGrads grads = smoe_backward(dy, x, layer, fwd.routing);
    for (int p = 0; p < 3; ++p)
        for (int q = 0; q < 3; ++q) CHECK(grads.dkernels.at(3, 0, p, q) == 0.0f);
    CHECK(grads.dbias[3] == 0.0f);
    double live = 0.0;
    for (int e = 0; e < 3; ++e)
        for (int p = 0; p < 3; ++p)
            for (int q = 0; q < 3; ++q) live += std::abs(grads.dkernels.at(e, 0, p, q));
    CHECK(live > 0.0);
}

TEST_CASE("damping with factor 1 or an empty mask changes nothing") {
    Rng rng(31);
    SmoeLayer layer = random_layer(3, 1, 1, 6, 6, false, 31);
    Tensor x = uniform_tensor(1, 1, 6, 6, -1.0, 1.0, rng);
    SmoeForward fwd = smoe_forward(x, layer);
    Tensor dy = uniform_tensor(1, 1, 6, 6, -1.0, 1.0, rng);
    SmoeGrads plain = smoe_backward(dy, x, layer, fwd.routing);

    std::vector<uint8_t> all(size_t(1 * 36), 1);
    DampingSpec unit{1.0f, &all};
    SmoeGrads with_unit = smoe_backward(dy, x, layer, fwd.routing, unit);
    CHECK(tensors_equal(plain.dkernels, with_unit.dkernels));
    CHECK(tensors_equal(plain.dx, with_unit.dx));

    std::vector<uint8_t> none(size_t(1 * 36), 0);
    DampingSpec masked_off{0.25f, &none};
    SmoeGrads with_none = smoe_backward(dy, x, layer, fwd.routing, masked_off);
    CHECK(tensors_equal(plain.dkernels, with_none.dkernels));
    CHECK(tensors_equal(plain.dx, with_none.dx));
}

TEST_CASE("damping factor 0 with a full mask kills the expert gradients") {
    Rng rng(37);
    SmoeLayer layer = random_layer(3, 1, 1, 6, 6, false, 37);
    Tensor x = uniform_tensor(1, 1, 6, 6, -1.0, 1.0, rng);
    SmoeForward fwd = smoe_forward(x, layer);
    Tensor dy = uniform_tensor(1, 1, 6, 6, -1.0, 1.0, rng);
    std::vector<uint8_t> all(size_t(1 * 36), 1);
    DampingSpec zero{0.0f, &all};
    SmoeGrads grads = smoe_backward(dy, x, layer, fwd.routing, zero);
    for (int64_t i = 0; i < grads.dkernels.size(); ++i) CHECK(grads.dkernels[i] == 0.0f);
    for (int64_t i = 0; i < grads.dx.size(); ++i) CHECK(grads.dx[i] == 0.0f);
    for (float b : grads.dbias) CHECK(b == 0.0f);
}

TEST_CASE("damping scales a marked slot's kernel gradient by the factor") {
    Rng rng(41);
    SmoeLayer layer = random_layer(1, 1, 1, 4, 4, false, 41);
    Tensor x = uniform_tensor(1, 1, 4, 4, -1.0, 1.0, rng);
    SmoeForward fwd = smoe_forward(x, layer);
    Tensor dy = uniform_tensor(1, 1, 4, 4, -1.0, 1.0, rng);
    SmoeGrads plain = smoe_backward(dy, x, layer, fwd.routing);
    std::vector<uint8_t> all(16, 1);
    DampingSpec damp{0.1f, &all};
    SmoeGrads damped = smoe_backward(dy, x, layer, fwd.routing, damp);
    for (int64_t i = 0; i < plain.dkernels.size(); ++i)
        CHECK(damped.dkernels[i] == doctest::Approx(0.1f * plain.dkernels[i]).epsilon(1e-5));
}

TEST_CASE("only the weighted variant produces an end-to-end gate gradient") {
    Rng rng(43);
    SmoeLayer layer = random_layer(3, 1, 1, 6, 6, false, 43);
    Tensor x = uniform_tensor(1, 1, 6, 6, -1.0, 1.0, rng);
    Tensor dy = uniform_tensor(1, 1, 6, 6, -1.0, 1.0, rng);
    SmoeForward fwd = smoe_forward(x, layer);
    SmoeGrads plain = smoe_backward(dy, x, layer, fwd.routing);
    for (int64_t i = 0; i < plain.dgate.size(); ++i) CHECK(plain.dgate[i] == 0.0f);

    layer.weighted = true;
    SmoeForward wfwd = smoe_forward(x, layer);
    SmoeGrads wgrads = smoe_backward(dy, x, layer, wfwd.routing);
    double total = 0.0;
    for (int64_t i = 0; i < wgrads.dgate.size(); ++i) total += std::abs(wgrads.dgate[i]);
    CHECK(total > 0.0);
}

TEST_CASE("sparse dispatch does the selected fraction of the apply-all convolution work") {
    Rng rng(47);
    SmoeLayer layer = random_layer(4, 1, 2, 8, 8, false, 47);
    Tensor x = uniform_tensor(1, 1, 8, 8, -1.0, 1.0, rng);
    flops::reset();
    smoe_forward(x, layer);
    const uint64_t sparse = flops::conv_macs();
    flops::reset();
    smoe_forward_apply_all(x, layer);
    const uint64_t dense = flops::conv_macs();
    CHECK(sparse * 4 == dense);
}

TEST_CASE("a shared gate is one tensor seen by all bound layers") {
    Rng rng(53);
    SmoeLayer a = random_layer(3, 1, 1, 6, 6, false, 53);
    SmoeLayer b = random_layer(3, 1, 1, 6, 6, false, 54);
    std::vector<SmoeLayer*> layers = {&a, &b};
    std::shared_ptr<Tensor> shared = bind_shared_gate(layers);
    CHECK(a.gate.get() == shared.get());
    CHECK(b.gate.get() == shared.get());
    a.gate->at(0, 2, 3, 3) = 42.0f;
    CHECK(b.gate->at(0, 2, 3, 3) == 42.0f);
    Tensor x = uniform_tensor(1, 1, 6, 6, -1.0, 1.0, rng);
    SmoeForward fa = smoe_forward(x, a);
    SmoeForward fb = smoe_forward(x, b);
    CHECK(fa.routing.selected == fb.routing.selected);
}

TEST_CASE("binding rejects mismatched gate shapes") {
    SmoeLayer a = random_layer(3, 1, 1, 6, 6, false, 59);
    SmoeLayer b = random_layer(3, 1, 1, 8, 8, false, 59);
    std::vector<SmoeLayer*> layers = {&a, &b};
    CHECK_THROWS_AS(bind_shared_gate(layers), std::invalid_argument);
}

TEST_CASE("routing agreement is 1 for a from-map gate and lower for a permuted-map mismatch") {
    Rng rng(61);
    RegionMap map = generate_region_map(10, 10, 3, rng);
    SmoeLayer layer = random_layer(3, 1, 1, 10, 10, false, 61);
    init_gate(layer, GateInit::from_map, rng, &map);
    RoutingRecord r = top_e_select(*layer.gate, 1);
    CHECK(routing_map_agreement(r, map) == doctest::Approx(1.0));
    // Relabeling experts is free under best-assignment matching.
    Tensor permuted(1, 3, 10, 10);
    for (int e = 0; e < 3; ++e)
        for (int i = 0; i < 10; ++i)
            for (int j = 0; j < 10; ++j)
                permuted.at(0, (e + 1) % 3, i, j) = layer.gate->at(0, e, i, j);
    RoutingRecord rp = top_e_select(permuted, 1);
    CHECK(routing_map_agreement(rp, map) == doctest::Approx(1.0));
}

TEST_CASE("routing exports are written in the documented shapes") {
    Rng rng(67);
    RegionMap map = generate_region_map(8, 8, 3, rng);
    SmoeLayer layer = random_layer(3, 1, 1, 8, 8, false, 67);
    init_gate(layer, GateInit::from_map, rng, &map);
    RoutingRecord r = top_e_select(*layer.gate, 1);

    const std::string csv = "/tmp/smoe_test_routing.csv";
    export_routing_csv(r, csv);
    std::ifstream in(csv);
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
        int cols = 1;
        for (char c : line) cols += c == ',';
        CHECK(cols == 8);
        ++rows;
    }
    CHECK(rows == 8);
    std::remove(csv.c_str());

    const std::string pgm = "/tmp/smoe_test_routing.pgm";
    export_routing_pgm(r, pgm);
    std::ifstream pin(pgm, std::ios::binary);
    std::string magic;
    pin >> magic;
    CHECK(magic == "P5");
    int w = 0, h = 0, maxval = 0;
    pin >> w >> h >> maxval;
    CHECK(w == 8);
    CHECK(h == 8);
    CHECK(maxval == 255);
    std::remove(pgm.c_str());
}

TEST_CASE("kernel export writes one 3x3 block per expert") {
    Rng rng(71);
    SmoeLayer layer = random_layer(2, 1, 1, 8, 8, false, 71);
    layer.kernels.zero();
    layer.kernels.at(0, 0, 1, 1) = 0.5f;
    layer.kernels.at(1, 0, 0, 0) = -1.0f;
    export_expert_kernels(layer, "/tmp");
    std::ifstream in("/tmp/expert_0.csv");
    REQUIRE(in.good());
    std::string row0, row1;
    std::getline(in, row0);
    std::getline(in, row1);
    CHECK(row0 == "0,0,0");
    CHECK(row1 == "0,0.5,0");
    std::remove("/tmp/expert_0.csv");
    std::remove("/tmp/expert_1.csv");
}

}  // TEST_SUITE
