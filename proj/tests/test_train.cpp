#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "smoe/train.hpp"

using namespace smoe;

namespace {

HeatDataset small_dataset(uint64_t seed, int h = 8, int w = 8, int states = 20, int steps = 5) {
    Rng rng(seed);
    RegionMap map = generate_region_map(h, w, 3, rng);
    return generate_dataset(map, states, steps, rng);
}

void batch_from(const HeatDataset& ds, int64_t first_pair, int count, Tensor& x, Tensor& y) {
    const int h = ds.map.height, w = ds.map.width;
    x = Tensor(count, 1, h, w);
    y = Tensor(count, 1, h, w);
    for (int n = 0; n < count; ++n)
        for (int64_t i = 0; i < ds.cell_count(); ++i) {
            x[int64_t(n) * ds.cell_count() + i] = ds.input_at(first_pair + n)[i];
            y[int64_t(n) * ds.cell_count() + i] = ds.target_at(first_pair + n)[i];
        }
}

bool model_params_equal(const Model& a, const Model& b) {
    if (a.smoe.kernels.size() != b.smoe.kernels.size()) return false;
    for (int64_t i = 0; i < a.smoe.kernels.size(); ++i)
        if (a.smoe.kernels[i] != b.smoe.kernels[i]) return false;
    if (a.smoe.biases != b.smoe.biases) return false;
    for (int64_t i = 0; i < a.smoe.gate->size(); ++i)
        if ((*a.smoe.gate)[i] != (*b.smoe.gate)[i]) return false;
    return true;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("adam leaves parameters alone on zero gradients but advances the step") {
    std::vector<float> theta = {1.0f, -2.0f, 0.5f};
    std::vector<ParamGroup> groups = {{theta.data(), 3, false}};
    std::vector<std::vector<float>> grads = {{0.0f, 0.0f, 0.0f}};
    AdamState state;
    adam_step(groups, grads, state, 1e-3);
    CHECK(state.t == 1);
    CHECK(theta == std::vector<float>{1.0f, -2.0f, 0.5f});
}

TEST_CASE("the first adam step moves each parameter by about lr times the gradient sign") {
    std::vector<float> theta = {1.0f, -2.0f, 0.5f, 3.0f};
    std::vector<float> start = theta;
    std::vector<ParamGroup> groups = {{theta.data(), 4, false}};
    std::vector<std::vector<float>> grads = {{0.7f, -0.01f, 4.0f, -2.5f}};
    AdamState state;
    const double lr = 1e-3;
    adam_step(groups, grads, state, lr);
    for (size_t i = 0; i < theta.size(); ++i) {
        const double moved = double(theta[i]) - double(start[i]);
        const double want = -lr * (grads[0][i] > 0 ? 1.0 : -1.0);
        CHECK(std::abs(moved - want) < 1e-3 * std::abs(want) + 1e-9);
    }
}

TEST_CASE("frozen parameter groups never move") {
    std::vector<float> theta = {1.0f, 2.0f};
    std::vector<ParamGroup> groups = {{theta.data(), 2, true}};
    std::vector<std::vector<float>> grads = {{5.0f, -5.0f}};
    AdamState state;
    for (int step = 0; step < 3; ++step) adam_step(groups, grads, state, 0.1);
    CHECK(theta == std::vector<float>{1.0f, 2.0f});
}

TEST_CASE("the within-1-percent metric counts relative and near-zero absolute hits") {
    Rng rng(3);
    Tensor truth = uniform_tensor(1, 1, 4, 4, 0.5, 1.5, rng);
    CHECK(pct_within_1pct(truth, truth) == 100.0);
    CHECK(pct_within_1pct(mul_scalar(truth, 1.005f), truth) == 100.0);
    CHECK(pct_within_1pct(mul_scalar(truth, 1.02f), truth) == 0.0);

    Tensor zeros(1, 1, 1, 2);
    Tensor close(1, 1, 1, 2);
    close[0] = 5e-7f;
    close[1] = 2e-6f;
    CHECK(pct_within_1pct(close, zeros) == 50.0);
}

TEST_CASE("an unweighted gate without the classification loss receives no training signal") {
    HeatDataset ds = small_dataset(7);
    TrainConfig cfg;
    cfg.rc_enabled = false;
    cfg.damping_enabled = false;
    cfg.weighted = false;
    Rng model_rng(cfg.seed);
    Model model = make_model(cfg, ds.map, model_rng);
    Tensor gate_before = *model.smoe.gate;
    Tensor x, y;
    batch_from(ds, 0, 8, x, y);
    AdamState adam;
    Rng noise(1);
    RoutingRecord before = top_e_select(*model.smoe.gate, cfg.e_select);
    for (int step = 0; step < 5; ++step) train_step(model, x, y, cfg, adam, cfg.lr, noise);
    for (int64_t i = 0; i < gate_before.size(); ++i) CHECK((*model.smoe.gate)[i] == gate_before[i]);
    RoutingRecord after = top_e_select(*model.smoe.gate, cfg.e_select);
    CHECK(before.selected == after.selected);
    // The experts still learn from the task loss.
    double moved = 0.0;
    for (int64_t i = 0; i < model.smoe.kernels.size(); ++i) moved += std::abs(model.smoe.kernels[i]);
    CHECK(moved > 0.0);
}

TEST_CASE("damping at factor one is the same update as damping disabled") {
    HeatDataset ds = small_dataset(11);
    TrainConfig cfg;
    Rng rng_a(cfg.seed);
    Model a = make_model(cfg, ds.map, rng_a);
    Model b = clone_model(a);
    Tensor x, y;
    batch_from(ds, 0, 8, x, y);

    TrainConfig cfg_unit = cfg;
    cfg_unit.damping_enabled = true;
    cfg_unit.damping_factor = 1.0;
    TrainConfig cfg_off = cfg;
    cfg_off.damping_enabled = false;
    AdamState adam_a, adam_b;
    Rng noise_a(1), noise_b(1);
    train_step(a, x, y, cfg_unit, adam_a, cfg.lr, noise_a);
    train_step(b, x, y, cfg_off, adam_b, cfg.lr, noise_b);
    CHECK(model_params_equal(a, b));
}

TEST_CASE("one training step lowers the loss on its own batch") {
    HeatDataset ds = small_dataset(13);
    TrainConfig cfg;
    Rng model_rng(cfg.seed);
    Model model = make_model(cfg, ds.map, model_rng);
    Tensor x, y;
    batch_from(ds, 0, 8, x, y);
    const double before = mse_loss(model_forward(model, x), y).loss;
    AdamState adam;
    Rng noise(1);
    train_step(model, x, y, cfg, adam, cfg.lr, noise);
    const double after = mse_loss(model_forward(model, x), y).loss;
    CHECK(after < before);
}

TEST_CASE("training histories are reproducible from the seed") {
    HeatDataset ds = small_dataset(17);
    TrainConfig cfg;
    cfg.max_epochs = 3;
    FitResult a = fit(ds, cfg);
    FitResult b = fit(ds, cfg);
    REQUIRE(a.history.size() == b.history.size());
    for (size_t e = 0; e < a.history.size(); ++e) {
        CHECK(a.history[e].train_mse == b.history[e].train_mse);
        CHECK(a.history[e].val_pct == b.history[e].val_pct);
        CHECK(a.history[e].rc_loss == b.history[e].rc_loss);
        CHECK(a.history[e].routing_changes == b.history[e].routing_changes);
    }
    CHECK(a.best_val_pct == b.best_val_pct);
    CHECK(model_params_equal(a.model, b.model));
}

TEST_CASE("perfect initialization is exact, idempotent, and needs the gate to matter") {
    HeatDataset ds = small_dataset(19);
    TrainConfig cfg;
    Rng model_rng(cfg.seed);
    Model model = make_model(cfg, ds.map, model_rng);
    perfect_init(model, ds.map);
    MetricReport r = evaluate(model, ds, 0, ds.n_pairs);
    CHECK(r.pct_within_1 == 100.0);

    Model again = clone_model(model);
    perfect_init(again, ds.map);
    CHECK(model_params_equal(model, again));

    // Perfect experts behind a random gate misroute most points.
    TrainConfig cfg_rand = cfg;
    cfg_rand.expert_init = ExpertInitMode::perfect;
    cfg_rand.gate_init = GateInitMode::uniform;
    Rng rng2(99);
    Model scrambled = make_model(cfg_rand, ds.map, rng2);
    MetricReport r2 = evaluate(scrambled, ds, 0, ds.n_pairs);
    CHECK(r2.pct_within_1 < 100.0);
}

TEST_CASE("checkpoints round-trip the model bit-exactly") {
    HeatDataset ds = small_dataset(23);
    TrainConfig cfg;
    Rng model_rng(cfg.seed);
    Model model = make_model(cfg, ds.map, model_rng);
    const std::string path = "/tmp/smoe_test_ck.smck";
    save_checkpoint(model, path);
    Model back = load_checkpoint(path);
    CHECK(back.kind == ModelKind::smoe);
    CHECK(model_params_equal(model, back));
    CHECK(back.smoe.weighted == model.smoe.weighted);
    Tensor x, y;
    batch_from(ds, 0, 4, x, y);
    Tensor pa = model_forward(model, x);
    Tensor pb = model_forward(back, x);
    for (int64_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
    std::remove(path.c_str());
}

TEST_CASE("corrupted checkpoints are rejected with a format error") {
    HeatDataset ds = small_dataset(29);
    TrainConfig cfg;
    Rng model_rng(cfg.seed);
    Model model = make_model(cfg, ds.map, model_rng);
    const std::string path = "/tmp/smoe_test_ck_bad.smck";
    save_checkpoint(model, path);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(40);
    char c = 0;
    f.read(&c, 1);
    c = char(c ^ 0x33);
    f.seekp(40);
    f.write(&c, 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("config validation names the offending field") {
    TrainConfig cfg;
    cfg.q = 1.5;
    try {
        cfg.validate();
        FAIL("expected invalid_argument");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("q") != std::string::npos);
    }
    TrainConfig cfg2;
    cfg2.batch_size = 0;
    CHECK_THROWS_AS(cfg2.validate(), std::invalid_argument);
    TrainConfig cfg3;
    cfg3.damping_factor = -0.5;
    CHECK_THROWS_AS(cfg3.validate(), std::invalid_argument);
    TrainConfig ok;
    CHECK_NOTHROW(ok.validate());
}

TEST_CASE("the weighted default follows the training signal") {
    TrainConfig cfg;
    CHECK_FALSE(cfg.effective_weighted());  // classification loss on
    cfg.rc_enabled = false;
    CHECK(cfg.effective_weighted());  // end-to-end path needs the scores
    cfg.weighted = false;
    CHECK_FALSE(cfg.effective_weighted());
}

TEST_CASE("history csv writes one row per epoch plus comments") {
    std::vector<HistoryRow> rows(2);
    rows[0].epoch = 1;
    rows[0].train_mse = 0.5;
    rows[1].epoch = 2;
    rows[1].train_mse = 0.25;
    const std::string path = "/tmp/smoe_test_history.csv";
    write_history_csv(rows, {"config: test"}, path);
    std::ifstream in(path);
    std::string line;
    int comments = 0, data = 0;
    bool header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] == '#') {
            ++comments;
            header |= line.find("config: test") != std::string::npos;
        } else if (!line.empty()) {
            ++data;
        }
    }
    CHECK(comments >= 1);
    CHECK(header);
    CHECK(data == 3);  // column header + 2 epochs
    std::remove(path.c_str());
}

}  // TEST_SUITE
