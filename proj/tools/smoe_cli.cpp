// Command-line driver: dataset generation, training, evaluation, exports,
// and the finite-difference gradient suite.
//
// Exit codes: 0 success, 2 config error, 3 data-format error, 4 numerical
// failure (NaN/Inf detected).

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "smoe/gradcheck.hpp"
#include "smoe/heatgen.hpp"
#include "smoe/layer.hpp"
#include "smoe/train.hpp"

namespace {

using namespace smoe;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitFormat = 3;
constexpr int kExitNumeric = 4;

std::string output_root() {
    const char* env = std::getenv("SMOE_OUT_ROOT");
    return env && *env ? std::string(env) : std::string(".");
}

// ---- key = value config handling -------------------------------------------

struct RunConfig {
    TrainConfig train;
    std::string data;
    std::string out;
};

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw std::invalid_argument("config key '" + key + "': expected a boolean, got '" + v + "'");
}

int parse_int(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return out;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': expected an integer, got '" + v + "'");
    }
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return out;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    TrainConfig& t = cfg.train;
    if (key == "model") {
        if (value == "smoe") t.model = ModelKind::smoe;
        else if (value == "conv") t.model = ModelKind::conv;
        else if (value == "lcn") t.model = ModelKind::lcn;
        else throw std::invalid_argument("config key 'model': expected smoe|conv|lcn, got '" + value + "'");
    } else if (key == "batch_size") t.batch_size = parse_int(value, key);
    else if (key == "lr") t.lr = parse_double(value, key);
    else if (key == "plateau_patience") t.plateau_patience = parse_int(value, key);
    else if (key == "lr_decay") t.lr_decay = parse_double(value, key);
    else if (key == "max_lr_decays") t.max_lr_decays = parse_int(value, key);
    else if (key == "early_stop_patience") t.early_stop_patience = parse_int(value, key);
    else if (key == "max_epochs") t.max_epochs = parse_int(value, key);
    else if (key == "q") t.q = parse_double(value, key);
    else if (key == "damping_factor") t.damping_factor = parse_double(value, key);
    else if (key == "rc_enabled") t.rc_enabled = parse_bool(value, key);
    else if (key == "damping_enabled") t.damping_enabled = parse_bool(value, key);
    else if (key == "weighted") {
        if (value == "auto") t.weighted.reset();
        else t.weighted = parse_bool(value, key);
    } else if (key == "freeze_gate") t.freeze_gate = parse_bool(value, key);
    else if (key == "freeze_experts") t.freeze_experts = parse_bool(value, key);
    else if (key == "gate_init") {
        if (value == "uniform") t.gate_init = GateInitMode::uniform;
        else if (value == "perfect") t.gate_init = GateInitMode::perfect;
        else if (value == "fixed_random") t.gate_init = GateInitMode::fixed_random;
        else throw std::invalid_argument("config key 'gate_init': expected uniform|perfect|fixed_random");
    } else if (key == "expert_init") {
        if (value == "random") t.expert_init = ExpertInitMode::random;
        else if (value == "perfect") t.expert_init = ExpertInitMode::perfect;
        else throw std::invalid_argument("config key 'expert_init': expected random|perfect");
    } else if (key == "seed") t.seed = uint64_t(std::stoull(value));
    else if (key == "num_experts") t.num_experts = parse_int(value, key);
    else if (key == "e_select") t.e_select = parse_int(value, key);
    else if (key == "f_out") t.f_out = parse_int(value, key);
    else if (key == "conv_width") t.conv_width = parse_int(value, key);
    else if (key == "conv_layers") t.conv_layers = parse_int(value, key);
    else if (key == "use_importance") t.aux.use_importance = parse_bool(value, key);
    else if (key == "use_load") t.aux.use_load = parse_bool(value, key);
    else if (key == "use_spatial_agreement") t.aux.use_spatial_agreement = parse_bool(value, key);
    else if (key == "noise_std") t.aux.noise_std = parse_double(value, key);
    else if (key == "aux_scale") t.aux.aux_scale = parse_double(value, key);
    else if (key == "data") cfg.data = value;
    else if (key == "out") cfg.out = value;
    else throw std::invalid_argument("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = trim(line);
        if (s.empty() || s[0] == '#') continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        apply_key(cfg, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
}

void apply_set_override(RunConfig& cfg, const std::string& kv) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    apply_key(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> serialize_config(const RunConfig& cfg) {
    const TrainConfig& t = cfg.train;
    auto b = [](bool v) { return v ? "true" : "false"; };
    std::vector<std::string> lines;
    const char* model = t.model == ModelKind::smoe ? "smoe" : (t.model == ModelKind::conv ? "conv" : "lcn");
    const char* gate_init = t.gate_init == GateInitMode::uniform
                                ? "uniform"
                                : (t.gate_init == GateInitMode::perfect ? "perfect" : "fixed_random");
    lines.push_back(std::string("model = ") + model);
    lines.push_back("batch_size = " + std::to_string(t.batch_size));
    lines.push_back("lr = " + fmt_double(t.lr));
    lines.push_back("plateau_patience = " + std::to_string(t.plateau_patience));
    lines.push_back("lr_decay = " + fmt_double(t.lr_decay));
    lines.push_back("max_lr_decays = " + std::to_string(t.max_lr_decays));
    lines.push_back("early_stop_patience = " + std::to_string(t.early_stop_patience));
    lines.push_back("max_epochs = " + std::to_string(t.max_epochs));
    lines.push_back("q = " + fmt_double(t.q));
    lines.push_back("damping_factor = " + fmt_double(t.damping_factor));
    lines.push_back(std::string("rc_enabled = ") + b(t.rc_enabled));
    lines.push_back(std::string("damping_enabled = ") + b(t.damping_enabled));
    lines.push_back(std::string("weighted = ") + (t.weighted ? b(*t.weighted) : "auto"));
    lines.push_back(std::string("freeze_gate = ") + b(t.freeze_gate));
    lines.push_back(std::string("freeze_experts = ") + b(t.freeze_experts));
    lines.push_back(std::string("gate_init = ") + gate_init);
    lines.push_back(std::string("expert_init = ") +
                    (t.expert_init == ExpertInitMode::random ? "random" : "perfect"));
    lines.push_back("seed = " + std::to_string(t.seed));
    lines.push_back("num_experts = " + std::to_string(t.num_experts));
    lines.push_back("e_select = " + std::to_string(t.e_select));
    lines.push_back("f_out = " + std::to_string(t.f_out));
    lines.push_back("conv_width = " + std::to_string(t.conv_width));
    lines.push_back("conv_layers = " + std::to_string(t.conv_layers));
    lines.push_back(std::string("use_importance = ") + b(t.aux.use_importance));
    lines.push_back(std::string("use_load = ") + b(t.aux.use_load));
    lines.push_back(std::string("use_spatial_agreement = ") + b(t.aux.use_spatial_agreement));
    lines.push_back("noise_std = " + fmt_double(t.aux.noise_std));
    lines.push_back("aux_scale = " + fmt_double(t.aux.aux_scale));
    if (!cfg.data.empty()) lines.push_back("data = " + cfg.data);
    if (!cfg.out.empty()) lines.push_back("out = " + cfg.out);
    return lines;
}

// ---- gen-data ---------------------------------------------------------------

struct GenArgs {
    std::string preset = "reduced";
    uint64_t seed = 42;
    std::string out;
    int height = 0, width = 0, types = 0, states = 0, steps = 0;
    int drops = 10;
    double magnitude = 1.0;
};

int cmd_gen_data(const GenArgs& a) {
    int height = 32, width = 32, types = 3, states = 200, steps = 50;
    if (a.preset == "paper") {
        height = width = 64;
        states = 1000;
        steps = 100;
    } else if (a.preset != "reduced") {
        throw std::invalid_argument("unknown preset '" + a.preset + "' (expected reduced|paper)");
    }
    if (a.height > 0) height = a.height;
    if (a.width > 0) width = a.width;
    if (a.types > 0) types = a.types;
    if (a.states > 0) states = a.states;
    if (a.steps > 0) steps = a.steps;
    std::string out = a.out.empty() ? output_root() + "/heat_" + a.preset + ".smhd" : a.out;

    Rng root(a.seed);
    Rng map_rng = root.fork(0);
    Rng traj_rng = root.fork(1);
    RegionMap map = generate_region_map(height, width, types, map_rng);
    map.seed = a.seed;

    DropConfig drops;
    drops.count = a.drops;
    drops.magnitude = float(a.magnitude);
    generate_and_save(map, states, steps, drops, traj_rng, out);

    std::vector<int64_t> region_sizes(size_t(types), 0);
    for (uint8_t t : map.grid) ++region_sizes[t];
    std::printf("dataset: %s\n", out.c_str());
    std::printf("grid: %dx%d, %d region types\n", height, width, types);
    for (int t = 0; t < types; ++t)
        std::printf("  type %d: diffusivity %g, %lld cells\n", t, double(map.diffusivities[size_t(t)]),
                    (long long)region_sizes[size_t(t)]);
    std::printf("pairs: %lld (%d states x %d steps), split 80/10/10 by state\n",
                (long long)(int64_t(states) * steps), states, steps);
    return kExitOk;
}

// ---- train ------------------------------------------------------------------

struct MatrixAxis {
    std::string key;
    std::vector<std::string> values;
};

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

struct RunOutcome {
    double val_pct = 0.0, test_pct = 0.0, test_mse = 0.0;
    int best_epoch = 0, epochs = 0;
};

RunOutcome run_fit(const RunConfig& cfg, const HeatDataset& ds, const std::string& history_path,
                   const std::string& checkpoint_path) {
    FitResult fit_result = fit(ds, cfg.train);
    MetricReport test = evaluate(fit_result.model, ds, ds.val_end, ds.test_end, cfg.train.batch_size);
    if (!history_path.empty()) {
        std::vector<std::string> comments = serialize_config(cfg);
        comments.insert(comments.begin(), "effective configuration:");
        comments.push_back("weighted_effective = " +
                           std::string(cfg.train.effective_weighted() ? "true" : "false"));
        write_history_csv(fit_result.history, comments, history_path);
    }
    if (!checkpoint_path.empty()) save_checkpoint(fit_result.model, checkpoint_path);
    RunOutcome o;
    o.val_pct = fit_result.best_val_pct;
    o.test_pct = test.pct_within_1;
    o.test_mse = test.mse;
    o.best_epoch = fit_result.best_epoch;
    o.epochs = int(fit_result.history.size());
    return o;
}

int cmd_train(RunConfig cfg, const std::vector<MatrixAxis>& matrix, std::vector<uint64_t> seeds) {
    if (cfg.data.empty()) throw std::invalid_argument("train needs --data (or a 'data' config key)");
    if (cfg.out.empty()) cfg.out = output_root() + "/out-train";
    std::filesystem::create_directories(cfg.out);
    cfg.train.validate();
    HeatDataset ds = load_dataset(cfg.data);

    {
        std::ofstream echo(cfg.out + "/config.txt");
        for (const std::string& line : serialize_config(cfg)) echo << line << '\n';
    }

    if (matrix.empty()) {
        if (!seeds.empty()) cfg.train.seed = seeds.front();
        RunOutcome o = run_fit(cfg, ds, cfg.out + "/history.csv", cfg.out + "/checkpoint.smck");
        std::printf("best_epoch=%d epochs=%d val_pct=%.4f test_pct=%.4f test_mse=%.8g\n",
                    o.best_epoch, o.epochs, o.val_pct, o.test_pct, o.test_mse);
        return kExitOk;
    }

    if (seeds.empty()) seeds.push_back(cfg.train.seed);
    // Cartesian product over the matrix axes, one row per (cell, seed).
    std::vector<std::vector<std::string>> cells;  // per cell: value per axis
    std::vector<std::string> current(matrix.size());
    std::function<void(size_t)> expand = [&](size_t axis) {
        if (axis == matrix.size()) {
            cells.push_back(current);
            return;
        }
        for (const std::string& v : matrix[axis].values) {
            current[axis] = v;
            expand(axis + 1);
        }
    };
    expand(0);

    std::ofstream msv(cfg.out + "/matrix.csv");
    for (const MatrixAxis& ax : matrix) msv << ax.key << ',';
    msv << "weighted_effective,seed,best_epoch,val_pct,test_pct,test_mse\n";
    std::ofstream ssv(cfg.out + "/summary.csv");
    for (const MatrixAxis& ax : matrix) ssv << ax.key << ',';
    ssv << "weighted_effective,n_seeds,mean_test_pct,std_test_pct,mean_val_pct\n";

    for (size_t c = 0; c < cells.size(); ++c) {
        RunConfig cell_cfg = cfg;
        for (size_t a = 0; a < matrix.size(); ++a) apply_key(cell_cfg, matrix[a].key, cells[c][a]);
        cell_cfg.train.validate();
        const char* weff = cell_cfg.train.effective_weighted() ? "true" : "false";
        double sum = 0.0, sumsq = 0.0, vsum = 0.0;
        for (uint64_t seed : seeds) {
            cell_cfg.train.seed = seed;
            std::string tag = "cell" + std::to_string(c) + "_s" + std::to_string(seed);
            RunOutcome o = run_fit(cell_cfg, ds, cfg.out + "/history_" + tag + ".csv", "");
            for (size_t a = 0; a < matrix.size(); ++a) msv << cells[c][a] << ',';
            char buf[160];
            std::snprintf(buf, sizeof buf, "%s,%llu,%d,%.4f,%.4f,%.8g\n", weff,
                          (unsigned long long)seed, o.best_epoch, o.val_pct, o.test_pct, o.test_mse);
            msv << buf;
            std::printf("cell %zu (%s) seed %llu: test_pct=%.4f\n", c, tag.c_str(),
                        (unsigned long long)seed, o.test_pct);
            sum += o.test_pct;
            sumsq += o.test_pct * o.test_pct;
            vsum += o.val_pct;
        }
        double n = double(seeds.size());
        double mean = sum / n;
        double var = std::max(0.0, sumsq / n - mean * mean);
        for (size_t a = 0; a < matrix.size(); ++a) ssv << cells[c][a] << ',';
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s,%zu,%.4f,%.4f,%.4f\n", weff, seeds.size(), mean,
                      std::sqrt(var), vsum / n);
        ssv << buf;
    }
    std::printf("matrix results: %s/matrix.csv, summary: %s/summary.csv\n", cfg.out.c_str(),
                cfg.out.c_str());
    return kExitOk;
}

// ---- eval / exports / gradcheck ---------------------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& data) {
    Model model = load_checkpoint(checkpoint);
    HeatDataset ds = load_dataset(data);
    MetricReport r = evaluate(model, ds, ds.val_end, ds.test_end);
    std::printf("test_pct=%.4f test_mse=%.8g\n", r.pct_within_1, r.mse);
    if (!r.utilization.empty()) {
        std::printf("utilization:");
        for (size_t e = 0; e < r.utilization.size(); ++e)
            std::printf(" expert%zu=%lld", e, (long long)r.utilization[e]);
        std::printf("\n");
    }
    return kExitOk;
}

int cmd_export_routing(const std::string& checkpoint, const std::string& out,
                       const std::string& data) {
    Model model = load_checkpoint(checkpoint);
    if (model.kind != ModelKind::smoe)
        throw std::invalid_argument("export-routing needs a mixture checkpoint");
    RoutingRecord routing = top_e_select(*model.smoe.gate, model.smoe.e_select);
    std::string csv = out, pgm = out;
    if (out.size() > 4 && out.substr(out.size() - 4) == ".csv") pgm = out.substr(0, out.size() - 4) + ".pgm";
    else if (out.size() > 4 && out.substr(out.size() - 4) == ".pgm") csv = out.substr(0, out.size() - 4) + ".csv";
    else { csv = out + ".csv"; pgm = out + ".pgm"; }
    export_routing_csv(routing, csv);
    export_routing_pgm(routing, pgm);
    std::printf("routing map: %s, %s\n", csv.c_str(), pgm.c_str());
    if (!data.empty()) {
        HeatDataset ds = load_dataset(data);
        double agreement = routing_map_agreement(routing, ds.map);
        std::printf("region agreement (best assignment): %.4f\n", agreement);
    }
    return kExitOk;
}

int cmd_export_experts(const std::string& checkpoint, const std::string& out) {
    Model model = load_checkpoint(checkpoint);
    if (model.kind != ModelKind::smoe)
        throw std::invalid_argument("export-experts needs a mixture checkpoint");
    export_expert_kernels(model.smoe, out);
    std::printf("expert kernels: %s/expert_<e>.csv\n", out.c_str());
    return kExitOk;
}

int cmd_gradcheck(uint64_t seed) {
    std::vector<GradCheckReport> reports = run_gradcheck(seed);
    bool ok = true;
    for (const GradCheckReport& r : reports) {
        std::printf("%-24s max_rel_err=%.3g\n", r.component.c_str(), r.max_rel_err);
        ok = ok && r.max_rel_err < 1e-3;
    }
    std::printf("worst=%.3g -> %s\n", gradcheck_worst(reports), ok ? "pass" : "FAIL");
    return ok ? kExitOk : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spatial mixture-of-experts trainer for the heat-diffusion benchmark"};
    app.require_subcommand(1);

    GenArgs gen;
    CLI::App* sub_gen = app.add_subcommand("gen-data", "generate a heat-diffusion dataset");
    sub_gen->add_option("--preset", gen.preset, "reduced (32x32, 10k pairs) or paper (64x64, 100k pairs)");
    sub_gen->add_option("--seed", gen.seed, "generation seed");
    sub_gen->add_option("--out", gen.out, "output file path");
    sub_gen->add_option("--height", gen.height, "override grid height");
    sub_gen->add_option("--width", gen.width, "override grid width");
    sub_gen->add_option("--types", gen.types, "override region type count");
    sub_gen->add_option("--states", gen.states, "override initial-state count");
    sub_gen->add_option("--steps", gen.steps, "override timesteps per state");
    sub_gen->add_option("--drops", gen.drops, "heat drops per initial state");
    sub_gen->add_option("--magnitude", gen.magnitude, "heat drop magnitude");

    std::string cfg_path, data_path, out_dir;
    std::vector<std::string> sets, matrix_specs;
    std::string seeds_spec;
    CLI::App* sub_train = app.add_subcommand("train", "train a model and write checkpoint + history");
    sub_train->add_option("--config", cfg_path, "key = value config file");
    sub_train->add_option("--data", data_path, "dataset file");
    sub_train->add_option("--out", out_dir, "output directory");
    sub_train->add_option("--set", sets, "override a config key, e.g. --set rc_enabled=false");
    sub_train->add_option("--matrix", matrix_specs,
                          "ablation axis key=v1,v2 (repeatable; cartesian product)");
    sub_train->add_option("--seeds", seeds_spec, "comma-separated seeds for repeated runs");

    std::string eval_ck, eval_data;
    CLI::App* sub_eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    sub_eval->add_option("--checkpoint", eval_ck, "checkpoint file")->required();
    sub_eval->add_option("--data", eval_data, "dataset file")->required();

    std::string rt_ck, rt_out, rt_data;
    CLI::App* sub_rt = app.add_subcommand("export-routing", "write the routing map as CSV and PGM");
    sub_rt->add_option("--checkpoint", rt_ck, "checkpoint file")->required();
    sub_rt->add_option("--out", rt_out, "output path (.csv/.pgm suffix optional)")->required();
    sub_rt->add_option("--data", rt_data, "dataset file, prints region agreement when given");

    std::string ex_ck, ex_out;
    CLI::App* sub_ex = app.add_subcommand("export-experts", "write one kernel CSV per expert");
    sub_ex->add_option("--checkpoint", ex_ck, "checkpoint file")->required();
    sub_ex->add_option("--out", ex_out, "output directory")->required();

    uint64_t gc_seed = 7;
    CLI::App* sub_gc = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
    sub_gc->add_option("--seed", gc_seed, "instance seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (sub_gen->parsed()) return cmd_gen_data(gen);
        if (sub_train->parsed()) {
            RunConfig cfg;
            if (!cfg_path.empty()) load_config_file(cfg, cfg_path);
            for (const std::string& kv : sets) apply_set_override(cfg, kv);
            if (!data_path.empty()) cfg.data = data_path;
            if (!out_dir.empty()) cfg.out = out_dir;
            std::vector<MatrixAxis> matrix;
            for (const std::string& spec : matrix_specs) {
                size_t eq = spec.find('=');
                if (eq == std::string::npos)
                    throw std::invalid_argument("--matrix expects key=v1,v2, got '" + spec + "'");
                matrix.push_back({trim(spec.substr(0, eq)), split_commas(spec.substr(eq + 1))});
            }
            std::vector<uint64_t> seeds;
            if (!seeds_spec.empty())
                for (const std::string& s : split_commas(seeds_spec)) seeds.push_back(std::stoull(s));
            return cmd_train(std::move(cfg), matrix, std::move(seeds));
        }
        if (sub_eval->parsed()) return cmd_eval(eval_ck, eval_data);
        if (sub_rt->parsed()) return cmd_export_routing(rt_ck, rt_out, rt_data);
        if (sub_ex->parsed()) return cmd_export_experts(ex_ck, ex_out);
        if (sub_gc->parsed()) return cmd_gradcheck(gc_seed);
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kExitNumeric;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "data format error: %s\n", e.what());
        return kExitFormat;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return kExitOk;
}
