#include "smoe/heatgen.hpp"

#include <cmath>
#include <cstring>
#include <utility>

#include "smoe/container_io.hpp"

namespace smoe {

namespace {

constexpr char kMagic[4] = {'S', 'M', 'H', 'D'};
constexpr uint32_t kVersion = 1;
constexpr int kMaxTypes = 16;

void write_header(HashedWriter& w, const RegionMap& map, int64_t n_pairs, int64_t train_end,
                  int64_t val_end, int64_t test_end) {
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(uint32_t(map.height));
    w.u32(uint32_t(map.width));
    w.u32(uint32_t(map.num_types()));
    for (float a : map.diffusivities) w.f32(a);
    w.bytes(map.grid.data(), map.grid.size());
    w.u64(uint64_t(n_pairs));
    w.u64(uint64_t(train_end));
    w.u64(uint64_t(val_end));
    w.u64(uint64_t(test_end));
}

void check_map_args(int height, int width, int num_types) {
    if (height < 8 || width < 8) throw std::invalid_argument("region map must be at least 8x8");
    if (num_types < 1 || num_types > kMaxTypes)
        throw std::invalid_argument("num_types must be in [1, " + std::to_string(kMaxTypes) + "]");
    if (int64_t(num_types) > int64_t(height) * width)
        throw std::invalid_argument("more region types than cells");
}

struct SplitEnds {
    int64_t train, val, test;
};

// 80/10/10 by initial state, floored, remainder to test; pairs of one
// trajectory are contiguous so the split never cuts a trajectory.
SplitEnds split_by_state(int n_initial_states, int n_timesteps) {
    int n_train = n_initial_states * 8 / 10;
    int n_val = n_initial_states / 10;
    SplitEnds s;
    s.train = int64_t(n_train) * n_timesteps;
    s.val = int64_t(n_train + n_val) * n_timesteps;
    s.test = int64_t(n_initial_states) * n_timesteps;
    return s;
}

}  // namespace

Tensor HeatDataset::input_tensor(int64_t pair) const {
    Tensor t(1, 1, map.height, map.width);
    std::memcpy(t.data(), input_at(pair), sizeof(float) * size_t(cell_count()));
    return t;
}

Tensor HeatDataset::target_tensor(int64_t pair) const {
    Tensor t(1, 1, map.height, map.width);
    std::memcpy(t.data(), target_at(pair), sizeof(float) * size_t(cell_count()));
    return t;
}

std::vector<float> default_diffusivities(int num_types) {
    std::vector<float> out(size_t(num_types), 0.0f);
    // Decades computed in double so each entry rounds from the exact value
    // (0.25, 0.025, ...) instead of compounding real32 error.
    double a = 0.25;
    for (int t = 0; t < num_types; ++t) {
        out[size_t(t)] = float(a);
        a *= 0.1;
    }
    return out;
}

RegionMap generate_region_map(int height, int width, int num_types, Rng& rng,
                              const std::vector<float>& diffusivities) {
    check_map_args(height, width, num_types);
    std::vector<float> alphas = diffusivities.empty() ? default_diffusivities(num_types) : diffusivities;
    if (int(alphas.size()) != num_types)
        throw std::invalid_argument("diffusivity table size does not match num_types");
    for (float a : alphas)
        if (!(a > 0.0f && a <= 0.25f))
            throw std::invalid_argument("diffusivities must lie in (0, 0.25] for stability");

    RegionMap map;
    map.height = height;
    map.width = width;
    map.diffusivities = std::move(alphas);

    constexpr uint8_t kUnassigned = 255;
    int64_t cells = int64_t(height) * width;
    map.grid.assign(size_t(cells), kUnassigned);

    // Frontier as (assigned cell -> unassigned neighbor) edges with lazy
    // deletion: stale entries are skipped, so each draw is uniform over the
    // live frontier pairs.
    std::vector<std::pair<int32_t, int32_t>> edges;
    int64_t unassigned = cells;

    auto push_edges = [&](int32_t cell) {
        int i = int(cell / width), j = int(cell % width);
        const int di[4] = {-1, 1, 0, 0};
        const int dj[4] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
            int ni = i + di[d], nj = j + dj[d];
            if (ni < 0 || ni >= height || nj < 0 || nj >= width) continue;
            int32_t ncell = int32_t(ni) * width + nj;
            if (map.grid[size_t(ncell)] == kUnassigned) edges.emplace_back(cell, ncell);
        }
    };

    for (int t = 0; t < num_types; ++t) {
        int32_t cell;
        do {
            cell = int32_t(rng.uniform_int(cells));
        } while (map.grid[size_t(cell)] != kUnassigned);
        map.grid[size_t(cell)] = uint8_t(t);
        --unassigned;
    }
    for (int64_t c = 0; c < cells; ++c)
        if (map.grid[size_t(c)] != kUnassigned) push_edges(int32_t(c));

    while (unassigned > 0) {
        if (edges.empty()) throw std::logic_error("frontier exhausted before grid filled");
        size_t k = size_t(rng.uniform_int(int64_t(edges.size())));
        auto [from, to] = edges[k];
        edges[k] = edges.back();
        edges.pop_back();
        if (map.grid[size_t(to)] != kUnassigned) continue;
        map.grid[size_t(to)] = map.grid[size_t(from)];
        --unassigned;
        push_edges(to);
    }
    return map;
}

Tensor diffusion_step(const Tensor& state, const RegionMap& map) {
    if (state.channels() != 1 || state.height() != map.height || state.width() != map.width)
        throw std::invalid_argument("diffusion_step: state does not match region map");
    Tensor out(state.batch(), 1, map.height, map.width);
    for (int n = 0; n < state.batch(); ++n) {
        for (int i = 0; i < map.height; ++i) {
            for (int j = 0; j < map.width; ++j) {
                double s = state.at(n, 0, i, j);
                double nb = 0.0;
                if (i > 0) nb += state.at(n, 0, i - 1, j);
                if (i + 1 < map.height) nb += state.at(n, 0, i + 1, j);
                if (j > 0) nb += state.at(n, 0, i, j - 1);
                if (j + 1 < map.width) nb += state.at(n, 0, i, j + 1);
                out.at(n, 0, i, j) = float(s + double(map.alpha_at(i, j)) * (nb - 4.0 * s));
            }
        }
    }
    return out;
}

void simulate_trajectories(const RegionMap& map, int n_initial_states, int n_timesteps,
                           const DropConfig& drop_cfg, Rng& rng,
                           const std::function<void(const Tensor&, const Tensor&)>& sink) {
    if (n_initial_states < 1 || n_timesteps < 1)
        throw std::invalid_argument("need at least one initial state and one timestep");
    int64_t cells = int64_t(map.height) * map.width;
    if (drop_cfg.count < 1 || int64_t(drop_cfg.count) > cells)
        throw std::invalid_argument("drop count must be in [1, cells]");
    if (!(drop_cfg.magnitude > 0.0f)) throw std::invalid_argument("drop magnitude must be positive");

    for (int s = 0; s < n_initial_states; ++s) {
        // Forked stream per trajectory: order-independent and parallel-safe.
        Rng traj_rng = rng.fork(uint64_t(s));
        Tensor state(1, 1, map.height, map.width);
        for (int d = 0; d < drop_cfg.count; ++d) {
            int64_t cell;
            do {
                cell = traj_rng.uniform_int(cells);
            } while (state[size_t(cell)] != 0.0f);
            state[size_t(cell)] = drop_cfg.magnitude;
        }
        for (int t = 0; t < n_timesteps; ++t) {
            Tensor next = diffusion_step(state, map);
            sink(state, next);
            state = std::move(next);
        }
    }
}

HeatDataset generate_dataset(const RegionMap& map, int n_initial_states, int n_timesteps, Rng& rng,
                             const DropConfig& drop_cfg) {
    HeatDataset ds;
    ds.map = map;
    int64_t cells = ds.cell_count();
    ds.n_pairs = int64_t(n_initial_states) * n_timesteps;
    ds.inputs.reserve(size_t(ds.n_pairs * cells));
    ds.targets.reserve(size_t(ds.n_pairs * cells));
    simulate_trajectories(map, n_initial_states, n_timesteps, drop_cfg, rng,
                          [&](const Tensor& input, const Tensor& target) {
                              ds.inputs.insert(ds.inputs.end(), input.data(), input.data() + cells);
                              ds.targets.insert(ds.targets.end(), target.data(), target.data() + cells);
                          });
    SplitEnds ends = split_by_state(n_initial_states, n_timesteps);
    ds.train_end = ends.train;
    ds.val_end = ends.val;
    ds.test_end = ends.test;
    return ds;
}

void save_dataset(const HeatDataset& ds, const std::string& path) {
    HashedWriter w(path);
    write_header(w, ds.map, ds.n_pairs, ds.train_end, ds.val_end, ds.test_end);
    int64_t cells = ds.cell_count();
    for (int64_t p = 0; p < ds.n_pairs; ++p) {
        w.bytes(ds.input_at(p), sizeof(float) * size_t(cells));
        w.bytes(ds.target_at(p), sizeof(float) * size_t(cells));
    }
    w.finish();
}

void generate_and_save(const RegionMap& map, int n_initial_states, int n_timesteps,
                       const DropConfig& drop_cfg, Rng& rng, const std::string& path) {
    HashedWriter w(path);
    int64_t n_pairs = int64_t(n_initial_states) * n_timesteps;
    SplitEnds ends = split_by_state(n_initial_states, n_timesteps);
    write_header(w, map, n_pairs, ends.train, ends.val, ends.test);
    int64_t cells = int64_t(map.height) * map.width;
    simulate_trajectories(map, n_initial_states, n_timesteps, drop_cfg, rng,
                          [&](const Tensor& input, const Tensor& target) {
                              w.bytes(input.data(), sizeof(float) * size_t(cells));
                              w.bytes(target.data(), sizeof(float) * size_t(cells));
                          });
    w.finish();
}

HeatDataset load_dataset(const std::string& path) {
    HashedReader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic, not a dataset file", 0);
    if (uint32_t v = r.u32(); v != kVersion)
        throw FormatError("unsupported version " + std::to_string(v), 4);

    HeatDataset ds;
    int64_t at = r.offset;
    uint32_t h = r.u32(), w = r.u32(), num_types = r.u32();
    if (h < 1 || w < 1 || h > 1u << 20 || w > 1u << 20)
        throw FormatError("implausible grid dimensions", at);
    if (num_types < 1 || num_types > kMaxTypes) throw FormatError("implausible type count", at + 8);
    ds.map.height = int(h);
    ds.map.width = int(w);
    ds.map.diffusivities.resize(num_types);
    r.bytes(ds.map.diffusivities.data(), sizeof(float) * num_types);
    int64_t cells = int64_t(h) * w;
    ds.map.grid.resize(size_t(cells));
    at = r.offset;
    r.bytes(ds.map.grid.data(), size_t(cells));
    for (int64_t c = 0; c < cells; ++c)
        if (ds.map.grid[size_t(c)] >= num_types)
            throw FormatError("grid cell references unknown region type", at + c);

    at = r.offset;
    uint64_t n_pairs = r.u64();
    if (n_pairs > uint64_t(1) << 32) throw FormatError("implausible pair count", at);
    ds.n_pairs = int64_t(n_pairs);
    at = r.offset;
    ds.train_end = int64_t(r.u64());
    ds.val_end = int64_t(r.u64());
    ds.test_end = int64_t(r.u64());
    if (ds.train_end < 0 || ds.train_end > ds.val_end || ds.val_end > ds.test_end ||
        ds.test_end != ds.n_pairs)
        throw FormatError("split boundaries are not monotone end indices over the pairs", at);

    ds.inputs.resize(size_t(ds.n_pairs * cells));
    ds.targets.resize(size_t(ds.n_pairs * cells));
    for (int64_t p = 0; p < ds.n_pairs; ++p) {
        r.bytes(ds.inputs.data() + p * cells, sizeof(float) * size_t(cells));
        r.bytes(ds.targets.data() + p * cells, sizeof(float) * size_t(cells));
    }
    r.verify_trailing_digest();
    return ds;
}

}  // namespace smoe
