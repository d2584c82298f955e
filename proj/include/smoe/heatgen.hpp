#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "smoe/rng.hpp"
#include "smoe/tensor.hpp"

namespace smoe {

// Raised on malformed dataset/checkpoint files; carries the byte offset of
// the first inconsistency.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, int64_t offset)
        : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    int64_t offset() const { return offset_; }

private:
    int64_t offset_;
};

// Per-cell region-type grid plus the diffusivity assigned to each type.
// This is the hidden location structure a model has to discover.
struct RegionMap {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> grid;          // height*width type ids, row-major
    std::vector<float> diffusivities;   // indexed by type id, each in (0, 0.25]
    uint64_t seed = 0;                  // generation provenance, not persisted

    int num_types() const { return int(diffusivities.size()); }
    uint8_t type_at(int i, int j) const { return grid[size_t(i) * width + j]; }
    float alpha_at(int i, int j) const { return diffusivities[type_at(i, j)]; }
};

struct DropConfig {
    int count = 10;
    float magnitude = 1.0f;
};

struct HeatDataset {
    RegionMap map;
    int64_t n_pairs = 0;
    std::vector<float> inputs;   // n_pairs * H * W
    std::vector<float> targets;  // n_pairs * H * W
    // Split boundaries as end indices into the pair list: [0, train_end) is
    // train, [train_end, val_end) validation, [val_end, test_end) test.
    int64_t train_end = 0;
    int64_t val_end = 0;
    int64_t test_end = 0;

    int64_t cell_count() const { return int64_t(map.height) * map.width; }
    const float* input_at(int64_t pair) const { return inputs.data() + pair * cell_count(); }
    const float* target_at(int64_t pair) const { return targets.data() + pair * cell_count(); }
    Tensor input_tensor(int64_t pair) const;
    Tensor target_tensor(int64_t pair) const;
};

// 0.25, 0.025, 0.0025, ... one decade apart, all within the explicit
// stability bound.
std::vector<float> default_diffusivities(int num_types);

// Grows one connected region per type from a random seed cell, attaching a
// uniformly random (assigned, unassigned-neighbor) frontier pair each step,
// so growth rate is proportional to region boundary length.
RegionMap generate_region_map(int height, int width, int num_types, Rng& rng,
                              const std::vector<float>& diffusivities = {});

// One explicit five-point diffusion step with zero boundary conditions:
// out = s + alpha(i,j) * (four-neighbor sum - 4 s).
Tensor diffusion_step(const Tensor& state, const RegionMap& map);

// Streams every (state_t, state_{t+1}) pair of every trajectory to the sink.
// Each trajectory starts from drop_cfg.count heat drops at distinct cells.
void simulate_trajectories(const RegionMap& map, int n_initial_states, int n_timesteps,
                           const DropConfig& drop_cfg, Rng& rng,
                           const std::function<void(const Tensor& input, const Tensor& target)>& sink);

// In-memory dataset with an 80/10/10 split by initial state.
HeatDataset generate_dataset(const RegionMap& map, int n_initial_states, int n_timesteps, Rng& rng,
                             const DropConfig& drop_cfg = {});

// Binary container, little-endian (documented in the README):
//   "SMHD" | u32 version=1 | u32 H | u32 W | u32 num_types
//   | f32 diffusivities[num_types] | u8 grid[H*W]
//   | u64 n_pairs | u64 split_end[3]
//   | n_pairs * (f32 input[H*W], f32 target[H*W])
//   | u64 XXH64(seed 0) of all preceding bytes
void save_dataset(const HeatDataset& ds, const std::string& path);
HeatDataset load_dataset(const std::string& path);

// Streaming variant of generate_dataset + save_dataset; holds one trajectory
// in memory at a time, so the large preset does not need GBs of RAM.
void generate_and_save(const RegionMap& map, int n_initial_states, int n_timesteps,
                       const DropConfig& drop_cfg, Rng& rng, const std::string& path);

}  // namespace smoe
