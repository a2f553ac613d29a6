#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "strokekit/augment.hpp"
#include "strokekit/criterion.hpp"
#include "strokekit/dataset.hpp"
#include "strokekit/network.hpp"

namespace strokekit {

struct AdamWConfig {
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Gradients for one update, one buffer per parameter in ParamStore item order.
using GradVec = std::vector<std::vector<double>>;

GradVec grad_zeros(const nn::ParamStore<double>& params);

// First and second moments aligned with the ParamStore item order; step
// counts completed updates.
struct OptimState {
    std::vector<std::vector<double>> m, v;
    std::int64_t step = 0;
};

OptimState optim_init(const nn::ParamStore<double>& params);

// One decoupled-decay update: parameters first shrink by lr * weight_decay,
// then take the bias-corrected adaptive step. Returns false, with
// parameters, moments and step count untouched, when any gradient entry is
// non-finite.
bool optimizer_step(nn::ParamStore<double>& params, const GradVec& grads, OptimState& st,
                    const AdamWConfig& cfg, double lr);

// Cyclical triangular schedule: within each cycle the rate climbs linearly
// from lr_min to the cycle's decayed peak lr_max * gamma^cycle at the cycle
// midpoint and falls back symmetrically.
struct LrSchedule {
    double lr_min = 1e-6;
    double lr_max = 1e-2;
    int cycle_epochs = 10;
    double gamma = 0.92;
};

double lr_at(int epoch, const LrSchedule& s);

// Scales all buffers so the global L2 norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(GradVec& grads, double max_norm);

// Running mean of parameter snapshots, ParamStore item order.
struct SwaState {
    std::vector<std::vector<double>> avg;
    std::int64_t count = 0;
};

void swa_update(SwaState& st, const nn::ParamStore<double>& params);

// Writes the running average into the parameters. Group-normalized networks
// need no statistics recalibration afterwards. ContractError when no
// snapshot was ever taken.
void swa_apply(const SwaState& st, nn::ParamStore<double>& params);

struct TrainState {
    std::int64_t epochs_done = 0;
    OptimState opt;
    SwaState swa;
    double best_val = std::numeric_limits<double>::infinity();
};

struct TrainConfig {
    ModelConfig model;
    AugmentConfig augment;
    bool augment_enabled = true;
    LossWeights loss_weights; // used verbatim when rlw is off
    bool rlw = true;
    MatchCosts match_costs;
    bool literal_quantile = false;
    AdamWConfig optimizer;
    LrSchedule schedule;
    double clip_norm = 0.1;
    int swa_last_cycles = 5;
    int epochs = 30;
    int batch_size = 8;
    int threads = 1;
    int val_interval = 5;
    std::uint64_t seed = 0;

    void validate() const;
};

// Hash over every semantic field; checkpoints refuse to load under a
// different value.
std::uint64_t train_config_hash(const TrainConfig& cfg);

// Text manifest (name, shape, dtype, offset per tensor) over a raw
// little-endian f64 payload; carries parameters, optimizer moments, the SWA
// average and the training counters. load_checkpoint raises LoadError for a
// damaged file and ConfigError when the hash or any shape disagrees with
// the receiving model.
void save_checkpoint(const std::string& path, const nn::ParamStore<double>& params,
                     const TrainState& state, std::uint64_t config_hash);
void load_checkpoint(const std::string& path, nn::ParamStore<double>& params, TrainState& state,
                     std::uint64_t config_hash);

struct EpochRecord {
    int epoch = 0;
    double loss = 0; // mean over the epoch's optimization steps
    double lr = 0;
    int steps = 0;
    int skipped = 0; // steps abandoned on non-finite loss or gradients
    std::optional<double> val_loss;
    TermReport terms; // unweighted term means over the epoch
};

struct TrainResult {
    std::vector<EpochRecord> history;
    bool diverged = false;
    std::string last_path, best_path, swa_path, diverged_path;
};

// Runs epochs state.epochs_done .. cfg.epochs - 1 on the records whose split
// is not "test", validating on the "test" records. Per-step log lines go to
// `log` when given. Leaves the model holding the SWA average whenever at
// least one snapshot was taken; checkpoints (last / best / swa) are written
// under out_dir unless it is empty. Three consecutive non-finite steps
// abort with a diagnostic checkpoint and diverged = true.
TrainResult train(Model<double>& model, TrainState& state, const TrainConfig& cfg,
                  const std::vector<DatasetRecord>& data, const std::string& out_dir,
                  std::ostream* log = nullptr);

} // namespace strokekit
