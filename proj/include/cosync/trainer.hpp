#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cosync/config.hpp"
#include "cosync/data_io.hpp"
#include "cosync/flow.hpp"
#include "cosync/metrics.hpp"
#include "cosync/model.hpp"

namespace cosync::train {

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double eps = 1e-8;
    int steps = 1000;
    int batch_size = 8;
    double p_drop_text = 0.1;
    double p_drop_all = 0.1;
    double w_cl = 1.0;
    double w_ctc = 1.0;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // 0: only the final checkpoint
    int warmup_steps = 500;
    bool region_loss = true;  // false: supervise the whole sequence

    void validate() const;
    static TrainConfig read(KeyValueReader& reader);
    KeyValues to_key_values() const;
    // Equal in everything that shapes the trajectory (ignores steps and checkpoint_every).
    bool same_trajectory(const TrainConfig& other) const;
    bool operator==(const TrainConfig&) const = default;
};

struct LossReport {
    int step = 0;
    double l_fm = 0.0;
    std::optional<double> l_cl;
    std::optional<double> l_ctc;
    double total = 0.0;
    std::string branch;  // per-branch sample counts of the batch

    bool operator==(const LossReport&) const = default;
};

struct AdamState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
};

struct TrainState {
    int step = 0;
    AdamState adam;
    nn::Rng rng;
    std::vector<LossReport> history;

    static TrainState fresh(const nn::ParameterStore& params, const TrainConfig& cfg);
};

/// u < p_all: unconditional; u < p_all + p_text: acoustic only; else full.
flow::ConditionBranch draw_branch(double u, double p_drop_text, double p_drop_all);

// Linear warmup over the first `warmup_steps` updates (1-based step).
double learning_rate(const TrainConfig& cfg, int step);

/// One decoupled-weight-decay Adam update; parameters without a gradient
/// are treated as having a zero gradient.
void adamw_update(nn::ParameterStore& params, AdamState& adam, const TrainConfig& cfg, int step);

class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(std::string utt_id, const std::string& msg) : std::runtime_error(msg), utt_id_(std::move(utt_id)) {}
    const std::string& utt_id() const { return utt_id_; }

private:
    std::string utt_id_;
};

/// Draws a batch from `corpus`, accumulates the batch objective
///   mean_B l_fm + w_cl mean_full l_cl + w_ctc mean_full l_ctc
/// and applies one optimizer update. Appends the report to the history.
LossReport train_step(CoSyncModel& model, TrainState& state, const TrainConfig& cfg,
                      const std::vector<data::UtteranceRecord>& corpus);

// ---- checkpoints ----------------------------------------------------------

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { Io, Format, Version, Mismatch };
    CheckpointError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig model;
    TrainConfig train;
    TrainState state;
    std::vector<std::pair<std::string, Matrix>> params;
};

void save_checkpoint(const std::filesystem::path& path, const CoSyncModel& model, const TrainConfig& cfg,
                     const TrainState& state);
// Parses and verifies the whole file before returning anything.
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Copies checkpoint parameters into `model`; names and shapes must match exactly.
void restore_parameters(CoSyncModel& model, const Checkpoint& ckpt);
std::unique_ptr<CoSyncModel> model_from_checkpoint(const Checkpoint& ckpt);

// ---- logging --------------------------------------------------------------

inline constexpr const char* kLossCsvHeader = "step,l_fm,l_cl,l_ctc,total,branch";
std::string format_loss_row(const LossReport& r);
void write_loss_csv(std::ostream& out, const std::vector<LossReport>& history);

struct RunOptions {
    std::filesystem::path out_dir;
    std::function<void(const LossReport&)> on_step;
};

/// Trains from `state.step` up to `cfg.steps`, writing loss.csv (rewritten
/// from history, then appended), ckpt_<step>.ckpt every `checkpoint_every`
/// steps and final.ckpt at the end.
void run_training(CoSyncModel& model, TrainState& state, const TrainConfig& cfg,
                  const std::vector<data::UtteranceRecord>& corpus, const RunOptions& options);

// ---- evaluation -----------------------------------------------------------

/// Flow loss on each record's target span, full condition, with `draws`
/// fixed (t, x0) pairs per record derived from `seed`.
double eval_flow_loss(const CoSyncModel& model, const std::vector<data::UtteranceRecord>& corpus,
                      std::uint64_t seed, int draws = 4);

// Seeded noise for sampling record `index` of an evaluation.
Matrix eval_noise(const data::UtteranceRecord& record, std::size_t index, std::uint64_t seed);

/// Samples every record's target span at each NFE (no guidance) and scores
/// it against the ground truth.
std::vector<metrics::EvalRow> evaluate(const CoSyncModel& model, const std::vector<data::UtteranceRecord>& corpus,
                                       const std::vector<int>& nfes, std::uint64_t seed,
                                       const flow::GuidanceSpec& guidance = {});

struct ProbeReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<metrics::EvalRow> untrained;
    std::vector<metrics::EvalRow> trained;
    std::vector<LossReport> history;
    double seconds = 0.0;
    Eigen::Index parameter_count = 0;
};

double mean_metric(const std::vector<metrics::EvalRow>& rows, int nfe, double metrics::EvalRow::*field);

ProbeReport overfit_probe(const std::vector<data::UtteranceRecord>& corpus, const ModelConfig& model_cfg,
                          const TrainConfig& train_cfg, const std::vector<int>& nfes = {8, 16, 32});

}  // namespace cosync::train
