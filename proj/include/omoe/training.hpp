#pragma once

// Training loop: warmup + inverse-square-root schedule, Adam with global-norm
// clipping, per-step metrics, binary checkpoints, and batched evaluation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "omoe/data.hpp"
#include "omoe/model.hpp"

namespace omoe {

struct TrainConfig {
    std::size_t batch_size = 4;
    std::size_t seq_len = 64;
    std::size_t steps = 5000;
    double peak_lr = 0.01;
    std::size_t warmup_steps = 500;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
    std::uint64_t seed = 1;
    double clip_norm = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;

    void validate() const;
};

/// Linear warmup to peak_lr, then peak_lr * sqrt(warmup / step).
double lr_at(std::size_t step, const TrainConfig& cfg);

struct AdamState {
    std::size_t t = 0;
    ParameterStore m;
    ParameterStore v;
};

/// Scales grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_global_norm(ParameterStore& grads, double max_norm);

void adam_update(ParameterStore& params, const ParameterStore& grads, AdamState& state, double lr,
                 const TrainConfig& cfg);

// ---- checkpoints ---------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string config_json;
    std::size_t step = 0;
    ParameterStore params;
    AdamState optimizer;
};

/// "OMOE", u32 version, length-prefixed config JSON, u64 step, then parameter,
/// Adam m and Adam v tensor lists. Each tensor: name, dtype code (1 = f64),
/// rank, dims, little-endian payload.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- training ------------------------------------------------------------------

struct StepMetrics {
    std::size_t step = 0;
    double loss_ce = 0.0;
    double loss_b = 0.0;
    double loss_zr = 0.0;
    double loss_zl = 0.0;
    double acc = 0.0;
    double drop_frac = 0.0;
    double lr = 0.0;

    friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

struct TrainSession {
    Model model;
    AdamState optimizer;
    std::size_t step = 0;  // steps completed
};

TrainSession new_session(const ModelConfig& model_cfg, const TrainConfig& cfg);
TrainSession restore_session(const ModelConfig& model_cfg, const Checkpoint& ckpt);
Checkpoint make_checkpoint(const TrainSession& session, std::string config_json);

struct TrainData {
    const CorpusSet& corpora;
    const MixtureConfig& mixture;
};

/// Runs step session.step + 1. Throws NumericError (parameters untouched) when
/// a loss or gradient is not finite.
StepMetrics train_step(TrainSession& session, const TrainConfig& cfg, const TrainData& data);

struct TrainHooks {
    std::function<void(const StepMetrics&)> on_step;
    std::function<void(const TrainSession&)> on_checkpoint;
};

/// Steps until session.step == cfg.steps, calling on_checkpoint every
/// checkpoint_every steps and after the last step.
void train(TrainSession& session, const TrainConfig& cfg, const TrainData& data, const TrainHooks& hooks = {});

/// Append-only metrics CSV. Opening with resume_after = s keeps rows with
/// step <= s from an existing file and drops the rest.
class MetricsWriter {
public:
    static constexpr const char* kHeader = "step,loss_ce,loss_b,loss_zr,loss_zl,acc,drop_frac,lr";

    explicit MetricsWriter(const std::filesystem::path& path, std::optional<std::size_t> resume_after = {});
    void write(const StepMetrics& m);
    void flush();

private:
    std::ofstream out_;
};

std::string format_metrics_row(const StepMetrics& m);
std::vector<StepMetrics> read_metrics(const std::filesystem::path& path);

// ---- evaluation ----------------------------------------------------------------

struct EvalResult {
    AccuracyStats accuracy;
    RoutingTrace trace;  // every MoE layer, in forward order
    std::size_t routed_assignments = 0;
    std::size_t dropped_assignments = 0;
};

/// Forward-only pass over examples in batches; sequence ids are example indices.
EvalResult evaluate(const Model& model, std::span<const TrainingExample> examples, std::size_t seq_len,
                    std::size_t batch_size, const ForwardOptions& options = {});

}  // namespace omoe
