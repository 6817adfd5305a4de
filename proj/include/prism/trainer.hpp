#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "prism/benchmarks.hpp"
#include "prism/evaluation.hpp"
#include "prism/methods/method.hpp"

namespace prism {

struct TrainConfig {
    double lr = 2e-4;
    double projector_lr = 2e-5;
    double warmup_ratio = 0.03;
    double weight_decay = 0.0;
    int epochs = 1;
    int batch_size = 8;
    int grad_accum_steps = 1;
    std::uint64_t seed = 0;
    double max_grad_norm = 0.0;  // 0 disables clipping

    void validate() const;
    static TrainConfig from_config(const Config& config);
};

int warmup_steps(int total_steps, double warmup_ratio);

/// Linear warmup to `peak`, then cosine decay to zero at total_steps.
double lr_at(int step, int total_steps, double peak, double warmup_ratio);
double lr_at(int step, int total_steps, const TrainConfig& config);

/// Decoupled-weight-decay Adam over two groups (adapters at lr, projector at
/// projector_lr). Frozen tensors are skipped.
class AdamW {
public:
    AdamW(std::vector<Param*> adapter_group, std::vector<Param*> projector_group, const TrainConfig& config);

    /// Applies one update with each group's learning rate multiplied by `lr_scale`.
    void step(double lr_scale);
    int steps_taken() const { return t_; }
    const std::vector<Param*>& adapter_group() const { return adapter_; }
    const std::vector<Param*>& projector_group() const { return projector_; }

private:
    void update(std::vector<Param*>& group, std::vector<Matrix>& m, std::vector<Matrix>& v, double lr);

    std::vector<Param*> adapter_, projector_;
    std::vector<Matrix> m_a_, v_a_, m_p_, v_p_;
    TrainConfig config_;
    int t_ = 0;
};

/// Clips the global gradient norm; returns the norm before clipping.
double clip_grad_norm(const std::vector<Param*>& params, double max_norm);

struct StepRecord {
    int step = 0;
    double loss = 0.0;
    double aux_loss = 0.0;
    double lr = 0.0;
    int batch_samples = 0;
};

/// Drives one method through a benchmark's stages inside a run directory
/// `<out>/<benchmark>/<method>/`.
class Trainer {
public:
    Trainer(const Config& config, const BenchmarkSpec& spec, Method& method, Backbone& backbone,
            std::filesystem::path run_dir);

    const std::filesystem::path& run_dir() const { return run_dir_; }
    std::filesystem::path task_dir(int task_index) const;

    /// Trains one task and writes its checkpoint; returns the checkpoint path.
    std::filesystem::path train_task(int task_index);
    /// Per-step records of the most recent train_task call.
    const std::vector<StepRecord>& last_log() const { return log_; }

    /// Scores every task t <= stage_index; writes predictions and the row
    /// under `out_dir` (the stage's task directory by default).
    std::vector<double> evaluate_stage(int stage_index, const std::filesystem::path& out_dir = {});

    std::filesystem::path save_checkpoint(int task_index);
    void load_checkpoint(const std::filesystem::path& path);

private:
    const Config& config_;
    const BenchmarkSpec& spec_;
    Method& method_;
    Backbone& backbone_;
    TrainConfig train_;
    std::filesystem::path run_dir_;
    std::vector<StepRecord> log_;
};

/// Stable hash of a resolved configuration.
std::string config_hash(const Config& config);

/// Highest task index k >= min_task with a checkpoint under run_dir, or -1.
int latest_checkpoint(const std::filesystem::path& run_dir, int min_task, int max_task);

}  // namespace prism
