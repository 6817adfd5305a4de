#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "prism/backbone.hpp"
#include "prism/config.hpp"

namespace prism {

struct BenchmarkSpec;
struct ReplayBuffer;

enum class Mode { train, eval };

struct MethodContext {
    const Config& config;
    int num_tasks = 1;
    std::uint64_t seed = 0;
    const BenchmarkSpec* benchmark = nullptr;  // lets replay state resolve stored sample ids
};

/// Lifecycle every continual-learning method implements. The trainer calls
/// the hooks in order; methods own adapters, prompts and routing state but
/// never touch the backbone's frozen weights.
class Method {
public:
    virtual ~Method() = default;

    virtual std::string name() const = 0;
    virtual bool trains() const { return true; }
    virtual bool needs_checkpoint() const { return true; }

    virtual void build(Backbone& backbone, const MethodContext& context) = 0;

    virtual void on_task_start(int task_index, std::span<const MultimodalSample> task_data);
    virtual std::vector<MultimodalSample> train_batch_transform(std::vector<MultimodalSample> batch) { return batch; }
    virtual ForwardPlan forward_policy(const MultimodalSample& sample, Mode mode) = 0;
    /// Method-specific loss on a micro-batch; accumulates grad_scale * d(loss).
    virtual double auxiliary_loss(std::span<const MultimodalSample> batch, double grad_scale);
    /// Last chance to edit gradients before the optimizer step.
    virtual void on_gradients() {}
    virtual void on_step_end(int step, int total_steps);
    virtual void on_task_end(int task_index, std::span<const MultimodalSample> task_data);

    /// Tensors the optimizer may update (frozen entries are skipped).
    virtual std::vector<Param*> trainable_params() = 0;

    virtual json serialize() const = 0;
    virtual void deserialize(const json& doc) = 0;

    virtual const ReplayBuffer* replay_buffer() const { return nullptr; }

    int current_task() const { return current_task_; }
    int learned_tasks() const { return learned_tasks_; }
    /// Warnings raised by hooks since the last call.
    std::vector<std::string> take_warnings();

protected:
    void warn(std::string message) { warnings_.push_back(std::move(message)); }

    Backbone* backbone_ = nullptr;
    int num_tasks_ = 1;
    int current_task_ = -1;
    int learned_tasks_ = 0;
    std::vector<std::string> warnings_;
};

using MethodPtr = std::unique_ptr<Method>;

}  // namespace prism
