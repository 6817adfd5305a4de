#pragma once

#include <deque>
#include <map>
#include <optional>

#include "prism/methods/method.hpp"
#include "prism/methods/replay.hpp"
#include "prism/methods/routing.hpp"
#include "prism/methods/spectral.hpp"
#include "prism/peft.hpp"

namespace prism {

/// The frozen backbone, evaluated as-is.
class ZeroShot : public Method {
public:
    std::string name() const override { return "zeroshot"; }
    bool trains() const override { return false; }
    bool needs_checkpoint() const override { return false; }
    void build(Backbone& backbone, const MethodContext& context) override;
    void on_task_start(int task_index, std::span<const MultimodalSample> task_data) override;
    ForwardPlan forward_policy(const MultimodalSample& sample, Mode mode) override;
    std::vector<Param*> trainable_params() override { return {}; }
    json serialize() const override { return json::object(); }
    void deserialize(const json&) override {}
};

/// Common state of LoRA-bank methods: one bank, dropout stream, task counter.
class AdapterMethod : public Method {
public:
    void build(Backbone& backbone, const MethodContext& context) override;
    void on_task_start(int task_index, std::span<const MultimodalSample> task_data) override;
    void on_task_end(int task_index, std::span<const MultimodalSample> task_data) override;
    ForwardPlan forward_policy(const MultimodalSample& sample, Mode mode) override;
    std::vector<Param*> trainable_params() override { return bank_.params(); }
    json serialize() const override;
    void deserialize(const json& doc) override;

    AdapterBank& bank() { return bank_; }
    const LoRAConfig& lora() const { return lora_; }

protected:
    /// Targets, expert count and routers of the bank.
    virtual void setup_bank(const MethodContext& context) = 0;
    virtual json extra_state() const { return json::object(); }
    virtual void load_extra_state(const json&) {}
    ForwardPlan base_plan(Mode mode);

    LoRAConfig lora_;
    AdapterBank bank_;
    Rng init_rng_;
    Rng dropout_rng_;
    std::uint64_t seed_ = 0;
};

/// One LoRA adapter per injection point, trained sequentially.
class FtLora : public AdapterMethod {
public:
    std::string name() const override { return "ftlora"; }

protected:
    void setup_bank(const MethodContext& context) override;
};

/// Stored-sample replay mixed into every training batch.
class ReplayState {
public:
    void configure(const Config& config, std::uint64_t seed, int num_tasks, const BenchmarkSpec* benchmark);
    /// Reseeds the mixing stream for a task.
    void begin_task(int task_index);
    std::vector<MultimodalSample> mix(std::vector<MultimodalSample> batch, int current_task);
    void store(int task_index, std::span<const MultimodalSample> task_data);
    const ReplayBuffer& buffer() const { return buffer_; }
    json to_json() const;
    void load(const json& doc);

private:
    ReplayBuffer buffer_;
    Rng rng_;
    std::uint64_t seed_ = 0;
    int num_tasks_ = 1;
    const BenchmarkSpec* benchmark_ = nullptr;
};

class ReplayLora : public FtLora {
public:
    std::string name() const override { return "replay"; }
    void build(Backbone& backbone, const MethodContext& context) override;
    void on_task_start(int task_index, std::span<const MultimodalSample> task_data) override;
    std::vector<MultimodalSample> train_batch_transform(std::vector<MultimodalSample> batch) override;
    void on_task_end(int task_index, std::span<const MultimodalSample> task_data) override;
    const ReplayBuffer* replay_buffer() const override { return &replay_.buffer(); }

protected:
    json extra_state() const override { return {{"replay", replay_.to_json()}}; }
    void load_extra_state(const json& doc) override;

    ReplayState replay_;
};

/// FFN experts blended by a soft router over the pooled instruction.
class MoELora : public AdapterMethod {
public:
    std::string name() const override { return "moelora"; }
    ForwardPlan forward_policy(const MultimodalSample& sample, Mode mode) override;

protected:
    void setup_bank(const MethodContext& context) override;
};

/// Per-task experts on every point; anchor matching picks the final-layer expert.
class HiDe : public AdapterMethod {
public:
    std::string name() const override { return "hide"; }
    void on_task_start(int task_index, std::span<const MultimodalSample> task_data) override;
    void on_task_end(int task_index, std::span<const MultimodalSample> task_data) override;
    ForwardPlan forward_policy(const MultimodalSample& sample, Mode mode) override;

    const AnchorStore& anchors() const { return anchors_; }
    /// Per-layer expert weights for a given predicted task at inference.
    std::vector<ExpertMix> inference_mix(int predicted_task) const;

protected:
    void setup_bank(const MethodContext& context) override;
    json extra_state() const override { return {{"anchors", anchors_.to_json()}}; }
    void load_extra_state(const json& doc) override { anchors_ = AnchorStore::from_json(doc.at("anchors")); }

    AnchorStore anchors_;
};

/// Per-token routers over task experts, conditioned on a task embedding, plus replay.
class ClMoE : public AdapterMethod {
public:
    std::string name() const override { return "clmoe"; }
    void build(Backbone& backbone, const MethodContext& context) override;
    void on_task_start(int task_index, std::span<const MultimodalSample> task_data) override;
    std::vector<MultimodalSample> train_batch_transform(std::vector<MultimodalSample> batch) override;
    void on_task_end(int task_index, std::span<const MultimodalSample> task_data) override;
    ForwardPlan forward_policy(const MultimodalSample& sample, Mode mode) override;
    const ReplayBuffer* replay_buffer() const override { return &replay_.buffer(); }

    /// Task-agnostic slot used at inference: mean of the learned embeddings.
    Vector inference_task_slot() const;

protected:
    void setup_bank(const MethodContext& context) override;
    json extra_state() const override { return {{"replay", replay_.to_json()}}; }
    void load_extra_state(const json& doc) override;

    ReplayState replay_;
};

/// Per-task FFN experts mixed by prototype-similarity softmax.
class Disco : public AdapterMethod {
public:
    std::string name() const override { return "disco"; }
    void on_task_start(int task_index, std::span<const MultimodalSample> task_data) override;
    void on_task_end(int task_index, std::span<const MultimodalSample> task_data) override;
    ForwardPlan forward_policy(const MultimodalSample& sample, Mode mode) override;

    const AnchorStore& prototypes() const { return prototypes_; }
    /// Weights over all experts (zero for tasks without a prototype).
    Vector expert_weights(const MultimodalSample& sample) const;

protected:
    void setup_bank(const MethodContext& context) override;
    json extra_state() const override { return {{"prototypes", prototypes_.to_json()}}; }
    void load_extra_state(const json& doc) override { prototypes_ = AnchorStore::from_json(doc.at("prototypes")); }

    AnchorStore prototypes_;
    double tau_ = 0.05;
};

/// Per-task FFN experts summed; gradients are kept off the spectral anchors of earlier tasks.
class Same : public AdapterMethod {
public:
    std::string name() const override { return "same"; }
    void on_task_start(int task_index, std::span<const MultimodalSample> task_data) override;
    void on_gradients() override;
    void on_step_end(int step, int total_steps) override;
    void on_task_end(int task_index, std::span<const MultimodalSample> task_data) override;
    ForwardPlan forward_policy(const MultimodalSample& sample, Mode mode) override;

    /// Orthonormal protected directions per point.
    const std::map<PointKey, Matrix>& protected_bases() const { return protected_; }
    const SameConfig& same_config() const { return same_; }
    /// [vec(A) ; vec(B)] of one expert.
    static Vector flatten(const LoRAAdapter& adapter, bool gradient);
    static void unflatten(const Vector& flat, LoRAAdapter& adapter, bool gradient);

protected:
    void setup_bank(const MethodContext& context) override;
    json extra_state() const override;
    void load_extra_state(const json& doc) override;

    SameConfig same_;
    std::map<PointKey, std::deque<Vector>> snapshots_;
    std::map<PointKey, std::deque<Vector>> gradients_;
    std::map<PointKey, Matrix> protected_;
};

/// Per-task soft prompts with prototype-based prompt selection.
class ModalPrompt : public Method {
public:
    std::string name() const override { return "modalprompt"; }
    void build(Backbone& backbone, const MethodContext& context) override;
    void on_task_start(int task_index, std::span<const MultimodalSample> task_data) override;
    double auxiliary_loss(std::span<const MultimodalSample> batch, double grad_scale) override;
    void on_task_end(int task_index, std::span<const MultimodalSample> task_data) override;
    ForwardPlan forward_policy(const MultimodalSample& sample, Mode mode) override;
    std::vector<Param*> trainable_params() override;
    json serialize() const override;
    void deserialize(const json& doc) override;

    struct Transform {
        Param w1, b1, w2, b2;
    };

    /// 1 - cos(T_task(mean prompt row), target); gradients accumulate with grad_scale when > 0.
    double alignment_loss(int task, const Vector& target, double grad_scale);
    /// proto <- normalize(m p + (1 - m) batch_mean); the first update sets proto = normalize(batch_mean).
    static Vector ema_update(const std::optional<Vector>& proto, const Vector& batch_mean, double momentum);

    Param& prompt(int task) { return prompts_.at(static_cast<std::size_t>(task)); }
    Transform& transform(int task) { return transforms_.at(static_cast<std::size_t>(task)); }
    const AnchorStore& prototypes() const { return prototypes_; }
    std::vector<int> select(const MultimodalSample& sample) const;

private:
    std::vector<Param> prompts_;
    std::vector<Transform> transforms_;
    AnchorStore prototypes_;
    std::optional<Vector> running_image_;
    std::optional<Vector> running_text_;
    int prefix_len_ = 10;
    int transfer_num_ = 1;
    double lambda_ = 0.5;
    double momentum_ = 0.9;
    int hidden_dim_ = 64;
};

}  // namespace prism
