#include <algorithm>

#include "prism/errors.hpp"
#include "prism/methods/builtin.hpp"

namespace prism {

void ClMoE::build(Backbone& backbone, const MethodContext& context) {
    AdapterMethod::build(backbone, context);
    replay_.configure(context.config, context.seed, context.num_tasks, context.benchmark);
}

void ClMoE::setup_bank(const MethodContext& context) {
    LoRAConfig cfg = lora_;
    cfg.targets.assign(kFfnPoints.begin(), kFfnPoints.end());
    bank_ = inject(*backbone_, cfg, num_tasks_, init_rng_);
    const int dim = context.config.get_int("clmoe_task_embedding_dim");
    if (dim < 1) fail(Errc::invalid_config, "clmoe_task_embedding_dim must be positive");
    bank_.add_routers(RouterInput::token, backbone_->config().model_dim + dim);
    bank_.add_task_embeddings(num_tasks_, dim, init_rng_);
}

void ClMoE::on_task_start(int task_index, std::span<const MultimodalSample> task_data) {
    AdapterMethod::on_task_start(task_index, task_data);
    replay_.begin_task(task_index);
}

std::vector<MultimodalSample> ClMoE::train_batch_transform(std::vector<MultimodalSample> batch) {
    return replay_.mix(std::move(batch), current_task_);
}

void ClMoE::on_task_end(int task_index, std::span<const MultimodalSample> task_data) {
    AdapterMethod::on_task_end(task_index, task_data);
    replay_.store(task_index, task_data);
}

void ClMoE::load_extra_state(const json& doc) { replay_.load(doc.at("replay")); }

Vector ClMoE::inference_task_slot() const {
    const Matrix& table = bank_.task_embeddings()->value;
    const int rows = std::clamp(learned_tasks_, 1, static_cast<int>(table.rows()));
    return table.topRows(rows).colwise().mean().transpose();
}

ForwardPlan ClMoE::forward_policy(const MultimodalSample& sample, Mode mode) {
    ForwardPlan plan = base_plan(mode);
    plan.layer_mix.assign(static_cast<std::size_t>(backbone_->config().num_layers), ExpertMix::routed());
    if (mode == Mode::train) {
        const int task = sample.task_index >= 0 ? sample.task_index : current_task_;
        plan.task_slot = bank_.task_embeddings()->value.row(task).transpose();
        plan.task_row = task;
    } else {
        plan.task_slot = inference_task_slot();
    }
    return plan;
}

}  // namespace prism
