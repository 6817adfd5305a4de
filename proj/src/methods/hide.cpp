#include "prism/methods/builtin.hpp"

namespace prism {

namespace {

Vector one_hot(int size, int index) {
    Vector v = Vector::Zero(size);
    v(index) = 1.0;
    return v;
}

}  // namespace

void HiDe::setup_bank(const MethodContext&) {
    // One full-rank expert per task.
    LoRAConfig cfg = lora_;
    cfg.r = lora_.r * num_tasks_;
    bank_ = inject(*backbone_, cfg, num_tasks_, init_rng_);
    anchors_ = AnchorStore(backbone_->feature_dim());
}

void HiDe::on_task_start(int task_index, std::span<const MultimodalSample> task_data) {
    AdapterMethod::on_task_start(task_index, task_data);
    bank_.set_trainable_expert(task_index);
}

void HiDe::on_task_end(int task_index, std::span<const MultimodalSample> task_data) {
    anchors_.put(hide_extract_anchors(*backbone_, task_index, task_data, &warnings_));
    AdapterMethod::on_task_end(task_index, task_data);
}

std::vector<ExpertMix> HiDe::inference_mix(int predicted_task) const {
    const int layers = backbone_->config().num_layers;
    Vector fused = Vector::Zero(num_tasks_);
    for (const auto& a : anchors_.entries()) fused(a.task_index) = 1.0;
    std::vector<ExpertMix> mix(static_cast<std::size_t>(layers), ExpertMix::fixed_weights(fused));
    mix.back() = ExpertMix::fixed_weights(one_hot(num_tasks_, predicted_task));
    return mix;
}

ForwardPlan HiDe::forward_policy(const MultimodalSample& sample, Mode mode) {
    ForwardPlan plan = base_plan(mode);
    const auto layers = static_cast<std::size_t>(backbone_->config().num_layers);
    if (mode == Mode::train) {
        plan.layer_mix.assign(layers, ExpertMix::fixed_weights(one_hot(num_tasks_, current_task_)));
    } else if (!anchors_.empty()) {
        plan.layer_mix = inference_mix(hide_predict_task(routing_features(*backbone_, sample), anchors_));
    }
    return plan;
}

}  // namespace prism
