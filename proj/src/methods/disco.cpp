#include "prism/methods/builtin.hpp"

namespace prism {

void Disco::setup_bank(const MethodContext& context) {
    const auto [rank, alpha] = disco_adjust_rank(lora_.r, num_tasks_);
    LoRAConfig cfg = lora_;
    cfg.r = rank;
    cfg.alpha = alpha;
    cfg.targets.assign(kFfnPoints.begin(), kFfnPoints.end());
    bank_ = inject(*backbone_, cfg, num_tasks_, init_rng_);
    tau_ = context.config.get_real("disco_tau");
    prototypes_ = AnchorStore(backbone_->feature_dim());
}

void Disco::on_task_start(int task_index, std::span<const MultimodalSample> task_data) {
    AdapterMethod::on_task_start(task_index, task_data);
    bank_.set_trainable_expert(task_index);
}

void Disco::on_task_end(int task_index, std::span<const MultimodalSample> task_data) {
    prototypes_.put(hide_extract_anchors(*backbone_, task_index, task_data, &warnings_));
    AdapterMethod::on_task_end(task_index, task_data);
}

Vector Disco::expert_weights(const MultimodalSample& sample) const {
    if (prototypes_.empty()) return Vector::Constant(num_tasks_, 1.0 / num_tasks_);
    const Vector mask = disco_mask(routing_features(*backbone_, sample), prototypes_, tau_);
    Vector w = Vector::Zero(num_tasks_);
    for (std::size_t i = 0; i < prototypes_.size(); ++i)
        w(prototypes_.entries()[i].task_index) = mask(static_cast<Eigen::Index>(i));
    return w;
}

ForwardPlan Disco::forward_policy(const MultimodalSample& sample, Mode mode) {
    ForwardPlan plan = base_plan(mode);
    Vector w;
    if (mode == Mode::train) {
        w = Vector::Zero(num_tasks_);
        w(current_task_) = 1.0;
    } else {
        w = expert_weights(sample);
    }
    plan.layer_mix.assign(static_cast<std::size_t>(backbone_->config().num_layers), ExpertMix::fixed_weights(w));
    return plan;
}

}  // namespace prism
