#include "prism/methods/builtin.hpp"

namespace prism {

void MoELora::setup_bank(const MethodContext& context) {
    LoRAConfig cfg = lora_;
    cfg.targets.assign(kFfnPoints.begin(), kFfnPoints.end());
    bank_ = inject(*backbone_, cfg, context.config.get_int("num_experts"), init_rng_);
    bank_.add_routers(RouterInput::pooled, backbone_->config().model_dim);
}

ForwardPlan MoELora::forward_policy(const MultimodalSample&, Mode mode) {
    ForwardPlan plan = base_plan(mode);
    plan.layer_mix.assign(static_cast<std::size_t>(backbone_->config().num_layers), ExpertMix::routed());
    return plan;
}

}  // namespace prism
