#include "prism/errors.hpp"
#include "prism/methods/builtin.hpp"

namespace prism {

void ZeroShot::build(Backbone& backbone, const MethodContext& context) {
    backbone_ = &backbone;
    num_tasks_ = context.num_tasks;
}

void ZeroShot::on_task_start(int, std::span<const MultimodalSample>) {
    fail(Errc::attempted_training, "zeroshot evaluates the frozen backbone and refuses training");
}

ForwardPlan ZeroShot::forward_policy(const MultimodalSample&, Mode mode) {
    if (mode == Mode::train) fail(Errc::attempted_training, "zeroshot has no training forward");
    return ForwardPlan{};
}

}  // namespace prism
