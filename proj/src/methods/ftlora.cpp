#include "prism/methods/builtin.hpp"

namespace prism {

void FtLora::setup_bank(const MethodContext&) { bank_ = inject(*backbone_, lora_, 1, init_rng_); }

void ReplayLora::build(Backbone& backbone, const MethodContext& context) {
    FtLora::build(backbone, context);
    replay_.configure(context.config, context.seed, context.num_tasks, context.benchmark);
}

void ReplayLora::on_task_start(int task_index, std::span<const MultimodalSample> task_data) {
    FtLora::on_task_start(task_index, task_data);
    replay_.begin_task(task_index);
}

std::vector<MultimodalSample> ReplayLora::train_batch_transform(std::vector<MultimodalSample> batch) {
    return replay_.mix(std::move(batch), current_task_);
}

void ReplayLora::on_task_end(int task_index, std::span<const MultimodalSample> task_data) {
    FtLora::on_task_end(task_index, task_data);
    replay_.store(task_index, task_data);
}

void ReplayLora::load_extra_state(const json& doc) { replay_.load(doc.at("replay")); }

}  // namespace prism
