#include "prism/methods/method.hpp"

#include "prism/benchmarks.hpp"
#include "prism/errors.hpp"
#include "prism/methods/builtin.hpp"

namespace prism {

void Method::on_task_start(int task_index, std::span<const MultimodalSample>) {
    if (task_index < 0 || task_index >= num_tasks_)
        fail(Errc::bad_task_ids, "task " + std::to_string(task_index) + " is outside the method's task range");
    current_task_ = task_index;
}

double Method::auxiliary_loss(std::span<const MultimodalSample>, double) { return 0.0; }

void Method::on_step_end(int, int) {}

void Method::on_task_end(int task_index, std::span<const MultimodalSample>) {
    learned_tasks_ = std::max(learned_tasks_, task_index + 1);
}

std::vector<std::string> Method::take_warnings() {
    std::vector<std::string> out;
    out.swap(warnings_);
    return out;
}

// AdapterMethod

void AdapterMethod::build(Backbone& backbone, const MethodContext& context) {
    backbone_ = &backbone;
    num_tasks_ = context.num_tasks;
    lora_ = LoRAConfig::from_config(context.config);
    seed_ = context.seed;
    init_rng_ = Rng(derive_seed(context.seed, name() + "/init"));
    dropout_rng_ = Rng(derive_seed(context.seed, name() + "/dropout"));
    setup_bank(context);
}

void AdapterMethod::on_task_start(int task_index, std::span<const MultimodalSample> task_data) {
    Method::on_task_start(task_index, task_data);
    dropout_rng_ = Rng(derive_seed(seed_, name() + "/dropout/task" + std::to_string(task_index)));
}

void AdapterMethod::on_task_end(int task_index, std::span<const MultimodalSample> task_data) {
    Method::on_task_end(task_index, task_data);
}

ForwardPlan AdapterMethod::base_plan(Mode mode) {
    ForwardPlan plan;
    plan.bank = &bank_;
    plan.training = mode == Mode::train;
    plan.dropout_p = lora_.dropout_p;
    plan.dropout_rng = &dropout_rng_;
    return plan;
}

ForwardPlan AdapterMethod::forward_policy(const MultimodalSample&, Mode mode) { return base_plan(mode); }

json AdapterMethod::serialize() const {
    return {{"method", name()}, {"learned_tasks", learned_tasks_}, {"bank", bank_.serialize()}, {"state", extra_state()}};
}

void AdapterMethod::deserialize(const json& doc) {
    if (doc.value("method", std::string()) != name())
        fail(Errc::config_mismatch, "checkpoint belongs to method '" + doc.value("method", std::string("?")) + "'");
    learned_tasks_ = doc.at("learned_tasks").get<int>();
    bank_.deserialize(doc.at("bank"));
    load_extra_state(doc.at("state"));
}

// ReplayState

void ReplayState::configure(const Config& config, std::uint64_t seed, int num_tasks, const BenchmarkSpec* benchmark) {
    buffer_ = ReplayBuffer{};
    buffer_.capacity = config.get_int("replay_capacity");
    buffer_.sample_probability = config.get_real("replay_probability");
    if (buffer_.capacity < 0) fail(Errc::invalid_config, "replay_capacity must be nonnegative");
    if (!(buffer_.sample_probability >= 0.0 && buffer_.sample_probability <= 1.0))
        fail(Errc::invalid_config, "replay_probability must lie in [0, 1]");
    seed_ = seed;
    rng_ = Rng(derive_seed(seed, "replay/mix"));
    num_tasks_ = num_tasks;
    benchmark_ = benchmark;
}

void ReplayState::begin_task(int task_index) {
    rng_ = Rng(derive_seed(seed_, "replay/mix/task" + std::to_string(task_index)));
}

std::vector<MultimodalSample> ReplayState::mix(std::vector<MultimodalSample> batch, int current_task) {
    return replay_mix(buffer_, std::move(batch), current_task, rng_);
}

void ReplayState::store(int task_index, std::span<const MultimodalSample> task_data) {
    Rng rng(derive_seed(seed_, "replay/store" + std::to_string(task_index)));
    replay_store(buffer_, task_index, task_data, num_tasks_, rng);
}

json ReplayState::to_json() const { return replay_to_json(buffer_); }

void ReplayState::load(const json& doc) {
    const ReplayBuffer loaded = replay_from_json(doc, benchmark_);
    buffer_.partitions = loaded.partitions;
}

}  // namespace prism
