#include <algorithm>

#include "prism/errors.hpp"
#include "prism/methods/builtin.hpp"

namespace prism {

namespace {

constexpr std::size_t kGradientHistory = 64;

}  // namespace

Vector Same::flatten(const LoRAAdapter& adapter, bool gradient) {
    const Matrix& a = gradient ? adapter.A.grad : adapter.A.value;
    const Matrix& b = gradient ? adapter.B.grad : adapter.B.value;
    Vector flat(a.size() + b.size());
    flat.head(a.size()) = Eigen::Map<const Vector>(a.data(), a.size());
    flat.tail(b.size()) = Eigen::Map<const Vector>(b.data(), b.size());
    return flat;
}

void Same::unflatten(const Vector& flat, LoRAAdapter& adapter, bool gradient) {
    Matrix& a = gradient ? adapter.A.grad : adapter.A.value;
    Matrix& b = gradient ? adapter.B.grad : adapter.B.value;
    Eigen::Map<Vector>(a.data(), a.size()) = flat.head(a.size());
    Eigen::Map<Vector>(b.data(), b.size()) = flat.tail(b.size());
}

void Same::setup_bank(const MethodContext& context) {
    LoRAConfig cfg = lora_;
    cfg.r = lora_.r * num_tasks_;
    cfg.targets.assign(kFfnPoints.begin(), kFfnPoints.end());
    bank_ = inject(*backbone_, cfg, num_tasks_, init_rng_);
    same_ = SameConfig::from_config(context.config);
}

void Same::on_task_start(int task_index, std::span<const MultimodalSample> task_data) {
    AdapterMethod::on_task_start(task_index, task_data);
    bank_.set_trainable_expert(task_index);
    snapshots_.clear();
    gradients_.clear();
}

void Same::on_gradients() {
    for (auto& [key, slot] : bank_.slots()) {
        LoRAAdapter& expert = slot.experts[static_cast<std::size_t>(current_task_)];
        Vector g = flatten(expert, true);
        auto& history = gradients_[key];
        history.push_back(g);
        if (history.size() > kGradientHistory) history.pop_front();
        auto it = protected_.find(key);
        if (it == protected_.end() || it->second.cols() == 0) continue;
        g -= it->second * (it->second.transpose() * g);
        unflatten(g, expert, true);
    }
}

void Same::on_step_end(int step, int total_steps) {
    const int interval = std::max(1, total_steps / same_.window_size);
    if (step % interval != 0) return;
    for (auto& [key, slot] : bank_.slots()) {
        auto& window = snapshots_[key];
        window.push_back(flatten(slot.experts[static_cast<std::size_t>(current_task_)], false));
        if (window.size() > static_cast<std::size_t>(same_.window_size)) window.pop_front();
    }
}

void Same::on_task_end(int task_index, std::span<const MultimodalSample> task_data) {
    for (auto& [key, slot] : bank_.slots()) {
        const std::vector<Vector> window(snapshots_[key].begin(), snapshots_[key].end());
        const SpectralAnchors anchors = same_update_anchors(window, same_);
        if (anchors.count() == 0) continue;
        const std::vector<Vector> history(gradients_[key].begin(), gradients_[key].end());
        const Vector importance = same_importance(history, anchors.directions, same_.momentum);
        std::vector<Eigen::Index> keep;
        for (Eigen::Index j = 0; j < importance.size(); ++j) {
            if (importance(j) > same_.tau_score) keep.push_back(j);
        }
        if (keep.empty()) continue;
        Matrix chosen(anchors.directions.rows(), static_cast<Eigen::Index>(keep.size()));
        for (std::size_t j = 0; j < keep.size(); ++j) chosen.col(static_cast<Eigen::Index>(j)) = anchors.directions.col(keep[j]);
        auto it = protected_.find(key);
        const Matrix base = it == protected_.end() ? Matrix(chosen.rows(), 0) : it->second;
        protected_[key] = extend_orthonormal(base, chosen);
    }
    snapshots_.clear();
    gradients_.clear();
    AdapterMethod::on_task_end(task_index, task_data);
}

ForwardPlan Same::forward_policy(const MultimodalSample&, Mode mode) {
    ForwardPlan plan = base_plan(mode);
    Vector w = Vector::Zero(num_tasks_);
    for (int e = 0; e < std::min(learned_tasks_, num_tasks_); ++e) w(e) = 1.0;
    if (mode == Mode::train) w(current_task_) = 1.0;
    if (w.sum() == 0.0) w.setOnes();
    plan.layer_mix.assign(static_cast<std::size_t>(backbone_->config().num_layers), ExpertMix::fixed_weights(w));
    return plan;
}

json Same::extra_state() const {
    json bases = json::array();
    for (const auto& [key, basis] : protected_) {
        bases.push_back({{"layer_index", key.first}, {"point_name", point_name_str(key.second)}, {"basis", matrix_to_json(basis)}});
    }
    return {{"protected", bases}};
}

void Same::load_extra_state(const json& doc) {
    protected_.clear();
    for (const auto& entry : doc.at("protected")) {
        const auto name = parse_point_name(entry.at("point_name").get<std::string>());
        if (!name) fail(Errc::config_mismatch, "unknown point in SAME state");
        protected_[{entry.at("layer_index").get<int>(), *name}] = matrix_from_json(entry.at("basis"));
    }
}

}  // namespace prism
