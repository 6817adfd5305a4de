#include <cmath>

#include "prism/errors.hpp"
#include "prism/methods/builtin.hpp"

namespace prism {

void ModalPrompt::build(Backbone& backbone, const MethodContext& context) {
    backbone_ = &backbone;
    num_tasks_ = context.num_tasks;
    const Config& c = context.config;
    prefix_len_ = c.get_int("modalprompt_prefix_len");
    transfer_num_ = c.get_int("modalprompt_transfer_num");
    lambda_ = c.get_real("modalprompt_lambda");
    momentum_ = c.get_real("modalprompt_momentum");
    hidden_dim_ = c.get_int("modalprompt_hidden_dim");
    if (prefix_len_ < 1 || hidden_dim_ < 1 || transfer_num_ < 1)
        fail(Errc::invalid_config, "modalprompt prefix_len, hidden_dim and transfer_num must be positive");
    if (!(lambda_ >= 0.0 && lambda_ <= 1.0)) fail(Errc::invalid_config, "modalprompt_lambda must lie in [0, 1]");
    if (!(momentum_ >= 0.0 && momentum_ < 1.0)) fail(Errc::invalid_config, "modalprompt_momentum must lie in [0, 1)");

    const int d = backbone.config().model_dim;
    const int f = backbone.feature_dim();
    Rng rng(derive_seed(context.seed, "modalprompt/init"));
    prompts_.clear();
    transforms_.clear();
    for (int t = 0; t < num_tasks_; ++t) {
        const std::string base = "prompt" + std::to_string(t);
        prompts_.emplace_back(base, gaussian_matrix(prefix_len_, d, 0.02, rng));
        Transform tr;
        tr.w1 = Param(base + ".transform.w1", gaussian_matrix(hidden_dim_, d, 1.0 / std::sqrt(d), rng));
        tr.b1 = Param(base + ".transform.b1", Matrix::Zero(hidden_dim_, 1));
        tr.w2 = Param(base + ".transform.w2", gaussian_matrix(f, hidden_dim_, 1.0 / std::sqrt(hidden_dim_), rng));
        tr.b2 = Param(base + ".transform.b2", Matrix::Zero(f, 1));
        transforms_.push_back(std::move(tr));
    }
    prototypes_ = AnchorStore(f);
}

std::vector<Param*> ModalPrompt::trainable_params() {
    std::vector<Param*> out;
    for (std::size_t t = 0; t < prompts_.size(); ++t) {
        out.push_back(&prompts_[t]);
        for (Param* p : {&transforms_[t].w1, &transforms_[t].b1, &transforms_[t].w2, &transforms_[t].b2}) out.push_back(p);
    }
    return out;
}

void ModalPrompt::on_task_start(int task_index, std::span<const MultimodalSample> task_data) {
    Method::on_task_start(task_index, task_data);
    for (std::size_t t = 0; t < prompts_.size(); ++t) {
        const bool on = static_cast<int>(t) == task_index;
        prompts_[t].trainable = on;
        for (Param* p : {&transforms_[t].w1, &transforms_[t].b1, &transforms_[t].w2, &transforms_[t].b2}) p->trainable = on;
    }
    running_image_.reset();
    running_text_.reset();
}

double ModalPrompt::alignment_loss(int task, const Vector& target, double grad_scale) {
    Param& prompt = prompts_.at(static_cast<std::size_t>(task));
    Transform& tr = transforms_.at(static_cast<std::size_t>(task));
    const Vector s = prompt.value.colwise().mean().transpose();
    const Vector a = (tr.w1.value * s + tr.b1.value.col(0)).array().tanh().matrix();
    const Vector o = tr.w2.value * a + tr.b2.value.col(0);
    const double on = o.norm();
    const double tn = target.norm();
    if (on == 0.0 || tn == 0.0) return 1.0;
    const double c = o.dot(target) / (on * tn);
    if (grad_scale > 0.0) {
        const Vector d_o = grad_scale * -(target / (on * tn) - c * o / (on * on));
        const Vector d_pre = (tr.w2.value.transpose() * d_o).cwiseProduct((1.0 - a.array().square()).matrix());
        if (tr.w2.trainable) tr.w2.grad.noalias() += d_o * a.transpose();
        if (tr.b2.trainable) tr.b2.grad.col(0) += d_o;
        if (tr.w1.trainable) tr.w1.grad.noalias() += d_pre * s.transpose();
        if (tr.b1.trainable) tr.b1.grad.col(0) += d_pre;
        if (prompt.trainable) {
            const RowVector d_s = (tr.w1.value.transpose() * d_pre).transpose() / static_cast<double>(prompt.value.rows());
            prompt.grad.rowwise() += d_s;
        }
    }
    return 1.0 - c;
}

Vector ModalPrompt::ema_update(const std::optional<Vector>& proto, const Vector& batch_mean, double momentum) {
    if (!proto) return normalized(batch_mean);
    return normalized(momentum * *proto + (1.0 - momentum) * batch_mean);
}

double ModalPrompt::auxiliary_loss(std::span<const MultimodalSample> batch, double grad_scale) {
    if (batch.empty()) return 0.0;
    const int f = backbone_->feature_dim();
    Vector image = Vector::Zero(f), text = Vector::Zero(f);
    int images = 0;
    for (const auto& s : batch) {
        const RoutingFeatures feats = routing_features(*backbone_, s);
        if (feats.image) {
            image += *feats.image;
            ++images;
        }
        text += feats.text;
    }
    text /= static_cast<double>(batch.size());
    if (images > 0) image /= images;
    const double loss = alignment_loss(current_task_, images > 0 ? image : text, grad_scale);
    if (images > 0) running_image_ = ema_update(running_image_, image, momentum_);
    running_text_ = ema_update(running_text_, text, momentum_);
    return loss;
}

void ModalPrompt::on_task_end(int task_index, std::span<const MultimodalSample> task_data) {
    TaskAnchor proto;
    proto.task_index = task_index;
    if (running_text_) {
        proto.image = running_image_;
        proto.text = *running_text_;
    } else {
        const TaskAnchor fallback = hide_extract_anchors(*backbone_, task_index, task_data, &warnings_);
        proto.image = fallback.image;
        proto.text = fallback.text;
    }
    prototypes_.put(std::move(proto));
    Method::on_task_end(task_index, task_data);
}

std::vector<int> ModalPrompt::select(const MultimodalSample& sample) const {
    if (prototypes_.empty()) return {};
    return modalprompt_select(routing_features(*backbone_, sample), prototypes_, transfer_num_, lambda_);
}

ForwardPlan ModalPrompt::forward_policy(const MultimodalSample& sample, Mode mode) {
    ForwardPlan plan;
    plan.training = mode == Mode::train;
    if (mode == Mode::train) {
        plan.prefix.push_back(&prompts_.at(static_cast<std::size_t>(current_task_)));
    } else {
        for (int t : select(sample)) plan.prefix.push_back(&prompts_.at(static_cast<std::size_t>(t)));
    }
    return plan;
}

json ModalPrompt::serialize() const {
    json prompts = json::array();
    for (std::size_t t = 0; t < prompts_.size(); ++t) {
        const Transform& tr = transforms_[t];
        prompts.push_back({{"prompt", matrix_to_json(prompts_[t].value)},
                           {"w1", matrix_to_json(tr.w1.value)},
                           {"b1", matrix_to_json(tr.b1.value)},
                           {"w2", matrix_to_json(tr.w2.value)},
                           {"b2", matrix_to_json(tr.b2.value)}});
    }
    return {{"method", name()}, {"learned_tasks", learned_tasks_}, {"prompts", prompts}, {"prototypes", prototypes_.to_json()}};
}

void ModalPrompt::deserialize(const json& doc) {
    if (doc.value("method", std::string()) != name()) fail(Errc::config_mismatch, "checkpoint is not a modalprompt state");
    const json& prompts = doc.at("prompts");
    if (prompts.size() != prompts_.size()) fail(Errc::config_mismatch, "checkpoint prompt count differs");
    auto assign = [](Param& p, const json& m) {
        Matrix v = matrix_from_json(m);
        if (v.rows() != p.value.rows() || v.cols() != p.value.cols())
            fail(Errc::config_mismatch, "checkpoint tensor '" + p.name + "' has a different shape");
        p.value = std::move(v);
    };
    for (std::size_t t = 0; t < prompts_.size(); ++t) {
        assign(prompts_[t], prompts[t].at("prompt"));
        assign(transforms_[t].w1, prompts[t].at("w1"));
        assign(transforms_[t].b1, prompts[t].at("b1"));
        assign(transforms_[t].w2, prompts[t].at("w2"));
        assign(transforms_[t].b2, prompts[t].at("b2"));
    }
    prototypes_ = AnchorStore::from_json(doc.at("prototypes"));
    learned_tasks_ = doc.at("learned_tasks").get<int>();
}

}  // namespace prism
