#include "prism/methods/routing.hpp"

#include <algorithm>
#include <numeric>

#include "prism/errors.hpp"

namespace prism {

RoutingFeatures routing_features(const Backbone& backbone, const MultimodalSample& sample) {
    RoutingFeatures f;
    if (sample.image_features) f.image = backbone.image_routing_feature(*sample.image_features);
    f.text = backbone.text_routing_feature(sample.instruction);
    return f;
}

void AnchorStore::put(TaskAnchor anchor) {
    auto it = std::find_if(entries_.begin(), entries_.end(),
                           [&](const TaskAnchor& a) { return a.task_index >= anchor.task_index; });
    if (it != entries_.end() && it->task_index == anchor.task_index) {
        *it = std::move(anchor);
    } else {
        entries_.insert(it, std::move(anchor));
    }
}

json AnchorStore::to_json() const {
    json entries = json::array();
    for (const auto& a : entries_) {
        entries.push_back({{"task_index", a.task_index},
                           {"image", a.image ? vector_to_json(*a.image) : json(nullptr)},
                           {"text", vector_to_json(a.text)}});
    }
    return {{"feature_dim", feature_dim_}, {"entries", entries}};
}

AnchorStore AnchorStore::from_json(const json& doc) {
    AnchorStore store(doc.at("feature_dim").get<int>());
    for (const auto& e : doc.at("entries")) {
        TaskAnchor a;
        a.task_index = e.at("task_index").get<int>();
        if (!e.at("image").is_null()) a.image = vector_from_json(e.at("image"));
        a.text = vector_from_json(e.at("text"));
        store.put(std::move(a));
    }
    return store;
}

Vector mean_direction(std::span<const Vector> features, bool* degenerate) {
    if (degenerate) *degenerate = false;
    if (features.empty()) fail(Errc::empty_task, "no features to average");
    Vector mean = Vector::Zero(features.front().size());
    for (const auto& f : features) mean += f;
    mean /= static_cast<double>(features.size());
    const double scale = std::max(1.0, features.front().cwiseAbs().maxCoeff());
    if (mean.norm() > 1e-12 * scale) return mean.normalized();
    if (degenerate) *degenerate = true;
    for (const auto& f : features) {
        if (f.norm() > 0.0) return f.normalized();
    }
    return mean;
}

TaskAnchor hide_extract_anchors(const Backbone& backbone, int task_index, std::span<const MultimodalSample> task_data,
                                std::vector<std::string>* warnings) {
    if (task_data.empty()) fail(Errc::empty_task, "task " + std::to_string(task_index) + " has no training data");
    std::vector<Vector> image, text;
    for (const auto& s : task_data) {
        const RoutingFeatures f = routing_features(backbone, s);
        if (f.image) image.push_back(*f.image);
        text.push_back(f.text);
    }
    TaskAnchor anchor;
    anchor.task_index = task_index;
    bool degenerate = false;
    if (!image.empty()) {
        anchor.image = mean_direction(image, &degenerate);
        if (degenerate && warnings)
            warnings->push_back("task " + std::to_string(task_index) + ": zero-mean image features, anchor falls back to first sample");
    }
    anchor.text = mean_direction(text, &degenerate);
    if (degenerate && warnings)
        warnings->push_back("task " + std::to_string(task_index) + ": zero-mean text features, anchor falls back to first sample");
    return anchor;
}

Vector anchor_similarities(const RoutingFeatures& features, const AnchorStore& store, double image_weight) {
    Vector sims(static_cast<Eigen::Index>(store.size()));
    for (std::size_t i = 0; i < store.size(); ++i) {
        const TaskAnchor& a = store.entries()[i];
        const double text = cosine(features.text, a.text);
        if (features.image) {
            const double img = a.image ? cosine(*features.image, *a.image) : 0.0;
            sims(static_cast<Eigen::Index>(i)) = image_weight * img + (1.0 - image_weight) * text;
        } else {
            sims(static_cast<Eigen::Index>(i)) = text;
        }
    }
    return sims;
}

int argmax_lowest(const Vector& scores) {
    int best = 0;
    for (Eigen::Index i = 1; i < scores.size(); ++i) {
        if (scores(i) > scores(best)) best = static_cast<int>(i);
    }
    return best;
}

int hide_predict_task(const RoutingFeatures& features, const AnchorStore& anchors) {
    if (anchors.empty()) fail(Errc::no_anchors, "no task anchors stored");
    const Vector sims = anchor_similarities(features, anchors, 0.5);
    return anchors.entries()[static_cast<std::size_t>(argmax_lowest(sims))].task_index;
}

Vector moe_route(const Matrix& router_weight, const Vector& pooled_input) {
    if (router_weight.cols() != pooled_input.size())
        fail(Errc::dimension_mismatch, "router input width differs from the router");
    return softmax(router_weight * pooled_input);
}

Matrix clmoe_route(const Matrix& router_weight, const Matrix& token_reprs, const Vector& task_slot) {
    if (router_weight.cols() != token_reprs.cols() + task_slot.size())
        fail(Errc::dimension_mismatch, "router input width differs from [token ; task_slot]");
    Matrix src(token_reprs.rows(), router_weight.cols());
    src.leftCols(token_reprs.cols()) = token_reprs;
    if (task_slot.size() > 0) src.rightCols(task_slot.size()) = task_slot.transpose().replicate(token_reprs.rows(), 1);
    return softmax_rows(src * router_weight.transpose());
}

std::pair<int, double> disco_adjust_rank(int r, int num_tasks) {
    if (num_tasks < 1) fail(Errc::invalid_config, "num_tasks must be positive");
    if (r < num_tasks)
        fail(Errc::rank_too_small, "rank " + std::to_string(r) + " is smaller than the task count " + std::to_string(num_tasks));
    const int adjusted = r / num_tasks * num_tasks;
    return {adjusted, 2.0 * adjusted};
}

Vector disco_mask_from_similarities(const Vector& similarities, double tau) {
    if (!(tau > 0.0)) fail(Errc::invalid_config, "disco tau must be positive");
    return softmax(similarities / tau);
}

Vector disco_mask(const RoutingFeatures& features, const AnchorStore& prototypes, double tau) {
    if (prototypes.empty()) fail(Errc::no_prototypes, "no task prototypes stored");
    return disco_mask_from_similarities(anchor_similarities(features, prototypes, 0.5), tau);
}

std::vector<int> top_k_positions(const Vector& scores, int k) {
    std::vector<int> order(static_cast<std::size_t>(scores.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });
    order.resize(static_cast<std::size_t>(std::clamp<Eigen::Index>(k, 0, scores.size())));
    std::sort(order.begin(), order.end());
    return order;
}

std::vector<int> modalprompt_select(const RoutingFeatures& features, const AnchorStore& prototypes, int k,
                                    double lambda) {
    if (prototypes.empty()) fail(Errc::no_prototypes, "no task prototypes stored");
    if (k < 1 || k > static_cast<int>(prototypes.size()))
        fail(Errc::k_too_large, "transfer_num " + std::to_string(k) + " exceeds the " +
                                    std::to_string(prototypes.size()) + " learned tasks");
    std::vector<int> tasks;
    for (int pos : top_k_positions(anchor_similarities(features, prototypes, lambda), k))
        tasks.push_back(prototypes.entries()[static_cast<std::size_t>(pos)].task_index);
    return tasks;
}

}  // namespace prism
