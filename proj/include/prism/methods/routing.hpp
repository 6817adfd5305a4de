#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prism/backbone.hpp"

namespace prism {

/// Frozen-space features a sample is routed by.
struct RoutingFeatures {
    std::optional<Vector> image;
    Vector text;
};

RoutingFeatures routing_features(const Backbone& backbone, const MultimodalSample& sample);

struct TaskAnchor {
    int task_index = 0;
    std::optional<Vector> image;  // absent when the task had no images
    Vector text;
};

/// Unit-norm anchors, one per completed task, ordered by task index.
class AnchorStore {
public:
    explicit AnchorStore(int feature_dim = 0) : feature_dim_(feature_dim) {}

    void put(TaskAnchor anchor);
    const std::vector<TaskAnchor>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    int feature_dim() const { return feature_dim_; }

    json to_json() const;
    static AnchorStore from_json(const json& doc);

private:
    int feature_dim_;
    std::vector<TaskAnchor> entries_;
};

/// Normalized mean; a zero mean falls back to the first nonzero vector's
/// direction and sets `degenerate`.
Vector mean_direction(std::span<const Vector> features, bool* degenerate = nullptr);

TaskAnchor hide_extract_anchors(const Backbone& backbone, int task_index, std::span<const MultimodalSample> task_data,
                                std::vector<std::string>* warnings = nullptr);

/// Per entry: image_weight * cos_img + (1 - image_weight) * cos_text, or
/// cos_text alone for text-only samples.
Vector anchor_similarities(const RoutingFeatures& features, const AnchorStore& store, double image_weight);

/// Index of the maximum, ties to the lowest position.
int argmax_lowest(const Vector& scores);

/// Task index of the best-matching anchor entry.
int hide_predict_task(const RoutingFeatures& features, const AnchorStore& anchors);

/// softmax(router * input).
Vector moe_route(const Matrix& router_weight, const Vector& pooled_input);

/// Row-wise softmax(router * [token ; task_slot]).
Matrix clmoe_route(const Matrix& router_weight, const Matrix& token_reprs, const Vector& task_slot);

/// Largest multiple of num_tasks not above r, and alpha = 2 * that.
std::pair<int, double> disco_adjust_rank(int r, int num_tasks);

Vector disco_mask_from_similarities(const Vector& similarities, double tau);
/// Softmax over stored prototypes of the 0.5/0.5 mixed similarity / tau.
Vector disco_mask(const RoutingFeatures& features, const AnchorStore& prototypes, double tau);

/// Positions of the k highest scores (ties to lower positions), returned in
/// ascending order.
std::vector<int> top_k_positions(const Vector& scores, int k);

/// Task indices of the K best prototypes by lambda * img + (1 - lambda) * text,
/// in task-index order.
std::vector<int> modalprompt_select(const RoutingFeatures& features, const AnchorStore& prototypes, int k,
                                    double lambda);

}  // namespace prism
