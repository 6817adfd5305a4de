#include "prism/peft.hpp"

#include <algorithm>
#include <cmath>

#include "prism/backbone.hpp"
#include "prism/errors.hpp"

namespace prism {

std::string_view point_name_str(PointName name) {
    switch (name) {
        case PointName::q_proj: return "q_proj";
        case PointName::k_proj: return "k_proj";
        case PointName::v_proj: return "v_proj";
        case PointName::o_proj: return "o_proj";
        case PointName::gate_proj: return "gate_proj";
        case PointName::up_proj: return "up_proj";
        case PointName::down_proj: return "down_proj";
    }
    return "?";
}

std::optional<PointName> parse_point_name(std::string_view text) {
    for (PointName name : kAllPoints) {
        if (point_name_str(name) == text) return name;
    }
    return std::nullopt;
}

bool is_ffn_point(PointName name) {
    return name == PointName::gate_proj || name == PointName::up_proj || name == PointName::down_proj;
}

std::string InjectionPoint::label() const {
    return "layers." + std::to_string(layer_index) + "." + std::string(point_name_str(point_name));
}

void LoRAConfig::validate() const {
    if (r <= 0) fail(Errc::invalid_config, "lora r must be positive");
    if (!(alpha > 0.0) || !std::isfinite(scale())) fail(Errc::invalid_config, "lora alpha must be positive");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail(Errc::invalid_config, "lora dropout must lie in [0, 1)");
    if (targets.empty()) fail(Errc::unknown_target, "no lora targets");
}

LoRAConfig LoRAConfig::from_config(const Config& config) {
    LoRAConfig c;
    c.r = config.get_int("lora_r");
    c.alpha = config.get_real("lora_alpha");
    c.dropout_p = config.get_real("lora_dropout");
    c.targets.clear();
    for (const auto& name : config.get_string_list("lora_targets")) {
        auto parsed = parse_point_name(name);
        if (!parsed) fail(Errc::unknown_target, "'" + name + "' is not an injection point");
        c.targets.push_back(*parsed);
    }
    c.validate();
    return c;
}

AdapterSlot* AdapterBank::find(int layer, PointName name) {
    auto it = slots_.find({layer, name});
    return it == slots_.end() ? nullptr : &it->second;
}

const AdapterSlot* AdapterBank::find(int layer, PointName name) const {
    auto it = slots_.find({layer, name});
    return it == slots_.end() ? nullptr : &it->second;
}

void AdapterBank::add_routers(RouterInput input, int router_input_dim) {
    router_input_ = input;
    for (auto& [key, slot] : slots_) {
        slot.router = Param(slot.point.label() + ".router",
                            Matrix::Zero(static_cast<Eigen::Index>(slot.experts.size()), router_input_dim));
    }
}

void AdapterBank::add_task_embeddings(int num_tasks, int dim, Rng& rng) {
    task_embeddings_ = Param("task_embeddings", gaussian_matrix(num_tasks, dim, 0.02, rng));
}

void AdapterBank::set_trainable_expert(int expert) {
    for (auto& [key, slot] : slots_) {
        for (auto& adapter : slot.experts) {
            const bool on = expert < 0 || adapter.expert_index == expert;
            adapter.A.trainable = on;
            adapter.B.trainable = on;
        }
    }
}

std::vector<Param*> AdapterBank::params() {
    std::vector<Param*> out;
    for (auto& [key, slot] : slots_) {
        for (auto& adapter : slot.experts) {
            out.push_back(&adapter.A);
            out.push_back(&adapter.B);
        }
        if (slot.router) out.push_back(&*slot.router);
    }
    if (task_embeddings_) out.push_back(&*task_embeddings_);
    return out;
}

std::vector<const Param*> AdapterBank::params() const {
    std::vector<const Param*> out;
    for (const auto* p : const_cast<AdapterBank*>(this)->params()) out.push_back(p);
    return out;
}

nlohmann::json AdapterBank::serialize() const {
    nlohmann::json adapters = nlohmann::json::array();
    nlohmann::json routers = nlohmann::json::array();
    for (const auto& [key, slot] : slots_) {
        for (const auto& adapter : slot.experts) {
            adapters.push_back({{"layer_index", slot.point.layer_index},
                                {"point_name", point_name_str(slot.point.point_name)},
                                {"expert_index", adapter.expert_index},
                                {"scale", slot.scale},
                                {"A", matrix_to_json(adapter.A.value)},
                                {"B", matrix_to_json(adapter.B.value)}});
        }
        if (slot.router) {
            routers.push_back({{"layer_index", slot.point.layer_index},
                               {"point_name", point_name_str(slot.point.point_name)},
                               {"weight", matrix_to_json(slot.router->value)}});
        }
    }
    nlohmann::json doc = {{"experts_per_point", experts_per_point_}, {"adapters", adapters}, {"routers", routers}};
    if (task_embeddings_) doc["task_embeddings"] = matrix_to_json(task_embeddings_->value);
    return doc;
}

void AdapterBank::deserialize(const nlohmann::json& doc) {
    if (doc.at("experts_per_point").get<int>() != experts_per_point_)
        fail(Errc::config_mismatch, "adapter bank expert count differs from checkpoint");
    auto lookup = [&](const nlohmann::json& entry) -> AdapterSlot& {
        const auto name = parse_point_name(entry.at("point_name").get<std::string>());
        AdapterSlot* slot = name ? find(entry.at("layer_index").get<int>(), *name) : nullptr;
        if (!slot) fail(Errc::config_mismatch, "checkpoint adapter for unknown point " + entry.dump().substr(0, 80));
        return *slot;
    };
    auto assign = [](Param& p, const Matrix& m) {
        if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
            fail(Errc::config_mismatch, "checkpoint tensor '" + p.name + "' has a different shape");
        p.value = m;
    };
    for (const auto& entry : doc.at("adapters")) {
        AdapterSlot& slot = lookup(entry);
        const int expert = entry.at("expert_index");
        if (expert < 0 || expert >= static_cast<int>(slot.experts.size()))
            fail(Errc::config_mismatch, "checkpoint expert index out of range");
        assign(slot.experts[static_cast<std::size_t>(expert)].A, matrix_from_json(entry.at("A")));
        assign(slot.experts[static_cast<std::size_t>(expert)].B, matrix_from_json(entry.at("B")));
    }
    for (const auto& entry : doc.at("routers")) {
        AdapterSlot& slot = lookup(entry);
        if (!slot.router) fail(Errc::config_mismatch, "checkpoint has a router the bank lacks");
        assign(*slot.router, matrix_from_json(entry.at("weight")));
    }
    if (doc.contains("task_embeddings")) {
        if (!task_embeddings_) fail(Errc::config_mismatch, "checkpoint has task embeddings the bank lacks");
        assign(*task_embeddings_, matrix_from_json(doc.at("task_embeddings")));
    }
}

AdapterBank inject(const Backbone& backbone, const LoRAConfig& config, int experts_per_point, Rng& rng) {
    config.validate();
    if (experts_per_point <= 0) fail(Errc::invalid_config, "experts_per_point must be positive");
    if (config.r % experts_per_point != 0) {
        fail(Errc::rank_not_divisible, "r=" + std::to_string(config.r) + " is not divisible by experts_per_point=" +
                                           std::to_string(experts_per_point));
    }
    const int rank = config.r / experts_per_point;
    const double scale = config.alpha / static_cast<double>(rank);

    AdapterBank bank;
    bank.experts_per_point_ = experts_per_point;
    for (const InjectionPoint& point : backbone.injection_points()) {
        if (std::find(config.targets.begin(), config.targets.end(), point.point_name) == config.targets.end())
            continue;
        AdapterSlot slot;
        slot.point = point;
        slot.scale = scale;
        for (int e = 0; e < experts_per_point; ++e) {
            LoRAAdapter adapter;
            adapter.point = point;
            adapter.expert_index = e;
            const std::string base = point.label() + ".expert" + std::to_string(e);
            adapter.A = Param(base + ".A", gaussian_matrix(rank, point.in_dim, 1.0 / std::sqrt(point.in_dim), rng));
            adapter.B = Param(base + ".B", Matrix::Zero(point.out_dim, rank));
            slot.experts.push_back(std::move(adapter));
        }
        bank.slots_.emplace(point.key(), std::move(slot));
    }
    return bank;
}

Vector adapter_delta(const Vector& x, const LoRAAdapter& adapter, double scale, bool training, double dropout_p,
                     Rng* rng) {
    if (x.size() != adapter.A.value.cols()) {
        fail(Errc::dimension_mismatch, "adapter input has length " + std::to_string(x.size()) + ", expected " +
                                           std::to_string(adapter.A.value.cols()));
    }
    Vector input = x;
    if (training && dropout_p > 0.0 && rng) {
        std::bernoulli_distribution keep(1.0 - dropout_p);
        for (Eigen::Index i = 0; i < input.size(); ++i) input(i) = keep(*rng) ? input(i) / (1.0 - dropout_p) : 0.0;
    }
    return scale * (adapter.B.value * (adapter.A.value * input));
}

Matrix merge(const LoRAAdapter& adapter, const Matrix& base_w, double scale) {
    if (base_w.rows() != adapter.B.value.rows() || base_w.cols() != adapter.A.value.cols()) {
        fail(Errc::dimension_mismatch, "base weight shape does not match adapter " + adapter.point.label());
    }
    return base_w + scale * (adapter.B.value * adapter.A.value);
}

std::size_t trainable_param_count(const AdapterBank& bank) {
    std::size_t total = 0;
    for (const auto& [key, slot] : bank.slots()) {
        for (const auto& adapter : slot.experts) {
            total += static_cast<std::size_t>(adapter.rank()) *
                     static_cast<std::size_t>(slot.point.in_dim + slot.point.out_dim);
        }
        if (slot.router) total += static_cast<std::size_t>(slot.router->size());
    }
    if (const Param* table = bank.task_embeddings()) total += static_cast<std::size_t>(table->size());
    return total;
}

}  // namespace prism
