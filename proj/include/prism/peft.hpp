#pragma once

#include <map>
#include <optional>
#include <vector>

#include "prism/config.hpp"
#include "prism/injection.hpp"
#include "prism/tensor.hpp"

namespace prism {

class Backbone;

struct LoRAConfig {
    int r = 8;
    double alpha = 16.0;
    double dropout_p = 0.05;
    std::vector<PointName> targets{kAllPoints.begin(), kAllPoints.end()};

    double scale() const { return alpha / r; }
    void validate() const;
    static LoRAConfig from_config(const Config& config);
};

/// delta(x) = scale * B * A * x. B starts at zero so a fresh adapter is an
/// exact identity overlay.
struct LoRAAdapter {
    InjectionPoint point;
    int expert_index = 0;
    Param A;  // r x in_dim
    Param B;  // out_dim x r

    int rank() const { return static_cast<int>(A.value.rows()); }
};

/// What the per-point router reads.
enum class RouterInput {
    none,    // no router; weights come from the forward plan
    pooled,  // one sample-level vector (mean instruction embedding)
    token,   // each token's normalized FFN input, concatenated with a task embedding slot
};

struct AdapterSlot {
    InjectionPoint point;
    std::vector<LoRAAdapter> experts;
    double scale = 1.0;            // alpha / per-expert rank
    std::optional<Param> router;   // num_experts x router_input_dim
};

class AdapterBank {
public:
    std::map<PointKey, AdapterSlot>& slots() { return slots_; }
    const std::map<PointKey, AdapterSlot>& slots() const { return slots_; }

    AdapterSlot* find(int layer, PointName name);
    const AdapterSlot* find(int layer, PointName name) const;

    int experts_per_point() const { return experts_per_point_; }
    RouterInput router_input() const { return router_input_; }

    /// Attaches one zero-initialised router per slot.
    void add_routers(RouterInput input, int router_input_dim);
    /// CL-MoE task-embedding table (num_tasks x dim).
    void add_task_embeddings(int num_tasks, int dim, Rng& rng);
    Param* task_embeddings() { return task_embeddings_ ? &*task_embeddings_ : nullptr; }
    const Param* task_embeddings() const { return task_embeddings_ ? &*task_embeddings_ : nullptr; }

    /// Only expert `expert` (or all, for -1) stays trainable.
    void set_trainable_expert(int expert);

    std::vector<Param*> params();
    std::vector<const Param*> params() const;

    nlohmann::json serialize() const;
    /// Restores values into an already-injected bank with identical layout.
    void deserialize(const nlohmann::json& doc);

private:
    friend AdapterBank inject(const Backbone&, const LoRAConfig&, int, Rng&);

    std::map<PointKey, AdapterSlot> slots_;
    int experts_per_point_ = 1;
    RouterInput router_input_ = RouterInput::none;
    std::optional<Param> task_embeddings_;
};

/// Attaches `experts_per_point` adapters of rank r / experts_per_point to
/// every targeted point of every layer. Base weights are untouched.
AdapterBank inject(const Backbone& backbone, const LoRAConfig& config, int experts_per_point, Rng& rng);

/// scale * B * A * dropout(x); dropout only when training.
Vector adapter_delta(const Vector& x, const LoRAAdapter& adapter, double scale, bool training,
                     double dropout_p = 0.0, Rng* rng = nullptr);

/// base_W + scale * B * A.
Matrix merge(const LoRAAdapter& adapter, const Matrix& base_w, double scale);

/// Sum of r_eff * (in + out) over adapters plus routers and task embeddings.
std::size_t trainable_param_count(const AdapterBank& bank);

}  // namespace prism
