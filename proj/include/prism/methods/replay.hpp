#pragma once

#include <map>
#include <span>
#include <vector>

#include "prism/backbone.hpp"
#include "prism/tensor.hpp"

namespace prism {

/// Task-partitioned memory of earlier training samples.
struct ReplayBuffer {
    int capacity = 180;
    double sample_probability = 0.7;
    std::map<int, std::vector<MultimodalSample>> partitions;

    std::size_t total() const;
    /// Sample ids per task, in stored order.
    std::map<int, std::vector<std::string>> ids() const;
};

/// Share of `capacity` reserved for `task_index` when the first
/// num_tasks - 1 tasks split it evenly (shares differ by at most one).
int replay_share(int capacity, int task_index, int num_tasks);

/// Stores a seeded uniform subset (without replacement) of the task's
/// samples. The final task stores nothing.
ReplayBuffer& replay_store(ReplayBuffer& buffer, int task_index, std::span<const MultimodalSample> task_samples,
                           int num_tasks, Rng& rng);

/// For each current example, with the buffer's probability, appends one
/// stored example drawn uniformly from partitions other than `current_task`.
std::vector<MultimodalSample> replay_mix(const ReplayBuffer& buffer, std::vector<MultimodalSample> batch,
                                         int current_task, Rng& rng);

}  // namespace prism
