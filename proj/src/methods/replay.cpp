#include "prism/methods/replay.hpp"

#include <algorithm>
#include <numeric>

namespace prism {

std::size_t ReplayBuffer::total() const {
    std::size_t n = 0;
    for (const auto& [task, samples] : partitions) n += samples.size();
    return n;
}

std::map<int, std::vector<std::string>> ReplayBuffer::ids() const {
    std::map<int, std::vector<std::string>> out;
    for (const auto& [task, samples] : partitions) {
        auto& list = out[task];
        for (const auto& s : samples) list.push_back(s.sample_id);
    }
    return out;
}

int replay_share(int capacity, int task_index, int num_tasks) {
    const int stored_tasks = num_tasks - 1;
    if (stored_tasks <= 0 || task_index >= stored_tasks || task_index < 0) return 0;
    return capacity / stored_tasks + (task_index < capacity % stored_tasks ? 1 : 0);
}

ReplayBuffer& replay_store(ReplayBuffer& buffer, int task_index, std::span<const MultimodalSample> task_samples,
                           int num_tasks, Rng& rng) {
    const int share = replay_share(buffer.capacity, task_index, num_tasks);
    if (share == 0) return buffer;
    std::vector<std::size_t> order(task_samples.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(share), order.size());
    // Partial Fisher-Yates: the first `keep` slots are a uniform subset.
    for (std::size_t i = 0; i < keep; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
        std::swap(order[i], order[pick(rng)]);
    }
    auto& partition = buffer.partitions[task_index];
    partition.clear();
    for (std::size_t i = 0; i < keep; ++i) partition.push_back(task_samples[order[i]]);
    return buffer;
}

std::vector<MultimodalSample> replay_mix(const ReplayBuffer& buffer, std::vector<MultimodalSample> batch,
                                         int current_task, Rng& rng) {
    std::vector<const MultimodalSample*> pool;
    for (const auto& [task, samples] : buffer.partitions) {
        if (task == current_task) continue;
        for (const auto& s : samples) pool.push_back(&s);
    }
    if (pool.empty() || buffer.sample_probability <= 0.0) return batch;
    std::bernoulli_distribution replay(buffer.sample_probability);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const std::size_t current = batch.size();
    for (std::size_t i = 0; i < current; ++i) {
        if (replay(rng)) batch.push_back(*pool[pick(rng)]);
    }
    return batch;
}

}  // namespace prism
