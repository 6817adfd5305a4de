#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "prism/backbone.hpp"
#include "prism/config.hpp"
#include "prism/methods/replay.hpp"

namespace prism {

enum class EvalType { vqa, exact, caption };

std::string_view eval_type_name(EvalType type);
EvalType parse_eval_type(std::string_view text);

struct TaskManifest {
    std::string task_name;
    int order_index = 0;
    std::filesystem::path train_path;
    std::filesystem::path test_path;
    EvalType eval_type = EvalType::exact;
    std::string prompt_template = "{instruction}";
    int num_train = 0;
    int num_test = 0;

    bool operator==(const TaskManifest&) const = default;
};

/// Ordered task stream. Task indices are 0-based.
struct BenchmarkSpec {
    std::string name;
    std::vector<TaskManifest> tasks;
    json config = json::object();  // config layer shipped with the manifest

    int num_tasks() const { return static_cast<int>(tasks.size()); }
    bool operator==(const BenchmarkSpec&) const = default;
};

struct SyntheticSpec {
    std::string name = "synthetic";
    std::uint64_t seed = 0;
    int num_tasks = 6;
    int samples_per_task_train = 200;
    int samples_per_task_test = 50;
    int feature_dim = 32;
    int answer_space_size = 4;
    double task_separation = 60.0;  // minimum pairwise angle of task means, degrees
    double noise_std = 0.05;
    double answer_spread = 0.6;

    static SyntheticSpec from_config(const Config& config, const std::string& name);
};

/// Parses a manifest document. Relative data paths resolve against `base`.
/// With `require_data`, every referenced file must exist.
BenchmarkSpec parse_benchmark_manifest(const json& doc, const std::filesystem::path& base, bool require_data);
json benchmark_manifest_to_json(const BenchmarkSpec& spec, const std::filesystem::path& base);

/// Loads `<config_dir>/benchmarks/<name>.json`, resolving data under `data_root`.
BenchmarkSpec load_benchmark(const std::string& name, const std::filesystem::path& config_dir,
                             const std::filesystem::path& data_root, bool require_data = true);

/// Writes task_<t>/{train,test}.jsonl and manifest.json under `out_dir`.
BenchmarkSpec generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

/// The answer alphabet available to synthetic tasks.
std::string_view synthetic_alphabet();

json sample_to_json(const MultimodalSample& sample);
MultimodalSample sample_from_json(const json& doc);

std::vector<MultimodalSample> read_samples(const std::filesystem::path& path, int task_index = -1);
void write_samples(const std::filesystem::path& path, const std::vector<MultimodalSample>& samples);

/// Substitutes the instruction into a manifest prompt template.
std::string apply_prompt(const std::string& prompt_template, const std::string& instruction);

/// Shuffled mini-batches of one task's training split.
class TaskLoader {
public:
    TaskLoader(std::vector<MultimodalSample> samples, int batch_size, std::uint64_t seed);

    std::vector<std::vector<MultimodalSample>> epoch(int epoch_index) const;
    int batches_per_epoch() const;
    const std::vector<MultimodalSample>& samples() const { return samples_; }

private:
    std::vector<MultimodalSample> samples_;
    int batch_size_;
    std::uint64_t seed_;
};

struct StreamStage {
    int task_index;
    TaskManifest manifest;
    TaskLoader train;
    std::vector<MultimodalSample> test;
};

/// Validated, lazily loaded sequence of the requested stages.
class TaskStream {
public:
    TaskStream(const BenchmarkSpec& spec, std::vector<int> task_ids, int batch_size, std::uint64_t seed);

    std::size_t size() const { return task_ids_.size(); }
    const std::vector<int>& task_ids() const { return task_ids_; }
    StreamStage stage(std::size_t position) const;

private:
    const BenchmarkSpec* spec_;
    std::vector<int> task_ids_;
    int batch_size_;
    std::uint64_t seed_;
};

/// Loads one task's split with the manifest prompt applied.
std::vector<MultimodalSample> load_task_split(const BenchmarkSpec& spec, int task_index, bool train);

TaskStream iterate_stream(const BenchmarkSpec& spec, const std::vector<int>& task_ids, int batch_size,
                          std::uint64_t seed);

/// Sidecar document: capacity, probability and sample ids grouped by task.
json replay_to_json(const ReplayBuffer& buffer);
/// Resolves stored ids against the benchmark's training splits; without a
/// benchmark the samples carry only their ids.
ReplayBuffer replay_from_json(const json& doc, const BenchmarkSpec* spec);

json write_replay_sidecar(const ReplayBuffer& buffer, const std::filesystem::path& path);
/// Rebuilds a buffer; ids are resolved against the benchmark's training splits.
ReplayBuffer read_replay_sidecar(const std::filesystem::path& path, const BenchmarkSpec& spec);

}  // namespace prism
