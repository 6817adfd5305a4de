#include "prism/benchmarks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "prism/errors.hpp"

namespace fs = std::filesystem;

namespace prism {

std::string_view eval_type_name(EvalType type) {
    switch (type) {
        case EvalType::vqa: return "vqa";
        case EvalType::exact: return "exact";
        case EvalType::caption: return "caption";
    }
    return "?";
}

EvalType parse_eval_type(std::string_view text) {
    if (text == "vqa") return EvalType::vqa;
    if (text == "exact") return EvalType::exact;
    if (text == "caption") return EvalType::caption;
    fail(Errc::malformed_manifest, "eval_type '" + std::string(text) + "' is not one of vqa, exact, caption");
}

SyntheticSpec SyntheticSpec::from_config(const Config& config, const std::string& name) {
    SyntheticSpec s;
    s.name = name;
    s.seed = static_cast<std::uint64_t>(config.get_int("data_seed"));
    s.num_tasks = config.get_int("synthetic_num_tasks");
    s.samples_per_task_train = config.get_int("synthetic_train");
    s.samples_per_task_test = config.get_int("synthetic_test");
    s.feature_dim = config.get_int("synthetic_feature_dim");
    s.answer_space_size = config.get_int("synthetic_answer_space");
    s.task_separation = config.get_real("synthetic_task_separation");
    s.noise_std = config.get_real("synthetic_noise_std");
    s.answer_spread = config.get_real("synthetic_answer_spread");
    return s;
}

namespace {

template <class T>
T required(const json& doc, const char* key, const std::string& where) {
    if (!doc.contains(key)) fail(Errc::malformed_manifest, where + ": missing field '" + key + "'");
    try {
        return doc.at(key).get<T>();
    } catch (const json::exception&) {
        fail(Errc::malformed_manifest, where + ": field '" + key + "' has the wrong type");
    }
}

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

}  // namespace

BenchmarkSpec parse_benchmark_manifest(const json& doc, const fs::path& base, bool require_data) {
    if (!doc.is_object()) fail(Errc::malformed_manifest, "manifest must be an object");
    BenchmarkSpec spec;
    spec.name = required<std::string>(doc, "name", "manifest");
    if (doc.contains("config")) {
        if (!doc["config"].is_object()) fail(Errc::malformed_manifest, spec.name + ": 'config' must be an object");
        spec.config = doc["config"];
    }
    const json tasks = doc.contains("tasks") ? doc["tasks"] : json();
    if (!tasks.is_array() || tasks.empty()) fail(Errc::malformed_manifest, spec.name + ": 'tasks' must be a nonempty list");
    for (const auto& entry : tasks) {
        const std::string where = spec.name + " task";
        TaskManifest t;
        t.task_name = required<std::string>(entry, "task_name", where);
        t.order_index = required<int>(entry, "order_index", where + " " + t.task_name);
        t.train_path = resolve(base, required<std::string>(entry, "train_path", where + " " + t.task_name));
        t.test_path = resolve(base, required<std::string>(entry, "test_path", where + " " + t.task_name));
        t.eval_type = parse_eval_type(required<std::string>(entry, "eval_type", where + " " + t.task_name));
        t.prompt_template = entry.value("prompt_template", std::string("{instruction}"));
        if (t.prompt_template.find("{instruction}") == std::string::npos)
            fail(Errc::malformed_manifest, t.task_name + ": prompt_template lacks {instruction}");
        t.num_train = entry.value("num_train", 0);
        t.num_test = entry.value("num_test", 0);
        spec.tasks.push_back(std::move(t));
    }
    std::sort(spec.tasks.begin(), spec.tasks.end(),
              [](const TaskManifest& a, const TaskManifest& b) { return a.order_index < b.order_index; });
    for (int i = 0; i < spec.num_tasks(); ++i) {
        if (spec.tasks[static_cast<std::size_t>(i)].order_index != i)
            fail(Errc::malformed_manifest, spec.name + ": order indices must be 0..T-1 without gaps or repeats");
    }
    if (require_data) {
        for (const auto& t : spec.tasks) {
            for (const auto& p : {t.train_path, t.test_path}) {
                if (!fs::exists(p)) fail(Errc::missing_data_path, "task " + t.task_name + ": " + p.string());
            }
        }
    }
    return spec;
}

json benchmark_manifest_to_json(const BenchmarkSpec& spec, const fs::path& base) {
    json tasks = json::array();
    for (const auto& t : spec.tasks) {
        tasks.push_back({{"task_name", t.task_name},
                         {"order_index", t.order_index},
                         {"train_path", t.train_path.lexically_relative(base).generic_string()},
                         {"test_path", t.test_path.lexically_relative(base).generic_string()},
                         {"eval_type", eval_type_name(t.eval_type)},
                         {"prompt_template", t.prompt_template},
                         {"num_train", t.num_train},
                         {"num_test", t.num_test}});
    }
    return {{"name", spec.name},
            {"task_indexing", "0-based"},
            {"record_format", "one JSON object per line: sample_id, image_features (omit for text-only), "
                              "instruction, answer, task_name, optional answers"},
            {"tasks", tasks},
            {"config", spec.config}};
}

BenchmarkSpec load_benchmark(const std::string& name, const fs::path& config_dir, const fs::path& data_root,
                             bool require_data) {
    const fs::path path = config_dir / "benchmarks" / (name + ".json");
    if (!fs::exists(path)) fail(Errc::unknown_benchmark, "no manifest for benchmark '" + name + "' at " + path.string());
    const json doc = read_json_file(path);
    if (!doc.contains("tasks")) {
        fail(Errc::unknown_benchmark, "'" + name + "' is a generated benchmark and has no static task list");
    }
    return parse_benchmark_manifest(doc, data_root, require_data);
}

std::string_view synthetic_alphabet() { return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"; }

namespace {

struct TemplateGroup {
    const char* topic;
    std::array<const char*, 3> phrasings;
};

constexpr std::array<TemplateGroup, 10> kTemplates = {{
    {"object", {"What object is shown in this picture?", "Name the object in the photo.",
                "Which object category does this image show?"}},
    {"figure", {"Which curve in this paper figure rises fastest?", "What does the plotted figure report?",
                "Read the figure legend and pick the series."}},
    {"caption", {"Describe the scene for a blind user.", "Caption this photo briefly.",
                 "Give a short caption of what the camera sees."}},
    {"icon", {"Which icon matches the question?", "Count the icons shown.", "Pick the icon that fits the pattern."}},
    {"math", {"How many cubes remain after removing the spheres?", "Subtract the red objects; how many are left?",
              "Solve the counting puzzle in the scene."}},
    {"medical", {"What finding does this scan show?", "Which organ appears abnormal in the scan?",
                 "Diagnose the radiology image."}},
    {"document", {"What is the invoice total in this document?", "Read the date printed on the form.",
                  "Which field of the document is highlighted?"}},
    {"chart", {"Which bar in the chart is tallest?", "What value does the chart peak at?",
               "Compare the two largest chart bars."}},
    {"road", {"Is the traffic light ahead green?", "How many lanes does the road have?",
              "What should the driver do at this junction?"}},
    {"molecule", {"Which functional group does this molecule contain?", "Name the bond type in the structure.",
                  "How many rings are in the molecule?"}},
}};

std::string synthetic_instruction(int task, Rng& rng) {
    const auto& group = kTemplates[static_cast<std::size_t>(task) % kTemplates.size()];
    std::uniform_int_distribution<int> pick(0, 2);
    std::string text = group.phrasings[static_cast<std::size_t>(pick(rng))];
    if (task >= static_cast<int>(kTemplates.size())) text += " (set " + std::to_string(task) + ")";
    return text + " Answer with one symbol.";
}

Vector random_unit(int dim, Rng& rng) {
    std::normal_distribution<double> normal;
    Vector v(dim);
    for (int i = 0; i < dim; ++i) v(i) = normal(rng);
    return v.normalized();
}

}  // namespace

BenchmarkSpec generate_synthetic(const SyntheticSpec& s, const fs::path& out_dir) {
    if (s.num_tasks < 1 || s.answer_space_size < 1 || s.feature_dim < 2)
        fail(Errc::invalid_config, "synthetic benchmark needs tasks, answers and feature_dim >= 2");
    if (s.num_tasks * s.answer_space_size > static_cast<int>(synthetic_alphabet().size()))
        fail(Errc::invalid_config, "synthetic answer spaces exceed the 62-symbol alphabet");
    if (s.num_tasks + 1 > s.feature_dim)
        fail(Errc::invalid_config, "synthetic feature_dim must exceed num_tasks");
    if (!(s.task_separation > 0.0 && s.task_separation <= 90.0))
        fail(Errc::invalid_config, "synthetic task_separation must lie in (0, 90] degrees");

    Rng rng(s.seed);
    // Orthonormal basis: one shared direction plus one per task. Mixing them
    // puts every pair of task means at exactly the requested angle.
    Matrix raw = gaussian_matrix(s.feature_dim, s.num_tasks + 1, 1.0, rng);
    Eigen::HouseholderQR<Matrix> qr(raw);
    const Matrix basis = qr.householderQ() * Matrix::Identity(s.feature_dim, s.num_tasks + 1);
    const double c = std::cos(s.task_separation * std::numbers::pi / 180.0);
    std::vector<Vector> means;
    for (int t = 0; t < s.num_tasks; ++t) {
        means.push_back(std::sqrt(std::max(c, 0.0)) * basis.col(0) + std::sqrt(1.0 - std::max(c, 0.0)) * basis.col(t + 1));
    }

    BenchmarkSpec spec;
    spec.name = s.name;
    std::normal_distribution<double> noise(0.0, s.noise_std);
    std::uniform_int_distribution<int> pick_class(0, s.answer_space_size - 1);
    for (int t = 0; t < s.num_tasks; ++t) {
        std::vector<Vector> centroids;
        for (int a = 0; a < s.answer_space_size; ++a) {
            centroids.push_back(means[static_cast<std::size_t>(t)] + s.answer_spread * random_unit(s.feature_dim, rng));
        }
        const std::string task_name = "synth" + std::to_string(t);
        auto make_split = [&](const char* split, int count) {
            std::vector<MultimodalSample> samples;
            for (int i = 0; i < count; ++i) {
                Vector x = centroids[static_cast<std::size_t>(pick_class(rng))];
                for (int d = 0; d < s.feature_dim; ++d) x(d) += noise(rng);
                int best = 0;
                for (int a = 1; a < s.answer_space_size; ++a) {
                    if ((x - centroids[static_cast<std::size_t>(a)]).squaredNorm() <
                        (x - centroids[static_cast<std::size_t>(best)]).squaredNorm())
                        best = a;
                }
                MultimodalSample sample;
                sample.sample_id = s.name + "-t" + std::to_string(t) + "-" + split + "-" + std::to_string(i);
                sample.image_features = x;
                sample.instruction = synthetic_instruction(t, rng);
                sample.answer = std::string(1, synthetic_alphabet()[static_cast<std::size_t>(t * s.answer_space_size + best)]);
                sample.task_name = task_name;
                sample.task_index = t;
                samples.push_back(std::move(sample));
            }
            return samples;
        };
        const fs::path task_dir = out_dir / ("task_" + std::to_string(t));
        TaskManifest m;
        m.task_name = task_name;
        m.order_index = t;
        m.train_path = task_dir / "train.jsonl";
        m.test_path = task_dir / "test.jsonl";
        m.eval_type = EvalType::exact;
        m.num_train = s.samples_per_task_train;
        m.num_test = s.samples_per_task_test;
        write_samples(m.train_path, make_split("train", s.samples_per_task_train));
        write_samples(m.test_path, make_split("test", s.samples_per_task_test));
        spec.tasks.push_back(std::move(m));
    }
    write_json_file(out_dir / "manifest.json", benchmark_manifest_to_json(spec, out_dir));
    return spec;
}

json sample_to_json(const MultimodalSample& sample) {
    json doc = {{"sample_id", sample.sample_id}};
    if (sample.image_features) {
        doc["image_features"] = std::vector<double>(sample.image_features->data(),
                                                    sample.image_features->data() + sample.image_features->size());
    }
    doc["instruction"] = sample.instruction;
    doc["answer"] = sample.answer;
    doc["task_name"] = sample.task_name;
    if (!sample.extra_answers.empty()) doc["answers"] = sample.extra_answers;
    return doc;
}

MultimodalSample sample_from_json(const json& doc) {
    MultimodalSample s;
    s.sample_id = doc.at("sample_id").get<std::string>();
    if (doc.contains("image_features") && !doc["image_features"].is_null()) {
        const auto values = doc["image_features"].get<std::vector<double>>();
        s.image_features = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
    }
    s.instruction = doc.at("instruction").get<std::string>();
    s.answer = doc.value("answer", std::string());
    s.task_name = doc.value("task_name", std::string());
    if (doc.contains("answers")) s.extra_answers = doc["answers"].get<std::vector<std::string>>();
    return s;
}

std::vector<MultimodalSample> read_samples(const fs::path& path, int task_index) {
    std::ifstream in(path);
    if (!in) fail(Errc::io_error, "cannot read " + path.string());
    std::vector<MultimodalSample> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(sample_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            fail(Errc::data_error, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        out.back().task_index = task_index;
    }
    return out;
}

void write_samples(const fs::path& path, const std::vector<MultimodalSample>& samples) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::io_error, "cannot write " + path.string());
    for (const auto& s : samples) out << sample_to_json(s).dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
    if (!out) fail(Errc::io_error, "write failed: " + path.string());
}

std::string apply_prompt(const std::string& prompt_template, const std::string& instruction) {
    std::string out = prompt_template;
    const std::string key = "{instruction}";
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + instruction.size())) {
        out.replace(pos, key.size(), instruction);
    }
    return out;
}

TaskLoader::TaskLoader(std::vector<MultimodalSample> samples, int batch_size, std::uint64_t seed)
    : samples_(std::move(samples)), batch_size_(batch_size), seed_(seed) {
    if (batch_size_ < 1) fail(Errc::invalid_config, "batch_size must be positive");
}

int TaskLoader::batches_per_epoch() const {
    return static_cast<int>((samples_.size() + static_cast<std::size_t>(batch_size_) - 1) /
                            static_cast<std::size_t>(batch_size_));
}

std::vector<std::vector<MultimodalSample>> TaskLoader::epoch(int epoch_index) const {
    std::vector<std::size_t> order(samples_.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed_, "epoch" + std::to_string(epoch_index)));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<MultimodalSample>> batches;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size_)) {
        std::vector<MultimodalSample> batch;
        for (std::size_t j = i; j < std::min(order.size(), i + static_cast<std::size_t>(batch_size_)); ++j)
            batch.push_back(samples_[order[j]]);
        batches.push_back(std::move(batch));
    }
    return batches;
}

std::vector<MultimodalSample> load_task_split(const BenchmarkSpec& spec, int task_index, bool train) {
    if (task_index < 0 || task_index >= spec.num_tasks())
        fail(Errc::bad_task_ids, "task " + std::to_string(task_index) + " outside 0.." + std::to_string(spec.num_tasks() - 1));
    const TaskManifest& m = spec.tasks[static_cast<std::size_t>(task_index)];
    const fs::path& path = train ? m.train_path : m.test_path;
    if (!fs::exists(path)) fail(Errc::missing_data_path, "task " + m.task_name + ": " + path.string());
    auto samples = read_samples(path, task_index);
    for (auto& s : samples) {
        s.instruction = apply_prompt(m.prompt_template, s.instruction);
        if (s.task_name.empty()) s.task_name = m.task_name;
    }
    return samples;
}

TaskStream::TaskStream(const BenchmarkSpec& spec, std::vector<int> task_ids, int batch_size, std::uint64_t seed)
    : spec_(&spec), task_ids_(std::move(task_ids)), batch_size_(batch_size), seed_(seed) {
    for (std::size_t i = 0; i < task_ids_.size(); ++i) {
        const int id = task_ids_[i];
        if (id < 0 || id >= spec.num_tasks())
            fail(Errc::bad_task_ids, "task id " + std::to_string(id) + " is outside 0.." + std::to_string(spec.num_tasks() - 1));
        if (i > 0 && id <= task_ids_[i - 1]) fail(Errc::bad_task_ids, "task ids must be strictly increasing");
    }
}

StreamStage TaskStream::stage(std::size_t position) const {
    const int id = task_ids_.at(position);
    return StreamStage{id, spec_->tasks[static_cast<std::size_t>(id)],
                       TaskLoader(load_task_split(*spec_, id, true), batch_size_,
                                  derive_seed(seed_, "task" + std::to_string(id))),
                       load_task_split(*spec_, id, false)};
}

TaskStream iterate_stream(const BenchmarkSpec& spec, const std::vector<int>& task_ids, int batch_size,
                          std::uint64_t seed) {
    return TaskStream(spec, task_ids, batch_size, seed);
}

json replay_to_json(const ReplayBuffer& buffer) {
    json partitions = json::object();
    for (const auto& [task, ids] : buffer.ids()) partitions[std::to_string(task)] = ids;
    return {{"capacity", buffer.capacity}, {"sample_probability", buffer.sample_probability}, {"partitions", partitions}};
}

ReplayBuffer replay_from_json(const json& doc, const BenchmarkSpec* spec) {
    ReplayBuffer buffer;
    try {
        buffer.capacity = doc.at("capacity").get<int>();
        buffer.sample_probability = doc.at("sample_probability").get<double>();
        for (const auto& [key, ids] : doc.at("partitions").items()) {
            const int task = std::stoi(key);
            auto& partition = buffer.partitions[task];
            if (!spec) {
                for (const auto& id : ids) {
                    MultimodalSample s;
                    s.sample_id = id.get<std::string>();
                    s.task_index = task;
                    partition.push_back(std::move(s));
                }
                continue;
            }
            const auto samples = load_task_split(*spec, task, true);
            std::map<std::string, const MultimodalSample*> by_id;
            for (const auto& s : samples) by_id[s.sample_id] = &s;
            for (const auto& id : ids) {
                auto it = by_id.find(id.get<std::string>());
                if (it == by_id.end()) fail(Errc::data_error, "replay sample '" + id.get<std::string>() + "' not found");
                partition.push_back(*it->second);
            }
        }
    } catch (const json::exception& e) {
        fail(Errc::malformed_manifest, std::string("replay sidecar: ") + e.what());
    }
    return buffer;
}

json write_replay_sidecar(const ReplayBuffer& buffer, const fs::path& path) {
    json doc = replay_to_json(buffer);
    write_json_file(path, doc);
    return doc;
}

ReplayBuffer read_replay_sidecar(const fs::path& path, const BenchmarkSpec& spec) {
    return replay_from_json(read_json_file(path), &spec);
}

}  // namespace prism
