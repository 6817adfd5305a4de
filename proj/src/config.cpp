#include "prism/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "prism/errors.hpp"

namespace fs = std::filesystem;

namespace prism {

std::string_view value_type_name(ValueType type) {
    switch (type) {
        case ValueType::integer: return "integer";
        case ValueType::real: return "real";
        case ValueType::boolean: return "boolean";
        case ValueType::string: return "string";
        case ValueType::string_list: return "list of strings";
        case ValueType::int_list: return "list of integers";
    }
    return "?";
}

const std::vector<ConfigKey>& config_schema() {
    using V = ValueType;
    static const std::vector<ConfigKey> schema = {
        // run
        {"seed", V::integer, 0, "run seed (shuffling, adapter init, dropout)"},
        {"out_dir", V::string, "runs", "run output root"},
        {"plugin_roots", V::string_list, json::array(), "extra plugin directories"},
        {"data_root", V::string, "data", "dataset root"},
        {"backbone", V::string, "surrogate", "backbone plugin name"},
        {"conversation_template", V::string, "{instruction}", "wraps every instruction"},
        // backbone
        {"vocab_size", V::integer, 256, "byte-level base vocabulary"},
        {"model_dim", V::integer, 64, ""},
        {"num_layers", V::integer, 2, ""},
        {"num_heads", V::integer, 4, ""},
        {"ffn_dim", V::integer, 256, ""},
        {"max_seq_len", V::integer, 2048, ""},
        {"image_feature_dim", V::integer, 32, ""},
        {"num_visual_tokens", V::integer, 4, ""},
        {"backbone_seed", V::integer, 1234, "seed of the frozen base weights"},
        // training
        {"lr", V::real, 2e-4, ""},
        {"projector_lr", V::real, 2e-5, ""},
        {"warmup_ratio", V::real, 0.03, ""},
        {"weight_decay", V::real, 0.0, ""},
        {"epochs", V::integer, 1, ""},
        {"batch_size", V::integer, 8, ""},
        {"grad_accum_steps", V::integer, 1, ""},
        {"max_grad_norm", V::real, 0.0, "0 disables clipping"},
        {"max_new_tokens", V::integer, 8, ""},
        {"vqa_containment", V::boolean, false, ""},
        {"bf16", V::boolean, false, "accepted, inert"},
        {"gradient_checkpointing", V::boolean, false, "accepted, inert"},
        {"deepspeed", V::string, "", "accepted, inert"},
        // lora
        {"lora_r", V::integer, 8, ""},
        {"lora_alpha", V::real, 16.0, ""},
        {"lora_dropout", V::real, 0.05, ""},
        {"lora_targets", V::string_list,
         json::array({"q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"}), ""},
        // methods
        {"num_experts", V::integer, 4, "MoE-LoRA experts per point"},
        {"replay_capacity", V::integer, 180, ""},
        {"replay_probability", V::real, 0.7, ""},
        {"clmoe_task_embedding_dim", V::integer, 64, ""},
        {"disco_tau", V::real, 0.05, ""},
        {"modalprompt_prefix_len", V::integer, 10, ""},
        {"modalprompt_transfer_num", V::integer, 1, ""},
        {"modalprompt_lambda", V::real, 0.5, ""},
        {"modalprompt_momentum", V::real, 0.9, ""},
        {"modalprompt_hidden_dim", V::integer, 64, "prompt transform MLP width"},
        {"same_tau_score", V::real, 0.1, ""},
        {"same_momentum", V::real, 0.9, ""},
        {"same_window_size", V::integer, 3, ""},
        {"same_max_components", V::integer, 64, ""},
        {"same_energy_ratio", V::real, 0.9, ""},
        // synthetic data
        {"data_seed", V::integer, 1234, ""},
        {"synthetic_num_tasks", V::integer, 6, ""},
        {"synthetic_train", V::integer, 200, ""},
        {"synthetic_test", V::integer, 50, ""},
        {"synthetic_feature_dim", V::integer, 32, ""},
        {"synthetic_answer_space", V::integer, 4, ""},
        {"synthetic_task_separation", V::real, 60.0, "degrees"},
        {"synthetic_noise_std", V::real, 0.05, ""},
        {"synthetic_answer_spread", V::real, 0.6, ""},
    };
    return schema;
}

const ConfigKey* find_config_key(const std::string& name) {
    const auto& schema = config_schema();
    auto it = std::find_if(schema.begin(), schema.end(), [&](const ConfigKey& k) { return k.name == name; });
    return it == schema.end() ? nullptr : &*it;
}

namespace {

bool matches(ValueType type, const json& value) {
    switch (type) {
        case ValueType::integer: return value.is_number_integer();
        case ValueType::real: return value.is_number();
        case ValueType::boolean: return value.is_boolean();
        case ValueType::string: return value.is_string();
        case ValueType::string_list:
            return value.is_array() &&
                   std::all_of(value.begin(), value.end(), [](const json& v) { return v.is_string(); });
        case ValueType::int_list:
            return value.is_array() &&
                   std::all_of(value.begin(), value.end(), [](const json& v) { return v.is_number_integer(); });
    }
    return false;
}

}  // namespace

Config::Config() {
    for (const auto& key : config_schema()) {
        values_[key.name] = key.default_value;
        sources_[key.name] = "defaults";
    }
}

void Config::set(const std::string& key, const json& value, const std::string& source) {
    if (const ConfigKey* spec = find_config_key(key)) {
        if (!matches(spec->type, value)) {
            fail(Errc::config_type_error, "key '" + key + "' expects " + std::string(value_type_name(spec->type)) +
                                              ", got " + value.dump() + " in " + source);
        }
        // Keep reals as reals so the resolved manifest is stable.
        values_[key] = spec->type == ValueType::real ? json(value.get<double>()) : value;
    } else {
        values_[key] = value;
    }
    sources_[key] = source;
}

std::vector<std::string> Config::merge(const json& doc, const std::string& source) {
    if (!doc.is_object()) fail(Errc::config_type_error, "config document must be an object: " + source);
    std::vector<std::string> unknown;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (!find_config_key(it.key())) unknown.push_back(it.key());
        set(it.key(), it.value(), source);
    }
    return unknown;
}

const std::string& Config::source_of(const std::string& key) const {
    static const std::string none;
    auto it = sources_.find(key);
    return it == sources_.end() ? none : it->second;
}

namespace {

const json& lookup(const json& values, const std::string& key) {
    auto it = values.find(key);
    if (it == values.end()) fail(Errc::config_type_error, "missing config key '" + key + "'");
    return *it;
}

}  // namespace

int Config::get_int(const std::string& key) const {
    const json& v = lookup(values_, key);
    if (!v.is_number_integer()) fail(Errc::config_type_error, "key '" + key + "' is not an integer");
    return v.get<int>();
}

double Config::get_real(const std::string& key) const {
    const json& v = lookup(values_, key);
    if (!v.is_number()) fail(Errc::config_type_error, "key '" + key + "' is not a number");
    return v.get<double>();
}

bool Config::get_bool(const std::string& key) const {
    const json& v = lookup(values_, key);
    if (!v.is_boolean()) fail(Errc::config_type_error, "key '" + key + "' is not a boolean");
    return v.get<bool>();
}

std::string Config::get_string(const std::string& key) const {
    const json& v = lookup(values_, key);
    if (!v.is_string()) fail(Errc::config_type_error, "key '" + key + "' is not a string");
    return v.get<std::string>();
}

std::vector<std::string> Config::get_string_list(const std::string& key) const {
    const json& v = lookup(values_, key);
    if (!matches(ValueType::string_list, v)) fail(Errc::config_type_error, "key '" + key + "' is not a string list");
    return v.get<std::vector<std::string>>();
}

std::vector<int> Config::get_int_list(const std::string& key) const {
    const json& v = lookup(values_, key);
    if (!matches(ValueType::int_list, v)) fail(Errc::config_type_error, "key '" + key + "' is not an integer list");
    return v.get<std::vector<int>>();
}

json Config::to_json() const { return values_; }

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::io_error, "cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        fail(Errc::malformed_manifest, path.string() + ": " + e.what());
    }
}

void write_json_file(const fs::path& path, const json& doc) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::io_error, "cannot write " + path.string());
    out << doc.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
    if (!out) fail(Errc::io_error, "write failed: " + path.string());
}

namespace {

std::vector<fs::path> sorted_json_files(const fs::path& dir) {
    std::vector<fs::path> files;
    if (!fs::is_directory(dir)) return files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

void merge_file(Config& config, const fs::path& path, const json& doc, ConfigLoadReport& report) {
    for (const auto& key : config.merge(doc, path.string())) {
        report.warnings.push_back("unknown config key '" + key + "' in " + path.string());
    }
    report.files.push_back(path);
}

}  // namespace

Config load_config_tree(const fs::path& config_dir, const std::string& benchmark, const std::string& method,
                        const CliOverrides& cli, ConfigLoadReport* report_out) {
    if (!fs::is_directory(config_dir)) fail(Errc::missing_config_dir, config_dir.string());
    ConfigLoadReport report;
    Config config;

    // Lowest to highest precedence.
    for (const auto& path : sorted_json_files(config_dir / "paths")) {
        merge_file(config, path, read_json_file(path), report);
    }

    const fs::path bench_path = config_dir / "benchmarks" / (benchmark + ".json");
    json bench_settings = json::object();
    if (fs::exists(bench_path)) {
        const json doc = read_json_file(bench_path);
        if (doc.contains("config")) bench_settings = doc.at("config");
    }
    const fs::path method_path = config_dir / "methods" / (method + ".json");
    json method_doc = json::object();
    if (fs::exists(method_path)) method_doc = read_json_file(method_path);

    // The backbone name may be chosen by any layer above the backbone file.
    std::string backbone = config.get_string("backbone");
    if (bench_settings.contains("backbone") && bench_settings["backbone"].is_string())
        backbone = bench_settings["backbone"];
    if (method_doc.contains("backbone") && method_doc["backbone"].is_string()) backbone = method_doc["backbone"];
    const fs::path backbone_path = config_dir / "backbone" / (backbone + ".json");
    if (fs::exists(backbone_path)) merge_file(config, backbone_path, read_json_file(backbone_path), report);

    if (fs::exists(bench_path)) merge_file(config, bench_path, bench_settings, report);
    if (fs::exists(method_path)) merge_file(config, method_path, method_doc, report);

    if (fs::is_directory(config_dir / "deepspeed")) {
        report.notices.push_back("config/deepspeed present: distributed settings are accepted and ignored");
    }
    if (const char* data_root = std::getenv("PRISM_DATA_ROOT"); data_root && *data_root) {
        config.set("data_root", std::string(data_root), "env:PRISM_DATA_ROOT");
    }

    if (cli.seed) config.set("seed", *cli.seed, "cli");
    if (cli.out_dir) config.set("out_dir", *cli.out_dir, "cli");
    if (!cli.plugin_roots.empty()) {
        auto roots = config.get_string_list("plugin_roots");
        roots.insert(roots.end(), cli.plugin_roots.begin(), cli.plugin_roots.end());
        config.set("plugin_roots", roots, "cli");
    }
    for (const char* key : {"bf16", "gradient_checkpointing"}) {
        if (config.get_bool(key)) report.notices.push_back(std::string(key) + " is accepted but inert at desk scale");
    }

    if (report_out) *report_out = std::move(report);
    return config;
}

}  // namespace prism
