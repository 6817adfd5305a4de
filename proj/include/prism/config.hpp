#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace prism {

using json = nlohmann::json;

enum class ValueType { integer, real, boolean, string, string_list, int_list };

std::string_view value_type_name(ValueType type);

struct ConfigKey {
    std::string name;
    ValueType type;
    json default_value;
    std::string help;
};

/// The full table of recognised configuration keys with their defaults.
const std::vector<ConfigKey>& config_schema();
const ConfigKey* find_config_key(const std::string& name);

/// A flat, typed key-value configuration. Values are validated against the
/// schema when layered in; lookups of unknown keys are programming errors.
class Config {
public:
    Config();  // populated with schema defaults

    static Config defaults() { return Config(); }

    int get_int(const std::string& key) const;
    double get_real(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::string get_string(const std::string& key) const;
    std::vector<std::string> get_string_list(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const;

    bool has(const std::string& key) const { return values_.contains(key); }

    /// Sets one key after checking its type; `source` names the file or
    /// layer for error messages. Unknown keys are kept but reported.
    void set(const std::string& key, const json& value, const std::string& source);

    /// Layers every key of `doc` over this config. Returns the unknown keys.
    std::vector<std::string> merge(const json& doc, const std::string& source);

    /// Where each value came from ("defaults", a file path, "cli", ...).
    const std::string& source_of(const std::string& key) const;

    const json& values() const { return values_; }
    json to_json() const;

private:
    json values_ = json::object();
    std::map<std::string, std::string> sources_;
};

struct ConfigLoadReport {
    std::vector<std::string> warnings;
    std::vector<std::string> notices;
    std::vector<std::filesystem::path> files;
};

/// Overrides from the command line (highest precedence).
struct CliOverrides {
    std::optional<int> seed;
    std::optional<std::string> out_dir;
    std::vector<std::string> plugin_roots;
};

/// Loads `config_dir` with precedence CLI > method > benchmark > backbone >
/// paths > defaults. The backbone file is `backbone/<backbone>.json` where
/// `backbone` is resolved from the layers below it (default "surrogate").
/// Environment: PRISM_DATA_ROOT overrides data_root.
Config load_config_tree(const std::filesystem::path& config_dir, const std::string& benchmark,
                        const std::string& method, const CliOverrides& cli,
                        ConfigLoadReport* report = nullptr);

/// Reads one JSON document, raising IoError / MalformedManifest on failure.
json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const json& doc);

}  // namespace prism
