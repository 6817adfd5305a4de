#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "prism/config.hpp"
#include "prism/errors.hpp"

namespace prism {

class Method;
class Backbone;
struct BenchmarkSpec;

enum class PluginKind { method, benchmark, backbone };

std::string_view plugin_kind_name(PluginKind kind);

using MethodFactory = std::function<std::unique_ptr<Method>(const Config&)>;
using BenchmarkFactory = std::function<BenchmarkSpec(const Config&, const std::filesystem::path& config_dir)>;
using BackboneFactory = std::function<std::unique_ptr<Backbone>(const Config&)>;

struct RegistrationReceipt {
    PluginKind kind;
    std::string name;
};

/// Case-folds `name` and checks it against [a-z0-9_-]+.
std::string canonical_plugin_name(std::string_view name);

/// Name -> factory map for one plugin kind. Writable until frozen.
template <class Factory>
class Registry {
public:
    explicit Registry(PluginKind kind) : kind_(kind) {}

    RegistrationReceipt add(std::string_view name, Factory factory) {
        if (frozen_) fail(Errc::registry_frozen, "cannot register '" + std::string(name) + "' after startup");
        std::string key = canonical_plugin_name(name);
        if (entries_.contains(key)) {
            fail(Errc::duplicate_name,
                 std::string(plugin_kind_name(kind_)) + " '" + key + "' is already registered by another plugin");
        }
        entries_.emplace(key, std::move(factory));
        return {kind_, key};
    }

    const Factory& resolve(std::string_view name) const {
        std::string key(name);
        std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
        auto it = entries_.find(key);
        if (it == entries_.end()) {
            std::string known;
            for (const auto& n : names()) known += (known.empty() ? "" : ", ") + n;
            fail(Errc::unknown_name, "unknown " + std::string(plugin_kind_name(kind_)) + " '" + std::string(name) +
                                         "'; registered: {" + known + "}");
        }
        return it->second;
    }

    bool contains(std::string_view name) const { return entries_.contains(std::string(name)); }

    /// Sorted lexicographically.
    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [name, f] : entries_) out.push_back(name);
        return out;
    }

    std::size_t size() const { return entries_.size(); }
    PluginKind kind() const { return kind_; }
    void freeze() { frozen_ = true; }
    bool frozen() const { return frozen_; }

private:
    PluginKind kind_;
    std::map<std::string, Factory> entries_;
    bool frozen_ = false;
};

struct Registries {
    Registry<MethodFactory> methods{PluginKind::method};
    Registry<BenchmarkFactory> benchmarks{PluginKind::benchmark};
    Registry<BackboneFactory> backbones{PluginKind::backbone};

    std::size_t total() const { return methods.size() + benchmarks.size() + backbones.size(); }
    void freeze() {
        methods.freeze();
        benchmarks.freeze();
        backbones.freeze();
    }
};

/// Symbol every plugin's integration library exports.
inline constexpr const char* kPluginEntrySymbol = "prism_register_plugin";
using PluginEntry = void (*)(Registries&);

/// File name of a plugin's single integration entry.
std::string plugin_entry_filename();

/// Loads `<root>/<plugin>/integration.so` (and one level deeper, so a root
/// may hold kind directories). Returns the number of new registrations.
std::size_t discover_plugins(Registries& registries, const std::vector<std::filesystem::path>& roots);

/// Splits PRISM_PLUGIN_PATH on ':'.
std::vector<std::filesystem::path> plugin_roots_from_env();

/// Root containing the plugins built with this library.
std::filesystem::path default_plugin_root();

}  // namespace prism
