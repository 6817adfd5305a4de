#include "prism/registry.hpp"

#include <dlfcn.h>

#include <cstdlib>
#include <sstream>

namespace fs = std::filesystem;

namespace prism {

std::string_view plugin_kind_name(PluginKind kind) {
    switch (kind) {
        case PluginKind::method: return "method";
        case PluginKind::benchmark: return "benchmark";
        case PluginKind::backbone: return "backbone";
    }
    return "?";
}

std::string canonical_plugin_name(std::string_view name) {
    std::string key(name);
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    const bool valid = !key.empty() && std::all_of(key.begin(), key.end(), [](unsigned char c) {
        return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
    });
    if (!valid) fail(Errc::invalid_name, "'" + std::string(name) + "' must match [a-z0-9_-]+");
    return key;
}

std::string plugin_entry_filename() { return "integration.so"; }

namespace {

void load_one(Registries& registries, const fs::path& entry) {
    const std::string plugin = entry.parent_path().filename().string();
    void* handle = dlopen(entry.c_str(), RTLD_NOW | RTLD_LOCAL);
    if (!handle) fail(Errc::plugin_load_error, "plugin '" + plugin + "': " + dlerror());
    auto register_fn = reinterpret_cast<PluginEntry>(dlsym(handle, kPluginEntrySymbol));
    if (!register_fn) {
        fail(Errc::plugin_load_error, "plugin '" + plugin + "' does not export " + kPluginEntrySymbol);
    }
    // The handle stays open for the life of the process: factories live in it.
    try {
        register_fn(registries);
    } catch (const Error& e) {
        fail(e.code() == Errc::duplicate_name ? Errc::duplicate_name : Errc::plugin_load_error,
             "plugin '" + plugin + "': " + e.what());
    } catch (const std::exception& e) {
        fail(Errc::plugin_load_error, "plugin '" + plugin + "': " + e.what());
    }
}

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_directory()) out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

std::size_t discover_plugins(Registries& registries, const std::vector<fs::path>& roots) {
    const std::size_t before = registries.total();
    const std::string entry_name = plugin_entry_filename();
    for (const auto& root : roots) {
        if (!fs::is_directory(root)) fail(Errc::plugin_load_error, "plugin root is not a directory: " + root.string());
        for (const auto& sub : sorted_subdirs(root)) {
            if (fs::exists(sub / entry_name)) {
                load_one(registries, sub / entry_name);
                continue;
            }
            for (const auto& nested : sorted_subdirs(sub)) {
                if (fs::exists(nested / entry_name)) load_one(registries, nested / entry_name);
            }
        }
    }
    return registries.total() - before;
}

std::vector<fs::path> plugin_roots_from_env() {
    std::vector<fs::path> roots;
    const char* env = std::getenv("PRISM_PLUGIN_PATH");
    if (!env) return roots;
    std::stringstream ss(env);
    std::string part;
    while (std::getline(ss, part, ':')) {
        if (!part.empty()) roots.emplace_back(part);
    }
    return roots;
}

fs::path default_plugin_root() { return fs::path(PRISM_DEFAULT_PLUGIN_DIR); }

}  // namespace prism
