#include "prism/benchmarks.hpp"
#include "prism/registry.hpp"

extern "C" void prism_register_plugin(prism::Registries& registries) {
    registries.benchmarks.add("trigap", [](const prism::Config& config, const std::filesystem::path& config_dir) {
        return prism::load_benchmark("trigap", config_dir, config.get_string("data_root"));
    });
}
