#include "prism/benchmarks.hpp"
#include "prism/registry.hpp"

// Generated on demand under <data_root>/synthetic6/.
extern "C" void prism_register_plugin(prism::Registries& registries) {
    registries.benchmarks.add("synthetic6", [](const prism::Config& config, const std::filesystem::path&) {
        const auto spec = prism::SyntheticSpec::from_config(config, "synthetic6");
        return prism::generate_synthetic(spec, std::filesystem::path(config.get_string("data_root")) / "synthetic6");
    });
}
