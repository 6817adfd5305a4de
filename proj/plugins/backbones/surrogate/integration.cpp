#include "prism/backbone.hpp"
#include "prism/registry.hpp"

extern "C" void prism_register_plugin(prism::Registries& registries) {
    registries.backbones.add("surrogate", [](const prism::Config& config) {
        return prism::build_backbone(prism::BackboneConfig::from_config(config));
    });
}
