#include <memory>

#include "prism/methods/builtin.hpp"
#include "prism/registry.hpp"

extern "C" void prism_register_plugin(prism::Registries& registries) {
    registries.methods.add("modalprompt", [](const prism::Config&) { return std::make_unique<prism::ModalPrompt>(); });
}
