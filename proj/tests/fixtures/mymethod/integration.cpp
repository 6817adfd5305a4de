// Third-party style method plugin: single LoRA adapter on the FFN points only.
#include <memory>

#include "prism/methods/builtin.hpp"
#include "prism/registry.hpp"

namespace {

class MyMethod : public prism::AdapterMethod {
public:
    std::string name() const override { return "mymethod"; }

protected:
    void setup_bank(const prism::MethodContext&) override {
        prism::LoRAConfig cfg = lora_;
        cfg.targets.assign(prism::kFfnPoints.begin(), prism::kFfnPoints.end());
        bank_ = prism::inject(*backbone_, cfg, 1, init_rng_);
    }
};

}  // namespace

extern "C" void prism_register_plugin(prism::Registries& registries) {
    registries.methods.add("mymethod", [](const prism::Config&) { return std::make_unique<MyMethod>(); });
}
