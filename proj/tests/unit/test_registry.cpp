#include <doctest.h>

#include <fstream>

#include "prism/methods/method.hpp"
#include "prism/registry.hpp"
#include "support.hpp"

using namespace prism;

namespace {

MethodFactory null_factory() {
    return [](const Config&) -> std::unique_ptr<Method> { return nullptr; };
}

Errc code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return Errc::usage_error;
}

}  // namespace

TEST_CASE("register and resolve") {
    Registry<MethodFactory> r(PluginKind::method);
    const auto receipt = r.add("FtLoRA", null_factory());
    CHECK(receipt.name == "ftlora");
    CHECK(receipt.kind == PluginKind::method);
    CHECK(r.contains("ftlora"));
    CHECK_NOTHROW(r.resolve("ftlora"));
    CHECK_NOTHROW(r.resolve("FTLORA"));
    CHECK(code_of([&] { r.add("ftlora", null_factory()); }) == Errc::duplicate_name);
    CHECK(code_of([&] { r.add("FT LoRA", null_factory()); }) == Errc::invalid_name);
    CHECK(code_of([&] { r.add("", null_factory()); }) == Errc::invalid_name);
}

TEST_CASE("names are sorted and the registry freezes") {
    Registry<MethodFactory> r(PluginKind::method);
    for (const char* n : {"zeta", "alpha", "mid"}) r.add(n, null_factory());
    CHECK(r.names() == std::vector<std::string>{"alpha", "mid", "zeta"});
    r.freeze();
    CHECK(code_of([&] { r.add("beta", null_factory()); }) == Errc::registry_frozen);
}

TEST_CASE("built-in plugins are discovered through the public entry point") {
    Registries regs;
    CHECK(discover_plugins(regs, {std::filesystem::path(PRISM_PLUGIN_DIR) / "methods"}) == 9);
    CHECK(regs.methods.names() == std::vector<std::string>{"clmoe", "disco", "ftlora", "hide", "modalprompt", "moelora",
                                                           "replay", "same", "zeroshot"});
    CHECK_NOTHROW(regs.methods.resolve("same"));
    try {
        regs.methods.resolve("nonexistent");
        FAIL("expected UnknownName");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::unknown_name);
        CHECK(std::string(e.what()).find("{clmoe, disco, ftlora, hide, modalprompt, moelora, replay, same, zeroshot}") !=
              std::string::npos);
    }
}

TEST_CASE("discovery over kind directories, empty roots and fixtures") {
    Registries regs;
    CHECK(discover_plugins(regs, {PRISM_PLUGIN_DIR}) == 15);
    CHECK_NOTHROW(regs.benchmarks.resolve("synthetic"));
    CHECK_NOTHROW(regs.backbones.resolve("surrogate"));

    Registries empty;
    CHECK(discover_plugins(empty, {test::temp_dir("empty-root")}) == 0);

    Registries fixture;
    CHECK(discover_plugins(fixture, {PRISM_FIXTURE_PLUGIN_DIR}) == 1);
    CHECK(fixture.methods.contains("mymethod"));
}

TEST_CASE("a second copy of a plugin is a duplicate") {
    Registries regs;
    discover_plugins(regs, {PRISM_FIXTURE_PLUGIN_DIR});
    CHECK(code_of([&] { discover_plugins(regs, {PRISM_FIXTURE_PLUGIN_DIR}); }) == Errc::duplicate_name);
}

TEST_CASE("bad plugin roots") {
    Registries regs;
    CHECK(code_of([&] { discover_plugins(regs, {"/nonexistent/prism/root"}); }) == Errc::plugin_load_error);
    const auto dir = test::temp_dir("broken-plugin");
    std::filesystem::create_directories(dir / "broken");
    std::ofstream(dir / "broken" / "integration.so") << "not a shared object";
    CHECK(code_of([&] { discover_plugins(regs, {dir}); }) == Errc::plugin_load_error);
}
