#include <doctest.h>

#include <fstream>
#include <set>

#include "prism/errors.hpp"
#include "prism/methods/builtin.hpp"
#include "prism/trainer.hpp"
#include "support.hpp"

using namespace prism;
namespace fs = std::filesystem;

namespace {

Errc code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return Errc::usage_error;
}

Config run_config(int dim = 16) {
    Config c = test::tiny_config(dim);
    c.set("image_feature_dim", 32, "test");
    c.set("lr", 5e-3, "test");
    c.set("projector_lr", 5e-3, "test");
    c.set("lora_r", 6, "test");
    c.set("lora_alpha", 12.0, "test");
    c.set("lora_dropout", 0.0, "test");
    c.set("batch_size", 8, "test");
    return c;
}

BenchmarkSpec small_benchmark(const std::string& label, int train = 40, int test = 10) {
    SyntheticSpec s;
    s.seed = 5;
    s.num_tasks = 3;
    s.samples_per_task_train = train;
    s.samples_per_task_test = test;
    return generate_synthetic(s, test::temp_dir(label));
}

struct Harness {
    Config config;
    BenchmarkSpec spec;
    Backbone backbone;
    MethodPtr method;
    Trainer trainer;

    Harness(Config c, BenchmarkSpec b, MethodPtr m, const fs::path& dir)
        : config(std::move(c)), spec(std::move(b)), backbone(BackboneConfig::from_config(config)), method(std::move(m)),
          trainer(config, spec, *method, backbone, dir) {
        method->build(backbone, {config, spec.num_tasks(), static_cast<std::uint64_t>(config.get_int("seed")), &spec});
    }
};

std::vector<Matrix> trainable_values(Harness& h) {
    std::vector<Matrix> out;
    for (const Param* p : h.method->trainable_params()) out.push_back(p->value);
    for (const Param* p : h.backbone.trainable_params()) out.push_back(p->value);
    return out;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
    CHECK(warmup_steps(97, 0.03) == 3);
    CHECK(warmup_steps(100, 0.03) == 3);
    CHECK(lr_at(0, 97, 2e-4, 0.03) == 0.0);
    CHECK(lr_at(3, 97, 2e-4, 0.03) == 2e-4);
    CHECK(lr_at(97, 97, 2e-4, 0.03) == doctest::Approx(0.0));
    CHECK(std::abs(lr_at(97, 97, 2e-4, 0.03)) < 1e-20);
    CHECK(lr_at(50, 97, 2e-4, 0.03) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(1, 97, 2e-4, 0.03) == doctest::Approx(2e-4 / 3.0));
    double prev = lr_at(3, 97, 2e-4, 0.03);
    for (int s = 4; s <= 97; ++s) {
        const double cur = lr_at(s, 97, 2e-4, 0.03);
        CHECK(cur <= prev);
        prev = cur;
    }
}

TEST_CASE("train config defaults and validation") {
    const TrainConfig t = TrainConfig::from_config(Config{});
    CHECK(t.lr == 2e-4);
    CHECK(t.projector_lr == 2e-5);
    CHECK(t.warmup_ratio == 0.03);
    CHECK(t.weight_decay == 0.0);
    CHECK(t.epochs == 1);
    CHECK(t.grad_accum_steps >= 1);
    Config bad;
    bad.set("warmup_ratio", 1.0, "test");
    CHECK(code_of([&] { TrainConfig::from_config(bad); }) == Errc::invalid_config);
    Config zero_epochs;
    zero_epochs.set("epochs", 0, "test");
    CHECK(code_of([&] { TrainConfig::from_config(zero_epochs); }) == Errc::invalid_config);
}

TEST_CASE("gradient clipping") {
    Param a("a", Matrix::Zero(1, 2));
    a.grad << 3.0, 4.0;
    Param frozen("f", Matrix::Zero(1, 1), false);
    frozen.grad << 100.0;
    CHECK(clip_grad_norm({&a, &frozen}, 1.0) == doctest::Approx(5.0));
    CHECK(a.grad.norm() == doctest::Approx(1.0));
    CHECK(frozen.grad(0, 0) == 100.0);
}

TEST_CASE("zero-shot refuses training") {
    Harness h(run_config(), small_benchmark("zs"), std::make_unique<ZeroShot>(), test::temp_dir("zs-run"));
    CHECK(code_of([&] { h.trainer.train_task(0); }) == Errc::attempted_training);
}

TEST_CASE("optimizer groups partition the trainable tensors") {
    for (const std::string name : {"ftlora", "modalprompt", "clmoe"}) {
        CAPTURE(name);
        MethodPtr m;
        if (name == "ftlora") m = std::make_unique<FtLora>();
        else if (name == "modalprompt") m = std::make_unique<ModalPrompt>();
        else m = std::make_unique<ClMoE>();
        Harness h(run_config(), small_benchmark("groups"), std::move(m), test::temp_dir("groups-run"));
        const auto adapter = h.method->trainable_params();
        const auto projector = h.backbone.trainable_params();
        std::set<const Param*> a(adapter.begin(), adapter.end());
        std::set<const Param*> p(projector.begin(), projector.end());
        for (const Param* x : p) CHECK_FALSE(a.contains(x));
        for (const Param* x : h.backbone.all_params()) CHECK(x->trainable == p.contains(x));
        CHECK(p.size() == 2u);
    }
}

TEST_CASE("training lowers the loss") {
    SyntheticSpec s;
    s.num_tasks = 6;
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        CAPTURE(seed);
        s.seed = seed;
        Config c = run_config(64);
        c.set("seed", static_cast<int>(seed), "test");
        c.set("lora_r", 8, "test");
        c.set("lora_alpha", 16.0, "test");
        Harness h(c, generate_synthetic(s, test::temp_dir("loss")), std::make_unique<FtLora>(), test::temp_dir("loss-run"));
        h.trainer.train_task(0);
        const auto& log = h.trainer.last_log();
        REQUIRE(log.size() == 25u);
        double tail = 0.0;
        for (std::size_t i = log.size() - 5; i < log.size(); ++i) tail += log[i].loss / 5.0;
        CHECK(tail < log.front().loss);
        std::ifstream in(h.trainer.task_dir(0) / "train_log.jsonl");
        int lines = 0;
        for (std::string line; std::getline(in, line);) {
            const json rec = json::parse(line);
            CHECK(rec.at("step") == ++lines);
        }
        CHECK(lines == 25);
    }
}

TEST_CASE("gradient accumulation matches a larger batch") {
    const BenchmarkSpec spec = small_benchmark("accum");
    Config big = run_config();
    big.set("batch_size", 8, "test");
    Config accum = run_config();
    accum.set("batch_size", 4, "test");
    accum.set("grad_accum_steps", 2, "test");
    Harness a(big, spec, std::make_unique<FtLora>(), test::temp_dir("accum-a"));
    Harness b(accum, spec, std::make_unique<FtLora>(), test::temp_dir("accum-b"));
    a.trainer.train_task(0);
    b.trainer.train_task(0);
    CHECK(a.trainer.last_log().size() == b.trainer.last_log().size());
    const auto va = trainable_values(a);
    const auto vb = trainable_values(b);
    REQUIRE(va.size() == vb.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) worst = std::max(worst, (va[i] - vb[i]).cwiseAbs().maxCoeff());
    CHECK(worst < 1e-5);
    bool moved = false;
    Harness fresh(big, spec, std::make_unique<FtLora>(), test::temp_dir("accum-c"));
    const auto v0 = trainable_values(fresh);
    for (std::size_t i = 0; i < va.size(); ++i) moved = moved || va[i] != v0[i];
    CHECK(moved);
}

TEST_CASE("checkpoints round-trip and reproduce evaluation") {
    const BenchmarkSpec spec = small_benchmark("ckpt");
    const fs::path dir = test::temp_dir("ckpt-run");
    Harness a(run_config(), spec, std::make_unique<Disco>(), dir);
    const fs::path ckpt = a.trainer.train_task(0);
    a.trainer.train_task(1);
    const fs::path ckpt1 = a.trainer.task_dir(1) / "checkpoint.json";
    const auto row = a.trainer.evaluate_stage(1);
    CHECK(row.size() == 2u);
    CHECK(a.trainer.evaluate_stage(1) == row);
    CHECK(fs::exists(dir / "task_1" / "predictions_task0.jsonl"));
    CHECK(fs::exists(dir / "task_1" / "row.json"));
    CHECK(a.trainer.evaluate_stage(0).size() == 1u);

    const json doc = read_json_file(ckpt1);
    CHECK(doc.at("task_index") == 1);
    CHECK(doc.at("method") == "disco");
    CHECK(doc.at("config_hash") == config_hash(a.config));
    CHECK(doc.contains("seed"));

    Harness b(run_config(), spec, std::make_unique<Disco>(), test::temp_dir("ckpt-load"));
    b.trainer.load_checkpoint(ckpt1);
    CHECK(trainable_values(b) == trainable_values(a));
    CHECK(b.method->serialize() == a.method->serialize());
    CHECK(b.trainer.evaluate_stage(1) == row);

    CHECK(code_of([&] { b.trainer.load_checkpoint(dir / "task_7" / "checkpoint.json"); }) == Errc::missing_checkpoint);
    Harness wide(run_config(32), spec, std::make_unique<Disco>(), test::temp_dir("ckpt-wide"));
    CHECK(code_of([&] { wide.trainer.load_checkpoint(ckpt); }) == Errc::config_mismatch);
    Harness other(run_config(), spec, std::make_unique<FtLora>(), test::temp_dir("ckpt-other"));
    CHECK(code_of([&] { other.trainer.load_checkpoint(ckpt); }) == Errc::config_mismatch);
}

TEST_CASE("latest checkpoint lookup") {
    const fs::path dir = test::temp_dir("latest");
    CHECK(latest_checkpoint(dir, 0, 5) == -1);
    for (int k : {0, 2}) {
        fs::create_directories(dir / ("task_" + std::to_string(k)));
        std::ofstream(dir / ("task_" + std::to_string(k)) / "checkpoint.json") << "{}";
    }
    CHECK(latest_checkpoint(dir, 0, 5) == 2);
    CHECK(latest_checkpoint(dir, 0, 1) == 0);
    CHECK(latest_checkpoint(dir, 3, 5) == -1);
}

TEST_CASE("identical runs give identical matrices and stages read only earlier tasks") {
    const BenchmarkSpec spec = small_benchmark("det", 24, 6);
    std::vector<std::vector<double>> rows[2];
    for (int run = 0; run < 2; ++run) {
        Harness h(run_config(), spec, std::make_unique<ReplayLora>(), test::temp_dir("det-run"));
        for (int t = 0; t < 3; ++t) {
            h.trainer.train_task(t);
            rows[run].push_back(h.trainer.evaluate_stage(t));
        }
        CHECK(fs::exists(h.trainer.task_dir(0) / "replay_sidecar.json"));
    }
    CHECK(rows[0] == rows[1]);

    BenchmarkSpec cut = small_benchmark("seq", 24, 6);
    fs::remove(cut.tasks[2].train_path);
    fs::remove(cut.tasks[2].test_path);
    Harness h(run_config(), cut, std::make_unique<FtLora>(), test::temp_dir("seq-run"));
    h.trainer.train_task(0);
    h.trainer.train_task(1);
    CHECK(h.trainer.evaluate_stage(1).size() == 2u);
    CHECK(code_of([&] { h.trainer.train_task(2); }) == Errc::missing_data_path);
}
