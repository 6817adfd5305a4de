#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "prism/cli.hpp"
#include "prism/evaluation.hpp"
#include "prism/methods/builtin.hpp"
#include "prism/trainer.hpp"
#include "support.hpp"

using namespace prism;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kAverageTol = 0.005;
constexpr double kForgettingTol = 1e-9;
constexpr double kIdentityTol = 1e-6;
constexpr double kMergeTol = 1e-5;
constexpr double kFdEps = 1e-3;
constexpr double kFdTol = 1e-3;
constexpr double kSimplexTol = 1e-6;
constexpr double kTaskRecovery = 0.95;
constexpr double kOrthoTol = 1e-6;
constexpr double kEnergy = 0.9;
constexpr double kTextTol = 1e-6;

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            if (!detail.empty()) detail += "; ";
            detail += what;
        }
    }
};

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(10);
    s << v;
    return s.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

LoRAConfig lora(int r, double alpha) {
    LoRAConfig c;
    c.r = r;
    c.alpha = alpha;
    c.dropout_p = 0.0;
    return c;
}

AccuracyMatrix with_final_row(const std::vector<double>& final_row) {
    std::vector<std::vector<double>> rows;
    for (std::size_t l = 0; l + 1 < final_row.size(); ++l) rows.emplace_back(l + 1, 50.0);
    rows.push_back(final_row);
    return AccuracyMatrix::from_rows(rows);
}

Outcome metric_oracle() {
    Outcome o;
    const double same = last_accuracy(with_final_row({89.91, 91.40, 55.33, 77.51, 68.85, 55.43}));
    const double zero = last_accuracy(with_final_row({18.88, 52.62, 38.75, 21.25, 21.12, 41.44}));
    o.require(std::abs(same - 73.07) <= kAverageTol, "SAME row gives " + fmt(same));
    o.require(std::abs(zero - 32.34) <= kAverageTol, "zero-shot row gives " + fmt(zero));
    return o;
}

Outcome forgetting_oracle() {
    Outcome o;
    const double hand = forgetting(AccuracyMatrix::from_rows({{90}, {85, 80}, {70, 75, 88}}));
    o.require(std::abs(hand - 12.5) <= kForgettingTol, "hand matrix gives " + fmt(hand));
    Rng rng(2024);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    std::uniform_int_distribution<int> size(2, 12);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int T = size(rng);
        std::vector<std::vector<double>> a;
        for (int l = 0; l < T; ++l) {
            a.emplace_back();
            for (int t = 0; t <= l; ++t) a.back().push_back(u(rng));
        }
        double sum = 0.0;
        for (int t = 0; t + 1 < T; ++t) {
            double best = -1e300;
            for (int l = t; l + 1 < T; ++l) best = std::max(best, a[static_cast<std::size_t>(l)][static_cast<std::size_t>(t)]);
            sum += best - a[static_cast<std::size_t>(T - 1)][static_cast<std::size_t>(t)];
        }
        worst = std::max(worst, std::abs(forgetting(AccuracyMatrix::from_rows(a)) - sum / (T - 1)));
    }
    o.require(worst <= kForgettingTol, "brute-force deviation " + fmt(worst));
    return o;
}

Outcome lora_identity_and_merge() {
    Outcome o;
    Backbone bb(test::tiny_backbone_config());
    Rng rng(3);
    std::vector<MultimodalSample> batch;
    for (int i = 0; i < 6; ++i) batch.push_back(test::make_sample(std::to_string(i), "look", "ok", test::random_vector(8, rng)));
    batch.push_back(test::make_sample("text", "text only", "ok"));
    const ForwardOutput raw = bb.forward(batch, ForwardPlan{});
    double worst = 0.0;
    for (int experts : {1, 2, 4}) {
        AdapterBank bank = inject(bb, lora(8, 16.0), experts, rng);
        ForwardPlan plan;
        plan.bank = &bank;
        const ForwardOutput adapted = bb.forward(batch, plan);
        for (std::size_t i = 0; i < batch.size(); ++i)
            worst = std::max(worst, (adapted.logits[i] - raw.logits[i]).cwiseAbs().maxCoeff());
    }
    o.require(worst <= kIdentityTol, "fresh injection moved a logit by " + fmt(worst));

    double merge_worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        LoRAAdapter a;
        a.A = Param("A", gaussian_matrix(4, 8, 1.0, rng));
        a.B = Param("B", gaussian_matrix(8, 4, 1.0, rng));
        const Matrix w = gaussian_matrix(8, 8, 1.0, rng);
        const Vector x = test::random_vector(8, rng);
        const double scale = 2.0;
        merge_worst = std::max(merge_worst, (merge(a, w, scale) * x - (w * x + adapter_delta(x, a, scale, false))).cwiseAbs().maxCoeff());
    }
    o.require(merge_worst <= kMergeTol, "merge deviation " + fmt(merge_worst));
    return o;
}

Outcome gradient_checks() {
    Outcome o;
    Backbone bb(test::tiny_backbone_config());
    Rng rng(4);
    AdapterBank bank = inject(bb, lora(2, 4.0), 1, rng);
    for (auto& [key, slot] : bank.slots())
        for (auto& e : slot.experts) e.B.value = gaussian_matrix(e.B.value.rows(), e.B.value.cols(), 0.3, rng);
    const auto s = test::make_sample("g", "which one", "this", test::random_vector(8, rng));
    ForwardPlan plan;
    plan.bank = &bank;
    plan.training = true;
    for (Param* p : bank.params()) p->zero_grad();
    for (Param* p : bb.trainable_params()) p->zero_grad();
    bb.accumulate_gradients(s, plan, 1.0);
    auto loss = [&] { return bb.sample_loss(s, plan).ce_sum; };
    double worst = 0.0;
    for (auto& [key, slot] : bank.slots()) {
        worst = std::max(worst, test::fd_relative_error(slot.experts[0].A, slot.experts[0].A.grad, loss, kFdEps));
        worst = std::max(worst, test::fd_relative_error(slot.experts[0].B, slot.experts[0].B.grad, loss, kFdEps));
    }
    o.require(worst < kFdTol, "adapter gradient error " + fmt(worst));
    const double proj = std::max(test::fd_relative_error(bb.projector_weight(), bb.projector_weight().grad, loss, kFdEps),
                                 test::fd_relative_error(bb.projector_bias(), bb.projector_bias().grad, loss, kFdEps));
    o.require(proj < kFdTol, "projector gradient error " + fmt(proj));

    Config c = test::tiny_config();
    c.set("modalprompt_prefix_len", 3, "acceptance");
    c.set("modalprompt_hidden_dim", 8, "acceptance");
    ModalPrompt mp;
    mp.build(bb, {c, 2, 9});
    mp.on_task_start(0, std::vector<MultimodalSample>{s});
    const Vector target = test::random_vector(8, rng);
    auto& tr = mp.transform(0);
    for (Param* p : {&mp.prompt(0), &tr.b1, &tr.b2}) p->value = gaussian_matrix(p->value.rows(), p->value.cols(), 0.5, rng);
    for (Param* p : mp.trainable_params()) p->zero_grad();
    mp.alignment_loss(0, target, 1.0);
    auto align = [&] { return mp.alignment_loss(0, target, 0.0); };
    double align_worst = 0.0;
    for (Param* p : {&mp.prompt(0), &tr.w1, &tr.b1, &tr.w2, &tr.b2})
        align_worst = std::max(align_worst, test::fd_relative_error(*p, p->grad, align, kFdEps));
    o.require(align_worst < kFdTol, "alignment gradient error " + fmt(align_worst));
    return o;
}

Outcome rank_accounting() {
    Outcome o;
    Backbone bb(BackboneConfig{});
    Rng rng(5);
    const AdapterBank bank = inject(bb, lora(96, 192.0), 6, rng);
    std::size_t closed = 0;
    for (const auto& p : bb.injection_points()) closed += 6u * 16u * static_cast<std::size_t>(p.in_dim + p.out_dim);
    bool ranks = true;
    for (const auto& [key, slot] : bank.slots())
        for (const auto& e : slot.experts) ranks = ranks && e.rank() == 16;
    o.require(ranks, "an expert rank differs from 16");
    o.require(trainable_param_count(bank) == closed,
              "count " + std::to_string(trainable_param_count(bank)) + " vs closed form " + std::to_string(closed));
    o.require(disco_adjust_rank(80, 10) == std::pair<int, double>{80, 160.0}, "disco_adjust_rank(80, 10)");
    return o;
}

struct Stream {
    Config config;
    BenchmarkSpec spec;
};

Stream synthetic_stream(const std::string& benchmark, const std::string& method, const fs::path& data) {
    Stream s{load_config_tree(PRISM_CONFIG_DIR, benchmark, method, {}), {}};
    s.spec = generate_synthetic(SyntheticSpec::from_config(s.config, benchmark), data / benchmark);
    return s;
}

Outcome routing_invariants(const fs::path& work) {
    Outcome o;
    Rng rng(6);
    double simplex = 0.0;
    double min_weight = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const Vector w = moe_route(gaussian_matrix(4, 8, 3.0, rng), test::random_vector(8, rng));
        const Matrix cw = clmoe_route(gaussian_matrix(5, 11, 3.0, rng), gaussian_matrix(6, 8, 1.0, rng), test::random_vector(3, rng));
        const Vector dm = disco_mask_from_similarities(test::random_vector(6, rng).array().tanh().matrix(), 0.05);
        simplex = std::max({simplex, std::abs(w.sum() - 1.0), std::abs(dm.sum() - 1.0),
                            (cw.rowwise().sum().array() - 1.0).abs().maxCoeff()});
        min_weight = std::min({min_weight, w.minCoeff(), cw.minCoeff(), dm.minCoeff()});
    }
    o.require(simplex <= kSimplexTol, "weights sum off by " + fmt(simplex));
    o.require(min_weight >= 0.0, "negative routing weight");

    AnchorStore store(2);
    for (int t = 0; t < 3; ++t) {
        TaskAnchor a;
        a.task_index = t;
        a.text = Vector::Unit(2, t == 2 ? 1 : 0);
        store.put(a);
    }
    o.require(hide_predict_task(RoutingFeatures{std::nullopt, Vector::Unit(2, 0)}, store) == 0, "tie did not break to the lowest index");

    const Stream stream = synthetic_stream("synthetic6", "hide", work / "data");
    for (const std::string name : {"hide", "disco"}) {
        const Config config = load_config_tree(PRISM_CONFIG_DIR, "synthetic6", name, {});
        Backbone bb(BackboneConfig::from_config(config));
        std::unique_ptr<Method> m;
        if (name == "hide") m = std::make_unique<HiDe>();
        else m = std::make_unique<Disco>();
        m->build(bb, {config, stream.spec.num_tasks(), 0, &stream.spec});
        Trainer trainer(config, stream.spec, *m, bb, work / "runs" / name);
        for (int t = 0; t < stream.spec.num_tasks(); ++t) trainer.train_task(t);
        int correct = 0, total = 0;
        for (int t = 0; t < stream.spec.num_tasks(); ++t) {
            for (const auto& s : load_task_split(stream.spec, t, false)) {
                int predicted = -1;
                if (name == "hide") {
                    predicted = hide_predict_task(routing_features(bb, s), static_cast<HiDe&>(*m).anchors());
                } else {
                    predicted = argmax_lowest(static_cast<Disco&>(*m).expert_weights(s));
                }
                correct += predicted == t;
                ++total;
            }
        }
        const double rate = static_cast<double>(correct) / total;
        o.detail += (o.detail.empty() ? "" : ", ") + name + " recovery " + fmt(rate);
        o.require(rate >= kTaskRecovery, name + " below threshold");
    }
    return o;
}

struct CliResult {
    int code;
    std::string err;
};

CliResult cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv{"prism"};
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, err.str()};
}

Outcome forgetting_separation(const fs::path& work) {
    Outcome o;
    ::setenv("PRISM_DATA_ROOT", (work / "data").c_str(), 1);
    for (int seed : {0, 1, 2}) {
        json metrics[2];
        int i = 0;
        for (const std::string method : {"ftlora", "replay"}) {
            const fs::path out = work / ("seed" + std::to_string(seed));
            const CliResult r = cli({"train", "0", "1", "2", "--benchmark", "synthetic", "--method", method, "--seed",
                                     std::to_string(seed), "--config-dir", PRISM_CONFIG_DIR, "--out-dir", out.string()});
            if (r.code != 0) {
                o.require(false, method + " seed " + std::to_string(seed) + " exited " + std::to_string(r.code) + ": " + r.err);
                return o;
            }
            metrics[i++] = read_json_file(out / "synthetic" / method / "metrics.json").at("metrics");
        }
        const double f_ft = metrics[0].at("forgetting"), f_rp = metrics[1].at("forgetting");
        const double a_ft = metrics[0].at("last_accuracy"), a_rp = metrics[1].at("last_accuracy");
        o.detail += (o.detail.empty() ? "" : ", ") + ("seed " + std::to_string(seed) + ": F " + fmt(f_ft) + "/" + fmt(f_rp) +
                                                      " A " + fmt(a_ft) + "/" + fmt(a_rp));
        o.require(f_ft > f_rp, "FT-LoRA forgetting not above replay");
        o.require(a_rp > a_ft, "replay last accuracy not above FT-LoRA");
    }
    ::unsetenv("PRISM_DATA_ROOT");
    return o;
}

Outcome spectral_properties() {
    Outcome o;
    Rng rng(8);
    double ortho = 0.0, energy = 1.0, eig_dev = 0.0, idem = 0.0, parallel = 0.0;
    bool count_ok = true;
    for (int window : {3, 4, 6}) {
        SameConfig cfg;
        cfg.window_size = window;
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<Vector> snaps;
            for (int i = 0; i < window; ++i) snaps.push_back(test::random_vector(16, rng));
            const SpectralAnchors a = same_update_anchors(snaps, cfg);
            count_ok = count_ok && a.count() >= 1 && a.count() <= std::min(64, window - 1);
            ortho = std::max(ortho, (a.directions.transpose() * a.directions - Matrix::Identity(a.count(), a.count())).cwiseAbs().maxCoeff());
            Vector mean = Vector::Zero(16);
            for (const auto& s : snaps) mean += s;
            mean /= window;
            Matrix cov = Matrix::Zero(16, 16);
            for (const auto& s : snaps) cov += (s - mean) * (s - mean).transpose();
            cov /= window - 1;
            Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
            const double total = es.eigenvalues().sum();
            const double captured = (a.directions.transpose() * cov * a.directions).trace() / total;
            energy = std::min(energy, captured);
            for (int j = 0; j < a.count(); ++j)
                eig_dev = std::max(eig_dev, std::abs(a.energies(j) - es.eigenvalues()(15 - j)) / total);

            const Vector g = test::random_vector(16, rng);
            const Vector ones = Vector::Ones(a.count());
            const Vector once = same_consolidate(g, a.directions, ones, cfg.tau_score);
            idem = std::max(idem, (same_consolidate(once, a.directions, ones, cfg.tau_score) - once).cwiseAbs().maxCoeff());
            parallel = std::max(parallel, same_consolidate(2.5 * a.directions.col(0), a.directions, ones, cfg.tau_score).norm());
        }
    }
    o.require(count_ok, "anchor count outside [1, min(64, window - 1)]");
    o.require(ortho <= kOrthoTol, "orthonormality error " + fmt(ortho));
    o.require(energy >= kEnergy - 1e-12, "captured energy " + fmt(energy));
    o.require(eig_dev <= 1e-9, "eigenvalue deviation from dense oracle " + fmt(eig_dev));
    o.require(idem <= 1e-12, "consolidation not idempotent " + fmt(idem));
    o.require(parallel <= 1e-12, "parallel gradient survives " + fmt(parallel));
    return o;
}

std::size_t source_hash() {
    std::vector<fs::path> files;
    for (const char* dir : {"src", "include"}) {
        for (const auto& e : fs::recursive_directory_iterator(fs::path(PRISM_SOURCE_DIR) / dir))
            if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::string all;
    for (const auto& f : files) all += f.string() + '\0' + slurp(f) + '\0';
    return std::hash<std::string>{}(all);
}

int shell(const std::string& command) {
    const int status = std::system(command.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome plugin_isolation(const fs::path& work) {
    Outcome o;
    const std::size_t before = source_hash();
    const std::string cmd = "PRISM_DATA_ROOT='" + (work / "data").string() + "' '" PRISM_CLI "' train 0 --benchmark synthetic --method mymethod" +
                            " --config-dir '" PRISM_CONFIG_DIR "' --plugin-root '" PRISM_FIXTURE_PLUGIN_DIR "' --out-dir '" +
                            (work / "runs").string() + "' > '" + (work / "log.txt").string() + "' 2>&1";
    const int code = shell(cmd);
    o.require(code == 0, "mymethod run exited " + std::to_string(code) + ": " + slurp(work / "log.txt"));
    o.require(fs::exists(work / "runs" / "synthetic" / "mymethod" / "metrics.json"), "no metrics for mymethod");
    o.require(source_hash() == before, "core sources changed");
    return o;
}

Outcome end_to_end_determinism(const fs::path& work) {
    Outcome o;
    std::string reports[2];
    for (int run = 0; run < 2; ++run) {
        const fs::path out = work / ("run" + std::to_string(run));
        const std::string cmd = "PRISM_DATA_ROOT='" + (work / ("data" + std::to_string(run))).string() + "' '" PRISM_CLI
                                "' train 0 1 2 --benchmark synthetic6 --method moelora --seed 7 --config-dir '" PRISM_CONFIG_DIR
                                "' --out-dir '" + out.string() + "' > '" + (work / "log.txt").string() + "' 2>&1";
        const int code = shell(cmd);
        o.require(code == 0, "run exited " + std::to_string(code) + ": " + slurp(work / "log.txt"));
        reports[run] = slurp(out / "synthetic6" / "moelora" / "metrics.json");
    }
    o.require(!reports[0].empty(), "empty metrics report");
    o.require(reports[0] == reports[1], "metrics reports differ");
    return o;
}

Outcome replay_mechanics() {
    Outcome o;
    Rng rng(11);
    ReplayBuffer buffer;
    std::vector<std::vector<MultimodalSample>> tasks(4);
    for (int t = 0; t < 4; ++t)
        for (int i = 0; i < 100; ++i)
            tasks[static_cast<std::size_t>(t)].push_back(test::make_sample(std::to_string(t) + "-" + std::to_string(i), "q", "a", std::nullopt, t));
    for (int t = 0; t < 4; ++t) replay_store(buffer, t, tasks[static_cast<std::size_t>(t)], 4, rng);
    for (int t = 0; t < 3; ++t)
        o.require(buffer.partitions.count(t) && buffer.partitions.at(t).size() == 60u, "task " + std::to_string(t) + " share is not 60");
    o.require(!buffer.partitions.count(3), "final task stored");
    o.require(buffer.total() == 180u, "buffer total " + std::to_string(buffer.total()));

    std::vector<MultimodalSample> batch;
    for (int i = 0; i < 1000; ++i) batch.push_back(test::make_sample("cur" + std::to_string(i), "q", "a", std::nullopt, 1));
    Rng mix(12);
    const auto mixed = replay_mix(buffer, batch, 1, mix);
    const std::size_t appended = mixed.size() - batch.size();
    o.require(appended >= 650 && appended <= 750, "appended " + std::to_string(appended));
    bool current_drawn = false;
    for (std::size_t i = batch.size(); i < mixed.size(); ++i) current_drawn = current_drawn || mixed[i].task_index == 1;
    o.require(!current_drawn, "current-task sample replayed");
    o.detail += (o.detail.empty() ? "" : ", ") + ("appended " + std::to_string(appended) + " of 1000");
    return o;
}

Outcome text_metrics() {
    Outcome o;
    std::ifstream in(std::string(PRISM_ORACLE_DIR) + "/text_metrics_fixture.json");
    const json fixture = json::parse(in);
    double worst = 0.0;
    for (const auto& row : fixture) {
        const auto pred = row.at("prediction").get<std::string>();
        const auto refs = row.at("references").get<std::vector<std::string>>();
        worst = std::max({worst, std::abs(bleu4(pred, refs) - row.at("bleu4").get<double>()),
                          std::abs(rouge_l(pred, refs) - row.at("rouge_l").get<double>())});
    }
    o.require(fixture.size() == 50, "fixture has " + std::to_string(fixture.size()) + " pairs");
    o.require(worst <= kTextTol, "reference deviation " + fmt(worst));
    o.require(rouge_l("a c", {"a b c"}) == 0.8, "rouge_l(a c, a b c) = " + fmt(rouge_l("a c", {"a b c"})));
    return o;
}

struct Criterion {
    int id;
    std::string name;
    double budget_seconds;
    std::function<Outcome(const fs::path&)> check;
};

}  // namespace

int main() {
    const std::vector<Criterion> criteria{
        {1, "metric oracle", 1, [](const fs::path&) { return metric_oracle(); }},
        {2, "forgetting oracle", 10, [](const fs::path&) { return forgetting_oracle(); }},
        {3, "LoRA identity and merge", 10, [](const fs::path&) { return lora_identity_and_merge(); }},
        {4, "gradient correctness", 60, [](const fs::path&) { return gradient_checks(); }},
        {5, "expert-rank accounting", 10, [](const fs::path&) { return rank_accounting(); }},
        {6, "routing invariants", 600, routing_invariants},
        {7, "forgetting separation", 900, forgetting_separation},
        {8, "spectral anchors", 30, [](const fs::path&) { return spectral_properties(); }},
        {9, "plugin isolation", 60, plugin_isolation},
        {10, "end-to-end determinism", 900, end_to_end_determinism},
        {11, "replay mechanics", 10, [](const fs::path&) { return replay_mechanics(); }},
        {12, "text-metric oracles", 10, [](const fs::path&) { return text_metrics(); }},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const fs::path work = test::temp_dir("acceptance-" + std::to_string(c.id));
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.check(work);
        } catch (const std::exception& e) {
            o.require(false, std::string("threw: ") + e.what());
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        o.require(seconds <= c.budget_seconds, "over the " + fmt(c.budget_seconds) + " s budget");
        failures += !o.pass;
        std::printf("%s criterion %d: %s (%.2f s)%s%s\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), seconds,
                    o.detail.empty() ? "" : " - ", o.detail.c_str());
        std::fflush(stdout);
        fs::remove_all(work);
    }
    return failures == 0 ? 0 : 1;
}
