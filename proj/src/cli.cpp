#include "prism/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <ostream>
#include <set>
#include <sstream>

#include "prism/backbone.hpp"
#include "prism/benchmarks.hpp"
#include "prism/config.hpp"
#include "prism/evaluation.hpp"
#include "prism/methods/method.hpp"
#include "prism/trainer.hpp"

namespace fs = std::filesystem;

namespace prism {

int exit_code_for(Errc code) {
    switch (code) {
        case Errc::usage_error:
        case Errc::bad_task_ids:
        case Errc::attempted_training:
        case Errc::invalid_name:
            return 2;
        case Errc::unknown_name:
        case Errc::unknown_benchmark:
            return 3;
        case Errc::missing_checkpoint:
        case Errc::missing_data_path:
        case Errc::malformed_manifest:
        case Errc::io_error:
        case Errc::data_error:
        case Errc::missing_gold:
        case Errc::duplicate_prediction:
        case Errc::config_mismatch:
        case Errc::config_type_error:
        case Errc::missing_config_dir:
        case Errc::invalid_config:
        case Errc::empty_task:
        case Errc::sequence_too_long:
        case Errc::plugin_load_error:
            return 4;
        default:
            return 5;
    }
}

namespace {

std::string joined(const std::vector<std::string>& names) {
    std::string out;
    for (const auto& n : names) out += (out.empty() ? "" : ", ") + n;
    return out.empty() ? "(none)" : out;
}

int parse_task_id(const std::string& text) {
    int value = 0;
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end || value < 0) fail(Errc::usage_error, "malformed task id '" + text + "'");
    return value;
}

std::vector<fs::path> plugin_roots(const std::vector<std::string>& extra) {
    std::vector<fs::path> roots;
    if (fs::is_directory(default_plugin_root())) roots.push_back(default_plugin_root());
    for (const auto& r : plugin_roots_from_env()) roots.push_back(r);
    for (const auto& r : extra) roots.emplace_back(r);
    std::vector<fs::path> unique;
    std::set<std::string> seen;
    for (const auto& r : roots) {
        const std::string key = fs::weakly_canonical(r).string();
        if (seen.insert(key).second) unique.push_back(r);
    }
    return unique;
}

std::vector<std::string> prescan_plugin_roots(const std::vector<std::string>& args) {
    std::vector<std::string> roots;
    for (std::size_t i = 1; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (a == "--plugin-root" && i + 1 < args.size()) {
            roots.push_back(args[++i]);
        } else if (a.rfind("--plugin-root=", 0) == 0) {
            roots.push_back(a.substr(14));
        }
    }
    return roots;
}

AccuracyMatrix collect_rows(int num_stages, const std::function<fs::path(int)>& row_path) {
    AccuracyMatrix matrix(num_stages);
    for (int l = 0; l < num_stages; ++l) {
        const fs::path path = row_path(l);
        if (!fs::exists(path)) continue;
        const json row = read_json_file(path).at("row");
        if (static_cast<int>(row.size()) != l + 1) continue;
        for (int t = 0; t <= l; ++t) matrix.set(l, t, row[static_cast<std::size_t>(t)].get<double>());
    }
    return matrix;
}

}  // namespace

std::string help_text(const Registries& registries) {
    std::ostringstream out;
    out << "usage: prism {train|infer} <task_ids>... --benchmark <name> --method <name> [options]\n\n"
        << "modes:\n"
        << "  train   train each listed task in order, evaluating after each\n"
        << "  infer   evaluate the listed stages from the latest checkpoint\n\n"
        << "options:\n"
        << "  --benchmark <name>     benchmark to run (required)\n"
        << "  --method <name>        continual-learning method (required)\n"
        << "  --config-dir <path>    configuration tree (default: config)\n"
        << "  --seed <int>           run seed override\n"
        << "  --out-dir <path>       output root override\n"
        << "  --plugin-root <path>   extra plugin directory (repeatable)\n"
        << "  -h, --help             show this message\n\n"
        << "methods: " << joined(registries.methods.names()) << "\n"
        << "benchmarks: " << joined(registries.benchmarks.names()) << "\n"
        << "backbones: " << joined(registries.backbones.names()) << "\n"
        << "\nenvironment: PRISM_PLUGIN_PATH, PRISM_DATA_ROOT\n"
        << "exit codes: 0 ok, 2 usage, 3 unknown name, 4 data error, 5 internal\n";
    return out.str();
}

std::optional<RunCommand> parse_cli(const std::vector<std::string>& args, const Registries& registries,
                                    std::ostream& out) {
    CLI::App app("prism", "prism");
    app.set_help_flag();
    bool help = false;
    std::string mode;
    std::vector<std::string> ids;
    std::string config_dir = "config";
    RunCommand cmd;
    app.add_flag("-h,--help", help);
    app.add_option("mode", mode);
    app.add_option("task_ids", ids);
    app.add_option("--benchmark", cmd.benchmark);
    app.add_option("--method", cmd.method);
    app.add_option("--config-dir", config_dir);
    app.add_option("--seed", cmd.seed);
    app.add_option("--out-dir", cmd.out_dir);
    app.add_option("--plugin-root", cmd.plugin_roots)->take_all();

    std::vector<std::string> rest(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
    std::reverse(rest.begin(), rest.end());
    try {
        app.parse(rest);
    } catch (const CLI::ParseError& e) {
        fail(Errc::usage_error, e.what());
    }
    if (help) {
        out << help_text(registries);
        return std::nullopt;
    }
    if (mode.empty()) fail(Errc::usage_error, "missing mode (train or infer)");
    if (mode == "train") {
        cmd.mode = RunMode::train;
    } else if (mode == "infer") {
        cmd.mode = RunMode::infer;
    } else {
        fail(Errc::usage_error, "unknown mode '" + mode + "' (expected train or infer)");
    }
    if (ids.empty()) fail(Errc::usage_error, "at least one task id is required");
    for (const auto& id : ids) cmd.task_ids.push_back(parse_task_id(id));
    for (std::size_t i = 1; i < cmd.task_ids.size(); ++i) {
        if (cmd.task_ids[i] <= cmd.task_ids[i - 1]) fail(Errc::usage_error, "task ids must be strictly increasing");
    }
    if (cmd.benchmark.empty()) fail(Errc::usage_error, "--benchmark is required");
    if (cmd.method.empty()) fail(Errc::usage_error, "--method is required");
    cmd.config_dir = config_dir;
    return cmd;
}

int run(const RunCommand& command, std::ostream& out, std::ostream& err) {
    try {
        CliOverrides overrides;
        overrides.seed = command.seed;
        overrides.out_dir = command.out_dir;
        overrides.plugin_roots = command.plugin_roots;
        ConfigLoadReport report;
        const Config config = load_config_tree(command.config_dir, command.benchmark, command.method, overrides, &report);
        for (const auto& w : report.warnings) err << "warning: " << w << '\n';
        for (const auto& n : report.notices) err << "notice: " << n << '\n';

        Registries registries;
        discover_plugins(registries, plugin_roots(config.get_string_list("plugin_roots")));
        registries.freeze();
        const MethodFactory& make_method = registries.methods.resolve(command.method);
        const BenchmarkFactory& make_benchmark = registries.benchmarks.resolve(command.benchmark);
        const BackboneFactory& make_backbone = registries.backbones.resolve(config.get_string("backbone"));

        const BenchmarkSpec spec = make_benchmark(config, command.config_dir);
        for (int id : command.task_ids) {
            if (id >= spec.num_tasks())
                fail(Errc::bad_task_ids, "task id " + std::to_string(id) + " is outside benchmark '" + spec.name +
                                             "' (" + std::to_string(spec.num_tasks()) + " tasks, 0-based)");
        }

        std::unique_ptr<Backbone> backbone = make_backbone(config);
        std::unique_ptr<Method> method = make_method(config);
        const auto seed = static_cast<std::uint64_t>(config.get_int("seed"));
        method->build(*backbone, MethodContext{config, spec.num_tasks(), seed, &spec});

        const fs::path run_dir = fs::path(config.get_string("out_dir")) / spec.name / method->name();
        fs::create_directories(run_dir);
        Trainer trainer(config, spec, *method, *backbone, run_dir);
        const int max_id = command.task_ids.back();
        const bool training = command.mode == RunMode::train;

        write_json_file(run_dir / "resolved_config.json",
                        {{"mode", training ? "train" : "infer"},
                         {"task_ids", command.task_ids},
                         {"benchmark", spec.name},
                         {"method", method->name()},
                         {"task_indexing", "0-based"},
                         {"config", config.to_json()},
                         {"config_hash", config_hash(config)}});

        std::function<fs::path(int)> row_path;
        if (training) {
            if (!method->trains())
                fail(Errc::attempted_training, "method '" + method->name() + "' does not train; use infer");
            const int first = command.task_ids.front();
            if (first > 0) {
                const int k = latest_checkpoint(run_dir, 0, first - 1);
                if (k >= 0) {
                    trainer.load_checkpoint(trainer.task_dir(k) / "checkpoint.json");
                    out << "resumed from task " << k << '\n';
                }
            }
            for (int id : command.task_ids) {
                trainer.train_task(id);
                for (const auto& w : method->take_warnings()) err << "warning: " << w << '\n';
                const auto row = trainer.evaluate_stage(id);
                out << "stage " << id << ":";
                for (double v : row) out << ' ' << v;
                out << '\n';
            }
            row_path = [&](int l) { return trainer.task_dir(l) / "row.json"; };
        } else {
            if (method->needs_checkpoint()) {
                const int k = latest_checkpoint(run_dir, max_id, spec.num_tasks() - 1);
                if (k < 0)
                    fail(Errc::missing_checkpoint, "no checkpoint for stage >= " + std::to_string(max_id) + " under " +
                                                       run_dir.string() + "; run train first");
                trainer.load_checkpoint(trainer.task_dir(k) / "checkpoint.json");
            }
            for (int id : command.task_ids) {
                const auto row = trainer.evaluate_stage(id, run_dir / "infer" / ("task_" + std::to_string(id)));
                out << "stage " << id << ":";
                for (double v : row) out << ' ' << v;
                out << '\n';
            }
            row_path = [&](int l) { return run_dir / "infer" / ("task_" + std::to_string(l)) / "row.json"; };
        }

        const AccuracyMatrix matrix = collect_rows(max_id + 1, row_path);
        json metrics = {{"benchmark", spec.name},
                        {"method", method->name()},
                        {"mode", training ? "train" : "infer"},
                        {"seed", config.get_int("seed")},
                        {"accuracy_matrix", matrix.to_json()}};
        bool complete = true;
        for (int l = 0; l <= max_id; ++l) complete = complete && matrix.row_complete(l);
        metrics["complete"] = complete;
        if (complete) {
            metrics["metrics"] = MetricsReport::compute(matrix).to_json();
        } else {
            err << "notice: accuracy matrix has missing stages; summary metrics omitted\n";
        }
        const fs::path metrics_path = run_dir / (training ? "metrics.json" : "infer/metrics.json");
        write_json_file(metrics_path, metrics);
        out << "metrics: " << metrics_path.string() << '\n';
        return 0;
    } catch (const Error& e) {
        err << "error [" << errc_name(e.code()) << "]: " << e.what() << '\n';
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return 5;
    }
}

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    const std::vector<std::string> args(argv, argv + argc);
    try {
        Registries registries;
        discover_plugins(registries, plugin_roots(prescan_plugin_roots(args)));
        const std::optional<RunCommand> command = parse_cli(args, registries, out);
        if (!command) return 0;
        return run(*command, out, err);
    } catch (const Error& e) {
        err << "error [" << errc_name(e.code()) << "]: " << e.what() << '\n';
        if (e.code() == Errc::usage_error) err << "run with --help for usage\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return 5;
    }
}

}  // namespace prism
