#include "prism/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "prism/errors.hpp"

namespace fs = std::filesystem;

namespace prism {

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !(projector_lr >= 0.0)) fail(Errc::invalid_config, "learning rates must be nonnegative");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) fail(Errc::invalid_config, "warmup_ratio must lie in [0, 1)");
    if (epochs < 1) fail(Errc::invalid_config, "epochs must be at least 1");
    if (batch_size < 1) fail(Errc::invalid_config, "batch_size must be at least 1");
    if (grad_accum_steps < 1) fail(Errc::invalid_config, "grad_accum_steps must be at least 1");
    if (!(weight_decay >= 0.0)) fail(Errc::invalid_config, "weight_decay must be nonnegative");
    if (!(max_grad_norm >= 0.0)) fail(Errc::invalid_config, "max_grad_norm must be nonnegative");
}

TrainConfig TrainConfig::from_config(const Config& c) {
    TrainConfig t;
    t.lr = c.get_real("lr");
    t.projector_lr = c.get_real("projector_lr");
    t.warmup_ratio = c.get_real("warmup_ratio");
    t.weight_decay = c.get_real("weight_decay");
    t.epochs = c.get_int("epochs");
    t.batch_size = c.get_int("batch_size");
    t.grad_accum_steps = c.get_int("grad_accum_steps");
    t.seed = static_cast<std::uint64_t>(c.get_int("seed"));
    t.max_grad_norm = c.get_real("max_grad_norm");
    t.validate();
    return t;
}

int warmup_steps(int total_steps, double warmup_ratio) {
    return static_cast<int>(std::ceil(warmup_ratio * total_steps - 1e-12));
}

double lr_at(int step, int total_steps, double peak, double warmup_ratio) {
    if (total_steps <= 0) return peak;
    const int w = warmup_steps(total_steps, warmup_ratio);
    if (step < w) return peak * static_cast<double>(step) / w;
    if (total_steps == w) return peak;
    const double progress = static_cast<double>(step - w) / static_cast<double>(total_steps - w);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double lr_at(int step, int total_steps, const TrainConfig& config) {
    return lr_at(step, total_steps, config.lr, config.warmup_ratio);
}

AdamW::AdamW(std::vector<Param*> adapter_group, std::vector<Param*> projector_group, const TrainConfig& config)
    : adapter_(std::move(adapter_group)), projector_(std::move(projector_group)), config_(config) {
    for (Param* p : adapter_) {
        m_a_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        v_a_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
    for (Param* p : projector_) {
        m_p_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        v_p_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
}

void AdamW::update(std::vector<Param*>& group, std::vector<Matrix>& m, std::vector<Matrix>& v, double lr) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(beta1, t_);
    const double c2 = 1.0 - std::pow(beta2, t_);
    for (std::size_t i = 0; i < group.size(); ++i) {
        Param& p = *group[i];
        if (!p.trainable) continue;
        m[i] = beta1 * m[i] + (1.0 - beta1) * p.grad;
        v[i] = beta2 * v[i] + (1.0 - beta2) * p.grad.cwiseAbs2();
        if (config_.weight_decay > 0.0) p.value *= 1.0 - lr * config_.weight_decay;
        p.value.array() -= lr * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps);
    }
}

void AdamW::step(double lr_scale) {
    ++t_;
    update(adapter_, m_a_, v_a_, config_.lr * lr_scale);
    update(projector_, m_p_, v_p_, config_.projector_lr * lr_scale);
}

double clip_grad_norm(const std::vector<Param*>& params, double max_norm) {
    double sq = 0.0;
    for (const Param* p : params) {
        if (p->trainable) sq += p->grad.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / (norm + 1e-12);
        for (Param* p : params) {
            if (p->trainable) p->grad *= scale;
        }
    }
    return norm;
}

std::string config_hash(const Config& config) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << derive_seed(0, config.to_json().dump());
    return out.str();
}

int latest_checkpoint(const fs::path& run_dir, int min_task, int max_task) {
    for (int k = max_task; k >= min_task; --k) {
        if (fs::exists(run_dir / ("task_" + std::to_string(k)) / "checkpoint.json")) return k;
    }
    return -1;
}

Trainer::Trainer(const Config& config, const BenchmarkSpec& spec, Method& method, Backbone& backbone, fs::path run_dir)
    : config_(config), spec_(spec), method_(method), backbone_(backbone), train_(TrainConfig::from_config(config)),
      run_dir_(std::move(run_dir)) {}

fs::path Trainer::task_dir(int task_index) const { return run_dir_ / ("task_" + std::to_string(task_index)); }

fs::path Trainer::train_task(int task_index) {
    if (!method_.trains()) fail(Errc::attempted_training, "method '" + method_.name() + "' refuses training");
    const std::vector<MultimodalSample> train = load_task_split(spec_, task_index, true);
    if (train.empty()) fail(Errc::empty_task, "task " + std::to_string(task_index) + " has no training samples");
    const TaskLoader loader(train, train_.batch_size, derive_seed(train_.seed, "loader/task" + std::to_string(task_index)));

    method_.on_task_start(task_index, train);
    std::vector<Param*> adapter = method_.trainable_params();
    std::vector<Param*> projector = backbone_.trainable_params();
    std::vector<Param*> all = adapter;
    all.insert(all.end(), projector.begin(), projector.end());
    for (Param* p : all) p->zero_grad();
    AdamW optimizer(adapter, projector, train_);

    const int accum = train_.grad_accum_steps;
    const int micro_total = loader.batches_per_epoch() * train_.epochs;
    const int total_steps = (micro_total + accum - 1) / accum;
    log_.clear();
    fs::create_directories(task_dir(task_index));
    std::ofstream log_file(task_dir(task_index) / "train_log.jsonl", std::ios::trunc);

    int micro = 0, step = 0, samples_in_step = 0;
    double loss_in_step = 0.0, aux_in_step = 0.0;
    int micro_in_step = 0;
    for (int epoch = 0; epoch < train_.epochs; ++epoch) {
        for (auto& raw : loader.epoch(epoch)) {
            const std::vector<MultimodalSample> batch = method_.train_batch_transform(std::move(raw));
            std::vector<ForwardPlan> plans;
            int tokens = 0;
            for (const auto& s : batch) {
                plans.push_back(method_.forward_policy(s, Mode::train));
                tokens += backbone_.loss_token_count(s, plans.back());
            }
            double ce = 0.0;
            const double scale = tokens > 0 ? 1.0 / (static_cast<double>(tokens) * accum) : 0.0;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                try {
                    ce += backbone_.accumulate_gradients(batch[i], plans[i], scale).ce_sum;
                } catch (const Error& e) {
                    if (e.code() == Errc::data_error || e.code() == Errc::sequence_too_long)
                        fail(e.code(), "sample '" + batch[i].sample_id + "': " + e.what());
                    throw;
                }
            }
            aux_in_step += method_.auxiliary_loss(batch, 1.0 / accum);
            loss_in_step += tokens > 0 ? ce / tokens : 0.0;
            samples_in_step += static_cast<int>(batch.size());
            ++micro_in_step;
            ++micro;
            if (micro % accum != 0 && micro != micro_total) continue;

            method_.on_gradients();
            clip_grad_norm(all, train_.max_grad_norm);
            const double lr = lr_at(step, total_steps, train_);
            optimizer.step(train_.lr > 0.0 ? lr / train_.lr : 0.0);
            for (Param* p : all) p->zero_grad();
            ++step;
            method_.on_step_end(step, total_steps);

            StepRecord rec{step, loss_in_step / micro_in_step, aux_in_step / micro_in_step, lr, samples_in_step};
            log_.push_back(rec);
            log_file << json{{"step", rec.step}, {"epoch", epoch}, {"loss", rec.loss}, {"aux_loss", rec.aux_loss},
                             {"lr", rec.lr}, {"samples", rec.batch_samples}}.dump()
                     << '\n';
            loss_in_step = aux_in_step = 0.0;
            samples_in_step = micro_in_step = 0;
        }
    }
    method_.on_task_end(task_index, train);
    if (const ReplayBuffer* buffer = method_.replay_buffer())
        write_replay_sidecar(*buffer, task_dir(task_index) / "replay_sidecar.json");
    return save_checkpoint(task_index);
}

std::vector<double> Trainer::evaluate_stage(int stage_index, const fs::path& out_dir) {
    if (stage_index < 0 || stage_index >= spec_.num_tasks())
        fail(Errc::bad_task_ids, "stage " + std::to_string(stage_index) + " is outside the benchmark");
    const fs::path dir = out_dir.empty() ? task_dir(stage_index) : out_dir;
    fs::create_directories(dir);
    const int max_new = config_.get_int("max_new_tokens");
    const bool containment = config_.get_bool("vqa_containment");
    std::vector<double> row;
    for (int t = 0; t <= stage_index; ++t) {
        const std::vector<MultimodalSample> test = load_task_split(spec_, t, false);
        std::vector<Prediction> predictions;
        std::ofstream out(dir / ("predictions_task" + std::to_string(t) + ".jsonl"), std::ios::trunc);
        for (const auto& s : test) {
            const ForwardPlan plan = method_.forward_policy(s, Mode::eval);
            predictions.push_back({s.sample_id, backbone_.generate(s, plan, max_new)});
            out << json{{"sample_id", s.sample_id}, {"prediction", predictions.back().prediction}}.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
        }
        row.push_back(score_task(predictions, spec_.tasks[static_cast<std::size_t>(t)], test, containment));
    }
    write_json_file(dir / "row.json", {{"stage", stage_index}, {"row", row}});
    return row;
}

fs::path Trainer::save_checkpoint(int task_index) {
    const fs::path path = task_dir(task_index) / "checkpoint.json";
    fs::create_directories(path.parent_path());
    write_json_file(path, {{"task_index", task_index},
                           {"method", method_.name()},
                           {"seed", train_.seed},
                           {"config_hash", config_hash(config_)},
                           {"backbone", backbone_.serialize_trainable()},
                           {"state", method_.serialize()}});
    return path;
}

void Trainer::load_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) fail(Errc::missing_checkpoint, path.string());
    const json doc = read_json_file(path);
    try {
        if (doc.at("method").get<std::string>() != method_.name())
            fail(Errc::config_mismatch, "checkpoint " + path.string() + " belongs to method '" +
                                            doc.at("method").get<std::string>() + "'");
        backbone_.deserialize_trainable(doc.at("backbone"));
        method_.deserialize(doc.at("state"));
    } catch (const json::exception& e) {
        fail(Errc::config_mismatch, "checkpoint " + path.string() + ": " + e.what());
    }
}

}  // namespace prism
