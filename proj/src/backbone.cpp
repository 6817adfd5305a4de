#include "prism/backbone.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <numbers>

#include "prism/errors.hpp"

namespace prism {

namespace {

constexpr double kRmsEps = 1e-6;

std::size_t point_slot(PointName name) { return static_cast<std::size_t>(name); }

/// Row-wise RMS normalisation without gain; `inv` receives 1/rms per row.
Matrix rms_norm(const Matrix& x, Vector& inv) {
    inv.resize(x.rows());
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        inv(i) = 1.0 / std::sqrt(x.row(i).squaredNorm() / static_cast<double>(x.cols()) + kRmsEps);
        y.row(i) = x.row(i) * inv(i);
    }
    return y;
}

Matrix rms_norm_backward(const Matrix& y, const Vector& inv, const Matrix& dy) {
    Matrix dx(y.rows(), y.cols());
    const double n = static_cast<double>(y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const double proj = dy.row(i).dot(y.row(i)) / n;
        dx.row(i) = inv(i) * (dy.row(i) - proj * y.row(i));
    }
    return dx;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// config

void BackboneConfig::validate() const {
    auto positive = [](int value, const char* field) {
        if (value <= 0) fail(Errc::invalid_config, std::string(field) + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(model_dim, "model_dim");
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(ffn_dim, "ffn_dim");
    positive(max_seq_len, "max_seq_len");
    positive(image_feature_dim, "image_feature_dim");
    positive(num_visual_tokens, "num_visual_tokens");
    if (vocab_size < 256) fail(Errc::invalid_config, "vocab_size must cover the 256 byte values");
    if (model_dim % num_heads != 0) {
        fail(Errc::invalid_config, "num_heads: model_dim " + std::to_string(model_dim) +
                                       " is not divisible by num_heads " + std::to_string(num_heads));
    }
}

BackboneConfig BackboneConfig::from_config(const Config& config) {
    BackboneConfig c;
    c.vocab_size = config.get_int("vocab_size");
    c.model_dim = config.get_int("model_dim");
    c.num_layers = config.get_int("num_layers");
    c.num_heads = config.get_int("num_heads");
    c.ffn_dim = config.get_int("ffn_dim");
    c.max_seq_len = config.get_int("max_seq_len");
    c.image_feature_dim = config.get_int("image_feature_dim");
    c.num_visual_tokens = config.get_int("num_visual_tokens");
    c.seed = static_cast<std::uint64_t>(config.get_int("backbone_seed"));
    return c;
}

nlohmann::json BackboneConfig::to_json() const {
    return {{"vocab_size", vocab_size},         {"model_dim", model_dim},
            {"num_layers", num_layers},         {"num_heads", num_heads},
            {"ffn_dim", ffn_dim},               {"max_seq_len", max_seq_len},
            {"image_feature_dim", image_feature_dim}, {"num_visual_tokens", num_visual_tokens},
            {"seed", seed}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& doc) {
    BackboneConfig c;
    c.vocab_size = doc.at("vocab_size");
    c.model_dim = doc.at("model_dim");
    c.num_layers = doc.at("num_layers");
    c.num_heads = doc.at("num_heads");
    c.ffn_dim = doc.at("ffn_dim");
    c.max_seq_len = doc.at("max_seq_len");
    c.image_feature_dim = doc.at("image_feature_dim");
    c.num_visual_tokens = doc.at("num_visual_tokens");
    c.seed = doc.at("seed");
    return c;
}

// ---------------------------------------------------------------------------
// tokenizer

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(c);
    return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

std::vector<int> SequenceLayout::loss_positions() const {
    std::vector<int> positions;
    const int total = length();
    for (int p = answer_begin() - 1; p + 1 < total; ++p) positions.push_back(p);
    return positions;
}

// ---------------------------------------------------------------------------
// traces

struct PointTrace {
    AdapterSlot* slot = nullptr;
    Matrix x_drop;  // adapter input after dropout
    Matrix mask;    // empty when no dropout was applied
    std::vector<Matrix> z;
    std::vector<Matrix> y;
    Matrix weights;  // tokens x experts
    bool routed = false;
};

struct LayerTrace {
    Matrix x_in;
    Vector inv1;
    Matrix h1;
    Matrix q, k, v;
    std::vector<Matrix> probs;
    Matrix attn;
    Matrix x_mid;
    Vector inv2;
    Matrix h2;
    Matrix g, u, m;
    Matrix router_src;  // rows fed to the routers of this layer
    std::array<PointTrace, 7> points;
};

struct SampleTrace {
    SequenceLayout layout;
    ForwardPlan plan;
    Matrix extracted;  // visual extractor output, empty for text-only
    std::vector<LayerTrace> layers;
    Matrix x_final;
    Vector inv_final;
    Matrix h_final;
    std::vector<int> loss_rows;
    std::vector<int> targets;
    Matrix probs;  // softmax at loss rows
};

struct Backbone::Layer {
    std::array<Param, 7> w;  // indexed by PointName
};

// ---------------------------------------------------------------------------
// construction

Backbone::Backbone(const BackboneConfig& config) : config_(config), tokenizer_(config.vocab_size) {
    config_.validate();
    Rng rng(config_.seed);
    const int d = config_.model_dim;
    const int f = config_.image_feature_dim;
    const int vocab = tokenizer_.total_vocab();

    token_embedding_ = Param("token_embedding", gaussian_matrix(vocab, d, 1.0, rng), false);
    for (int l = 0; l < config_.num_layers; ++l) {
        Layer layer;
        for (PointName name : kAllPoints) {
            const InjectionPoint p = injection_point(l, name);
            layer.w[point_slot(name)] =
                Param("layers." + std::to_string(l) + "." + std::string(point_name_str(name)),
                      gaussian_matrix(p.out_dim, p.in_dim, 1.0 / std::sqrt(p.in_dim), rng), false);
        }
        layers_.push_back(std::move(layer));
    }
    head_ = Param("lm_head", gaussian_matrix(vocab, d, 2.0 / std::sqrt(d), rng), false);
    extractor_ = Param("vision_extractor", gaussian_matrix(config_.num_visual_tokens * f, f, 1.0, rng), false);
    text_projection_ = Param("text_projection", gaussian_matrix(f, 256, 1.0, rng), false);
    projector_w_ = Param("projector.weight", gaussian_matrix(d, f, 1.0 / std::sqrt(f), rng), true,
                         ParamGroup::projector);
    projector_b_ = Param("projector.bias", Matrix::Zero(d, 1), true, ParamGroup::projector);

    positions_.resize(config_.max_seq_len, d);
    for (int p = 0; p < config_.max_seq_len; ++p) {
        for (int i = 0; i < d; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
            positions_(p, i) = 0.5 * (i % 2 == 0 ? std::sin(p * rate) : std::cos(p * rate));
        }
    }
}

Backbone::~Backbone() = default;
Backbone::Backbone(Backbone&&) noexcept = default;
Backbone& Backbone::operator=(Backbone&&) noexcept = default;

std::unique_ptr<Backbone> build_backbone(const BackboneConfig& config) {
    return std::make_unique<Backbone>(config);
}

InjectionPoint Backbone::injection_point(int layer, PointName name) const {
    if (layer < 0 || layer >= config_.num_layers) fail(Errc::unknown_target, "layer " + std::to_string(layer));
    const int d = config_.model_dim;
    const int h = config_.ffn_dim;
    switch (name) {
        case PointName::gate_proj:
        case PointName::up_proj: return {layer, name, d, h};
        case PointName::down_proj: return {layer, name, h, d};
        default: return {layer, name, d, d};
    }
}

std::vector<InjectionPoint> Backbone::injection_points() const {
    std::vector<InjectionPoint> points;
    for (int l = 0; l < config_.num_layers; ++l)
        for (PointName name : kAllPoints) points.push_back(injection_point(l, name));
    return points;
}

const Matrix& Backbone::base_weight(int layer, PointName name) const {
    return layers_.at(static_cast<std::size_t>(layer)).w[point_slot(name)].value;
}

std::vector<Param*> Backbone::trainable_params() { return {&projector_w_, &projector_b_}; }

std::vector<const Param*> Backbone::all_params() const {
    std::vector<const Param*> out{&token_embedding_};
    for (const auto& layer : layers_)
        for (const auto& w : layer.w) out.push_back(&w);
    out.insert(out.end(), {&head_, &extractor_, &text_projection_, &projector_w_, &projector_b_});
    return out;
}

// ---------------------------------------------------------------------------
// features

Matrix Backbone::extract_features(const Vector& image) const {
    const int f = config_.image_feature_dim;
    if (image.size() != f) {
        fail(Errc::dimension_mismatch,
             "image features have length " + std::to_string(image.size()) + ", expected " + std::to_string(f));
    }
    const Vector flat = (extractor_.value * image).array().tanh().matrix();
    Matrix tokens(config_.num_visual_tokens, f);
    for (int k = 0; k < config_.num_visual_tokens; ++k) tokens.row(k) = flat.segment(k * f, f).transpose();
    return tokens;
}

Matrix Backbone::encode_image(const Vector& image) const {
    const Matrix feats = extract_features(image);
    Matrix out = feats * projector_w_.value.transpose();
    out.rowwise() += projector_b_.value.col(0).transpose();
    return out;
}

Vector Backbone::image_routing_feature(const Vector& image) const {
    return extract_features(image).colwise().mean().transpose();
}

Vector Backbone::text_routing_feature(std::string_view instruction) const {
    Vector freq = Vector::Zero(256);
    for (unsigned char c : instruction) freq(c) += 1.0;
    if (!instruction.empty()) freq /= static_cast<double>(instruction.size());
    return text_projection_.value * freq;
}

Vector Backbone::pooled_instruction(std::string_view instruction) const {
    Vector pooled = Vector::Zero(config_.model_dim);
    for (unsigned char c : instruction) pooled += token_embedding_.value.row(c).transpose();
    if (!instruction.empty()) pooled /= static_cast<double>(instruction.size());
    return pooled;
}

SequenceLayout Backbone::layout(const MultimodalSample& sample, int prefix_len, bool include_answer) const {
    SequenceLayout lay;
    lay.prefix_len = prefix_len;
    lay.visual_len = sample.image_features ? config_.num_visual_tokens : 0;
    lay.tokens = tokenizer_.encode(sample.instruction);
    lay.instruction_len = static_cast<int>(lay.tokens.size());
    lay.tokens.push_back(tokenizer_.sep());
    if (include_answer) {
        const auto answer = tokenizer_.encode(sample.answer);
        lay.tokens.insert(lay.tokens.end(), answer.begin(), answer.end());
        lay.tokens.push_back(tokenizer_.eos());
    }
    if (lay.length() > config_.max_seq_len) {
        fail(Errc::sequence_too_long, "sample '" + sample.sample_id + "' needs " + std::to_string(lay.length()) +
                                          " positions, max_seq_len is " + std::to_string(config_.max_seq_len));
    }
    return lay;
}

// ---------------------------------------------------------------------------
// forward

namespace {

int prefix_rows(const ForwardPlan& plan) {
    int rows = 0;
    for (const Param* p : plan.prefix) rows += static_cast<int>(p->value.rows());
    return rows;
}

/// Base projection plus the plan's adapter mixture for one injection point.
Matrix apply_point(const Matrix& base_w, int layer, PointName name, const Matrix& x, const Matrix& router_src,
                   const ForwardPlan& plan, PointTrace* trace) {
    Matrix y = x * base_w.transpose();
    if (!plan.bank) return y;
    AdapterSlot* slot = plan.bank->find(layer, name);
    if (!slot) return y;

    const Eigen::Index tokens = x.rows();
    const auto experts = static_cast<Eigen::Index>(slot->experts.size());
    const ExpertMix& mix = plan.layer_mix.empty() ? ExpertMix{} : plan.layer_mix.at(static_cast<std::size_t>(layer));

    Matrix weights(tokens, experts);
    bool routed = false;
    switch (mix.source) {
        case ExpertMix::Source::all_ones: weights.setOnes(); break;
        case ExpertMix::Source::fixed:
            if (mix.weights.size() != experts)
                fail(Errc::dimension_mismatch, "expert weights do not match the slot's expert count");
            weights = mix.weights.transpose().replicate(tokens, 1);
            break;
        case ExpertMix::Source::router:
            if (!slot->router) fail(Errc::invalid_config, "routed mix on a slot without router");
            weights = softmax_rows(router_src * slot->router->value.transpose());
            routed = true;
            break;
    }

    Matrix x_drop = x;
    Matrix mask;
    if (plan.training && plan.dropout_p > 0.0 && plan.dropout_rng) {
        std::bernoulli_distribution keep(1.0 - plan.dropout_p);
        mask.resize(x.rows(), x.cols());
        const double inv_keep = 1.0 / (1.0 - plan.dropout_p);
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            for (Eigen::Index j = 0; j < x.cols(); ++j) mask(i, j) = keep(*plan.dropout_rng) ? inv_keep : 0.0;
        x_drop = x.cwiseProduct(mask);
    }

    std::vector<Matrix> zs;
    std::vector<Matrix> ys;
    for (Eigen::Index e = 0; e < experts; ++e) {
        const LoRAAdapter& adapter = slot->experts[static_cast<std::size_t>(e)];
        Matrix z = x_drop * adapter.A.value.transpose();
        Matrix ye = z * adapter.B.value.transpose();
        y.noalias() += slot->scale * (weights.col(e).asDiagonal() * ye);
        if (trace) {
            zs.push_back(std::move(z));
            ys.push_back(std::move(ye));
        }
    }
    if (trace) {
        trace->slot = slot;
        trace->x_drop = std::move(x_drop);
        trace->mask = std::move(mask);
        trace->z = std::move(zs);
        trace->y = std::move(ys);
        trace->weights = std::move(weights);
        trace->routed = routed;
    }
    return y;
}

/// Returns dx; accumulates adapter and router gradients; adds the router
/// input gradient into `d_router_src` when routed.
Matrix point_backward(const Matrix& base_w, const PointTrace& trace, const Matrix& dy, const Matrix& router_src,
                      Matrix* d_router_src) {
    Matrix dx = dy * base_w;
    AdapterSlot* slot = trace.slot;
    if (!slot) return dx;

    const auto experts = static_cast<Eigen::Index>(slot->experts.size());
    Matrix dx_drop = Matrix::Zero(dx.rows(), dx.cols());
    Matrix dw(dy.rows(), experts);
    for (Eigen::Index e = 0; e < experts; ++e) {
        LoRAAdapter& adapter = slot->experts[static_cast<std::size_t>(e)];
        const Matrix dye = slot->scale * (trace.weights.col(e).asDiagonal() * dy);
        const Matrix& z = trace.z[static_cast<std::size_t>(e)];
        if (adapter.B.trainable) adapter.B.grad.noalias() += dye.transpose() * z;
        const Matrix dz = dye * adapter.B.value;
        if (adapter.A.trainable) adapter.A.grad.noalias() += dz.transpose() * trace.x_drop;
        dx_drop.noalias() += dz * adapter.A.value;
        dw.col(e) = slot->scale * trace.y[static_cast<std::size_t>(e)].cwiseProduct(dy).rowwise().sum();
    }
    dx += trace.mask.size() ? Matrix(dx_drop.cwiseProduct(trace.mask)) : dx_drop;

    if (trace.routed) {
        const Matrix& w = trace.weights;
        const Vector inner = w.cwiseProduct(dw).rowwise().sum();
        const Matrix dlogits = w.cwiseProduct(dw.colwise() - inner);
        Param& router = *slot->router;
        if (router.trainable) router.grad.noalias() += dlogits.transpose() * router_src;
        if (d_router_src) d_router_src->noalias() += dlogits * router.value;
    }
    return dx;
}

}  // namespace

Matrix Backbone::embed(const SequenceLayout& lay, const MultimodalSample& sample, const ForwardPlan& plan,
                       Matrix* extracted) const {
    const int d = config_.model_dim;
    Matrix x(lay.length(), d);
    int row = 0;
    for (const Param* p : plan.prefix) {
        if (p->value.cols() != d) fail(Errc::dimension_mismatch, "soft prompt width differs from model_dim");
        x.middleRows(row, p->value.rows()) = p->value;
        row += static_cast<int>(p->value.rows());
    }
    if (lay.visual_len > 0) {
        const Matrix feats = extract_features(*sample.image_features);
        Matrix vis = feats * projector_w_.value.transpose();
        vis.rowwise() += projector_b_.value.col(0).transpose();
        x.middleRows(row, lay.visual_len) = vis;
        row += lay.visual_len;
        if (extracted) *extracted = feats;
    }
    for (int id : lay.tokens) x.row(row++) = token_embedding_.value.row(id);
    x += positions_.topRows(lay.length());
    return x;
}

Matrix Backbone::run(const SequenceLayout& lay, const MultimodalSample& sample, const ForwardPlan& plan,
                     SampleTrace* trace, const std::vector<int>& logit_rows) const {
    if (sample.image_features && !sample.image_features->allFinite()) {
        fail(Errc::data_error, "sample '" + sample.sample_id + "' has non-finite image features");
    }
    const int d = config_.model_dim;
    const int heads = config_.num_heads;
    const int dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const Eigen::Index len = lay.length();

    Matrix x = embed(lay, sample, plan, trace ? &trace->extracted : nullptr);

    // Router sources that do not depend on the layer.
    Matrix pooled_src;
    const Matrix no_src;
    const RouterInput router_input = plan.bank ? plan.bank->router_input() : RouterInput::none;
    if (router_input == RouterInput::pooled) {
        pooled_src = pooled_instruction(sample.instruction).transpose().replicate(len, 1);
    }

    if (trace) trace->layers.resize(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Layer& layer = layers_[l];
        const int li = static_cast<int>(l);
        LayerTrace local;
        LayerTrace& t = trace ? trace->layers[l] : local;
        auto* pts = trace ? &t.points : nullptr;
        auto pt = [&](PointName n) { return pts ? &(*pts)[point_slot(n)] : nullptr; };
        const auto& W = [&](PointName n) -> const Matrix& { return layer.w[point_slot(n)].value; };

        t.x_in = x;
        t.h1 = rms_norm(x, t.inv1);
        // Token routers only act on FFN points; attention slots see the pooled source if any.
        const Matrix& attn_src = router_input == RouterInput::token ? no_src : pooled_src;
        t.q = apply_point(W(PointName::q_proj), li, PointName::q_proj, t.h1, attn_src, plan, pt(PointName::q_proj));
        t.k = apply_point(W(PointName::k_proj), li, PointName::k_proj, t.h1, attn_src, plan, pt(PointName::k_proj));
        t.v = apply_point(W(PointName::v_proj), li, PointName::v_proj, t.h1, attn_src, plan, pt(PointName::v_proj));

        t.attn.resize(len, d);
        t.probs.assign(static_cast<std::size_t>(heads), Matrix());
        for (int h = 0; h < heads; ++h) {
            const auto qh = t.q.middleCols(h * dh, dh);
            const auto kh = t.k.middleCols(h * dh, dh);
            Matrix scores = (qh * kh.transpose()) * inv_sqrt;
            for (Eigen::Index i = 0; i < len; ++i)
                for (Eigen::Index j = i + 1; j < len; ++j) scores(i, j) = -std::numeric_limits<double>::infinity();
            Matrix probs = softmax_rows(scores);
            t.attn.middleCols(h * dh, dh) = probs * t.v.middleCols(h * dh, dh);
            t.probs[static_cast<std::size_t>(h)] = std::move(probs);
        }
        const Matrix o = apply_point(W(PointName::o_proj), li, PointName::o_proj, t.attn, attn_src, plan,
                                     pt(PointName::o_proj));
        t.x_mid = t.x_in + o;
        t.h2 = rms_norm(t.x_mid, t.inv2);

        if (router_input == RouterInput::token) {
            t.router_src.resize(len, d + plan.task_slot.size());
            t.router_src.leftCols(d) = t.h2;
            if (plan.task_slot.size() > 0)
                t.router_src.rightCols(plan.task_slot.size()) = plan.task_slot.transpose().replicate(len, 1);
        } else {
            t.router_src = pooled_src;
        }
        t.g = apply_point(W(PointName::gate_proj), li, PointName::gate_proj, t.h2, t.router_src, plan,
                          pt(PointName::gate_proj));
        t.u = apply_point(W(PointName::up_proj), li, PointName::up_proj, t.h2, t.router_src, plan,
                          pt(PointName::up_proj));
        t.m.resize(t.g.rows(), t.g.cols());
        for (Eigen::Index i = 0; i < t.g.size(); ++i) {
            const double g = t.g(i);
            t.m(i) = g * sigmoid(g) * t.u(i);
        }
        const Matrix down = apply_point(W(PointName::down_proj), li, PointName::down_proj, t.m, t.router_src, plan,
                                        pt(PointName::down_proj));
        x = t.x_mid + down;
    }

    Vector inv_final;
    Matrix h_final = rms_norm(x, inv_final);
    Matrix logits(static_cast<Eigen::Index>(logit_rows.size()), head_.value.rows());
    for (std::size_t i = 0; i < logit_rows.size(); ++i) {
        logits.row(static_cast<Eigen::Index>(i)) = h_final.row(logit_rows[i]) * head_.value.transpose();
    }
    if (trace) {
        trace->x_final = std::move(x);
        trace->inv_final = std::move(inv_final);
        trace->h_final = std::move(h_final);
    }
    return logits;
}

double cross_entropy(const Matrix& logits, std::span<const int> targets) {
    if (static_cast<std::size_t>(logits.rows()) != targets.size())
        fail(Errc::dimension_mismatch, "one target per logits row required");
    if (targets.empty()) return 0.0;
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double peak = logits.row(i).maxCoeff();
        const double lse = peak + std::log((logits.row(i).array() - peak).exp().sum());
        total += lse - logits(i, targets[static_cast<std::size_t>(i)]);
    }
    return total / static_cast<double>(targets.size());
}

SampleLoss Backbone::sample_loss(const MultimodalSample& sample, const ForwardPlan& plan, SampleTrace* trace) const {
    const SequenceLayout lay = layout(sample, prefix_rows(plan), true);
    const std::vector<int> rows = lay.loss_positions();
    std::vector<int> targets;
    const int offset = lay.prefix_len + lay.visual_len;
    for (int p : rows) targets.push_back(lay.tokens[static_cast<std::size_t>(p + 1 - offset)]);

    const Matrix logits = run(lay, sample, plan, trace, rows);
    SampleLoss loss;
    loss.count = static_cast<int>(rows.size());
    loss.ce_sum = cross_entropy(logits, targets) * loss.count;
    if (trace) {
        trace->layout = lay;
        trace->plan = plan;
        trace->loss_rows = rows;
        trace->targets = targets;
        trace->probs = softmax_rows(logits);
    }
    return loss;
}

void Backbone::backward(SampleTrace& t, double grad_scale) {
    const int d = config_.model_dim;
    const int heads = config_.num_heads;
    const int dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const ForwardPlan& plan = t.plan;
    const RouterInput router_input = plan.bank ? plan.bank->router_input() : RouterInput::none;

    // Loss head.
    Matrix dh_final = Matrix::Zero(t.h_final.rows(), d);
    for (std::size_t i = 0; i < t.loss_rows.size(); ++i) {
        RowVector dlogit = t.probs.row(static_cast<Eigen::Index>(i)) * grad_scale;
        dlogit(t.targets[i]) -= grad_scale;
        dh_final.row(t.loss_rows[i]) += dlogit * head_.value;
    }
    Matrix dx = rms_norm_backward(t.h_final, t.inv_final, dh_final);

    for (std::size_t l = layers_.size(); l-- > 0;) {
        const Layer& layer = layers_[l];
        LayerTrace& lt = t.layers[l];
        const auto& W = [&](PointName n) -> const Matrix& { return layer.w[point_slot(n)].value; };
        const auto& P = [&](PointName n) -> const PointTrace& { return lt.points[point_slot(n)]; };
        Matrix d_router = Matrix::Zero(lt.router_src.rows(), lt.router_src.cols());
        Matrix* d_router_ptr = router_input == RouterInput::token ? &d_router : nullptr;

        // FFN.
        const Matrix dm = point_backward(W(PointName::down_proj), P(PointName::down_proj), dx, lt.router_src,
                                         d_router_ptr);
        Matrix dg(lt.g.rows(), lt.g.cols());
        Matrix du(lt.g.rows(), lt.g.cols());
        for (Eigen::Index i = 0; i < lt.g.size(); ++i) {
            const double g = lt.g(i);
            const double s = sigmoid(g);
            const double silu = g * s;
            dg(i) = dm(i) * lt.u(i) * s * (1.0 + g * (1.0 - s));
            du(i) = dm(i) * silu;
        }
        Matrix dh2 = point_backward(W(PointName::gate_proj), P(PointName::gate_proj), dg, lt.router_src, d_router_ptr);
        dh2 += point_backward(W(PointName::up_proj), P(PointName::up_proj), du, lt.router_src, d_router_ptr);
        if (d_router_ptr) {
            dh2 += d_router.leftCols(d);
            Param* table = plan.bank->task_embeddings();
            const auto slot_width = d_router.cols() - d;
            if (table && table->trainable && plan.task_row >= 0 && slot_width > 0) {
                table->grad.row(plan.task_row) += d_router.rightCols(slot_width).colwise().sum();
            }
        }
        Matrix dx_mid = dx + rms_norm_backward(lt.h2, lt.inv2, dh2);

        // Attention.
        const Matrix empty;
        const Matrix& attn_src = router_input == RouterInput::token ? empty : lt.router_src;
        const Matrix dattn = point_backward(W(PointName::o_proj), P(PointName::o_proj), dx_mid, attn_src, nullptr);
        Matrix dq(lt.q.rows(), d), dk(lt.k.rows(), d), dv(lt.v.rows(), d);
        for (int h = 0; h < heads; ++h) {
            const Matrix& probs = lt.probs[static_cast<std::size_t>(h)];
            const Matrix d_out = dattn.middleCols(h * dh, dh);
            dv.middleCols(h * dh, dh) = probs.transpose() * d_out;
            const Matrix dprobs = d_out * lt.v.middleCols(h * dh, dh).transpose();
            const Vector inner = probs.cwiseProduct(dprobs).rowwise().sum();
            const Matrix dscores = probs.cwiseProduct(dprobs.colwise() - inner) * inv_sqrt;
            dq.middleCols(h * dh, dh) = dscores * lt.k.middleCols(h * dh, dh);
            dk.middleCols(h * dh, dh) = dscores.transpose() * lt.q.middleCols(h * dh, dh);
        }
        Matrix dh1 = point_backward(W(PointName::q_proj), P(PointName::q_proj), dq, attn_src, nullptr);
        dh1 += point_backward(W(PointName::k_proj), P(PointName::k_proj), dk, attn_src, nullptr);
        dh1 += point_backward(W(PointName::v_proj), P(PointName::v_proj), dv, attn_src, nullptr);
        dx = dx_mid + rms_norm_backward(lt.h1, lt.inv1, dh1);
    }

    // Embedding inputs: soft prompts and the visual projector.
    int row = 0;
    for (Param* p : plan.prefix) {
        if (p->trainable) p->grad += dx.middleRows(row, p->value.rows());
        row += static_cast<int>(p->value.rows());
    }
    if (t.layout.visual_len > 0) {
        const Matrix dvis = dx.middleRows(row, t.layout.visual_len);
        if (projector_w_.trainable) projector_w_.grad.noalias() += dvis.transpose() * t.extracted;
        if (projector_b_.trainable) projector_b_.grad.col(0) += dvis.colwise().sum().transpose();
    }
}

SampleLoss Backbone::accumulate_gradients(const MultimodalSample& sample, const ForwardPlan& plan,
                                          double grad_scale) {
    SampleTrace trace;
    const SampleLoss loss = sample_loss(sample, plan, &trace);
    backward(trace, grad_scale);
    return loss;
}

int Backbone::loss_token_count(const MultimodalSample& sample, const ForwardPlan& plan) const {
    return static_cast<int>(layout(sample, prefix_rows(plan), true).loss_positions().size());
}

ForwardOutput Backbone::forward(std::span<const MultimodalSample> batch, const ForwardPlan& plan) const {
    if (batch.empty()) fail(Errc::empty_batch, "forward called with an empty batch");
    ForwardOutput out;
    double ce = 0.0;
    int count = 0;
    for (const auto& sample : batch) {
        const SequenceLayout lay = layout(sample, prefix_rows(plan), true);
        std::vector<int> rows(static_cast<std::size_t>(lay.length()));
        for (int i = 0; i < lay.length(); ++i) rows[static_cast<std::size_t>(i)] = i;
        Matrix logits = run(lay, sample, plan, nullptr, rows);
        const int offset = lay.prefix_len + lay.visual_len;
        for (int p : lay.loss_positions()) {
            const int target = lay.tokens[static_cast<std::size_t>(p + 1 - offset)];
            const Matrix row = logits.row(p);
            ce += cross_entropy(row, std::span<const int>(&target, 1));
            ++count;
        }
        out.logits.push_back(std::move(logits));
    }
    out.loss = count ? ce / count : 0.0;
    return out;
}

std::string Backbone::generate(const MultimodalSample& sample, const ForwardPlan& plan, int max_new_tokens) const {
    if (max_new_tokens < 1) fail(Errc::invalid_config, "max_new_tokens must be at least 1");
    ForwardPlan eval_plan = plan;
    eval_plan.training = false;
    SequenceLayout lay = layout(sample, prefix_rows(plan), false);
    std::vector<int> generated;
    for (int step = 0; step < max_new_tokens && lay.length() < config_.max_seq_len + 1; ++step) {
        const Matrix logits = run(lay, sample, eval_plan, nullptr, {lay.length() - 1});
        int best = 0;
        for (Eigen::Index j = 1; j < logits.cols(); ++j) {
            if (logits(0, j) > logits(0, best)) best = static_cast<int>(j);
        }
        if (best == tokenizer_.eos()) break;
        generated.push_back(best);
        if (lay.length() == config_.max_seq_len) break;
        lay.tokens.push_back(best);
    }
    return tokenizer_.decode(generated);
}

nlohmann::json Backbone::serialize_trainable() const {
    return {{"config", config_.to_json()},
            {"projector.weight", matrix_to_json(projector_w_.value)},
            {"projector.bias", matrix_to_json(projector_b_.value)}};
}

void Backbone::deserialize_trainable(const nlohmann::json& doc) {
    const BackboneConfig saved = BackboneConfig::from_json(doc.at("config"));
    if (!(saved == config_)) {
        fail(Errc::config_mismatch, "checkpoint backbone config " + saved.to_json().dump() +
                                        " does not match " + config_.to_json().dump());
    }
    projector_w_.value = matrix_from_json(doc.at("projector.weight"));
    projector_b_.value = matrix_from_json(doc.at("projector.bias"));
}

}  // namespace prism
