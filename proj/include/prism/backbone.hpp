#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prism/config.hpp"
#include "prism/injection.hpp"
#include "prism/peft.hpp"
#include "prism/tensor.hpp"

namespace prism {

struct BackboneConfig {
    int vocab_size = 256;
    int model_dim = 64;
    int num_layers = 2;
    int num_heads = 4;
    int ffn_dim = 256;
    int max_seq_len = 2048;
    int image_feature_dim = 32;
    int num_visual_tokens = 4;
    std::uint64_t seed = 1234;

    void validate() const;
    static BackboneConfig from_config(const Config& config);
    nlohmann::json to_json() const;
    static BackboneConfig from_json(const nlohmann::json& doc);
    bool operator==(const BackboneConfig&) const = default;
};

struct MultimodalSample {
    std::string sample_id;
    std::optional<Vector> image_features;
    std::string instruction;
    std::string answer;
    std::string task_name;
    std::vector<std::string> extra_answers;  // additional golds for VQA scoring
    int task_index = -1;
};

/// Expert weighting for one layer's adapter slots.
struct ExpertMix {
    enum class Source {
        all_ones,  // every expert contributes with weight 1 (a single adapter, or HiDe fusion)
        fixed,     // per-sample weights supplied by the method
        router,    // the slot's own router produces per-token softmax weights
    };
    Source source = Source::all_ones;
    Vector weights;

    static ExpertMix ones() { return {}; }
    static ExpertMix fixed_weights(Vector w) { return {Source::fixed, std::move(w)}; }
    static ExpertMix routed() { return {Source::router, {}}; }
};

/// Everything a method decides about one forward pass: which adapters, how
/// experts mix per layer, and which soft prompts are prepended.
struct ForwardPlan {
    AdapterBank* bank = nullptr;
    std::vector<ExpertMix> layer_mix;   // one per layer; empty means all_ones everywhere
    std::vector<Param*> prefix;         // soft prompts, concatenated in order
    Vector task_slot;                   // token-router task embedding input
    int task_row = -1;                  // task-embedding row receiving gradient; -1 for none
    bool training = false;
    double dropout_p = 0.0;
    Rng* dropout_rng = nullptr;
};

/// Byte-level tokenizer with two specials appended after the byte range.
class Tokenizer {
public:
    explicit Tokenizer(int vocab_size = 256) : vocab_size_(vocab_size) {}

    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;  // specials are dropped

    int sep() const { return vocab_size_; }
    int eos() const { return vocab_size_ + 1; }
    int total_vocab() const { return vocab_size_ + 2; }

private:
    int vocab_size_;
};

/// Position bookkeeping of [prefix?][visual?][instruction][SEP][answer][EOS].
struct SequenceLayout {
    int prefix_len = 0;
    int visual_len = 0;
    std::vector<int> tokens;  // instruction, SEP and (optionally) answer + EOS
    int instruction_len = 0;
    int length() const { return prefix_len + visual_len + static_cast<int>(tokens.size()); }
    /// Absolute positions whose next-token prediction is scored.
    std::vector<int> loss_positions() const;
    int answer_begin() const { return prefix_len + visual_len + instruction_len + 1; }
};

struct SampleTrace;

struct SampleLoss {
    double ce_sum = 0.0;
    int count = 0;
};

struct ForwardOutput {
    std::vector<Matrix> logits;  // per sample: length x total_vocab
    double loss = 0.0;           // mean CE over answer positions of the batch
};

/// Desk-scale LLaVA-style surrogate: frozen feature extractor, trainable
/// visual projector, frozen pre-norm causal transformer LM with SwiGLU FFN.
class Backbone {
public:
    explicit Backbone(const BackboneConfig& config);
    ~Backbone();
    Backbone(Backbone&&) noexcept;
    Backbone& operator=(Backbone&&) noexcept;

    const BackboneConfig& config() const { return config_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }

    std::vector<InjectionPoint> injection_points() const;
    InjectionPoint injection_point(int layer, PointName name) const;
    const Matrix& base_weight(int layer, PointName name) const;

    Param& projector_weight() { return projector_w_; }
    Param& projector_bias() { return projector_b_; }
    std::vector<Param*> trainable_params();
    /// Every tensor, frozen and trainable, in a fixed order.
    std::vector<const Param*> all_params() const;

    /// Frozen extractor output: num_visual_tokens x image_feature_dim.
    Matrix extract_features(const Vector& image) const;
    /// Extractor followed by projector: num_visual_tokens x model_dim.
    Matrix encode_image(const Vector& image) const;

    /// Routing features shared by anchor- and prototype-based methods.
    Vector image_routing_feature(const Vector& image) const;
    Vector text_routing_feature(std::string_view instruction) const;
    int feature_dim() const { return config_.image_feature_dim; }
    /// Mean of the instruction's token embeddings (MoE-LoRA router input).
    Vector pooled_instruction(std::string_view instruction) const;

    SequenceLayout layout(const MultimodalSample& sample, int prefix_len, bool include_answer) const;

    /// Forward one sample with loss over its answer span. With a trace the
    /// activations are kept for backward.
    SampleLoss sample_loss(const MultimodalSample& sample, const ForwardPlan& plan,
                           SampleTrace* trace = nullptr) const;
    /// Accumulates d(grad_scale * ce_sum) into every trainable tensor reached.
    void backward(SampleTrace& trace, double grad_scale);
    /// sample_loss with a private trace followed by backward.
    SampleLoss accumulate_gradients(const MultimodalSample& sample, const ForwardPlan& plan, double grad_scale);
    /// Number of scored positions of a sample under a plan.
    int loss_token_count(const MultimodalSample& sample, const ForwardPlan& plan) const;

    /// Batch forward returning full logits and the mean answer-span loss.
    ForwardOutput forward(std::span<const MultimodalSample> batch, const ForwardPlan& plan) const;

    /// Greedy decode; ties go to the lowest token id.
    std::string generate(const MultimodalSample& sample, const ForwardPlan& plan, int max_new_tokens) const;

    /// Checkpoint surface: trainable tensors only.
    nlohmann::json serialize_trainable() const;
    void deserialize_trainable(const nlohmann::json& doc);

private:
    struct Layer;
    Matrix embed(const SequenceLayout& layout, const MultimodalSample& sample, const ForwardPlan& plan,
                 Matrix* extracted) const;
    Matrix run(const SequenceLayout& layout, const MultimodalSample& sample, const ForwardPlan& plan,
               SampleTrace* trace, const std::vector<int>& logit_rows) const;

    BackboneConfig config_;
    Tokenizer tokenizer_;
    Param token_embedding_;   // total_vocab x d
    Matrix positions_;        // max_seq_len x d
    Param extractor_;         // (visual_tokens * F) x F
    Param text_projection_;   // F x 256
    Param projector_w_;       // d x F
    Param projector_b_;       // d x 1
    std::vector<Layer> layers_;
    Param head_;              // total_vocab x d
};

std::unique_ptr<Backbone> build_backbone(const BackboneConfig& config);

/// Mean next-token cross-entropy of a logits row set against targets.
double cross_entropy(const Matrix& logits, std::span<const int> targets);

}  // namespace prism
