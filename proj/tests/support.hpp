#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "prism/backbone.hpp"
#include "prism/config.hpp"
#include "prism/peft.hpp"

namespace prism::test {

inline BackboneConfig tiny_backbone_config(int dim = 8) {
    BackboneConfig c;
    c.vocab_size = 256;
    c.model_dim = dim;
    c.num_layers = 2;
    c.num_heads = 2;
    c.ffn_dim = 2 * dim;
    c.max_seq_len = 256;
    c.image_feature_dim = dim;
    c.num_visual_tokens = 2;
    c.seed = 99;
    return c;
}

/// Defaults with the tiny backbone keys applied.
inline Config tiny_config(int dim = 8) {
    Config c;
    const BackboneConfig b = tiny_backbone_config(dim);
    c.set("model_dim", b.model_dim, "test");
    c.set("num_layers", b.num_layers, "test");
    c.set("num_heads", b.num_heads, "test");
    c.set("ffn_dim", b.ffn_dim, "test");
    c.set("max_seq_len", b.max_seq_len, "test");
    c.set("image_feature_dim", b.image_feature_dim, "test");
    c.set("num_visual_tokens", b.num_visual_tokens, "test");
    c.set("backbone_seed", 99, "test");
    return c;
}

inline MultimodalSample make_sample(const std::string& id, const std::string& instruction, const std::string& answer,
                                    std::optional<Vector> image = std::nullopt, int task = 0) {
    MultimodalSample s;
    s.sample_id = id;
    s.instruction = instruction;
    s.answer = answer;
    s.image_features = std::move(image);
    s.task_name = "t" + std::to_string(task);
    s.task_index = task;
    return s;
}

inline Vector random_vector(int n, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    Vector v(n);
    for (int i = 0; i < n; ++i) v(i) = d(rng);
    return v;
}

/// Largest relative error between analytic and central-difference
/// gradients over up to `max_entries` entries of `param`.
inline double fd_relative_error(Param& param, const Matrix& analytic, const std::function<double()>& loss,
                                double eps = 1e-3, int max_entries = 24) {
    Matrix numeric = Matrix::Zero(analytic.rows(), analytic.cols());
    Matrix picked = Matrix::Zero(analytic.rows(), analytic.cols());
    const Eigen::Index n = param.value.size();
    const Eigen::Index stride = std::max<Eigen::Index>(1, n / max_entries);
    for (Eigen::Index k = 0; k < n; k += stride) {
        double& w = param.value.data()[k];
        const double saved = w;
        w = saved + eps;
        const double up = loss();
        w = saved - eps;
        const double down = loss();
        w = saved;
        numeric.data()[k] = (up - down) / (2.0 * eps);
        picked.data()[k] = analytic.data()[k];
    }
    const double denom = std::max(numeric.norm(), 1e-12);
    return (picked - numeric).norm() / denom;
}

/// Fresh directory under the system temp root.
inline std::filesystem::path temp_dir(const std::string& label) {
    static int counter = 0;
    const auto dir = std::filesystem::temp_directory_path() /
                     ("prism-" + label + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace prism::test
