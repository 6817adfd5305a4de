#pragma once

#include <span>
#include <vector>

#include "prism/config.hpp"
#include "prism/tensor.hpp"

namespace prism {

struct SameConfig {
    double tau_score = 0.1;
    double momentum = 0.9;
    int window_size = 3;
    int max_components = 64;
    double energy_ratio = 0.9;

    void validate() const;
    static SameConfig from_config(const Config& config);
};

struct SpectralAnchors {
    Matrix directions;   // dim x k, orthonormal columns
    Vector energies;     // covariance eigenvalue of each retained direction
    double total_energy = 0.0;

    int count() const { return static_cast<int>(directions.cols()); }
    double captured_ratio() const;
};

/// Principal directions of the centered snapshot covariance, the smallest
/// leading set reaching `energy_ratio`, capped at max_components. A window
/// without spread yields no anchors.
SpectralAnchors same_update_anchors(std::span<const Vector> window, const SameConfig& config);

/// Per anchor: EMA (momentum mu) of <g, d>^2 over the gradient sequence,
/// divided by the EMA of |g|^2, so scores lie in [0, 1].
Vector same_importance(std::span<const Vector> gradients, const Matrix& anchors, double momentum);

/// g minus its components along anchors whose importance exceeds tau.
Vector same_consolidate(const Vector& gradient, const Matrix& anchors, const Vector& importance, double tau);

/// Appends the columns of `extra` to an orthonormal basis, dropping
/// directions already spanned.
Matrix extend_orthonormal(const Matrix& basis, const Matrix& extra, double tolerance = 1e-8);

}  // namespace prism
