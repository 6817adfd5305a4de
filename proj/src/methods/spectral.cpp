#include "prism/methods/spectral.hpp"

#include <algorithm>

#include <Eigen/SVD>

#include "prism/errors.hpp"

namespace prism {

void SameConfig::validate() const {
    if (!(energy_ratio > 0.0 && energy_ratio <= 1.0)) fail(Errc::invalid_config, "same energy_ratio must lie in (0, 1]");
    if (window_size < 2) fail(Errc::invalid_config, "same window_size must be at least 2");
    if (max_components < 1) fail(Errc::invalid_config, "same max_components must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail(Errc::invalid_config, "same momentum must lie in [0, 1)");
    if (!(tau_score >= 0.0)) fail(Errc::invalid_config, "same tau_score must be nonnegative");
}

SameConfig SameConfig::from_config(const Config& config) {
    SameConfig c;
    c.tau_score = config.get_real("same_tau_score");
    c.momentum = config.get_real("same_momentum");
    c.window_size = config.get_int("same_window_size");
    c.max_components = config.get_int("same_max_components");
    c.energy_ratio = config.get_real("same_energy_ratio");
    c.validate();
    return c;
}

double SpectralAnchors::captured_ratio() const {
    return total_energy > 0.0 ? energies.sum() / total_energy : 1.0;
}

SpectralAnchors same_update_anchors(std::span<const Vector> window, const SameConfig& config) {
    config.validate();
    SpectralAnchors out;
    if (window.size() < 2) {
        out.directions.resize(window.empty() ? 0 : window.front().size(), 0);
        return out;
    }
    const Eigen::Index dim = window.front().size();
    const auto w = static_cast<Eigen::Index>(window.size());
    Matrix X(dim, w);
    for (Eigen::Index j = 0; j < w; ++j) {
        if (window[static_cast<std::size_t>(j)].size() != dim) fail(Errc::dimension_mismatch, "snapshot sizes differ");
        X.col(j) = window[static_cast<std::size_t>(j)];
    }
    const double scale = std::max(X.cwiseAbs().maxCoeff(), 1e-300);
    X.colwise() -= X.rowwise().mean();

    // Left singular vectors of the centered snapshots are the covariance
    // eigenvectors; squared singular values over (w - 1) its eigenvalues.
    Eigen::JacobiSVD<Matrix> svd(X, Eigen::ComputeThinU);
    const Vector eig = svd.singularValues().array().square() / static_cast<double>(w - 1);
    out.total_energy = eig.sum();
    if (out.total_energy <= 0.0 || svd.singularValues()(0) <= 1e-12 * scale * std::sqrt(double(dim * w))) {
        out.directions.resize(dim, 0);
        out.total_energy = 0.0;
        return out;
    }
    const int cap = std::min<int>({config.max_components, static_cast<int>(w - 1), static_cast<int>(eig.size())});
    int k = 0;
    double acc = 0.0;
    while (k < cap) {
        acc += eig(k);
        ++k;
        if (acc >= config.energy_ratio * out.total_energy * (1.0 - 1e-12)) break;
    }
    out.directions = svd.matrixU().leftCols(k);
    out.energies = eig.head(k);
    return out;
}

Vector same_importance(std::span<const Vector> gradients, const Matrix& anchors, double momentum) {
    Vector proj = Vector::Zero(anchors.cols());
    double norm = 0.0;
    for (const auto& g : gradients) {
        const Vector p = anchors.transpose() * g;
        proj = momentum * proj + (1.0 - momentum) * p.cwiseAbs2();
        norm = momentum * norm + (1.0 - momentum) * g.squaredNorm();
    }
    return norm > 0.0 ? Vector(proj / norm) : Vector(Vector::Zero(anchors.cols()));
}

Vector same_consolidate(const Vector& gradient, const Matrix& anchors, const Vector& importance, double tau) {
    if (anchors.cols() == 0) return gradient;
    if (anchors.rows() != gradient.size() || importance.size() != anchors.cols())
        fail(Errc::dimension_mismatch, "anchors, importance and gradient disagree in size");
    Vector out = gradient;
    for (Eigen::Index j = 0; j < anchors.cols(); ++j) {
        if (importance(j) > tau) out -= anchors.col(j).dot(gradient) * anchors.col(j);
    }
    return out;
}

Matrix extend_orthonormal(const Matrix& basis, const Matrix& extra, double tolerance) {
    const Eigen::Index dim = basis.cols() ? basis.rows() : extra.rows();
    std::vector<Vector> cols;
    for (Eigen::Index j = 0; j < basis.cols(); ++j) cols.push_back(basis.col(j));
    for (Eigen::Index j = 0; j < extra.cols(); ++j) {
        Vector v = extra.col(j);
        const double n0 = v.norm();
        if (n0 == 0.0) continue;
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& c : cols) v -= c.dot(v) * c;
        }
        if (v.norm() > tolerance * n0) cols.push_back(v.normalized());
    }
    Matrix out(dim, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = cols[j];
    return out;
}

}  // namespace prism
