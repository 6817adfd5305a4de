#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace prism {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Rng = std::mt19937_64;

/// Optimizer group a trainable tensor belongs to.
enum class ParamGroup { adapter, projector };

/// A named tensor with its gradient accumulator. Frozen tensors never
/// accumulate gradient.
struct Param {
    std::string name;
    Matrix value;
    Matrix grad;
    bool trainable = true;
    ParamGroup group = ParamGroup::adapter;

    Param() = default;
    Param(std::string n, Matrix v, bool train = true, ParamGroup g = ParamGroup::adapter)
        : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())),
          trainable(train), group(g) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    Eigen::Index size() const { return value.size(); }
};

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

/// Row-wise numerically stable softmax.
Matrix softmax_rows(const Matrix& logits);
Vector softmax(const Vector& logits);

/// Cosine similarity; 0 when either vector is zero.
double cosine(const Vector& a, const Vector& b);
Vector normalized(const Vector& v);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& doc);
nlohmann::json vector_to_json(const Vector& v);
Vector vector_from_json(const nlohmann::json& doc);

/// Derives an independent stream seed from a base seed and a label.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

}  // namespace prism
