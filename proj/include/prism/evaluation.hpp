#pragma once

#include <string>
#include <utility>
#include <vector>

#include "prism/benchmarks.hpp"

namespace prism {

std::string vqa_normalize(std::string_view text);
int vqa_match(std::string_view prediction, const std::vector<std::string>& golds, bool containment = false);
int exact_match(std::string_view prediction, std::string_view gold);

/// Sentence BLEU-4 in [0, 1] on case-folded whitespace tokens.
double bleu4(std::string_view prediction, const std::vector<std::string>& references);
/// Max over references of the LCS-based F1.
double rouge_l(std::string_view prediction, const std::vector<std::string>& references);

struct Prediction {
    std::string sample_id;
    std::string prediction;
};

/// Percent score of a task's predictions against its gold samples.
double score_task(const std::vector<Prediction>& predictions, const TaskManifest& manifest,
                  const std::vector<MultimodalSample>& gold, bool vqa_containment = false);

/// Lower-triangular stage x task accuracy matrix (percent).
class AccuracyMatrix {
public:
    explicit AccuracyMatrix(int num_tasks);

    int num_tasks() const { return num_tasks_; }
    void set(int stage, int task, double value);
    bool has(int stage, int task) const;
    double at(int stage, int task) const;
    bool row_complete(int stage) const;

    std::vector<std::vector<std::optional<double>>> rows() const;
    json to_json() const;
    static AccuracyMatrix from_json(const json& doc);
    /// Builds from rows where row l holds tasks 0..l.
    static AccuracyMatrix from_rows(const std::vector<std::vector<double>>& rows);

private:
    int num_tasks_;
    std::vector<std::vector<std::optional<double>>> cells_;
};

double last_accuracy(const AccuracyMatrix& matrix);
double avg_accuracy(const AccuracyMatrix& matrix);
double forgetting(const AccuracyMatrix& matrix);
std::vector<double> stage_means(const AccuracyMatrix& matrix);

struct MetricsReport {
    double last_accuracy = 0.0;
    double average_accuracy = 0.0;
    std::optional<double> forgetting;
    std::vector<double> per_task_final;
    std::vector<double> stage_means;

    static MetricsReport compute(const AccuracyMatrix& matrix);
    json to_json() const;
};

}  // namespace prism
