#include "prism/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "prism/errors.hpp"

namespace prism {

namespace {

std::string lower(std::string_view text) {
    std::string out(text);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::vector<std::string> split_ws(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::vector<std::string> out;
    for (std::string tok; in >> tok;) out.push_back(tok);
    return out;
}

std::string trim(std::string_view text) {
    const auto b = text.find_first_not_of(" \t\r\n\f\v");
    if (b == std::string_view::npos) return {};
    const auto e = text.find_last_not_of(" \t\r\n\f\v");
    return std::string(text.substr(b, e - b + 1));
}

}  // namespace

std::string vqa_normalize(std::string_view text) {
    static const std::string punctuation = ".,!?\"'`():;";
    static const std::map<std::string, std::string> numbers = {
        {"zero", "0"}, {"one", "1"}, {"two", "2"},   {"three", "3"}, {"four", "4"}, {"five", "5"},
        {"six", "6"},  {"seven", "7"}, {"eight", "8"}, {"nine", "9"},  {"ten", "10"},
    };
    std::string cleaned;
    for (char c : lower(text)) {
        if (punctuation.find(c) == std::string::npos) cleaned.push_back(c);
    }
    std::string out;
    for (const auto& word : split_ws(cleaned)) {
        if (word == "a" || word == "an" || word == "the") continue;
        auto it = numbers.find(word);
        if (!out.empty()) out.push_back(' ');
        out += it == numbers.end() ? word : it->second;
    }
    return out;
}

int vqa_match(std::string_view prediction, const std::vector<std::string>& golds, bool containment) {
    const std::string pred = vqa_normalize(prediction);
    for (const auto& gold : golds) {
        const std::string g = vqa_normalize(gold);
        if (containment ? pred.find(g) != std::string::npos : pred == g) return 1;
    }
    return 0;
}

int exact_match(std::string_view prediction, std::string_view gold) {
    return lower(trim(prediction)) == lower(trim(gold)) ? 1 : 0;
}

double bleu4(std::string_view prediction, const std::vector<std::string>& references) {
    if (references.empty()) fail(Errc::missing_gold, "bleu4 needs at least one reference");
    const auto cand = split_ws(lower(prediction));
    if (cand.empty()) return 0.0;
    std::vector<std::vector<std::string>> refs;
    for (const auto& r : references) refs.push_back(split_ws(lower(r)));

    auto ngrams = [](const std::vector<std::string>& toks, std::size_t n) {
        std::map<std::vector<std::string>, int> counts;
        for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[{toks.begin() + static_cast<long>(i), toks.begin() + static_cast<long>(i + n)}];
        return counts;
    };

    double log_sum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        const auto cand_counts = ngrams(cand, n);
        std::map<std::vector<std::string>, int> max_ref;
        for (const auto& ref : refs) {
            for (const auto& [gram, count] : ngrams(ref, n)) max_ref[gram] = std::max(max_ref[gram], count);
        }
        int matches = 0;
        for (const auto& [gram, count] : cand_counts) {
            auto it = max_ref.find(gram);
            if (it != max_ref.end()) matches += std::min(count, it->second);
        }
        const int total = std::max(0, static_cast<int>(cand.size()) - static_cast<int>(n) + 1);
        double p;
        if (matches > 0) {
            p = static_cast<double>(matches) / total;
        } else if (n == 1) {
            return 0.0;
        } else {
            p = 1.0 / (total + 1.0);
        }
        log_sum += std::log(p);
    }

    const double c = static_cast<double>(cand.size());
    double r = static_cast<double>(refs.front().size());
    for (const auto& ref : refs) {
        const double len = static_cast<double>(ref.size());
        if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
    }
    const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
    return bp * std::exp(log_sum / 4.0);
}

double rouge_l(std::string_view prediction, const std::vector<std::string>& references) {
    if (references.empty()) fail(Errc::missing_gold, "rouge_l needs at least one reference");
    const auto cand = split_ws(lower(prediction));
    double best = 0.0;
    for (const auto& reference : references) {
        const auto ref = split_ws(lower(reference));
        if (cand.empty() || ref.empty()) continue;
        std::vector<std::vector<int>> dp(cand.size() + 1, std::vector<int>(ref.size() + 1, 0));
        for (std::size_t i = 1; i <= cand.size(); ++i) {
            for (std::size_t j = 1; j <= ref.size(); ++j) {
                dp[i][j] = cand[i - 1] == ref[j - 1] ? dp[i - 1][j - 1] + 1 : std::max(dp[i - 1][j], dp[i][j - 1]);
            }
        }
        const double lcs = dp[cand.size()][ref.size()];
        const double p = lcs / static_cast<double>(cand.size());
        const double r = lcs / static_cast<double>(ref.size());
        if (p + r > 0.0) best = std::max(best, 2.0 * p * r / (p + r));
    }
    return best;
}

double score_task(const std::vector<Prediction>& predictions, const TaskManifest& manifest,
                  const std::vector<MultimodalSample>& gold, bool vqa_containment) {
    std::map<std::string, const MultimodalSample*> by_id;
    for (const auto& s : gold) by_id[s.sample_id] = &s;
    std::set<std::string> seen;
    double total = 0.0;
    for (const auto& p : predictions) {
        auto it = by_id.find(p.sample_id);
        if (it == by_id.end()) fail(Errc::missing_gold, "no gold answer for sample '" + p.sample_id + "'");
        if (!seen.insert(p.sample_id).second) fail(Errc::duplicate_prediction, "sample '" + p.sample_id + "' predicted twice");
        std::vector<std::string> golds{it->second->answer};
        golds.insert(golds.end(), it->second->extra_answers.begin(), it->second->extra_answers.end());
        switch (manifest.eval_type) {
            case EvalType::vqa: total += vqa_match(p.prediction, golds, vqa_containment); break;
            case EvalType::exact: total += exact_match(p.prediction, it->second->answer); break;
            case EvalType::caption: total += bleu4(p.prediction, golds); break;
        }
    }
    return predictions.empty() ? 0.0 : 100.0 * total / static_cast<double>(predictions.size());
}

AccuracyMatrix::AccuracyMatrix(int num_tasks) : num_tasks_(num_tasks) {
    if (num_tasks < 1) fail(Errc::incomplete_matrix, "accuracy matrix needs at least one task");
    for (int l = 0; l < num_tasks; ++l) cells_.emplace_back(static_cast<std::size_t>(l + 1));
}

void AccuracyMatrix::set(int stage, int task, double value) {
    if (stage < 0 || stage >= num_tasks_ || task < 0 || task > stage)
        fail(Errc::incomplete_matrix, "entry (" + std::to_string(stage) + ", " + std::to_string(task) + ") is outside the triangle");
    if (!(value >= 0.0 && value <= 100.0)) fail(Errc::incomplete_matrix, "accuracy must lie in [0, 100]");
    cells_[static_cast<std::size_t>(stage)][static_cast<std::size_t>(task)] = value;
}

bool AccuracyMatrix::has(int stage, int task) const {
    return stage >= 0 && stage < num_tasks_ && task >= 0 && task <= stage &&
           cells_[static_cast<std::size_t>(stage)][static_cast<std::size_t>(task)].has_value();
}

double AccuracyMatrix::at(int stage, int task) const {
    if (!has(stage, task))
        fail(Errc::incomplete_matrix, "entry (" + std::to_string(stage) + ", " + std::to_string(task) + ") is missing");
    return *cells_[static_cast<std::size_t>(stage)][static_cast<std::size_t>(task)];
}

bool AccuracyMatrix::row_complete(int stage) const {
    for (int t = 0; t <= stage; ++t) {
        if (!has(stage, t)) return false;
    }
    return true;
}

std::vector<std::vector<std::optional<double>>> AccuracyMatrix::rows() const { return cells_; }

json AccuracyMatrix::to_json() const {
    json rows = json::array();
    for (const auto& row : cells_) {
        json r = json::array();
        for (const auto& v : row) r.push_back(v ? json(*v) : json(nullptr));
        rows.push_back(r);
    }
    return rows;
}

AccuracyMatrix AccuracyMatrix::from_json(const json& doc) {
    AccuracyMatrix m(static_cast<int>(doc.size()));
    for (std::size_t l = 0; l < doc.size(); ++l) {
        for (std::size_t t = 0; t < doc[l].size(); ++t) {
            if (!doc[l][t].is_null()) m.set(static_cast<int>(l), static_cast<int>(t), doc[l][t].get<double>());
        }
    }
    return m;
}

AccuracyMatrix AccuracyMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
    AccuracyMatrix m(static_cast<int>(rows.size()));
    for (std::size_t l = 0; l < rows.size(); ++l) {
        if (rows[l].size() != l + 1) fail(Errc::incomplete_matrix, "row " + std::to_string(l) + " must hold " + std::to_string(l + 1) + " entries");
        for (std::size_t t = 0; t <= l; ++t) m.set(static_cast<int>(l), static_cast<int>(t), rows[l][t]);
    }
    return m;
}

double last_accuracy(const AccuracyMatrix& m) {
    const int last = m.num_tasks() - 1;
    if (!m.row_complete(last)) fail(Errc::incomplete_matrix, "final row is incomplete");
    double sum = 0.0;
    for (int t = 0; t <= last; ++t) sum += m.at(last, t);
    return sum / m.num_tasks();
}

std::vector<double> stage_means(const AccuracyMatrix& m) {
    std::vector<double> out;
    for (int l = 0; l < m.num_tasks(); ++l) {
        if (!m.row_complete(l)) fail(Errc::incomplete_matrix, "row " + std::to_string(l) + " is incomplete");
        double sum = 0.0;
        for (int t = 0; t <= l; ++t) sum += m.at(l, t);
        out.push_back(sum / (l + 1));
    }
    return out;
}

double avg_accuracy(const AccuracyMatrix& m) {
    const auto means = stage_means(m);
    return std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
}

double forgetting(const AccuracyMatrix& m) {
    const int T = m.num_tasks();
    if (T < 2) fail(Errc::undefined_for_single_task, "forgetting needs at least two tasks");
    for (int l = 0; l < T; ++l) {
        if (!m.row_complete(l)) fail(Errc::incomplete_matrix, "row " + std::to_string(l) + " is incomplete");
    }
    double sum = 0.0;
    for (int t = 0; t < T - 1; ++t) {
        double best = m.at(t, t);
        for (int l = t + 1; l <= T - 2; ++l) best = std::max(best, m.at(l, t));
        sum += best - m.at(T - 1, t);
    }
    return sum / (T - 1);
}

MetricsReport MetricsReport::compute(const AccuracyMatrix& matrix) {
    MetricsReport r;
    r.last_accuracy = prism::last_accuracy(matrix);
    r.stage_means = prism::stage_means(matrix);
    r.average_accuracy = avg_accuracy(matrix);
    if (matrix.num_tasks() >= 2) r.forgetting = prism::forgetting(matrix);
    const int last = matrix.num_tasks() - 1;
    for (int t = 0; t <= last; ++t) r.per_task_final.push_back(matrix.at(last, t));
    return r;
}

json MetricsReport::to_json() const {
    return {{"last_accuracy", last_accuracy},
            {"average_accuracy", average_accuracy},
            {"forgetting", forgetting ? json(*forgetting) : json(nullptr)},
            {"per_task_final", per_task_final},
            {"stage_means", stage_means}};
}

}  // namespace prism
