#include <doctest.h>

#include <fstream>
#include <random>

#include "prism/errors.hpp"
#include "prism/evaluation.hpp"

using namespace prism;

namespace {

AccuracyMatrix with_final_row(const std::vector<double>& final_row) {
    std::vector<std::vector<double>> rows;
    for (std::size_t l = 0; l + 1 < final_row.size(); ++l) rows.emplace_back(l + 1, 50.0);
    rows.push_back(final_row);
    return AccuracyMatrix::from_rows(rows);
}

// Direct transcription of the forgetting definition.
double forgetting_reference(const std::vector<std::vector<double>>& a) {
    const std::size_t T = a.size();
    double sum = 0.0;
    for (std::size_t t = 0; t + 1 < T; ++t) {
        double best = -1e300;
        for (std::size_t l = t; l + 1 < T; ++l) best = std::max(best, a[l][t]);
        sum += best - a[T - 1][t];
    }
    return sum / static_cast<double>(T - 1);
}

}  // namespace

TEST_CASE("vqa normalization") {
    CHECK(vqa_normalize("A Dog.") == "dog");
    CHECK(vqa_normalize("") == "");
    CHECK(vqa_normalize("two  cats") == "2 cats");
}

TEST_CASE("vqa and exact match") {
    CHECK(vqa_match("The dog", {"dog"}) == 1);
    CHECK(vqa_match("cat", {"dog"}) == 0);
    CHECK(vqa_match("", {""}) == 1);
    CHECK(exact_match("B", "b") == 1);
    CHECK(exact_match("B ", "B") == 1);
    CHECK(exact_match("B", "C") == 0);
}

TEST_CASE("bleu4 basics") {
    CHECK(bleu4("the cat sat on the mat", {"the cat sat on the mat"}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bleu4("", {"the cat"}) == 0.0);
    CHECK_THROWS_AS(bleu4("x", {}), Error);
}

TEST_CASE("rouge_l basics") {
    CHECK(rouge_l("a c", {"a b c"}) == 0.8);
    CHECK(rouge_l("red blue", {"red blue"}) == doctest::Approx(1.0));
    CHECK(rouge_l("x y", {"a b"}) == 0.0);
}

TEST_CASE("text metrics match the reference implementation") {
    std::ifstream in(std::string(PRISM_ORACLE_DIR) + "/text_metrics_fixture.json");
    REQUIRE(in.good());
    const json fixture = json::parse(in);
    REQUIRE(fixture.size() == 50);
    for (const auto& row : fixture) {
        const auto pred = row.at("prediction").get<std::string>();
        const auto refs = row.at("references").get<std::vector<std::string>>();
        CAPTURE(pred);
        CHECK(std::abs(bleu4(pred, refs) - row.at("bleu4").get<double>()) < 1e-6);
        CHECK(std::abs(rouge_l(pred, refs) - row.at("rouge_l").get<double>()) < 1e-6);
    }
}

TEST_CASE("score_task dispatch and errors") {
    TaskManifest m;
    m.task_name = "t";
    m.eval_type = EvalType::exact;
    std::vector<MultimodalSample> gold(2);
    gold[0].sample_id = "a";
    gold[0].answer = "X";
    gold[1].sample_id = "b";
    gold[1].answer = "Y";
    CHECK(score_task({{"a", "x"}, {"b", "y"}}, m, gold) == 100.0);
    CHECK(score_task({{"a", "x"}, {"b", "z"}}, m, gold) == 50.0);
    try {
        score_task({{"c", "x"}}, m, gold);
        FAIL("expected MissingGold");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::missing_gold);
    }
    try {
        score_task({{"a", "x"}, {"a", "x"}}, m, gold);
        FAIL("expected DuplicatePrediction");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::duplicate_prediction);
    }
    m.eval_type = EvalType::caption;
    gold[0].answer = "a small red cat sat";
    gold[1].answer = "the dog runs on the street";
    CHECK(score_task({{"a", "a small red cat sat"}, {"b", "the dog runs on the street"}}, m, gold) ==
          doctest::Approx(100.0));
}

TEST_CASE("last accuracy reproduces the published averages") {
    CHECK(std::abs(last_accuracy(with_final_row({89.91, 91.40, 55.33, 77.51, 68.85, 55.43})) - 73.07) <= 0.005);
    CHECK(std::abs(last_accuracy(with_final_row({18.88, 52.62, 38.75, 21.25, 21.12, 41.44})) - 32.34) <= 0.005);
    CHECK(last_accuracy(AccuracyMatrix::from_rows({{42.0}})) == 42.0);
}

TEST_CASE("average accuracy") {
    const auto m = AccuracyMatrix::from_rows({{90}, {85, 80}, {70, 75, 88}});
    CHECK(avg_accuracy(m) == doctest::Approx((90.0 + 82.5 + 233.0 / 3.0) / 3.0));
    CHECK(std::abs(avg_accuracy(m) - 83.389) < 0.001);
    CHECK(avg_accuracy(AccuracyMatrix::from_rows({{7.0}})) == 7.0);
    CHECK(avg_accuracy(AccuracyMatrix::from_rows({{5}, {5, 5}, {5, 5, 5}})) == doctest::Approx(5.0));
}

TEST_CASE("forgetting") {
    CHECK(forgetting(AccuracyMatrix::from_rows({{80}, {70, 90}})) == doctest::Approx(10.0));
    CHECK(std::abs(forgetting(AccuracyMatrix::from_rows({{90}, {85, 80}, {70, 75, 88}})) - 12.5) < 1e-9);
    CHECK(forgetting(AccuracyMatrix::from_rows({{5}, {5, 5}, {5, 5, 5}})) == doctest::Approx(0.0));
    try {
        forgetting(AccuracyMatrix::from_rows({{1.0}}));
        FAIL("expected UndefinedForSingleTask");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::undefined_for_single_task);
    }
    AccuracyMatrix partial(3);
    partial.set(0, 0, 10.0);
    try {
        forgetting(partial);
        FAIL("expected IncompleteMatrix");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::incomplete_matrix);
    }
}

TEST_CASE("forgetting agrees with a brute-force evaluation on random matrices") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    std::uniform_int_distribution<int> size(2, 9);
    for (int trial = 0; trial < 200; ++trial) {
        const int T = size(rng);
        std::vector<std::vector<double>> rows;
        for (int l = 0; l < T; ++l) {
            rows.emplace_back();
            for (int t = 0; t <= l; ++t) rows.back().push_back(u(rng));
        }
        CHECK(std::abs(forgetting(AccuracyMatrix::from_rows(rows)) - forgetting_reference(rows)) < 1e-9);
    }
}

TEST_CASE("matrix shape and serialization") {
    AccuracyMatrix m(3);
    m.set(0, 0, 50.0);
    m.set(1, 0, 40.0);
    m.set(1, 1, 60.0);
    CHECK(m.row_complete(1));
    CHECK_FALSE(m.row_complete(2));
    CHECK_THROWS_AS(m.set(0, 1, 1.0), Error);
    CHECK_THROWS_AS(m.set(0, 0, 101.0), Error);
    const auto back = AccuracyMatrix::from_json(m.to_json());
    CHECK(back.to_json() == m.to_json());
    CHECK(m.to_json()[2][0].is_null());
}

TEST_CASE("metrics report") {
    const auto r = MetricsReport::compute(AccuracyMatrix::from_rows({{90}, {85, 80}, {70, 75, 88}}));
    CHECK(r.forgetting.has_value());
    CHECK(*r.forgetting == doctest::Approx(12.5));
    CHECK(r.per_task_final == std::vector<double>{70, 75, 88});
    const auto single = MetricsReport::compute(AccuracyMatrix::from_rows({{33.0}}));
    CHECK_FALSE(single.forgetting.has_value());
    CHECK(single.to_json()["forgetting"].is_null());
}
