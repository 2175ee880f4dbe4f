#include "conceptlens/error.hpp"
#include "conceptlens/probe.hpp"

#include "reference_fixtures.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace clens;
using clens::testing::planted;

namespace {

Eigen::MatrixXd noise_features(std::size_t n, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), d);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = normal(rng);
  return x;
}

std::vector<ConceptId> balanced_labels(int k, int per_class) {
  std::vector<ConceptId> labels;
  for (int i = 0; i < k * per_class; ++i) labels.push_back(i % k);
  return labels;
}

double training_accuracy(const ProbeModel& model, const Eigen::MatrixXd& x, const std::vector<ConceptId>& y) {
  int hits = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    hits += probe_predict(model, x.row(i).transpose()).argmax == y[static_cast<std::size_t>(i)];
  return static_cast<double>(hits) / static_cast<double>(x.rows());
}

// Best accuracy any half-plane achieves on labelled 2-D points, by sweeping
// boundary directions finely and every distinct threshold along each.
double best_linear_accuracy(const Eigen::MatrixXd& x, const std::vector<ConceptId>& y) {
  double best = 0.0;
  for (int step = 0; step < 3600; ++step) {
    const double angle = 2.0 * std::numbers::pi * step / 3600.0;
    const Eigen::Vector2d dir(std::cos(angle), std::sin(angle));
    const Eigen::VectorXd proj = x * dir;
    std::vector<double> cuts{proj.minCoeff() - 1.0, proj.maxCoeff() + 1.0};
    for (Eigen::Index i = 0; i < proj.size(); ++i)
      for (Eigen::Index j = 0; j < proj.size(); ++j) cuts.push_back(0.5 * (proj[i] + proj[j]));
    for (double cut : cuts) {
      int hits = 0;
      for (Eigen::Index i = 0; i < proj.size(); ++i) hits += (proj[i] > cut ? 1 : 0) == y[static_cast<std::size_t>(i)];
      best = std::max(best, static_cast<double>(hits) / static_cast<double>(proj.size()));
    }
  }
  return best;
}

}  // namespace

TEST_CASE("separable pair is fit exactly") {
  Eigen::MatrixXd x(2, 1);
  x << -1.0, 1.0;
  const std::vector<ConceptId> y{0, 1};
  const auto model = fit_probe(x, y, 2);
  CHECK(model.converged);
  CHECK(training_accuracy(model, x, y) == 1.0);
  CHECK(model.gradient_norm <= 1e-6);
}

TEST_CASE("fit rejects a missing class and bad shapes") {
  Eigen::MatrixXd x(3, 1);
  x << 0.0, 1.0, 2.0;
  const std::vector<ConceptId> same{0, 0, 0};
  try {
    fit_probe(x, same, 2);
    FAIL("expected missing_class");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::missing_class);
  }
  const std::vector<ConceptId> short_labels{0, 1};
  CHECK_THROWS_AS(fit_probe(x, short_labels, 2), Error);
  Eigen::MatrixXd bad = x;
  bad(1, 0) = std::nan("");
  const std::vector<ConceptId> ok{0, 1, 0};
  CHECK_THROWS_AS(fit_probe(bad, ok, 2), Error);
}

TEST_CASE("XOR stays at or below the best linear accuracy") {
  Eigen::MatrixXd x(4, 2);
  x << 0, 0, 1, 1, 0, 1, 1, 0;
  const std::vector<ConceptId> y{0, 0, 1, 1};
  const double oracle = best_linear_accuracy(x, y);
  CHECK(oracle == doctest::Approx(0.75));
  const auto model = fit_probe(x, y, 2);
  CHECK(training_accuracy(model, x, y) <= oracle);
}

TEST_CASE("zero probe predicts uniform and breaks ties toward concept 0") {
  ProbeModel model;
  model.weights = Eigen::MatrixXd::Zero(5, 3);
  model.bias = Eigen::VectorXd::Zero(5);
  model.standardization = {Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3)};
  const auto p = probe_predict(model, Eigen::Vector3d(1.0, -2.0, 3.0));
  CHECK(p.argmax == 0);
  for (Eigen::Index c = 0; c < 5; ++c) CHECK(p.probabilities[c] == doctest::Approx(0.2).epsilon(1e-15));

  model.bias << 0.0, 1.0, 3.0, 3.0, 2.0;
  CHECK(probe_predict(model, Eigen::Vector3d::Zero()).argmax == 2);
  CHECK_THROWS_AS(probe_predict(model, Eigen::Vector2d::Zero()), Error);
}

TEST_CASE("probe readout is shift invariant and normalized on random inputs") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> scale(0.1, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + trial % 6;
    const int d = 1 + trial % 9;
    ProbeModel model;
    model.weights = Eigen::MatrixXd::NullaryExpr(k, d, [&] { return normal(rng) * scale(rng); });
    model.bias = Eigen::VectorXd::NullaryExpr(k, [&] { return normal(rng) * 10.0; });
    model.standardization = {Eigen::VectorXd::NullaryExpr(d, [&] { return normal(rng); }),
                             Eigen::VectorXd::NullaryExpr(d, [&] { return scale(rng); })};
    const Eigen::VectorXd input = Eigen::VectorXd::NullaryExpr(d, [&] { return normal(rng) * scale(rng); });
    const auto p = probe_predict(model, input);
    CHECK(std::abs(p.probabilities.sum() - 1.0) <= 1e-9);
    CHECK((p.probabilities.array() >= 0.0).all());
    CHECK(p.probabilities[p.argmax] == p.probabilities.maxCoeff());

    ProbeModel shifted = model;
    shifted.bias.array() += normal(rng) * 100.0;
    const auto q = probe_predict(shifted, input);
    CHECK((p.probabilities - q.probabilities).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("fit is deterministic and its objective never increases") {
  const auto x = noise_features(40, 6, 3);
  const auto y = balanced_labels(4, 10);
  ProbeConfig config;
  config.record_trace = true;
  const auto a = fit_probe(x, y, 4, config);
  const auto b = fit_probe(x, y, 4, config);
  CHECK((a.weights - b.weights).cwiseAbs().maxCoeff() <= 1e-8);
  CHECK((a.bias - b.bias).cwiseAbs().maxCoeff() <= 1e-8);
  REQUIRE(a.objective_trace.size() >= 2);
  for (std::size_t i = 1; i < a.objective_trace.size(); ++i) CHECK(a.objective_trace[i] <= a.objective_trace[i - 1]);
  CHECK(a.converged);
  CHECK((a.standardization.scale.array() > 0.0).all());
}

TEST_CASE("constant features get unit scale") {
  Eigen::MatrixXd x(4, 2);
  x << 1, 5, 2, 5, 3, 5, 4, 5;
  const auto s = fit_standardization(x);
  CHECK(s.scale[1] == 1.0);
  CHECK(s.mean[1] == 5.0);
  const std::vector<ConceptId> y{0, 0, 1, 1};
  CHECK(fit_probe(x, y, 2).weights.allFinite());
}

TEST_CASE("non-convergence is reported, not thrown") {
  const auto x = noise_features(30, 4, 5);
  const auto y = balanced_labels(3, 10);
  ProbeConfig config;
  config.max_iter = 2;
  const auto model = fit_probe(x, y, 3, config);
  CHECK_FALSE(model.converged);
  CHECK(model.iterations == 2);
}

TEST_CASE("LOOCV folds never see the held-out item") {
  const auto x = noise_features(30, 5, 9);
  const auto y = balanced_labels(3, 10);
  for (std::size_t held : {0u, 13u, 29u}) {
    Eigen::MatrixXd poisoned = x;
    poisoned.row(static_cast<Eigen::Index>(held)).setConstant(1e6);
    const auto clean = fit_fold(x, y, 3, held);
    const auto dirty = fit_fold(poisoned, y, 3, held);
    CHECK(clean.weights == dirty.weights);
    CHECK(clean.bias == dirty.bias);
    CHECK(clean.standardization.mean == dirty.standardization.mean);
    CHECK(clean.standardization.scale == dirty.standardization.scale);
  }
}

TEST_CASE("LOOCV flags folds that lose a class") {
  const auto x = noise_features(5, 3, 1);
  const auto y = balanced_labels(5, 1);
  try {
    loocv_accuracy(x, y, 5, {}, 2);
    FAIL("expected missing_class");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::missing_class);
    CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
  }
}

TEST_CASE("LOOCV overall accuracy is the support-weighted mean of per-concept accuracy") {
  const auto x = noise_features(33, 4, 21);
  std::vector<ConceptId> y = balanced_labels(3, 10);
  y.insert(y.end(), {0, 0, 1});  // unbalanced support
  const auto acc = loocv_accuracy(x, y, 3);
  double weighted = 0.0;
  for (int c = 0; c < 3; ++c) weighted += acc.per_concept[static_cast<std::size_t>(c)] * acc.support[static_cast<std::size_t>(c)];
  CHECK(acc.overall == doctest::Approx(weighted / 33.0).epsilon(1e-12));
  CHECK(acc.predictions.size() == 33);
  for (double a : acc.per_concept) CHECK((a >= 0.0 && a <= 1.0));
}

TEST_CASE("noise features land inside the chance band") {
  const auto y = balanced_labels(5, 12);
  const auto acc = loocv_accuracy(noise_features(60, 32, 1234), y, 5);
  CHECK(acc.overall >= 0.05);
  CHECK(acc.overall <= 0.40);
}

TEST_CASE("planted model probe curve reaches 1.0 at the concept layer") {
  const auto& p = planted();
  const auto report = probe_curve(p.records, p.dataset);
  const int star = p.spec.concept_layer();
  REQUIRE(report.layers.size() == 4);
  CHECK(report.layers[static_cast<std::size_t>(star)].overall == 1.0);
  for (int l = star + 1; l < 4; ++l)
    CHECK(report.layers[static_cast<std::size_t>(l)].overall >= report.layers[static_cast<std::size_t>(star - 1)].overall);
  CHECK(report.best_layer() == star);
  CHECK(report.normalized_depth(0) == 0.0);
  CHECK(report.normalized_depth(3) == 1.0);

  const std::string csv = probe_report_csv(report);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4 * 6);
  CHECK(csv.find("Overall") != std::string::npos);
  CHECK(probe_report_json(report).at("best_layer") == star);
}

TEST_CASE("single-layer report has one point at depth zero") {
  ProbeReport report;
  report.n_layers = 1;
  CHECK(report.normalized_depth(0) == 0.0);
}

TEST_CASE("frozen probe survives a JSON round trip") {
  const auto x = noise_features(20, 3, 4);
  const auto y = balanced_labels(2, 10);
  const auto model = fit_probe(x, y, 2, {}, 3);
  const auto back = probe_from_json(nlohmann::json::parse(probe_to_json(model).dump()));
  CHECK(back.layer == 3);
  CHECK(back.weights == model.weights);
  CHECK(back.bias == model.bias);
  CHECK(back.standardization.scale == model.standardization.scale);
  CHECK_THROWS_AS(probe_from_json(nlohmann::json{{"layer", 1}}), Error);
}
