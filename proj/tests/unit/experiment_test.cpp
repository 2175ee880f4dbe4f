#include "conceptlens/experiment.hpp"
#include "conceptlens/svg.hpp"

#include <doctest.h>

using namespace clens;

TEST_CASE("config JSON round-trips and hashes without the output directory") {
  ExperimentConfig c;
  c.preset = "custom";
  c.count = 12;
  c.layer = 1;
  c.mode = InterventionMode::suppress_only;
  c.scope = InterventionScope::first_generation_step;
  c.seed = 42;
  c.synthetic.items_per_concept = 9;
  c.train.steps = 17;
  const auto back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());

  auto moved = c;
  moved.out = "elsewhere";
  CHECK(moved.hash() == c.hash());
  auto reseeded = c;
  reseeded.seed = 43;
  CHECK(reseeded.hash() != c.hash());

  CHECK_THROWS_AS(ExperimentConfig::from_json({{"sede", 1}}), Error);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"synthetic", {{"concept", 3}}}}), Error);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"seed", "one"}}), Error);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"mode", "sideways"}}), Error);
}

TEST_CASE("model source is exactly one of planted, checkpoint, driver") {
  ExperimentConfig c;
  CHECK(c.model_source().kind == ModelKind::planted);
  c.model = "weights.ckpt";
  CHECK(c.model_source().kind == ModelKind::checkpoint);
  c.driver_cmd = "run-driver";
  CHECK_THROWS_AS(c.model_source(), Error);
  c.model.reset();
  CHECK(c.model_source().kind == ModelKind::external);
  CHECK(c.model_source().location == "run-driver");
}

TEST_CASE("selection rule layers overrides on a preset") {
  ExperimentConfig c;
  auto rule = c.selection_rule("intervention");
  CHECK(rule.scope == SelectionScope::whole_model);
  CHECK(rule.k.resolve(512) == 153);

  c.preset = "fig4";
  CHECK(c.selection_rule("intervention").k.resolve(5000) == 1000);
  c.layer = 2;
  c.fraction = 0.5;
  rule = c.selection_rule("intervention");
  CHECK(rule.scope == SelectionScope::single_layer);
  CHECK(rule.layer == 2);
  CHECK(rule.k.resolve(128) == 64);

  ExperimentConfig custom;
  custom.preset = "custom";
  CHECK_THROWS_AS(custom.selection_rule("fig6"), Error);
  custom.count = 3;
  CHECK(custom.selection_rule("fig6").k.resolve(10) == 3);
  custom.fraction = 0.1;
  CHECK_THROWS_AS(custom.selection_rule("fig6"), Error);
}

TEST_CASE("svg documents carry provenance and escape labels") {
  const std::string prov = "config sha256 abc";
  const auto line = svg_line_chart("a<b", "x", "y", {{"s&t", {{0, 0}, {1, 1}}}}, prov);
  CHECK(line.find("<!-- config sha256 abc -->") != std::string::npos);
  CHECK(line.find("a&lt;b") != std::string::npos);
  CHECK(line.find("s&amp;t") != std::string::npos);
  CHECK(line.ends_with("</svg>\n"));
  CHECK_THROWS_AS(svg_line_chart("t", "x", "y", {}, "bad -- comment"), Error);

  Eigen::MatrixXd heat(2, 2);
  heat << std::numeric_limits<double>::quiet_NaN(), 0.5, 1.0, std::numeric_limits<double>::quiet_NaN();
  const auto h = svg_heatmap("h", {"r0", "r1"}, {"c0", "c1"}, heat, prov);
  CHECK(h.find("0.50") != std::string::npos);
  CHECK_THROWS_AS(svg_heatmap("h", {"r0"}, {"c0", "c1"}, heat, prov), Error);

  Eigen::MatrixXd pts(3, 2);
  pts << 0, 0, 1, 1, 2, 0;
  const auto sc = svg_scatter("s", pts, {0, 1, 1}, {"a", "b"}, prov);
  std::size_t dots = 0;
  for (auto at = sc.find("<circle"); at != std::string::npos; at = sc.find("<circle", at + 1)) ++dots;
  CHECK(dots == 3);
  CHECK_THROWS_AS(svg_bar_chart("b", {"x"}, {"a"}, Eigen::MatrixXd(2, 1), prov), Error);
}
