#include "conceptlens/checkpoint.hpp"
#include "conceptlens/error.hpp"
#include "conceptlens/planted.hpp"
#include "conceptlens/synthetic.hpp"
#include "conceptlens/training.hpp"
#include "conceptlens/transformer.hpp"

#include "reference_fixtures.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <random>

using namespace clens;
using clens::testing::planted;

namespace {

bool bit_equal(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0;
}

Eigen::Index argmax(const Eigen::VectorXd& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace

TEST_CASE("forward is deterministic and empty interventions are an identity") {
  const auto model = init_toy_model(synthetic_topology(5), 16, 3);
  const auto ds = generate_synthetic_dataset(5, 2, 16, 3, 1);
  for (const auto& item : ds.items) {
    const auto a = forward(model, item);
    const auto b = forward(model, item, {}, false);
    const std::vector<UnitOverride> none;
    const auto c = forward(model, item, none);
    CHECK(bit_equal(a.final_logits, b.final_logits));
    CHECK(bit_equal(a.final_logits, c.final_logits));
    CHECK(*a.captures == *c.captures);
    CHECK(a.final_logits.allFinite());
  }
}

TEST_CASE("attention rows sum to one") {
  const auto model = init_toy_model(synthetic_topology(5), 16, 11);
  const auto ds = generate_synthetic_dataset(5, 1, 16, 3, 2);
  for (const auto& item : ds.items) {
    for (const auto& probs : attention_weights(model, *item.tokens)) {
      CHECK((probs.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
      CHECK(probs.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("interventions overwrite only the listed units") {
  const auto topo = synthetic_topology(5);
  const auto model = init_toy_model(topo, 16, 5);
  const auto ds = generate_synthetic_dataset(5, 1, 16, 3, 4);
  std::mt19937_64 rng(9);
  for (const auto& item : ds.items) {
    const auto clean = *forward(model, item).captures;
    const int layer = static_cast<int>(rng() % topo.n_layers);
    std::vector<UnitOverride> overrides;
    for (int j = 0; j < 10; ++j)
      overrides.push_back({layer, static_cast<int>(rng() % topo.mlp_width), 5.0 + j});
    const auto hit = *forward(model, item, overrides).captures;
    Eigen::VectorXf expected = clean.mlp_pre[static_cast<std::size_t>(layer)];
    for (const auto& o : overrides) expected[o.unit] = static_cast<float>(o.value);
    CHECK(hit.mlp_pre[static_cast<std::size_t>(layer)] == expected);
    for (int l = 0; l < layer; ++l) {
      CHECK(hit.mlp_pre[static_cast<std::size_t>(l)] == clean.mlp_pre[static_cast<std::size_t>(l)]);
      CHECK(hit.residual[static_cast<std::size_t>(l)] == clean.residual[static_cast<std::size_t>(l)]);
    }
  }
}

TEST_CASE("out-of-range interventions and tokens are rejected") {
  const auto topo = synthetic_topology(5);
  const auto model = init_toy_model(topo, 16, 5);
  const auto item = generate_synthetic_dataset(5, 1, 16, 3, 4).items[0];
  const std::vector<UnitOverride> bad_layer{{topo.n_layers + 1, 0, 1.0}};
  const std::vector<UnitOverride> bad_unit{{0, topo.mlp_width, 1.0}};
  CHECK_THROWS_AS(forward(model, item, bad_layer), Error);
  CHECK_THROWS_AS(forward(model, item, bad_unit), Error);
  Item long_item{"long", std::vector<Token>(17, 11), std::nullopt};
  CHECK_THROWS_AS(forward(model, long_item), Error);
  Item bad_token{"bad", std::vector<Token>{64}, std::nullopt};
  CHECK_THROWS_AS(forward(model, bad_token), Error);
  Item text_only{"text", std::nullopt, std::string("hello")};
  CHECK_THROWS_AS(forward(model, text_only), Error);
}

TEST_CASE("capture_all matches per-item forward") {
  const auto topo = synthetic_topology(5);
  const auto model = init_toy_model(topo, 16, 1);
  const auto ds = generate_synthetic_dataset(5, 12, 16, 3, 7);
  const auto records = capture_all(model, ds);
  REQUIRE(records.size() == 60);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(records[i].residual.size() == 4);
    CHECK(records[i].mlp_pre.size() == 4);
    CHECK(records[i] == *forward(model, ds.items[i]).captures);
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  const auto topo = synthetic_topology(5);
  const auto ds = generate_synthetic_dataset(5, 2, 16, 3, 21);
  std::vector<std::size_t> indices{0, 3, 7};
  for (std::uint64_t seed : {1ULL, 2ULL}) {
    auto model = init_toy_model(topo, 16, seed);
    TransformerWeights gradient = TransformerWeights::zeros(topo, 16);
    dataset_loss(model, ds, indices, &gradient);

    std::vector<std::pair<double*, double>> params;
    std::vector<std::pair<double*, double*>> flat;
    std::vector<Eigen::Map<Eigen::VectorXd>> w_blocks, g_blocks;
    model.weights.visit([&](const std::string&, auto& b) { w_blocks.emplace_back(b.data(), b.size()); });
    gradient.visit([&](const std::string&, auto& b) { g_blocks.emplace_back(b.data(), b.size()); });
    for (std::size_t b = 0; b < w_blocks.size(); ++b)
      for (Eigen::Index i = 0; i < w_blocks[b].size(); ++i) flat.emplace_back(&w_blocks[b][i], &g_blocks[b][i]);

    std::mt19937_64 rng(seed * 101);
    int checked = 0;
    while (checked < 10) {
      auto [w, g] = flat[rng() % flat.size()];
      // Parameters with (numerically) zero gradient, e.g. unused embedding
      // rows, carry no information for a relative check.
      if (std::abs(*g) < 1e-7) continue;
      const double saved = *w;
      const double h = 1e-5;
      *w = saved + h;
      const double up = dataset_loss(model, ds, indices);
      *w = saved - h;
      const double down = dataset_loss(model, ds, indices);
      *w = saved;
      const double numeric = (up - down) / (2 * h);
      const double rel = std::abs(numeric - *g) / std::max(std::abs(numeric), std::abs(*g));
      CHECK_MESSAGE(rel < 1e-3, "analytic " << *g << " numeric " << numeric);
      ++checked;
    }
  }
}

TEST_CASE("planted model: designated-unit dominance at the concept layer") {
  const auto& p = planted();
  const int layer = p.spec.concept_layer();
  const auto records = capture_all(p.model, p.dataset);
  for (std::size_t i = 0; i < p.dataset.size(); ++i) {
    const ConceptId c = p.dataset.item_labels[i];
    const Eigen::VectorXf& z = records[i].mlp_pre[static_cast<std::size_t>(layer)];
    std::vector<bool> own(static_cast<std::size_t>(z.size()), false);
    for (const auto& u : p.spec.designated_units[static_cast<std::size_t>(c)]) own[static_cast<std::size_t>(u.unit)] = true;
    float lowest_own = std::numeric_limits<float>::infinity();
    float highest_other = -std::numeric_limits<float>::infinity();
    for (Eigen::Index j = 0; j < z.size(); ++j) {
      if (own[static_cast<std::size_t>(j)])
        lowest_own = std::min(lowest_own, z[j]);
      else
        highest_other = std::max(highest_other, z[j]);
    }
    CHECK(lowest_own > highest_other);
  }
}

TEST_CASE("planted model: clean label argmax and steering") {
  const auto& p = planted();
  for (std::size_t i = 0; i < p.dataset.size(); ++i) {
    const ConceptId c = p.dataset.item_labels[i];
    const auto clean = forward(p.model, p.dataset.items[i], {}, false);
    CHECK(argmax(label_logits(p.topology, clean.final_logits)) == c);
    const auto again = forward(p.model, p.dataset.items[i], {}, false);
    CHECK(bit_equal(clean.final_logits, again.final_logits));
  }
  // Concept-0 items: boost concept 3's designated units, suppress concept 0's.
  for (std::size_t i = 0; i < p.dataset.size(); ++i) {
    if (p.dataset.item_labels[i] != 0) continue;
    std::vector<UnitOverride> overrides;
    for (const auto& u : p.spec.designated_units[3]) overrides.push_back({u.layer, u.unit, 6.0});
    for (const auto& u : p.spec.designated_units[0]) overrides.push_back({u.layer, u.unit, -6.0});
    const auto steered = forward(p.model, p.dataset.items[i], overrides, false);
    CHECK(argmax(label_logits(p.topology, steered.final_logits)) == 3);
  }
}

TEST_CASE("planted spec validation") {
  const auto topo = synthetic_topology(5);
  auto spec = default_planted_spec(topo);
  auto overlapping = spec;
  overlapping.designated_units[1].push_back(overlapping.designated_units[0][0]);
  CHECK_THROWS_AS(build_planted_model(overlapping, topo), Error);
  auto bad_layer = spec;
  for (auto& units : bad_layer.designated_units)
    for (auto& u : units) u.layer = topo.n_layers;
  CHECK_THROWS_AS(build_planted_model(bad_layer, topo), Error);
  auto skew = spec;
  skew.concept_directions(0, 0) += 0.1;
  CHECK_THROWS_AS(build_planted_model(skew, topo), Error);
  CHECK_THROWS_AS(default_planted_spec(synthetic_topology(5, 4, 16, 128, 64)), Error);
}

TEST_CASE("training: zero steps, determinism, checkpoint round-trip") {
  const auto topo = synthetic_topology(5);
  const auto ds = generate_synthetic_dataset(5, 12, 16, 3, 7);
  TrainConfig config;
  config.steps = 0;
  const auto zero = train_toy_model(ds, topo, config);
  const auto init = init_toy_model(topo, 16, config.seed);
  CHECK(encode_checkpoint(zero.model) == encode_checkpoint(init));

  config.steps = 5;
  const auto a = train_toy_model(ds, topo, config);
  const auto b = train_toy_model(ds, topo, config);
  CHECK(encode_checkpoint(a.model) == encode_checkpoint(b.model));
  CHECK(a.loss_history.size() == 5);
  CHECK(!(encode_checkpoint(a.model) == encode_checkpoint(init)));

  const auto dir = testing::scratch_dir("checkpoint");
  save_checkpoint(a.model, dir / "m.ckpt");
  const auto loaded = load_checkpoint(dir / "m.ckpt");
  CHECK(loaded.topology == topo);
  CHECK(loaded.provenance == Provenance::trained);
  for (const auto& item : ds.items)
    CHECK(bit_equal(forward(loaded, item).final_logits, forward(a.model, item).final_logits));

  std::string bytes = encode_checkpoint(a.model);
  bytes.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(bytes), Error);
}

TEST_CASE("training reaches high accuracy with the default budget") {
  const auto& result = clens::testing::trained().result;
  MESSAGE("train accuracy " << result.train_accuracy << " loss " << result.final_loss);
  CHECK(result.train_accuracy >= 0.95);
}
