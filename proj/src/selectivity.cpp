#include "conceptlens/selectivity.hpp"

#include "conceptlens/text_format.hpp"

#include <cmath>
#include <random>
#include <set>

namespace clens {

UnitResponseMatrix unit_responses(const std::vector<ActivationRecord>& records) {
  if (records.empty()) throw Error(ErrorCode::empty_dataset, "no activation records");
  UnitResponseMatrix out;
  const int n_layers = static_cast<int>(records.front().mlp_pre.size());
  for (int l = 0; l < n_layers; ++l) out.layers.push_back(mlp_matrix(records, l));
  for (const auto& layer : out.layers)
    if (!layer.allFinite()) throw Error(ErrorCode::non_finite, "unit responses are not finite");
  return out;
}

UnitRanking rank_units(const UnitResponseMatrix& responses, const LabeledDataset& dataset, ConceptId concept_id) {
  if (concept_id < 0 || concept_id >= dataset.num_concepts())
    throw Error(ErrorCode::out_of_range, "concept " + std::to_string(concept_id) + " is not in the dataset");
  if (responses.n_items() != static_cast<Eigen::Index>(dataset.size()))
    throw Error(ErrorCode::length_mismatch, "unit responses and dataset differ in item count");
  Eigen::Array<bool, Eigen::Dynamic, 1> positive(static_cast<Eigen::Index>(dataset.size()));
  for (std::size_t i = 0; i < dataset.size(); ++i)
    positive[static_cast<Eigen::Index>(i)] = dataset.item_labels[i] == concept_id;

  UnitRanking ranking;
  ranking.concept_id = concept_id;
  ranking.n_layers = responses.n_layers();
  ranking.mlp_width = responses.mlp_width();
  ranking.units.reserve(static_cast<std::size_t>(ranking.n_layers) * static_cast<std::size_t>(ranking.mlp_width));
  for (int l = 0; l < ranking.n_layers; ++l) {
    const auto& layer = responses.layers[static_cast<std::size_t>(l)];
    for (int j = 0; j < layer.cols(); ++j) ranking.units.push_back({l, j, average_precision(layer.col(j), positive)});
  }
  std::sort(ranking.units.begin(), ranking.units.end(), [](const RankedUnit& a, const RankedUnit& b) {
    if (a.ap != b.ap) return a.ap > b.ap;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.unit < b.unit;
  });
  return ranking;
}

int KSpec::resolve(int pool) const {
  int k = 0;
  if (kind == Kind::count) {
    if (count < 0) throw Error(ErrorCode::invalid_argument, "unit count must be non-negative");
    k = count;
  } else {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorCode::invalid_argument, "unit fraction must be in (0, 1]");
    k = std::max(1, static_cast<int>(std::floor(fraction * static_cast<double>(pool))));
  }
  if (k > pool)
    throw Error(ErrorCode::out_of_range,
                "k = " + std::to_string(k) + " exceeds the pool of " + std::to_string(pool) + " units");
  return k;
}

SelectionRule selection_preset(const std::string& name) {
  if (name == "fig4") return {SelectionScope::whole_model, 0, KSpec::of_count(1000)};
  if (name == "fig6") return {SelectionScope::whole_model, 0, KSpec::of_fraction(0.10)};
  if (name == "intervention") return {SelectionScope::whole_model, 0, KSpec::of_fraction(0.30)};
  throw Error(ErrorCode::invalid_argument, "unknown selection preset '" + name + "'");
}

bool ConceptUnitSet::contains(UnitCoord c) const {
  return std::any_of(units.begin(), units.end(), [&](const RankedUnit& u) { return u.coordinate() == c; });
}

ConceptUnitSet select_top(const UnitRanking& ranking, const SelectionRule& rule) {
  ConceptUnitSet out;
  out.concept_id = ranking.concept_id;
  out.scope = rule.scope;
  if (rule.scope == SelectionScope::whole_model) {
    const int k = rule.k.resolve(static_cast<int>(ranking.units.size()));
    out.units.assign(ranking.units.begin(), ranking.units.begin() + k);
    return out;
  }
  if (rule.layer < 0 || rule.layer >= ranking.n_layers)
    throw Error(ErrorCode::out_of_range, "selection layer " + std::to_string(rule.layer) + " outside [0, " +
                                             std::to_string(ranking.n_layers) + ")");
  out.layer = rule.layer;
  const int k = rule.k.resolve(ranking.mlp_width);
  for (const auto& unit : ranking.units) {
    if (static_cast<int>(out.units.size()) == k) break;
    if (unit.layer == rule.layer) out.units.push_back(unit);
  }
  return out;
}

std::vector<int> layer_histogram(const ConceptUnitSet& set, int n_layers) {
  std::vector<int> counts(static_cast<std::size_t>(n_layers), 0);
  for (const auto& unit : set.units) {
    if (unit.layer < 0 || unit.layer >= n_layers)
      throw Error(ErrorCode::out_of_range, "unit layer " + std::to_string(unit.layer) + " outside the topology");
    ++counts[static_cast<std::size_t>(unit.layer)];
  }
  return counts;
}

double expected_jaccard(int k, int universe) {
  if (k < 1 || universe < k) throw Error(ErrorCode::invalid_argument, "expected Jaccard needs 1 <= k <= U");
  const double inter = static_cast<double>(k) * k / universe;
  return inter / (2.0 * k - inter);
}

double expected_jaccard_mc(int k, int universe, int draws, std::uint64_t seed) {
  if (k < 1 || universe < k) throw Error(ErrorCode::invalid_argument, "expected Jaccard needs 1 <= k <= U");
  if (draws < 1) throw Error(ErrorCode::invalid_argument, "Monte Carlo needs at least one draw");
  std::mt19937_64 rng(seed);
  std::vector<int> pool(static_cast<std::size_t>(universe));
  std::vector<char> in_first(static_cast<std::size_t>(universe));
  const auto draw = [&](auto&& visit) {
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < k; ++i) {
      std::uniform_int_distribution<int> pick(i, universe - 1);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
      visit(pool[static_cast<std::size_t>(i)]);
    }
  };
  double sum = 0.0;
  for (int d = 0; d < draws; ++d) {
    std::fill(in_first.begin(), in_first.end(), 0);
    draw([&](int u) { in_first[static_cast<std::size_t>(u)] = 1; });
    int inter = 0;
    draw([&](int u) { inter += in_first[static_cast<std::size_t>(u)]; });
    sum += static_cast<double>(inter) / static_cast<double>(2 * k - inter);
  }
  return sum / draws;
}

const OverlapPair& OverlapReport::pair(ConceptId a, ConceptId b) const {
  if (a > b) std::swap(a, b);
  for (const auto& p : pairs)
    if (p.a == a && p.b == b) return p;
  throw Error(ErrorCode::out_of_range, "no overlap entry for the requested pair");
}

OverlapReport overlap_report(const std::map<ConceptId, ConceptUnitSet>& sets, int universe,
                             const OverlapOptions& options) {
  if (sets.size() < 2) throw Error(ErrorCode::invalid_argument, "overlap needs at least two sets");
  OverlapReport report;
  report.universe = universe;
  report.k = sets.begin()->second.k();
  report.mc_draws = options.mc_draws;
  report.seed = options.seed;
  std::map<ConceptId, std::set<UnitCoord>> members;
  for (const auto& [concept_id, set] : sets) {
    if (set.k() != report.k)
      throw Error(ErrorCode::invalid_argument, "overlap sets must share k; concept " + std::to_string(concept_id) +
                                                   " has " + std::to_string(set.k()) + ", expected " +
                                                   std::to_string(report.k));
    auto& m = members[concept_id];
    for (const auto& u : set.units) m.insert(u.coordinate());
    if (static_cast<int>(m.size()) != set.k())
      throw Error(ErrorCode::invalid_argument, "unit set for concept " + std::to_string(concept_id) + " repeats a unit");
  }
  report.expected = expected_jaccard(report.k, universe);
  report.expected_mc = expected_jaccard_mc(report.k, universe, options.mc_draws, options.seed);
  for (auto a = members.begin(); a != members.end(); ++a) {
    for (auto b = std::next(a); b != members.end(); ++b) {
      OverlapPair p;
      p.a = a->first;
      p.b = b->first;
      for (const auto& u : a->second) p.intersection += static_cast<int>(b->second.count(u));
      p.union_size = 2 * report.k - p.intersection;
      p.jaccard = static_cast<double>(p.intersection) / static_cast<double>(p.union_size);
      p.expected = report.expected;
      p.expected_mc = report.expected_mc;
      p.ratio = p.jaccard / p.expected;
      p.ratio_mc = p.expected_mc > 0.0 ? p.jaccard / p.expected_mc : 0.0;
      report.pairs.push_back(p);
    }
  }
  return report;
}

std::string scope_name(SelectionScope scope) {
  return scope == SelectionScope::whole_model ? "whole_model" : "single_layer";
}

std::string unit_set_csv(const ConceptUnitSet& set) {
  std::string out = "rank,layer,unit,ap\n";
  for (std::size_t r = 0; r < set.units.size(); ++r) {
    const auto& u = set.units[r];
    out += std::to_string(r + 1) + "," + std::to_string(u.layer) + "," + std::to_string(u.unit) + "," +
           format_double(u.ap) + "\n";
  }
  return out;
}

nlohmann::json unit_set_json(const ConceptUnitSet& set) {
  nlohmann::json units = nlohmann::json::array();
  for (const auto& u : set.units) units.push_back({{"layer", u.layer}, {"unit", u.unit}, {"ap", u.ap}});
  nlohmann::json doc = {{"concept", set.concept_id}, {"scope", scope_name(set.scope)}, {"k", set.k()}, {"units", units}};
  if (set.scope == SelectionScope::single_layer) doc["layer"] = set.layer;
  return doc;
}

std::string histogram_csv(const std::map<ConceptId, std::vector<int>>& histograms,
                          const std::vector<std::string>& concept_names) {
  std::string out = "concept,layer,count\n";
  for (const auto& [c, counts] : histograms)
    for (std::size_t l = 0; l < counts.size(); ++l)
      out += csv_field(concept_names.at(static_cast<std::size_t>(c))) + "," + std::to_string(l) + "," +
             std::to_string(counts[l]) + "\n";
  return out;
}

std::string overlap_csv(const OverlapReport& report, const std::vector<std::string>& concept_names) {
  std::string out = "concept_a,concept_b,intersection,jaccard,expected,expected_mc,ratio,ratio_mc\n";
  for (const auto& p : report.pairs)
    out += csv_field(concept_names.at(static_cast<std::size_t>(p.a))) + "," +
           csv_field(concept_names.at(static_cast<std::size_t>(p.b))) + "," + std::to_string(p.intersection) + "," +
           format_double(p.jaccard) + "," + format_double(p.expected) + "," + format_double(p.expected_mc) + "," +
           format_double(p.ratio) + "," + format_double(p.ratio_mc) + "\n";
  return out;
}

nlohmann::json overlap_json(const OverlapReport& report, const std::vector<std::string>& concept_names) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : report.pairs)
    pairs.push_back({{"a", concept_names.at(static_cast<std::size_t>(p.a))},
                     {"b", concept_names.at(static_cast<std::size_t>(p.b))},
                     {"intersection", p.intersection},
                     {"jaccard", p.jaccard},
                     {"ratio", p.ratio},
                     {"ratio_mc", p.ratio_mc}});
  return {{"universe", report.universe},
          {"k", report.k},
          {"expected", report.expected},
          {"expected_mc", report.expected_mc},
          {"mc_draws", report.mc_draws},
          {"seed", report.seed},
          {"pairs", pairs}};
}

}  // namespace clens
