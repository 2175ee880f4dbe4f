#pragma once

#include "conceptlens/core.hpp"
#include "conceptlens/error.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace clens {

/// Expected average precision of `scores` against `positive` under descending
/// order, with every exact tie block averaged over uniform random orderings
/// (closed form). Both arguments are any Eigen vector expressions; the mask
/// is read as bool.
template <typename DerivedS, typename DerivedM>
double average_precision(const Eigen::DenseBase<DerivedS>& scores, const Eigen::DenseBase<DerivedM>& positive) {
  const Eigen::Index n = scores.size();
  if (positive.size() != n) throw Error(ErrorCode::length_mismatch, "scores and mask differ in length");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::vector<double> s(static_cast<std::size_t>(n));
  Eigen::Index n_pos = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    s[static_cast<std::size_t>(i)] = static_cast<double>(scores.derived().coeff(i));
    if (!std::isfinite(s[static_cast<std::size_t>(i)])) throw Error(ErrorCode::non_finite, "score is not finite");
    if (static_cast<bool>(positive.derived().coeff(i))) ++n_pos;
  }
  if (n_pos == 0 || n_pos == n)
    throw Error(ErrorCode::invalid_argument, "average precision needs at least one positive and one negative");
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return s[static_cast<std::size_t>(a)] > s[static_cast<std::size_t>(b)];
  });

  double total = 0.0;
  double above = 0.0;      // items ranked before the current block
  double pos_above = 0.0;  // positives among them
  for (std::size_t begin = 0; begin < order.size();) {
    std::size_t end = begin + 1;
    while (end < order.size() && s[static_cast<std::size_t>(order[end])] == s[static_cast<std::size_t>(order[begin])]) ++end;
    double block = static_cast<double>(end - begin);
    double block_pos = 0.0;
    for (std::size_t r = begin; r < end; ++r) block_pos += static_cast<bool>(positive.derived().coeff(order[r])) ? 1.0 : 0.0;
    if (block_pos > 0.0) {
      if (end - begin == 1) {
        total += (pos_above + 1.0) / (above + 1.0);
      } else {
        // A positive lands at block slot r with probability p/n; the other
        // p - 1 positives fill the r - 1 slots before it at rate (p-1)/(n-1).
        for (double r = 1.0; r <= block; r += 1.0)
          total += (block_pos / block) * (pos_above + 1.0 + (r - 1.0) * (block_pos - 1.0) / (block - 1.0)) / (above + r);
      }
    }
    above += block;
    pos_above += block_pos;
    begin = end;
  }
  return total / static_cast<double>(n_pos);
}

struct RankedUnit {
  int layer = 0;
  int unit = 0;
  double ap = 0.0;

  UnitCoord coordinate() const { return {layer, unit}; }
  bool operator==(const RankedUnit&) const = default;
};

/// Per-layer N x m final-token MLP pre-activations.
struct UnitResponseMatrix {
  std::vector<Eigen::MatrixXd> layers;

  int n_layers() const { return static_cast<int>(layers.size()); }
  int mlp_width() const { return layers.empty() ? 0 : static_cast<int>(layers.front().cols()); }
  Eigen::Index n_items() const { return layers.empty() ? 0 : layers.front().rows(); }
};

UnitResponseMatrix unit_responses(const std::vector<ActivationRecord>& records);

/// All units of the model ordered by AP descending, then layer, then unit.
struct UnitRanking {
  ConceptId concept_id = 0;
  int n_layers = 0;
  int mlp_width = 0;
  std::vector<RankedUnit> units;
};

UnitRanking rank_units(const UnitResponseMatrix& responses, const LabeledDataset& dataset, ConceptId concept_id);

enum class SelectionScope { whole_model, single_layer };

struct KSpec {
  enum class Kind { count, fraction };
  Kind kind = Kind::count;
  int count = 0;
  double fraction = 0.0;

  static KSpec of_count(int k) { return {Kind::count, k, 0.0}; }
  static KSpec of_fraction(double f) { return {Kind::fraction, 0, f}; }
  /// Floor of fraction x pool, at least 1; counts pass through. Throws when
  /// the result exceeds the pool.
  int resolve(int pool) const;
};

struct SelectionRule {
  SelectionScope scope = SelectionScope::whole_model;
  int layer = 0;  // single_layer only
  KSpec k;
};

/// Named presets: fig4 (top 1000 in the model), fig6 (top 10%), intervention
/// (top 30%).
SelectionRule selection_preset(const std::string& name);

struct ConceptUnitSet {
  ConceptId concept_id = 0;
  SelectionScope scope = SelectionScope::whole_model;
  int layer = -1;
  std::vector<RankedUnit> units;

  int k() const { return static_cast<int>(units.size()); }
  bool contains(UnitCoord c) const;
};

ConceptUnitSet select_top(const UnitRanking& ranking, const SelectionRule& rule);

std::vector<int> layer_histogram(const ConceptUnitSet& set, int n_layers);

struct OverlapOptions {
  int mc_draws = 10000;
  std::uint64_t seed = 0;
};

struct OverlapPair {
  ConceptId a = 0;
  ConceptId b = 0;
  int intersection = 0;
  int union_size = 0;
  double jaccard = 0.0;
  double expected = 0.0;     // analytic approximation
  double expected_mc = 0.0;  // Monte Carlo estimate
  double ratio = 0.0;        // jaccard / expected
  double ratio_mc = 0.0;
};

struct OverlapReport {
  int universe = 0;
  int k = 0;
  int mc_draws = 0;
  std::uint64_t seed = 0;
  double expected = 0.0;
  double expected_mc = 0.0;
  std::vector<OverlapPair> pairs;  // a < b, ascending

  const OverlapPair& pair(ConceptId a, ConceptId b) const;
};

/// (k^2/U) / (2k - k^2/U).
double expected_jaccard(int k, int universe);
double expected_jaccard_mc(int k, int universe, int draws, std::uint64_t seed);

/// Pairwise Jaccard overlap of equal-size unit sets drawn from a universe of
/// `universe` units, normalized by the chance expectation.
OverlapReport overlap_report(const std::map<ConceptId, ConceptUnitSet>& sets, int universe,
                             const OverlapOptions& options = {});

std::string scope_name(SelectionScope scope);

std::string unit_set_csv(const ConceptUnitSet& set);
nlohmann::json unit_set_json(const ConceptUnitSet& set);
std::string histogram_csv(const std::map<ConceptId, std::vector<int>>& histograms,
                          const std::vector<std::string>& concept_names);
std::string overlap_csv(const OverlapReport& report, const std::vector<std::string>& concept_names);
nlohmann::json overlap_json(const OverlapReport& report, const std::vector<std::string>& concept_names);

}  // namespace clens
