#pragma once

#include <Eigen/Core>

#include <string>
#include <utility>
#include <vector>

namespace clens {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

// Standalone SVG documents. `provenance` is embedded verbatim in a leading
// XML comment; it must not contain "--".

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series, const std::string& provenance);

/// Grouped bars: one group per category, one bar per series.
std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<std::string>& series_names, const Eigen::MatrixXd& values,
                          const std::string& provenance);

/// One dot per row of `points` (N x 2), coloured by group.
std::string svg_scatter(const std::string& title, const Eigen::MatrixXd& points, const std::vector<int>& groups,
                        const std::vector<std::string>& group_names, const std::string& provenance);

/// Cells are shaded on [0, max]; NaN cells are left blank.
std::string svg_heatmap(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& column_labels, const Eigen::MatrixXd& values,
                        const std::string& provenance);

}  // namespace clens
