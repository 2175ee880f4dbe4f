#include "conceptlens/svg.hpp"

#include "conceptlens/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>

namespace clens {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 50;

constexpr std::array<const char*, 8> kPalette = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                                 "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& text) {
  std::string out;
  for (char ch : text) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string header(const std::string& title, const std::string& provenance) {
  if (provenance.find("--") != std::string::npos)
    throw Error(ErrorCode::invalid_argument, "svg provenance must not contain \"--\"");
  std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<!-- " + provenance + " -->\n";
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) + "\" height=\"" + num(kHeight) +
         "\" viewBox=\"0 0 " + num(kWidth) + " " + num(kHeight) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + num(kWidth / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) +
         "</text>\n";
  return out;
}

std::string text(double x, double y, const std::string& s, const char* anchor = "middle") {
  return "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" text-anchor=\"" + anchor + "\">" + escape(s) + "</text>\n";
}

std::string legend(const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = kTop + 14.0 * static_cast<double>(i);
    out += "<rect x=\"" + num(kWidth - kRight + 12) + "\" y=\"" + num(y) + "\" width=\"10\" height=\"10\" fill=\"" +
           kPalette[i % kPalette.size()] + "\"/>\n";
    out += text(kWidth - kRight + 28, y + 9, names[i], "start");
  }
  return out;
}

// Axis frame with tick labels at the ends of each range.
std::string axes(double x0, double x1, double y0, double y1, const std::string& x_label, const std::string& y_label) {
  const double bottom = kHeight - kBottom, right = kWidth - kRight;
  std::string out = "<path d=\"M" + num(kLeft) + " " + num(kTop) + " V" + num(bottom) + " H" + num(right) +
                    "\" fill=\"none\" stroke=\"black\"/>\n";
  out += text(kLeft, bottom + 14, num(x0));
  out += text(right, bottom + 14, num(x1));
  out += text(kLeft - 6, bottom + 4, num(y0), "end");
  out += text(kLeft - 6, kTop + 4, num(y1), "end");
  out += text((kLeft + right) / 2, kHeight - 12, x_label);
  out += "<text x=\"16\" y=\"" + num((kTop + bottom) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         num((kTop + bottom) / 2) + ")\">" + escape(y_label) + "</text>\n";
  return out;
}

std::pair<double, double> padded(double lo, double hi) {
  if (!(hi > lo)) return {lo - 0.5, lo + 0.5};
  return {lo, hi};
}

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series, const std::string& provenance) {
  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo, y_lo = x_lo, y_hi = -x_lo;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      x_lo = std::min(x_lo, x);
      x_hi = std::max(x_hi, x);
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
    }
  if (!std::isfinite(x_lo)) x_lo = x_hi = y_lo = y_hi = 0.0;
  std::tie(x_lo, x_hi) = padded(x_lo, x_hi);
  std::tie(y_lo, y_hi) = padded(std::min(y_lo, 0.0), y_hi);

  const double w = kWidth - kLeft - kRight, h = kHeight - kTop - kBottom;
  const auto px = [&](double x) { return kLeft + (x - x_lo) / (x_hi - x_lo) * w; };
  const auto py = [&](double y) { return kTop + h - (y - y_lo) / (y_hi - y_lo) * h; };

  std::string out = header(title, provenance) + axes(x_lo, x_hi, y_lo, y_hi, x_label, y_label);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < series.size(); ++i) {
    names.push_back(series[i].name);
    const char* colour = kPalette[i % kPalette.size()];
    std::string path;
    for (const auto& [x, y] : series[i].points) {
      path += (path.empty() ? "M" : " L") + num(px(x)) + " " + num(py(y));
      out += "<circle cx=\"" + num(px(x)) + "\" cy=\"" + num(py(y)) + "\" r=\"2.5\" fill=\"" + colour + "\"/>\n";
    }
    if (!path.empty()) out += "<path d=\"" + path + "\" fill=\"none\" stroke=\"" + colour + "\"/>\n";
  }
  return out + legend(names) + "</svg>\n";
}

std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<std::string>& series_names, const Eigen::MatrixXd& values,
                          const std::string& provenance) {
  if (values.rows() != static_cast<Eigen::Index>(categories.size()) ||
      values.cols() != static_cast<Eigen::Index>(series_names.size()))
    throw Error(ErrorCode::length_mismatch, "bar chart values do not match its labels");
  const double y_hi = values.size() > 0 && values.maxCoeff() > 0 ? values.maxCoeff() : 1.0;
  const double w = kWidth - kLeft - kRight, h = kHeight - kTop - kBottom;
  const double group = categories.empty() ? w : w / static_cast<double>(categories.size());
  const double bar = series_names.empty() ? 0.0 : group * 0.8 / static_cast<double>(series_names.size());

  std::string out = header(title, provenance);
  out += "<path d=\"M" + num(kLeft) + " " + num(kTop) + " V" + num(kTop + h) + " H" + num(kLeft + w) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
  out += text(kLeft - 6, kTop + h + 4, "0", "end");
  out += text(kLeft - 6, kTop + 4, num(y_hi), "end");
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    const double gx = kLeft + group * static_cast<double>(r) + group * 0.1;
    out += text(kLeft + group * (static_cast<double>(r) + 0.5), kTop + h + 14, categories[static_cast<std::size_t>(r)]);
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      const double bh = std::max(0.0, values(r, c)) / y_hi * h;
      out += "<rect x=\"" + num(gx + bar * static_cast<double>(c)) + "\" y=\"" + num(kTop + h - bh) + "\" width=\"" +
             num(bar) + "\" height=\"" + num(bh) + "\" fill=\"" + kPalette[static_cast<std::size_t>(c) % kPalette.size()] +
             "\"/>\n";
    }
  }
  return out + legend(series_names) + "</svg>\n";
}

std::string svg_scatter(const std::string& title, const Eigen::MatrixXd& points, const std::vector<int>& groups,
                        const std::vector<std::string>& group_names, const std::string& provenance) {
  if (points.cols() != 2 || points.rows() != static_cast<Eigen::Index>(groups.size()))
    throw Error(ErrorCode::length_mismatch, "scatter needs N x 2 points and one group per point");
  const auto [x_lo, x_hi] = points.rows() ? padded(points.col(0).minCoeff(), points.col(0).maxCoeff())
                                          : std::pair<double, double>{-0.5, 0.5};
  const auto [y_lo, y_hi] = points.rows() ? padded(points.col(1).minCoeff(), points.col(1).maxCoeff())
                                          : std::pair<double, double>{-0.5, 0.5};
  const double w = kWidth - kLeft - kRight, h = kHeight - kTop - kBottom;
  std::string out = header(title, provenance) + axes(x_lo, x_hi, y_lo, y_hi, "component 1", "component 2");
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const double px = kLeft + (points(i, 0) - x_lo) / (x_hi - x_lo) * w;
    const double py = kTop + h - (points(i, 1) - y_lo) / (y_hi - y_lo) * h;
    const auto g = static_cast<std::size_t>(groups[static_cast<std::size_t>(i)]);
    out += "<circle cx=\"" + num(px) + "\" cy=\"" + num(py) + "\" r=\"3\" fill=\"" + kPalette[g % kPalette.size()] +
           "\" fill-opacity=\"0.8\"/>\n";
  }
  return out + legend(group_names) + "</svg>\n";
}

std::string svg_heatmap(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& column_labels, const Eigen::MatrixXd& values,
                        const std::string& provenance) {
  if (values.rows() != static_cast<Eigen::Index>(row_labels.size()) ||
      values.cols() != static_cast<Eigen::Index>(column_labels.size()))
    throw Error(ErrorCode::length_mismatch, "heatmap values do not match its labels");
  double hi = 0.0;
  for (Eigen::Index i = 0; i < values.size(); ++i)
    if (std::isfinite(values.data()[i])) hi = std::max(hi, values.data()[i]);
  if (hi <= 0.0) hi = 1.0;

  const double left = 150, top = 50;
  const double size = std::min((kWidth - left - 30) / std::max<double>(1, static_cast<double>(values.cols())),
                               (kHeight - top - 30) / std::max<double>(1, static_cast<double>(values.rows())));
  std::string out = header(title, provenance);
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    const double y = top + size * static_cast<double>(r);
    out += text(left - 6, y + size / 2 + 4, row_labels[static_cast<std::size_t>(r)], "end");
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      const double x = left + size * static_cast<double>(c);
      const double v = values(r, c);
      if (!std::isfinite(v)) continue;
      const int shade = 255 - static_cast<int>(std::lround(std::clamp(v / hi, 0.0, 1.0) * 200.0));
      char fill[16];
      std::snprintf(fill, sizeof fill, "#%02x%02xff", shade, shade);
      out += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(size) + "\" height=\"" + num(size) +
             "\" fill=\"" + fill + "\" stroke=\"white\"/>\n";
      out += text(x + size / 2, y + size / 2 + 4, num(v));
    }
  }
  for (Eigen::Index c = 0; c < values.cols(); ++c)
    out += text(left + size * (static_cast<double>(c) + 0.5), top - 6, column_labels[static_cast<std::size_t>(c)]);
  return out + "</svg>\n";
}

}  // namespace clens
