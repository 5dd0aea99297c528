#include "conceptflow/report.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "conceptflow/errors.hpp"

namespace conceptflow {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Svg {
  std::ostringstream body;
  double width, height;

  Svg(double w, double h) : width(w), height(h) {}

  void text(double x, double y, const std::string& s, const std::string& extra = "") {
    body << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\"" << extra << ">" << escape(s) << "</text>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& extra) {
    body << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2) << "\" y2=\"" << num(y2)
         << "\"" << extra << "/>\n";
  }
  std::string str() const {
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
        << "\" viewBox=\"0 0 " << num(width) << " " << num(height) << "\" font-family=\"sans-serif\" font-size=\"10\">\n"
        << "<rect x=\"0\" y=\"0\" width=\"" << num(width) << "\" height=\"" << num(height) << "\" fill=\"#ffffff\"/>\n"
        << body.str() << "</svg>\n";
    return out.str();
  }
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

}  // namespace

std::string render_heatmap(const Matrix& m, const ConceptSet& set, const std::string& title) {
  const Index n = static_cast<Index>(set.size());
  if (m.rows() != n || m.cols() != n)
    throw DimensionError("render_heatmap: matrix is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                         " but the concept set has " + std::to_string(n) + " concepts");
  const double cell = 14, left = 150, top = 40;
  Svg svg(left + n * cell + 20, top + n * cell + 150);
  if (!title.empty()) svg.text(left, 20, title, " font-size=\"13\"");
  const double peak = m.size() ? m.maxCoeff() : 0.0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const double v = peak > 0 ? std::clamp(m(i, j) / peak, 0.0, 1.0) : 0.0;
      svg.body << "<rect class=\"cell\" x=\"" << num(left + j * cell) << "\" y=\"" << num(top + i * cell)
               << "\" width=\"" << num(cell) << "\" height=\"" << num(cell) << "\" fill=\"#08306b\" fill-opacity=\""
               << num(v) << "\" stroke=\"#eeeeee\" stroke-width=\"0.5\"/>\n";
    }
    svg.text(left - 4, top + i * cell + cell * 0.75, set.name(static_cast<int>(i)), " text-anchor=\"end\"");
    const double x = left + i * cell + cell * 0.75, y = top + n * cell + 4;
    svg.text(x, y, set.name(static_cast<int>(i)),
             " text-anchor=\"end\" transform=\"rotate(-90 " + num(x) + " " + num(y) + ")\"");
  }
  for (Index i = 1; i < n; ++i) {
    if (set.level(static_cast<int>(i)) == set.level(static_cast<int>(i - 1))) continue;
    const double p = i * cell;
    const std::string dash = " class=\"level-sep\" stroke=\"#d62728\" stroke-dasharray=\"4 3\" stroke-width=\"1\"";
    svg.line(left + p, top, left + p, top + n * cell, dash);
    svg.line(left, top + p, left + n * cell, top + p, dash);
  }
  return svg.str();
}

std::string render_attention_bars(const Vector& a, const ConceptSet& set, int top_n, const std::string& title) {
  const Index n = static_cast<Index>(set.size());
  if (a.size() != n) throw DimensionError("render_attention_bars: vector does not match the concept set");
  if (top_n < 1 || top_n > n) throw ValidationError("render_attention_bars: top_n must lie in [1, n_c]");
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int x, int y) { return a[x] > a[y]; });
  ids.resize(static_cast<std::size_t>(top_n));
  const double left = 160, top = 30, bar = 16, gap = 4, span = 300;
  Svg svg(left + span + 70, top + top_n * (bar + gap) + 10);
  if (!title.empty()) svg.text(10, 18, title, " font-size=\"13\"");
  const double peak = std::max(a.maxCoeff(), 1e-300);
  for (int r = 0; r < top_n; ++r) {
    const int id = ids[static_cast<std::size_t>(r)];
    const double y = top + r * (bar + gap);
    svg.body << "<rect class=\"bar\" data-concept=\"" << id << "\" x=\"" << num(left) << "\" y=\"" << num(y)
             << "\" width=\"" << num(span * std::max(0.0, a[id]) / peak) << "\" height=\"" << num(bar)
             << "\" fill=\"#1f77b4\"/>\n";
    svg.text(left - 4, y + bar * 0.75, set.name(id), " text-anchor=\"end\"");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", a[id]);
    svg.text(left + span * std::max(0.0, a[id]) / peak + 4, y + bar * 0.75, buf);
  }
  return svg.str();
}

std::string render_prune_curves(std::span<const PruneCurve> curves, const std::string& title) {
  const double left = 50, top = 30, w = 360, h = 240;
  Svg svg(left + w + 150, top + h + 50);
  if (!title.empty()) svg.text(left, 18, title, " font-size=\"13\"");
  const std::string axis = " stroke=\"#000000\" stroke-width=\"1\"";
  svg.line(left, top + h, left + w, top + h, axis);
  svg.line(left, top, left, top + h, axis);
  for (int t = 0; t <= 5; ++t) {
    const double f = t / 5.0;
    svg.text(left + f * w, top + h + 14, num(f), " text-anchor=\"middle\"");
    svg.text(left - 4, top + h - f * h + 3, num(f), " text-anchor=\"end\"");
  }
  svg.text(left + w / 2, top + h + 32, "pruning ratio", " text-anchor=\"middle\"");
  svg.text(12, top + h / 2, "accuracy", " text-anchor=\"middle\" transform=\"rotate(-90 12 " + num(top + h / 2) + ")\"");
  for (std::size_t c = 0; c < curves.size(); ++c) {
    std::vector<CurvePoint> pts = curves[c].points;
    std::stable_sort(pts.begin(), pts.end(), [](const CurvePoint& a, const CurvePoint& b) { return a.ratio < b.ratio; });
    const char* color = kPalette[c % std::size(kPalette)];
    svg.body << "<polyline class=\"curve\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i)
      svg.body << (i ? " " : "") << num(left + pts[i].ratio * w) << "," << num(top + h - pts[i].accuracy * h);
    svg.body << "\"/>\n";
    for (const auto& p : pts)
      svg.body << "<circle cx=\"" << num(left + p.ratio * w) << "\" cy=\"" << num(top + h - p.accuracy * h)
               << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    svg.body << "<rect x=\"" << num(left + w + 12) << "\" y=\"" << num(top + 12.0 * static_cast<double>(c) * 1.5)
             << "\" width=\"10\" height=\"10\" fill=\"" << color << "\"/>\n";
    svg.text(left + w + 26, top + 18.0 * static_cast<double>(c) + 9, to_string(curves[c].method));
  }
  return svg.str();
}

std::string render_grouped_bars(const std::vector<std::string>& categories, std::span<const Series> series,
                                const std::string& title) {
  for (const auto& s : series)
    if (s.values.size() != categories.size())
      throw DimensionError("render_grouped_bars: series '" + s.name + "' does not match the categories");
  double peak = 0;
  for (const auto& s : series)
    for (double v : s.values) peak = std::max(peak, v);
  if (peak <= 0) peak = 1;
  const double left = 50, top = 30, h = 220, bar = 14, group_gap = 16;
  const double group_w = bar * static_cast<double>(std::max<std::size_t>(series.size(), 1)) + group_gap;
  const double w = group_w * static_cast<double>(categories.size());
  Svg svg(left + w + 150, top + h + 60);
  if (!title.empty()) svg.text(left, 18, title, " font-size=\"13\"");
  svg.line(left, top + h, left + w, top + h, " stroke=\"#000000\" stroke-width=\"1\"");
  for (std::size_t g = 0; g < categories.size(); ++g) {
    const double gx = left + static_cast<double>(g) * group_w + group_gap / 2;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = std::max(0.0, series[s].values[g]);
      const double bh = h * v / peak;
      svg.body << "<rect class=\"bar\" x=\"" << num(gx + static_cast<double>(s) * bar) << "\" y=\"" << num(top + h - bh)
               << "\" width=\"" << num(bar - 1) << "\" height=\"" << num(bh) << "\" fill=\""
               << kPalette[s % std::size(kPalette)] << "\"/>\n";
    }
    svg.text(gx + group_w / 2 - group_gap / 2, top + h + 14, categories[g], " text-anchor=\"middle\"");
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    svg.body << "<rect x=\"" << num(left + w + 12) << "\" y=\"" << num(top + 18.0 * static_cast<double>(s))
             << "\" width=\"10\" height=\"10\" fill=\"" << kPalette[s % std::size(kPalette)] << "\"/>\n";
    svg.text(left + w + 26, top + 18.0 * static_cast<double>(s) + 9, series[s].name);
  }
  return svg.str();
}

}  // namespace conceptflow
