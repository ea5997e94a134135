#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "memloc/error.hpp"

namespace memloc {

/// Dense L x L grid read from a window-matrix CSV; cells[w-1][y-1].
struct HeatmapGrid {
  int n = 0;
  std::vector<std::vector<double>> cells;
};

/// Parses "w,y,mem_error,..." rows. Every (w, y) in 1..L must occur exactly
/// once; anything else is a ParseError carrying the 1-based line number.
inline HeatmapGrid parse_matrix_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::array<double, 3>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("w,", 0) == 0) continue;
    int w = 0, y = 0;
    double v = 0.0;
    int consumed = 0;
    if (std::sscanf(line.c_str(), "%d,%d,%lf%n", &w, &y, &v, &consumed) != 3)
      throw ParseError("matrix csv line " + std::to_string(line_no) + ": expected w,y,value", line_no);
    rows.push_back({static_cast<double>(w), static_cast<double>(y), v});
  }
  if (rows.empty()) throw ParseError("matrix csv has no cells", line_no);
  const auto n = static_cast<int>(std::lround(std::sqrt(static_cast<double>(rows.size()))));
  if (static_cast<std::size_t>(n) * static_cast<std::size_t>(n) != rows.size())
    throw ParseError("matrix csv is not square: " + std::to_string(rows.size()) + " cells", line_no);
  HeatmapGrid g;
  g.n = n;
  g.cells.assign(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), NAN));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int w = static_cast<int>(rows[i][0]), y = static_cast<int>(rows[i][1]);
    if (w < 1 || w > n || y < 1 || y > n)
      throw ParseError("matrix csv cell (" + std::to_string(w) + "," + std::to_string(y) + ") outside 1.." +
                           std::to_string(n), i + 2);
    auto& c = g.cells[static_cast<std::size_t>(w - 1)][static_cast<std::size_t>(y - 1)];
    if (!std::isnan(c))
      throw ParseError("matrix csv repeats cell (" + std::to_string(w) + "," + std::to_string(y) + ")", i + 2);
    c = rows[i][2];
  }
  return g;
}

inline constexpr int kHeatmapBins = 10;

/// Colour bin of a value in [0, 1]: 0 lightest, kHeatmapBins-1 darkest (1.0).
inline int heatmap_bin(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return std::min(kHeatmapBins - 1, static_cast<int>(c * kHeatmapBins));
}

/// Sequential white-to-navy palette, one entry per bin.
inline std::string heatmap_colour(int bin) {
  static const char* palette[kHeatmapBins] = {"#f7fbff", "#deebf7", "#c6dbef", "#9ecae1", "#6baed6",
                                              "#4292c6", "#2171b5", "#08519c", "#08306b", "#041c40"};
  return palette[std::clamp(bin, 0, kHeatmapBins - 1)];
}

inline std::string xml_escape(const std::string& s) {
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

/// Self-contained SVG: rows are window sizes (1 at the top), columns are
/// layers, each cell annotated with its value, plus a [0, 1] colour scale.
inline std::string heatmap_svg(const HeatmapGrid& g, const std::string& title = {}) {
  if (g.n < 1) throw ParseError("heatmap needs a non-empty grid", 0);
  const int cell = 44, left = 70, top = title.empty() ? 30 : 56, legend_gap = 30;
  const int width = left + g.n * cell + legend_gap + 60;
  const int height = top + g.n * cell + 50;
  std::string s;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\" "
                "font-family=\"sans-serif\" font-size=\"11\">\n",
                width, height, width, height);
  s += buf;
  s += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  if (!title.empty()) {
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"24\" font-size=\"14\">", left);
    s += buf;
    s += xml_escape(title) + "</text>\n";
  }
  for (int w = 1; w <= g.n; ++w)
    for (int y = 1; y <= g.n; ++y) {
      const double v = g.cells[static_cast<std::size_t>(w - 1)][static_cast<std::size_t>(y - 1)];
      const int bin = heatmap_bin(v);
      const int x0 = left + (y - 1) * cell, y0 = top + (w - 1) * cell;
      std::snprintf(buf, sizeof buf,
                    "<rect class=\"cell\" x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"%s\" "
                    "data-w=\"%d\" data-y=\"%d\" data-bin=\"%d\"/>\n",
                    x0, y0, cell, cell, heatmap_colour(bin).c_str(), w, y, bin);
      s += buf;
      std::snprintf(buf, sizeof buf,
                    "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\" fill=\"%s\">%.2f</text>\n", x0 + cell / 2,
                    y0 + cell / 2 + 4, bin >= 5 ? "#ffffff" : "#000000", v);
      s += buf;
    }
  for (int i = 1; i <= g.n; ++i) {
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%d</text>\n",
                  left + (i - 1) * cell + cell / 2, top + g.n * cell + 16, i);
    s += buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"end\">%d</text>\n", left - 8,
                  top + (i - 1) * cell + cell / 2 + 4, i);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">layer</text>\n",
                left + g.n * cell / 2, top + g.n * cell + 34);
  s += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"16\" y=\"%d\" text-anchor=\"middle\" transform=\"rotate(-90 16 %d)\">window size</text>\n",
                top + g.n * cell / 2, top + g.n * cell / 2);
  s += buf;
  const int lx = left + g.n * cell + legend_gap, lh = g.n * cell / kHeatmapBins;
  for (int b = 0; b < kHeatmapBins; ++b) {
    std::snprintf(buf, sizeof buf, "<rect class=\"legend\" x=\"%d\" y=\"%d\" width=\"14\" height=\"%d\" fill=\"%s\"/>\n",
                  lx, top + (kHeatmapBins - 1 - b) * lh, lh, heatmap_colour(b).c_str());
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\">1.0</text>\n<text x=\"%d\" y=\"%d\">0.0</text>\n", lx + 18,
                top + 10, lx + 18, top + kHeatmapBins * lh);
  s += buf;
  s += "</svg>\n";
  return s;
}

}  // namespace memloc
