// Copyright 2026 The cbmlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Static SVG line plots of intervention curves.

#include <algorithm>
#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "cbmlab/io.hpp"

namespace cbmlab {

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

namespace detail {

inline std::string svg_escape(const std::string& s) {
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

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace detail

/// Plot with x and y axes fixed to [0, 1].
inline std::string line_plot_svg(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                 const std::vector<PlotSeries>& series, const Provenance& prov) {
  constexpr double W = 640, H = 420, left = 60, right = 170, top = 40, bottom = 50;
  constexpr std::array<const char*, 8> colors = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                                 "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](double x) { return left + std::clamp(x, 0.0, 1.0) * pw; };
  auto py = [&](double y) { return top + (1.0 - std::clamp(y, 0.0, 1.0)) * ph; };

  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<!-- stage=" + prov.stage + " config_hash=" + prov.config_hash + " schema=" + std::to_string(kSchemaVersion) +
       " -->\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt(W) + "\" height=\"" + detail::fmt(H) +
       "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + detail::fmt(W / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" +
       detail::svg_escape(title) + "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    s += "<line x1=\"" + detail::fmt(px(0)) + "\" y1=\"" + detail::fmt(py(v)) + "\" x2=\"" + detail::fmt(px(1)) +
         "\" y2=\"" + detail::fmt(py(v)) + "\" stroke=\"#e0e0e0\"/>\n";
    s += "<text x=\"" + detail::fmt(px(0) - 6) + "\" y=\"" + detail::fmt(py(v) + 4) + "\" text-anchor=\"end\">" +
         detail::fmt(v) + "</text>\n";
    s += "<text x=\"" + detail::fmt(px(v)) + "\" y=\"" + detail::fmt(py(0) + 18) + "\" text-anchor=\"middle\">" +
         detail::fmt(v) + "</text>\n";
  }
  s += "<rect x=\"" + detail::fmt(left) + "\" y=\"" + detail::fmt(top) + "\" width=\"" + detail::fmt(pw) +
       "\" height=\"" + detail::fmt(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  s += "<text x=\"" + detail::fmt(left + pw / 2) + "\" y=\"" + detail::fmt(H - 10) + "\" text-anchor=\"middle\">" +
       detail::svg_escape(xlabel) + "</text>\n";
  s += "<text transform=\"translate(16," + detail::fmt(top + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
       detail::svg_escape(ylabel) + "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& sr = series[i];
    const char* color = colors[i % colors.size()];
    std::string pts;
    for (std::size_t j = 0; j < std::min(sr.x.size(), sr.y.size()); ++j) {
      if (j) pts += ' ';
      pts += detail::fmt(px(sr.x[j])) + "," + detail::fmt(py(sr.y[j]));
    }
    const bool reference = sr.name.rfind("bayes", 0) == 0;
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\"" +
         (reference ? " stroke-dasharray=\"6,4\"" : "") + " points=\"" + pts + "\"/>\n";
    const double ly = top + 14 + 18 * static_cast<double>(i);
    s += "<line x1=\"" + detail::fmt(W - right + 12) + "\" y1=\"" + detail::fmt(ly - 4) + "\" x2=\"" +
         detail::fmt(W - right + 36) + "\" y2=\"" + detail::fmt(ly - 4) + "\" stroke=\"" + color +
         "\" stroke-width=\"2\"" + (reference ? " stroke-dasharray=\"6,4\"" : "") + "/>\n";
    s += "<text x=\"" + detail::fmt(W - right + 42) + "\" y=\"" + detail::fmt(ly) + "\">" +
         detail::svg_escape(sr.name) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace cbmlab
