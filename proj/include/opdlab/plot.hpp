#pragma once

// Standalone three-panel SVG (reward, response length, gradient norm vs step).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "opdlab/runner.hpp"

namespace opdlab::plot {

struct Series {
  std::string label;
  std::vector<runner::MetricsRecord> records;
};

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

struct Panel {
  const char* metric;
  const char* title;
  double (*get)(const runner::MetricsRecord&);
};

inline const std::vector<Panel>& panels() {
  static const std::vector<Panel> p = {
      {"mean_reward", "Training reward", [](const runner::MetricsRecord& r) { return r.mean_reward; }},
      {"mean_response_length", "Response length", [](const runner::MetricsRecord& r) { return r.mean_response_length; }},
      {"grad_norm", "Gradient norm", [](const runner::MetricsRecord& r) { return r.grad_norm; }},
  };
  return p;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// Round-trip precision for the machine-readable data-* attributes.
inline std::string fmt_exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
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

// Finite min/max over all series for one metric; a flat range is widened by ±0.5.
inline Range value_range(const std::vector<Series>& series, double (*get)(const runner::MetricsRecord&)) {
  Range r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& s : series)
    for (const auto& rec : s.records) {
      const double v = get(rec);
      if (!std::isfinite(v)) continue;
      r.lo = std::min(r.lo, v);
      r.hi = std::max(r.hi, v);
    }
  if (!std::isfinite(r.lo)) return {0.0, 1.0};
  if (r.hi == r.lo) return {r.lo - 0.5, r.hi + 0.5};
  return r;
}

inline Range step_range(const std::vector<Series>& series) {
  return value_range(series, [](const runner::MetricsRecord& r) { return static_cast<double>(r.step); });
}

inline std::string render_svg(const std::vector<Series>& series) {
  if (series.empty()) throw std::invalid_argument("plot: no series");
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  const double pw = 320, ph = 220, ml = 60, mt = 40, gap = 40;
  const double width = ml + 3 * (pw + gap), height = mt + ph + 60 + 18.0 * static_cast<double>(series.size());
  const auto xr = step_range(series);
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width) << "\" height=\"" << fmt(height)
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  for (std::size_t k = 0; k < panels().size(); ++k) {
    const auto& panel = panels()[k];
    const auto yr = value_range(series, panel.get);
    const double x0 = ml + static_cast<double>(k) * (pw + gap), y0 = mt;
    os << "<g class=\"panel\" data-metric=\"" << panel.metric << "\" data-xmin=\"" << fmt_exact(xr.lo)
       << "\" data-xmax=\"" << fmt_exact(xr.hi) << "\" data-ymin=\"" << fmt_exact(yr.lo) << "\" data-ymax=\""
       << fmt_exact(yr.hi) << "\">\n";
    os << "<text x=\"" << fmt(x0 + pw / 2) << "\" y=\"" << fmt(y0 - 12) << "\" text-anchor=\"middle\" font-size=\"13\">"
       << panel.title << "</text>\n";
    os << "<rect x=\"" << fmt(x0) << "\" y=\"" << fmt(y0) << "\" width=\"" << fmt(pw) << "\" height=\"" << fmt(ph)
       << "\" fill=\"none\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << fmt(x0 - 4) << "\" y=\"" << fmt(y0 + 4) << "\" text-anchor=\"end\">" << fmt(yr.hi) << "</text>\n";
    os << "<text x=\"" << fmt(x0 - 4) << "\" y=\"" << fmt(y0 + ph) << "\" text-anchor=\"end\">" << fmt(yr.lo)
       << "</text>\n";
    os << "<text x=\"" << fmt(x0) << "\" y=\"" << fmt(y0 + ph + 14) << "\">" << fmt(xr.lo) << "</text>\n";
    os << "<text x=\"" << fmt(x0 + pw) << "\" y=\"" << fmt(y0 + ph + 14) << "\" text-anchor=\"end\">" << fmt(xr.hi)
       << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
      os << "<polyline class=\"series\" data-label=\"" << escape(series[s].label) << "\" fill=\"none\" stroke=\""
         << colors[s % 8] << "\" stroke-width=\"1.2\" points=\"";
      bool first = true;
      for (const auto& rec : series[s].records) {
        const double v = panel.get(rec);
        if (!std::isfinite(v)) continue;
        const double px = x0 + pw * (static_cast<double>(rec.step) - xr.lo) / (xr.hi - xr.lo);
        const double py = y0 + ph - ph * (v - yr.lo) / (yr.hi - yr.lo);
        os << (first ? "" : " ") << fmt(px) << "," << fmt(py);
        first = false;
      }
      os << "\"/>\n";
    }
    os << "</g>\n";
  }
  os << "<g class=\"legend\">\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double y = mt + ph + 40 + 18.0 * static_cast<double>(s);
    os << "<line x1=\"" << fmt(ml) << "\" y1=\"" << fmt(y - 4) << "\" x2=\"" << fmt(ml + 24) << "\" y2=\"" << fmt(y - 4)
       << "\" stroke=\"" << colors[s % 8] << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << fmt(ml + 30) << "\" y=\"" << fmt(y) << "\">" << escape(series[s].label) << "</text>\n";
  }
  os << "</g>\n</svg>\n";
  return os.str();
}

}  // namespace opdlab::plot
