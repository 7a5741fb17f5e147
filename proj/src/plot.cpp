#include "headmask/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "headmask/errors.hpp"

namespace headmask {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;

const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                               "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
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

}  // namespace

std::string render_svg(const Chart& chart) {
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  std::set<double> xs;
  for (const auto& s : chart.series) {
    if (s.x.size() != s.y.size()) throw UsageError("series '" + s.name + "' has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (first) {
        x0 = x1 = s.x[i];
        y0 = y1 = s.y[i];
        first = false;
      }
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
      xs.insert(s.x[i]);
    }
  }
  y0 = std::min(y0, 0.0);
  if (y1 <= y0) y1 = y0 + 1;
  if (x1 <= x0) x1 = x0 + 1;
  if (chart.bars) {
    // Half a slot of room on both sides.
    double step = x1 - x0;
    for (auto it = xs.begin(); it != xs.end() && std::next(it) != xs.end(); ++it) {
      step = std::min(step, *std::next(it) - *it);
    }
    x0 -= step / 2;
    x1 += step / 2;
  }
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + ph - (y - y0) / (y1 - y0) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
    << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << num(kWidth / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
    << escape(chart.title) << "</text>\n";
  // Axes and ticks.
  o << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(kTop + ph) << "\" x2=\"" << num(kLeft + pw)
    << "\" y2=\"" << num(kTop + ph) << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(kTop) << "\" x2=\"" << num(kLeft)
    << "\" y2=\"" << num(kTop + ph) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double yv = y0 + (y1 - y0) * i / 5, xv = x0 + (x1 - x0) * i / 5;
    o << "<text x=\"" << num(kLeft - 6) << "\" y=\"" << num(py(yv) + 4)
      << "\" text-anchor=\"end\">" << tick(yv) << "</text>\n";
    o << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(py(yv)) << "\" x2=\"" << num(kLeft + pw)
      << "\" y2=\"" << num(py(yv)) << "\" stroke=\"#e0e0e0\"/>\n";
    o << "<text x=\"" << num(px(xv)) << "\" y=\"" << num(kTop + ph + 16)
      << "\" text-anchor=\"middle\">" << tick(xv) << "</text>\n";
  }
  o << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"" << num(kHeight - 10)
    << "\" text-anchor=\"middle\">" << escape(chart.x_label) << "</text>\n";
  o << "<text transform=\"translate(16," << num(kTop + ph / 2)
    << ") rotate(-90)\" text-anchor=\"middle\">" << escape(chart.y_label) << "</text>\n";

  const std::size_t n = std::max<std::size_t>(chart.series.size(), 1);
  double slot = pw;
  if (chart.bars && xs.size() > 1) {
    for (auto it = xs.begin(); std::next(it) != xs.end(); ++it) {
      slot = std::min(slot, px(*std::next(it)) - px(*it));
    }
  } else if (chart.bars) {
    slot = pw / 2;
  }
  for (std::size_t k = 0; k < chart.series.size(); ++k) {
    const auto& s = chart.series[k];
    const char* color = kColors[k % std::size(kColors)];
    if (chart.bars) {
      const double w = 0.8 * slot / static_cast<double>(n);
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.y[i])) continue;
        const double left = px(s.x[i]) - 0.4 * slot + w * static_cast<double>(k);
        const double top = std::min(py(s.y[i]), py(0));
        o << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(w)
          << "\" height=\"" << num(std::abs(py(s.y[i]) - py(0))) << "\" fill=\"" << color
          << "\"/>\n";
      }
    } else {
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      bool sep = false;
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.y[i])) continue;
        o << (sep ? " " : "") << num(px(s.x[i])) << ',' << num(py(s.y[i]));
        sep = true;
      }
      o << "\"/>\n";
    }
    const double ly = kTop + 10 + 18 * static_cast<double>(k);
    o << "<rect x=\"" << num(kWidth - kRight + 12) << "\" y=\"" << num(ly - 9)
      << "\" width=\"12\" height=\"12\" fill=\"" << color << "\"/>\n";
    o << "<text x=\"" << num(kWidth - kRight + 30) << "\" y=\"" << num(ly + 2) << "\">"
      << escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

void write_svg(const Chart& chart, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << render_svg(chart);
}

}  // namespace headmask
