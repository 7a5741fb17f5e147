#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace headmask {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  // Grouped bars at each x instead of polylines.
  bool bars = false;
};

// Self-contained SVG document; output depends only on the chart contents.
std::string render_svg(const Chart& chart);
void write_svg(const Chart& chart, const std::filesystem::path& path);

}  // namespace headmask
