#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace robust_pose {

struct PlotSeries {
  std::string name;
  std::vector<double> y;  ///< one value per x; non-finite values break the line
};

/// Minimal SVG line chart with linear axes, tick labels and a legend.
/// Output depends only on the arguments.
void write_line_chart_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<double>& x,
                          const std::vector<PlotSeries>& series);

}  // namespace robust_pose
