#pragma once

#include <string>
#include <vector>

namespace t3 {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Static SVG line chart with axes, ticks and a legend.
void write_line_plot_svg(const std::string& path, const std::string& title, const std::string& xlabel,
                         const std::string& ylabel, const std::vector<Series>& series);

/// Static SVG bar chart, one bar per category.
void write_bar_plot_svg(const std::string& path, const std::string& title, const std::vector<std::string>& categories,
                        const std::vector<double>& values, const std::string& ylabel);

/// GitHub-flavored markdown table.
std::string markdown_table(const std::vector<std::string>& headers, const std::vector<std::vector<std::string>>& rows);

}  // namespace t3
