#include "t3/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace t3 {

namespace {

constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 20, kTop = 40, kBottom = 55;
const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<':
        o += "&lt;";
        break;
      case '>':
        o += "&gt;";
        break;
      case '&':
        o += "&amp;";
        break;
      case '"':
        o += "&quot;";
        break;
      default:
        o += c;
    }
  }
  return o;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
};

void frame(std::ostringstream& s, const std::string& title, const std::string& xlabel, const std::string& ylabel,
           const Range& yr) {
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(title) << "</text>\n";
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << (kLeft + kW - kRight) / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">" << esc(xlabel)
    << "</text>\n";
  s << "<text x=\"16\" y=\"" << (kTop + kH - kBottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << (kTop + kH - kBottom) / 2 << ")\">" << esc(ylabel) << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = yr.lo + (yr.hi - yr.lo) * i / 4.0;
    const double y = kH - kBottom - (kH - kBottom - kTop) * i / 4.0;
    s << "<line x1=\"" << kLeft - 4 << "\" y1=\"" << y << "\" x2=\"" << kLeft << "\" y2=\"" << y << "\" stroke=\"black\"/>";
    s << "<text x=\"" << kLeft - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << fmt(v) << "</text>\n";
  }
}

void save(const std::string& path, const std::string& svg) {
  std::ofstream f(path, std::ios::trunc);
  f << svg;
  if (!f) throw std::runtime_error("cannot write plot '" + path + "'");
}

}  // namespace

void write_line_plot_svg(const std::string& path, const std::string& title, const std::string& xlabel,
                         const std::string& ylabel, const std::vector<Series>& series) {
  Range xr, yr;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("series '" + s.name + "' has mismatched x/y");
    for (double v : s.x) xr.add(v);
    for (double v : s.y) yr.add(v);
  }
  xr.finish();
  yr.finish();
  std::ostringstream svg;
  frame(svg, title, xlabel, ylabel, yr);
  auto px = [&](double x) { return kLeft + (x - xr.lo) / (xr.hi - xr.lo) * (kW - kLeft - kRight); };
  auto py = [&](double y) { return kH - kBottom - (y - yr.lo) / (yr.hi - yr.lo) * (kH - kBottom - kTop); };
  for (int i = 0; i <= 4; ++i) {
    const double v = xr.lo + (xr.hi - xr.lo) * i / 4.0;
    svg << "<text x=\"" << px(v) << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"middle\">" << fmt(v)
        << "</text>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kColors[k % 8];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (std::isfinite(s.y[i])) svg << px(s.x[i]) << "," << py(s.y[i]) << " ";
    }
    svg << "\"/>\n";
    const double ly = kTop + 14.0 * static_cast<double>(k);
    svg << "<rect x=\"" << kW - kRight - 150 << "\" y=\"" << ly - 8 << "\" width=\"10\" height=\"10\" fill=\"" << color
        << "\"/><text x=\"" << kW - kRight - 135 << "\" y=\"" << ly + 1 << "\">" << esc(s.name) << "</text>\n";
  }
  svg << "</svg>\n";
  save(path, svg.str());
}

void write_bar_plot_svg(const std::string& path, const std::string& title, const std::vector<std::string>& categories,
                        const std::vector<double>& values, const std::string& ylabel) {
  if (categories.size() != values.size() || values.empty()) throw std::invalid_argument("bar plot size mismatch");
  Range yr;
  yr.add(0.0);
  for (double v : values) yr.add(v);
  yr.finish();
  std::ostringstream svg;
  frame(svg, title, "", ylabel, yr);
  const double slot = (kW - kLeft - kRight) / static_cast<double>(values.size());
  auto py = [&](double y) { return kH - kBottom - (y - yr.lo) / (yr.hi - yr.lo) * (kH - kBottom - kTop); };
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = kLeft + slot * static_cast<double>(i) + slot * 0.15;
    const double y0 = py(0.0), y1 = py(values[i]);
    svg << "<rect x=\"" << x << "\" y=\"" << std::min(y0, y1) << "\" width=\"" << slot * 0.7 << "\" height=\""
        << std::abs(y0 - y1) << "\" fill=\"" << kColors[0] << "\"/>\n";
    svg << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"middle\">"
        << esc(categories[i]) << "</text>\n";
    svg << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << std::min(y0, y1) - 4 << "\" text-anchor=\"middle\">"
        << fmt(values[i]) << "</text>\n";
  }
  svg << "</svg>\n";
  save(path, svg.str());
}

std::string markdown_table(const std::vector<std::string>& headers, const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream os;
  os << "|";
  for (const auto& h : headers) os << " " << h << " |";
  os << "\n|";
  for (std::size_t i = 0; i < headers.size(); ++i) os << "---|";
  os << "\n";
  for (const auto& r : rows) {
    if (r.size() != headers.size()) throw std::invalid_argument("table row width mismatch");
    os << "|";
    for (const auto& c : r) os << " " << c << " |";
    os << "\n";
  }
  return os.str();
}

}  // namespace t3
