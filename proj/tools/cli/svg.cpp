#include "cli/svg.hpp"

#include <cstdio>
#include <sstream>

namespace bsift::cli {

namespace {

constexpr double kW = 420, kH = 420, kPad = 50;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_roc_svg(const std::vector<RocSeries>& series, const std::string& title) {
  const double plot = kW - 2 * kPad;
  auto px = [&](double fpr) { return kPad + fpr * plot; };
  auto py = [&](double tpr) { return kH - kPad - tpr * plot; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
      << "</text>\n";
  for (int k = 0; k <= 5; ++k) {
    const double v = k / 5.0;
    svg << "<line x1=\"" << num(px(v)) << "\" y1=\"" << num(py(0)) << "\" x2=\"" << num(px(v)) << "\" y2=\""
        << num(py(1)) << "\" stroke=\"#eee\"/>\n";
    svg << "<line x1=\"" << num(px(0)) << "\" y1=\"" << num(py(v)) << "\" x2=\"" << num(px(1)) << "\" y2=\""
        << num(py(v)) << "\" stroke=\"#eee\"/>\n";
    svg << "<text x=\"" << num(px(v)) << "\" y=\"" << num(py(0) + 16) << "\" text-anchor=\"middle\">"
        << num(v) << "</text>\n";
    svg << "<text x=\"" << num(px(0) - 6) << "\" y=\"" << num(py(v) + 4) << "\" text-anchor=\"end\">" << num(v)
        << "</text>\n";
  }
  svg << "<rect x=\"" << kPad << "\" y=\"" << kPad << "\" width=\"" << plot << "\" height=\"" << plot
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << num(px(0)) << "\" y1=\"" << num(py(0)) << "\" x2=\"" << num(px(1)) << "\" y2=\""
      << num(py(1)) << "\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n";
  svg << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">False positive rate</text>\n";
  svg << "<text x=\"14\" y=\"" << kH / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " << kH / 2
      << ")\">True positive rate</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kColors[s % (sizeof kColors / sizeof *kColors)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& p : series[s].points) svg << num(px(p.fpr)) << ',' << num(py(p.tpr)) << ' ';
    svg << "\"/>\n";
    const double ly = kPad + 16 + 16.0 * static_cast<double>(s);
    svg << "<line x1=\"" << num(px(0.55)) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(px(0.62))
        << "\" y2=\"" << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << num(px(0.64)) << "\" y=\"" << num(ly + 4) << "\">"
        << escape(series[s].name) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace bsift::cli
