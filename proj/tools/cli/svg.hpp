#pragma once

#include <string>
#include <vector>

#include "bsift/metrics.hpp"

namespace bsift::cli {

// Minimal standalone SVG line chart of one or more ROC curves.
struct RocSeries {
  std::string name;
  std::vector<RocPoint> points;
};

std::string render_roc_svg(const std::vector<RocSeries>& series, const std::string& title);

}  // namespace bsift::cli
