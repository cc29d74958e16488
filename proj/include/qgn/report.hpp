#pragma once

#include <string>
#include <vector>

namespace qgn {

// Writes a CSV table. Fields are emitted verbatim; callers keep commas and
// newlines out of cell values.
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// Numeric convenience: values formatted with %.9g.
void write_csv_numeric(const std::string& path,
                       const std::vector<std::string>& header,
                       const std::vector<std::vector<double>>& rows);

std::string format_double(double v);

struct ChartSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

// Renders a multi-series line chart (axes, ticks, numeric tick labels,
// legend) to a PPM image. Deterministic: same input, same bytes.
void render_line_chart(const std::string& path, const std::string& title,
                       const std::vector<ChartSeries>& series, int width = 640,
                       int height = 440);

}  // namespace qgn
