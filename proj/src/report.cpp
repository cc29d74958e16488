#include "qgn/report.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "qgn/image.hpp"
#include "qgn/tensor.hpp"

namespace qgn {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  for (size_t i = 0; i < header.size(); ++i) {
    if (i) f << ',';
    f << header[i];
  }
  f << '\n';
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) f << ',';
      f << row[i];
    }
    f << '\n';
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

void write_csv_numeric(const std::string& path,
                       const std::vector<std::string>& header,
                       const std::vector<std::vector<double>>& rows) {
  std::vector<std::vector<std::string>> srows;
  srows.reserve(rows.size());
  for (const auto& row : rows) {
    std::vector<std::string> s;
    s.reserve(row.size());
    for (double v : row) s.push_back(format_double(v));
    srows.push_back(std::move(s));
  }
  write_csv(path, header, srows);
}

namespace {

// 5x7 bitmap glyphs, one byte per row, low 5 bits used (MSB = left pixel).
const std::array<unsigned char, 7>* glyph(char c) {
  static const std::array<unsigned char, 7> kSpace = {0, 0, 0, 0, 0, 0, 0};
  struct Entry {
    char c;
    std::array<unsigned char, 7> rows;
  };
  static const Entry kTable[] = {
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
      {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
      {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
      {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
      {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
      {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
      {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
      {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
      {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
      {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
      {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
      {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
      {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
      {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
      {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}},
      {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
  };
  for (const auto& e : kTable) {
    if (e.c == c) return &e.rows;
  }
  return &kSpace;
}

struct Canvas {
  Tensor img;
  int w, h;
  Canvas(int width, int height) : img(Tensor::full({3, height, width}, 1.0)), w(width), h(height) {}

  void set(int x, int y, double r, double g, double b) {
    if (x < 0 || x >= w || y < 0 || y >= h) return;
    img.at({0, y, x}) = r;
    img.at({1, y, x}) = g;
    img.at({2, y, x}) = b;
  }

  void line(int x0, int y0, int x1, int y1, double r, double g, double b) {
    int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, r, g, b);
      if (x0 == x1 && y0 == y1) break;
      int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void fill_rect(int x0, int y0, int x1, int y1, double r, double g, double b) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(x, y, r, g, b);
  }

  void text(int x, int y, const std::string& s, double r, double g, double b) {
    int cx = x;
    for (char raw : s) {
      char c = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
      const auto& rows = *glyph(c);
      for (int ry = 0; ry < 7; ++ry)
        for (int rx = 0; rx < 5; ++rx)
          if (rows[static_cast<size_t>(ry)] & (0x10 >> rx)) set(cx + rx, y + ry, r, g, b);
      cx += 6;
    }
  }
};

struct Rgb {
  double r, g, b;
};

const Rgb kPalette[] = {
    {0.12, 0.35, 0.80}, {0.85, 0.25, 0.10}, {0.10, 0.60, 0.25},
    {0.55, 0.20, 0.70}, {0.80, 0.55, 0.05}, {0.15, 0.60, 0.65},
};

}  // namespace

void render_line_chart(const std::string& path, const std::string& title,
                       const std::vector<ChartSeries>& series, int width,
                       int height) {
  if (series.empty()) throw std::invalid_argument("render_line_chart: no series");
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) {
      throw std::invalid_argument("render_line_chart: x/y size mismatch in " + s.name);
    }
    for (double v : s.x) {
      xmin = std::min(xmin, v);
      xmax = std::max(xmax, v);
    }
    for (double v : s.y) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
  }
  if (xmax - xmin < 1e-12) xmax = xmin + 1;
  if (ymin > ymax) {
    ymin = 0;
    ymax = 1;
  }
  if (ymax - ymin < 1e-12) ymax = ymin + 1;
  // A little headroom so curves do not hug the frame.
  double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  const int ml = 64, mr = 14, mt = 26, mb = 34;
  Canvas c(width, height);
  int px0 = ml, px1 = width - mr, py0 = mt, py1 = height - mb;
  auto to_px = [&](double x) {
    return px0 + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (px1 - px0)));
  };
  auto to_py = [&](double y) {
    return py1 - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (py1 - py0)));
  };

  // Gridlines and tick labels, 5 divisions each way.
  for (int t = 0; t <= 5; ++t) {
    double fx = xmin + (xmax - xmin) * t / 5.0;
    double fy = ymin + (ymax - ymin) * t / 5.0;
    int gx = to_px(fx), gy = to_py(fy);
    c.line(gx, py0, gx, py1, 0.88, 0.88, 0.88);
    c.line(px0, gy, px1, gy, 0.88, 0.88, 0.88);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", fx);
    c.text(gx - static_cast<int>(3 * std::char_traits<char>::length(buf)), py1 + 6, buf, 0.25,
           0.25, 0.25);
    std::snprintf(buf, sizeof(buf), "%.3g", fy);
    c.text(px0 - 6 * static_cast<int>(std::char_traits<char>::length(buf)) - 6, gy - 3, buf,
           0.25, 0.25, 0.25);
  }
  c.line(px0, py0, px0, py1, 0.1, 0.1, 0.1);
  c.line(px0, py1, px1, py1, 0.1, 0.1, 0.1);
  c.text(px0, 8, title, 0.1, 0.1, 0.1);

  for (size_t si = 0; si < series.size(); ++si) {
    const Rgb& col = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
    const auto& s = series[si];
    for (size_t i = 0; i + 1 < s.x.size(); ++i) {
      c.line(to_px(s.x[i]), to_py(s.y[i]), to_px(s.x[i + 1]), to_py(s.y[i + 1]), col.r, col.g,
             col.b);
    }
    for (size_t i = 0; i < s.x.size(); ++i) {
      int mx = to_px(s.x[i]), my = to_py(s.y[i]);
      c.fill_rect(mx - 1, my - 1, mx + 1, my + 1, col.r, col.g, col.b);
    }
    // Legend entry, stacked top-right.
    int ly = py0 + 6 + 12 * static_cast<int>(si);
    int lx = px1 - 16 - 6 * static_cast<int>(s.name.size());
    c.line(lx - 12, ly + 3, lx - 4, ly + 3, col.r, col.g, col.b);
    c.text(lx, ly, s.name, 0.15, 0.15, 0.15);
  }

  write_ppm(path, c.img);
}

}  // namespace qgn
