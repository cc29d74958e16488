#include "qgn/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace qgn {

void write_ppm(const std::string& path, const Tensor& img) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("write_ppm: expect [3,H,W]");
  const int h = img.dim(1), w = img.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at({c, y, x}), 0.0, 1.0);
        row[static_cast<size_t>(x) * 3 + static_cast<size_t>(c)] =
            static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw std::runtime_error("write_ppm: write failed for " + path);
}

Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error("read_ppm: not a P6 file: " + path);
  auto next_int = [&f, &path]() {
    // Skips whitespace and '#' comment lines, per the PPM grammar.
    int c = f.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
      if (c == '#')
        while (c != EOF && c != '\n') c = f.get();
      c = f.get();
    }
    int v = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
      v = v * 10 + (c - '0');
      any = true;
      c = f.get();
    }
    if (!any) throw std::runtime_error("read_ppm: malformed header in " + path);
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (maxval != 255) throw std::runtime_error("read_ppm: only maxval 255 supported");
  // next_int consumed exactly one whitespace byte after maxval via its final get().
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw std::runtime_error("read_ppm: truncated pixel data in " + path);
  Tensor img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at({c, y, x}) =
            buf[(static_cast<size_t>(y) * w + static_cast<size_t>(x)) * 3 + static_cast<size_t>(c)] / 255.0;
  return img;
}

Tensor crop_resize(const Tensor& img, double x1, double y1, double x2, double y2, int out_h,
                   int out_w) {
  if (img.ndim() != 3) throw std::invalid_argument("crop_resize: expect [3,H,W]");
  const int h = img.dim(1), w = img.dim(2);
  const double bw = x2 - x1, bh = y2 - y1;
  if (bw <= 0 || bh <= 0) throw std::invalid_argument("crop_resize: empty box");
  Tensor out({3, out_h, out_w});
  for (int oy = 0; oy < out_h; ++oy) {
    const int sy = std::clamp(static_cast<int>(std::floor(y1 + (oy + 0.5) * bh / out_h)), 0, h - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      const int sx =
          std::clamp(static_cast<int>(std::floor(x1 + (ox + 0.5) * bw / out_w)), 0, w - 1);
      for (int c = 0; c < 3; ++c) out.at({c, oy, ox}) = img.at({c, sy, sx});
    }
  }
  return out;
}

Tensor hflip(const Tensor& img) {
  if (img.ndim() != 3) throw std::invalid_argument("hflip: expect [3,H,W]");
  const int h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at({c, y, x}) = img.at({c, y, w - 1 - x});
  return out;
}

Tensor rot90(const Tensor& img, int k) {
  if (img.ndim() != 3) throw std::invalid_argument("rot90: expect [3,H,W]");
  if (img.dim(1) != img.dim(2)) throw std::invalid_argument("rot90: expect square image");
  k = ((k % 4) + 4) % 4;
  if (k == 0) return img;
  const int n = img.dim(1);
  Tensor out(img.shape());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        // One CCW quarter turn maps (y, x) -> (n-1-x, y).
        double v = img.at({c, y, x});
        int oy = y, ox = x;
        for (int i = 0; i < k; ++i) {
          const int ny = n - 1 - ox, nx = oy;
          oy = ny;
          ox = nx;
        }
        out.at({c, oy, ox}) = v;
      }
  return out;
}

}  // namespace qgn
