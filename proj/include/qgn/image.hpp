#pragma once

#include <string>

#include "qgn/tensor.hpp"

namespace qgn {

/// Binary PPM (P6, maxval 255) image IO. Tensors are [3,H,W] with values in
/// [0,1]; writing quantizes with round-half-up, so a written file is a pure
/// function of the tensor and round-trips byte-identically.
void write_ppm(const std::string& path, const Tensor& img);
Tensor read_ppm(const std::string& path);

/// Nearest-neighbor crop+resize of a [3,H,W] image region (half-open pixel
/// box) to out_h x out_w. Used to cut query crops out of scenes.
Tensor crop_resize(const Tensor& img, double x1, double y1, double x2, double y2, int out_h,
                   int out_w);

/// Horizontal mirror of a [3,H,W] image.
Tensor hflip(const Tensor& img);

/// Counter-clockwise rotation by k*90 degrees (k in 0..3) of a square [3,H,W]
/// image.
Tensor rot90(const Tensor& img, int k);

}  // namespace qgn
