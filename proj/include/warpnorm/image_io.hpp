#pragma once

#include <string>
#include <vector>

#include "warpnorm/tensor.hpp"

namespace warpnorm {

// Binary PPM (P6, 8-bit) for 3-channel images in [0,1]; PGM (P5) for
// single-channel masks and heatmaps. Row-major, top-left origin.

void write_ppm(const std::string& path, const Tensor4& img, int batch = 0);
void write_pgm(const std::string& path, const Tensor4& img, int batch = 0, int channel = 0);

Tensor4 read_ppm(const std::string& path); // (1,3,H,W) in [0,1]
Tensor4 read_pgm(const std::string& path); // (1,1,H,W) in [0,1]

// Flow visualization: angle -> hue, magnitude -> value (HSV), saturation 1.
Tensor4 flow_to_hsv(const Tensor4& flow, int batch = 0);

// Normalize a signed scalar field into [0,1] for PGM dumps.
Tensor4 to_heatmap(const Tensor4& x, int channel = 0);

// Horizontal strip of equally sized 3-channel panels.
Tensor4 hstack_panels(const std::vector<Tensor4>& panels);

// Grayscale (1-channel) tensor replicated to 3 channels.
Tensor4 gray_to_rgb(const Tensor4& x);

} // namespace warpnorm
