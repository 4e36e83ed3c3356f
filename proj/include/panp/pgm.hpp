#pragma once

#include <string>

#include "panp/tensor.hpp"

namespace panp {

/// Reads an 8-bit binary PGM (P5). The image must be square with side <= 32;
/// pixel bytes are scaled to [0,1] by /255. Failures throw std::runtime_error.
Tensor read_pgm(const std::string& path);

/// Writes a [0,1] grayscale image as binary PGM, clamping and rounding
/// each pixel to a byte.
void write_pgm(const std::string& path, const Tensor& img);

}  // namespace panp
