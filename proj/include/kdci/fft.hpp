#pragma once

#include <complex>
#include <vector>

namespace kdci {

using cplx = std::complex<double>;

/// Row-major complex grid of height x width.
struct ComplexGrid {
  int height = 0;
  int width = 0;
  std::vector<cplx> values;

  ComplexGrid() = default;
  ComplexGrid(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w) {}
  cplx& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  cplx at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

enum class FftScale {
  orthonormal,  // 1/sqrt(n) in both directions
  unnormalized  // no scaling either way
};

/// In-place 2-D DFT. Forward uses exp(-i...), inverse exp(+i...).
void fft2(ComplexGrid& grid, bool inverse, FftScale scale = FftScale::orthonormal);

/// Moves the zero frequency to the grid center.
ComplexGrid fftshift(const ComplexGrid& grid);

}  // namespace kdci
