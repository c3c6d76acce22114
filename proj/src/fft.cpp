#include "kdci/fft.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>

namespace kdci {

namespace {

Eigen::FFT<double>& engine() {
  thread_local Eigen::FFT<double> fft = [] {
    Eigen::FFT<double> f;
    f.SetFlag(Eigen::FFT<double>::Unscaled);
    return f;
  }();
  return fft;
}

void transform_1d(std::vector<cplx>& buf, std::vector<cplx>& out, bool inverse) {
  if (inverse)
    engine().inv(out, buf);
  else
    engine().fwd(out, buf);
}

}  // namespace

void fft2(ComplexGrid& grid, bool inverse, FftScale scale) {
  const int h = grid.height;
  const int w = grid.width;
  std::vector<cplx> buf, out;

  buf.resize(w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) buf[x] = grid.at(y, x);
    transform_1d(buf, out, inverse);
    for (int x = 0; x < w; ++x) grid.at(y, x) = out[x];
  }
  buf.resize(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) buf[y] = grid.at(y, x);
    transform_1d(buf, out, inverse);
    for (int y = 0; y < h; ++y) grid.at(y, x) = out[y];
  }

  if (scale == FftScale::orthonormal) {
    const double s = 1.0 / std::sqrt(static_cast<double>(h) * w);
    for (auto& v : grid.values) v *= s;
  }
}

ComplexGrid fftshift(const ComplexGrid& grid) {
  ComplexGrid out(grid.height, grid.width);
  for (int y = 0; y < grid.height; ++y)
    for (int x = 0; x < grid.width; ++x)
      out.at((y + grid.height / 2) % grid.height, (x + grid.width / 2) % grid.width) = grid.at(y, x);
  return out;
}

}  // namespace kdci
