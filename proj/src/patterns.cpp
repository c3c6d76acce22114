#include "kdci/patterns.hpp"

#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <random>

#include "kdci/sensing.hpp"

namespace kdci {

namespace {

std::size_t target_count(int n, int m, double acceleration) {
  if (!(acceleration >= 1.0)) throw ConfigError("acceleration factor must be >= 1");
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) * m / acceleration));
}

// Marks centered coordinates (y, x) on an unshifted grid; returns true if new.
bool mark(Image& mask, int n, int m, double y, double x) {
  const int ys = static_cast<int>(std::lround(y)), xs = static_cast<int>(std::lround(x));
  if (ys < -n / 2 || ys >= n - n / 2 || xs < -m / 2 || xs >= m - m / 2) return false;
  double& v = mask.at(0, (ys + n) % n, (xs + m) % m);
  if (v != 0.0) return false;
  v = 1.0;
  return true;
}

int sign_changes(const std::vector<int>& row) {
  int c = 0;
  for (std::size_t i = 1; i < row.size(); ++i) c += row[i] != row[i - 1];
  return c;
}

// Sylvester Hadamard of order n (power of two): H[i][j] = (-1)^popcount(i & j).
std::vector<std::vector<int>> sylvester(int n) {
  std::vector<std::vector<int>> h(n, std::vector<int>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) h[i][j] = std::popcount(static_cast<unsigned>(i & j)) % 2 ? -1 : 1;
  return h;
}

bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

Pattern golden_angle_radial(int n, int m, double acceleration) {
  const std::size_t target = target_count(n, m, acceleration);
  const double golden = std::numbers::pi / std::numbers::phi;  // 111.246 degrees
  const double reach = std::hypot(n, m) / 2.0 + 1.0;
  Image mask(1, n, m);
  std::size_t count = 0;
  int spokes = 0;
  while (count < target) {
    if (spokes > 64 * (n + m)) throw ConfigError("radial mask cannot reach the requested sampling density");
    const double theta = spokes * golden;
    const double c = std::cos(theta), s = std::sin(theta);
    ++spokes;
    for (double t = 0.0; t <= reach && count < target; t += 0.5) {
      count += mark(mask, n, m, t * s, t * c);
      if (t > 0.0 && count < target) count += mark(mask, n, m, -t * s, -t * c);
    }
  }
  return {std::move(mask),
          {{"generator", "golden-angle-radial"},
           {"spokes", spokes},
           {"angle_deg", golden * 180.0 / std::numbers::pi},
           {"radial_step", 0.5},
           {"acquired", count}}};
}

Pattern archimedean_spiral(int n, int m, double acceleration) {
  const std::size_t target = target_count(n, m, acceleration);
  const double reach = std::hypot(n, m) / 2.0 + 1.0;
  double spacing = std::max(1.0, acceleration);
  for (int attempt = 0; attempt < 200; ++attempt, spacing *= 0.9) {
    const double a = spacing / (2.0 * std::numbers::pi);
    Image mask(1, n, m);
    std::size_t count = 0;
    double theta = 0.0;
    for (double r = 0.0; r <= reach && count < target;) {
      count += mark(mask, n, m, r * std::sin(theta), r * std::cos(theta));
      // Quarter-pixel arc steps.
      theta += 0.25 / std::max(std::hypot(r, a), 0.25);
      r = a * theta;
    }
    if (count == target)
      return {std::move(mask),
              {{"generator", "archimedean-spiral"},
               {"arm_spacing_px", spacing},
               {"turns", theta / (2.0 * std::numbers::pi)},
               {"acquired", count}}};
  }
  throw ConfigError("spiral mask cannot reach the requested sampling density");
}

Pattern hadamard_rows(int height, int width, double gamma) {
  if (!power_of_two(height) || !power_of_two(width))
    throw ConfigError("Hadamard patterns need power-of-two image dims, got " + std::to_string(height) + "x" +
                      std::to_string(width));
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("compression ratio must lie in (0, 1]");
  const int n = height * width;
  const int rows = spc_rows_for_ratio(gamma, n);
  const auto hy = sylvester(height), hx = sylvester(width);
  std::vector<int> seq_y(height), seq_x(width);
  for (int i = 0; i < height; ++i) seq_y[i] = sign_changes(hy[i]);
  for (int i = 0; i < width; ++i) seq_x[i] = sign_changes(hx[i]);
  std::vector<std::pair<int, int>> order;
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) order.emplace_back(i, j);
  std::stable_sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    const int sa = seq_y[a.first] + seq_x[a.second], sb = seq_y[b.first] + seq_x[b.second];
    if (sa != sb) return sa < sb;
    return std::max(seq_y[a.first], seq_x[a.second]) < std::max(seq_y[b.first], seq_x[b.second]);
  });
  Image w(1, rows, n);
  for (int r = 0; r < rows; ++r) {
    const auto [i, j] = order[r];
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) w.at(0, r, y * width + x) = hy[i][y] * hx[j][x];
  }
  return {std::move(w), {{"generator", "walsh-hadamard"}, {"rows", rows}, {"ordering", "2d-sequency"}}};
}

Pattern void_and_cluster(int n, int m, int snapshots, double density, std::uint64_t seed, double sigma) {
  if (n < 2 || m < 2 || snapshots < 1) throw ConfigError("blue-noise pattern needs dims >= 2 and snapshots >= 1");
  if (!(density > 0.0 && density < 1.0)) throw ConfigError("blue-noise density must lie in (0, 1)");
  if (!(sigma > 0.0)) throw ConfigError("blue-noise sigma must be positive");
  const int size = n * m;
  // Toroidal Gaussian kernel indexed by wrapped offsets.
  std::vector<double> kernel(size);
  for (int dy = 0; dy < n; ++dy)
    for (int dx = 0; dx < m; ++dx) {
      const double y = std::min(dy, n - dy), x = std::min(dx, m - dx);
      kernel[dy * m + dx] = std::exp(-(y * y + x * x) / (2.0 * sigma * sigma));
    }
  const int passing = static_cast<int>(std::llround(density * size));
  Image out(snapshots, n, m);
  std::mt19937_64 rng(seed);

  for (int s = 0; s < snapshots; ++s) {
    std::vector<char> bits(size, 0);
    std::vector<double> energy(size, 0.0);
    auto toggle = [&](int p, bool on) {
      bits[p] = on;
      const double sgn = on ? 1.0 : -1.0;
      const int py = p / m, px = p % m;
      for (int q = 0; q < size; ++q) {
        const int dy = (q / m - py + n) % n, dx = (q % m - px + m) % m;
        energy[q] += sgn * kernel[dy * m + dx];
      }
    };
    auto tightest_cluster = [&](const std::vector<char>& b) {
      int best = -1;
      for (int p = 0; p < size; ++p)
        if (b[p] && (best < 0 || energy[p] > energy[best])) best = p;
      return best;
    };
    auto largest_void = [&](const std::vector<char>& b) {
      int best = -1;
      for (int p = 0; p < size; ++p)
        if (!b[p] && (best < 0 || energy[p] < energy[best])) best = p;
      return best;
    };

    // Initial pattern: a random tenth of the pixels, then swap clusters into voids.
    const int initial = std::max(1, size / 10);
    std::vector<int> idx(size);
    for (int p = 0; p < size; ++p) idx[p] = p;
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int k = 0; k < initial; ++k) toggle(idx[k], true);
    for (int it = 0; it < size; ++it) {
      const int c = tightest_cluster(bits);
      toggle(c, false);
      const int v = largest_void(bits);
      toggle(v, true);
      if (v == c) break;
    }
    const std::vector<char> prototype = bits;
    const std::vector<double> prototype_energy = energy;
    std::vector<int> rank(size, 0);
    for (int r = initial - 1; r >= 0; --r) {
      const int c = tightest_cluster(bits);
      toggle(c, false);
      rank[c] = r;
    }
    bits = prototype;
    energy = prototype_energy;
    for (int r = initial; r < size; ++r) {
      const int v = largest_void(bits);
      toggle(v, true);
      rank[v] = r;
    }
    for (int p = 0; p < size; ++p) out.values()[static_cast<std::size_t>(s) * size + p] = rank[p] < passing;
  }
  return {std::move(out),
          {{"generator", "void-and-cluster"},
           {"sigma", sigma},
           {"density", density},
           {"initial_fraction", 0.1},
           {"seed", seed},
           {"snapshots", snapshots}}};
}

Pattern pattern_from_file(const std::filesystem::path& path, Modality modality, int channels, int rows, int cols) {
  const cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw IoError("cannot read pattern file " + path.string());
  if (img.rows != channels * rows || img.cols != cols)
    throw ShapeError("pattern file " + path.string() + " is " + std::to_string(img.rows) + "x" +
                     std::to_string(img.cols) + ", expected " + std::to_string(channels * rows) + "x" +
                     std::to_string(cols));
  Image v(channels, rows, cols);
  const double off = modality == Modality::spc ? -1.0 : 0.0;
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < rows; ++y)
      for (int x = 0; x < cols; ++x) v.at(c, y, x) = img.at<std::uint8_t>(c * rows + y, x) >= 128 ? 1.0 : off;
  return {std::move(v), {{"generator", "file"}, {"path", path.string()}}};
}

}  // namespace kdci
