#include "kdci/analysis.hpp"

#include <opencv2/core.hpp>
#include <opencv2/core/eigen.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace kdci {

Eigen::MatrixXd dense_matrix(const SensingOperator& op) {
  const int h = op.scene_height(), w = op.scene_width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const Image& phi = op.phi();
  switch (op.modality()) {
    case Modality::mri: {
      std::vector<int> acquired;
      for (std::size_t k = 0; k < plane; ++k)
        if (phi.values()[k] != 0.0) acquired.push_back(static_cast<int>(k));
      Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * static_cast<Eigen::Index>(acquired.size()), 2 * plane);
      const double s = 1.0 / std::sqrt(static_cast<double>(plane));
      for (std::size_t r = 0; r < acquired.size(); ++r) {
        const int ky = acquired[r] / w, kx = acquired[r] % w;
        const double mask = phi.values()[acquired[r]];
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const double ang = -2.0 * std::numbers::pi * (static_cast<double>(ky) * y / h + static_cast<double>(kx) * x / w);
            const double c = mask * s * std::cos(ang), sn = mask * s * std::sin(ang);
            const std::size_t p = static_cast<std::size_t>(y) * w + x;
            a(2 * r, p) = c;
            a(2 * r, plane + p) = -sn;
            a(2 * r + 1, p) = sn;
            a(2 * r + 1, plane + p) = c;
          }
      }
      return a;
    }
    case Modality::spc: {
      Eigen::MatrixXd a(phi.height(), phi.width());
      for (int i = 0; i < phi.height(); ++i)
        for (int j = 0; j < phi.width(); ++j) a(i, j) = phi.at(0, i, j);
      return a;
    }
    case Modality::cassi: {
      const int bands = op.bands(), det_w = w + bands - 1;
      const std::size_t per_shot = static_cast<std::size_t>(h) * det_w;
      Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(per_shot * op.snapshots()),
                                                static_cast<Eigen::Index>(plane * bands));
      for (int s = 0; s < op.snapshots(); ++s)
        for (int l = 0; l < bands; ++l)
          for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
              a(s * per_shot + static_cast<std::size_t>(r) * det_w + c + l, l * plane + static_cast<std::size_t>(r) * w + c) =
                  phi.at(s, r, c);
      return a;
    }
  }
  throw ConfigError("unknown modality");
}

double mutual_coherence(const Eigen::MatrixXd& a, bool normalize) {
  if (a.cols() < 2) throw ShapeError("mutual coherence needs at least two columns");
  Eigen::MatrixXd cols = a;
  if (normalize) {
    for (Eigen::Index j = 0; j < cols.cols(); ++j) {
      const double n = cols.col(j).norm();
      if (n == 0.0) throw NumericError("column " + std::to_string(j) + " is zero");
      cols.col(j) /= n;
    }
  }
  const Eigen::MatrixXd g = cols.transpose() * cols;
  double mu = 0.0;
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = i + 1; j < g.cols(); ++j) mu = std::max(mu, std::abs(g(i, j)));
  return normalize ? std::min(mu, 1.0) : mu;
}

double operator_coherence(const SensingOperator& op) {
  const Image& phi = op.phi();
  switch (op.modality()) {
    case Modality::mri: {
      // Complex columns of Phi F: <a_p, a_q> is the mask DFT at p - q over sum(Phi).
      ComplexGrid g(phi.height(), phi.width());
      double count = 0.0;
      for (std::size_t i = 0; i < g.values.size(); ++i) {
        g.values[i] = phi.values()[i];
        count += phi.values()[i];
      }
      if (count == 0.0) throw NumericError("MRI mask acquires nothing");
      fft2(g, false, FftScale::unnormalized);
      double mu = 0.0;
      for (std::size_t i = 1; i < g.values.size(); ++i) mu = std::max(mu, std::abs(g.values[i]));
      return std::min(mu / count, 1.0);
    }
    case Modality::spc: {
      Eigen::MatrixXd a = dense_matrix(op);
      std::vector<Eigen::Index> keep;
      for (Eigen::Index j = 0; j < a.cols(); ++j)
        if (a.col(j).squaredNorm() > 0.0) keep.push_back(j);
      if (keep.size() < 2) throw NumericError("fewer than two nonzero columns");
      return mutual_coherence(a(Eigen::all, keep), true);
    }
    case Modality::cassi: {
      // Columns (l, r, c) and (l', r, c') share detector column c + l = c' + l';
      // their inner product is sum_s Phi_s[r,c] Phi_s[r,c'].
      const int h = phi.height(), w = phi.width(), shots = phi.channels(), bands = op.bands();
      double mu = 0.0;
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
          for (int c2 = c + 1; c2 < std::min(w, c + bands); ++c2) {
            double ip = 0.0, n1 = 0.0, n2 = 0.0;
            for (int s = 0; s < shots; ++s) {
              ip += phi.at(s, r, c) * phi.at(s, r, c2);
              n1 += phi.at(s, r, c) * phi.at(s, r, c);
              n2 += phi.at(s, r, c2) * phi.at(s, r, c2);
            }
            if (n1 == 0.0 || n2 == 0.0) continue;
            mu = std::max(mu, std::abs(ip) / std::sqrt(n1 * n2));
          }
      return std::min(mu, 1.0);
    }
  }
  throw ConfigError("unknown modality");
}

namespace {

Spectrum spectrum_from_values(std::vector<double> sv) {
  std::sort(sv.begin(), sv.end(), std::greater<>());
  if (sv.empty() || sv.front() <= 0.0) throw NumericError("operator is zero");
  Spectrum s;
  const double top = sv.front(), bottom = sv.back();
  s.condition = bottom < 1e-12 * top ? kInfiniteCondition : top / bottom;
  s.normalized.reserve(sv.size());
  for (double v : sv) s.normalized.push_back(v / top);
  s.singular_values = std::move(sv);
  return s;
}

}  // namespace

Spectrum condition_and_spectrum(const Eigen::MatrixXd& a) {
  if (a.size() == 0) throw ShapeError("empty matrix");
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a);
  const auto& v = svd.singularValues();
  return spectrum_from_values(std::vector<double>(v.data(), v.data() + v.size()));
}

Spectrum operator_spectrum(const SensingOperator& op) {
  const Image& phi = op.phi();
  switch (op.modality()) {
    case Modality::mri: {
      // Selected rows of a unitary DFT are orthonormal; in the real representation
      // every acquired sample contributes two unit singular values.
      std::size_t count = 0;
      for (double v : phi.values()) count += v != 0.0;
      return spectrum_from_values(std::vector<double>(2 * count, 1.0));
    }
    case Modality::spc: return condition_and_spectrum(dense_matrix(op));
    case Modality::cassi: {
      // A A^T is block diagonal over detector pixels (r, j) with snapshot x snapshot blocks.
      const int h = phi.height(), w = phi.width(), shots = phi.channels(), bands = op.bands();
      const int det_w = w + bands - 1;
      std::vector<double> sv;
      Eigen::MatrixXd block(shots, shots);
      for (int r = 0; r < h; ++r)
        for (int j = 0; j < det_w; ++j) {
          block.setZero();
          for (int l = 0; l < bands; ++l) {
            const int c = j - l;
            if (c < 0 || c >= w) continue;
            for (int s = 0; s < shots; ++s)
              for (int t = 0; t < shots; ++t) block(s, t) += phi.at(s, r, c) * phi.at(t, r, c);
          }
          Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(block, Eigen::EigenvaluesOnly);
          for (Eigen::Index k = 0; k < shots; ++k) sv.push_back(std::sqrt(std::max(0.0, eig.eigenvalues()(k))));
        }
      const std::size_t cols = static_cast<std::size_t>(h) * w * bands;
      std::sort(sv.begin(), sv.end(), std::greater<>());
      if (sv.size() > cols) sv.resize(cols);
      return spectrum_from_values(std::move(sv));
    }
  }
  throw ConfigError("unknown modality");
}

Eigen::MatrixXd gram_section(const Eigen::MatrixXd& a, int window) {
  if (window <= 0) throw ConfigError("Gram window must be positive");
  if (window > a.cols()) throw ConfigError("Gram window exceeds the column count");
  const auto cols = a.leftCols(window);
  return cols.transpose() * cols;
}

Eigen::MatrixXd operator_gram_section(const SensingOperator& op, int window) {
  if (window <= 0) throw ConfigError("Gram window must be positive");
  const std::size_t n = static_cast<std::size_t>(op.scene_channels()) * op.scene_height() * op.scene_width();
  if (static_cast<std::size_t>(window) > n) throw ConfigError("Gram window exceeds the scene size");
  Eigen::MatrixXd g(window, window);
  SceneTensor e{op.modality(), Image(op.scene_channels(), op.scene_height(), op.scene_width())};
  for (int j = 0; j < window; ++j) {
    e.data.values()[j] = 1.0;
    const SceneTensor col = op.backproject(e);
    e.data.values()[j] = 0.0;
    for (int i = 0; i < window; ++i) g(i, j) = col.data.values()[i];
  }
  return g;
}

BandCorrelation spectral_band_correlation(const SensingOperator& op) {
  if (op.modality() != Modality::cassi) throw ConfigError("band correlation is defined for CASSI only");
  const Image& phi = op.phi();
  const int h = phi.height(), w = phi.width(), bands = op.bands();
  BandCorrelation out;
  out.raw = Eigen::MatrixXd::Zero(bands, bands);
  for (int s = 0; s < phi.channels(); ++s)
    for (int i = 0; i < bands; ++i)
      for (int j = i; j < bands; ++j) {
        // Band i lands at column c + i, band j at c' + j; they overlap where c' = c + i - j.
        double acc = 0.0;
        for (int r = 0; r < h; ++r)
          for (int c = 0; c < w; ++c) {
            const int c2 = c + i - j;
            if (c2 >= 0 && c2 < w) acc += phi.at(s, r, c) * phi.at(s, r, c2);
          }
        out.raw(i, j) += acc;
        if (i != j) out.raw(j, i) += acc;
      }
  for (int i = 0; i < bands; ++i)
    if (!(out.raw(i, i) > 0.0)) throw NumericError("coded aperture is all zero");
  out.normalized.resize(bands, bands);
  for (int i = 0; i < bands; ++i)
    for (int j = 0; j < bands; ++j) out.normalized(i, j) = out.raw(i, j) / std::sqrt(out.raw(i, i) * out.raw(j, j));
  if (bands > 1) {
    double acc = 0.0;
    for (int i = 0; i < bands; ++i)
      for (int j = 0; j < bands; ++j)
        if (i != j) acc += std::abs(out.normalized(i, j));
    out.average = acc / (static_cast<double>(bands) * (bands - 1));
  }
  return out;
}

Eigen::MatrixXd ca_fft_magnitude(const Image& phi, int channel) {
  ComplexGrid g(phi.height(), phi.width());
  const auto p = phi.plane(channel);
  for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = p[i];
  fft2(g, false, FftScale::unnormalized);
  const ComplexGrid c = fftshift(g);
  Eigen::MatrixXd out(c.height, c.width);
  for (int y = 0; y < c.height; ++y)
    for (int x = 0; x < c.width; ++x) out(y, x) = std::abs(c.at(y, x));
  return out;
}

double psnr(std::span<const double> x, std::span<const double> ref, double peak) {
  if (x.size() != ref.size() || x.empty()) throw ShapeError("psnr operands differ in size");
  if (!(peak > 0.0)) throw ConfigError("psnr peak must be positive");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) se += (x[i] - ref[i]) * (x[i] - ref[i]);
  const double mse = se / static_cast<double>(x.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double psnr(const Image& x, const Image& ref, double peak) {
  if (!x.same_shape(ref)) throw ShapeError("psnr shape " + x.shape_string() + " vs " + ref.shape_string());
  return psnr(std::span<const double>(x.values()), std::span<const double>(ref.values()), peak);
}

double ssim_plane(const Image& x, const Image& ref, int channel, const SsimConstants& k) {
  if (!x.same_shape(ref)) throw ShapeError("ssim shape " + x.shape_string() + " vs " + ref.shape_string());
  const int h = x.height(), w = x.width();
  const int win = std::min({k.window, h, w});
  const double c1 = (k.k1 * k.data_range) * (k.k1 * k.data_range);
  const double c2 = (k.k2 * k.data_range) * (k.k2 * k.data_range);
  const double area = static_cast<double>(win) * win;
  double total = 0.0;
  int count = 0;
  for (int y0 = 0; y0 + win <= h; ++y0)
    for (int x0 = 0; x0 + win <= w; ++x0) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (int y = y0; y < y0 + win; ++y)
        for (int xx = x0; xx < x0 + win; ++xx) {
          const double a = x.at(channel, y, xx), b = ref.at(channel, y, xx);
          sa += a;
          sb += b;
          saa += a * a;
          sbb += b * b;
          sab += a * b;
        }
      const double ma = sa / area, mb = sb / area;
      const double va = saa / area - ma * ma, vb = sbb / area - mb * mb, cov = sab / area - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / count;
}

double ssim(const Image& x, const Image& ref, const SsimConstants& k) {
  double acc = 0.0;
  for (int c = 0; c < x.channels(); ++c) acc += ssim_plane(x, ref, c, k);
  return acc / x.channels();
}

namespace {

std::optional<double> angle_at(const Image& cube, const Image& ref, int y, int x) {
  double ab = 0, aa = 0, bb = 0;
  for (int l = 0; l < cube.channels(); ++l) {
    const double a = cube.at(l, y, x), b = ref.at(l, y, x);
    ab += a * b;
    aa += a * a;
    bb += b * b;
  }
  if (aa == 0.0 || bb == 0.0) return std::nullopt;
  return std::acos(std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0));
}

}  // namespace

double sam(const Image& cube, const Image& ref, int y, int x) {
  if (!cube.same_shape(ref)) throw ShapeError("sam shape " + cube.shape_string() + " vs " + ref.shape_string());
  const auto a = angle_at(cube, ref, y, x);
  if (!a) throw NumericError("zero spectrum at pixel (" + std::to_string(y) + ", " + std::to_string(x) + ")");
  return *a;
}

double sam_mean(const Image& cube, const Image& ref) {
  if (!cube.same_shape(ref)) throw ShapeError("sam shape " + cube.shape_string() + " vs " + ref.shape_string());
  double acc = 0.0;
  int count = 0;
  for (int y = 0; y < cube.height(); ++y)
    for (int x = 0; x < cube.width(); ++x)
      if (const auto a = angle_at(cube, ref, y, x)) {
        acc += *a;
        ++count;
      }
  if (count == 0) throw NumericError("no pixel with nonzero spectra");
  return acc / count;
}

namespace {

Image magnitude(const Image& complex2) {
  Image m(1, complex2.height(), complex2.width());
  for (std::size_t i = 0; i < m.size(); ++i) m.values()[i] = std::hypot(complex2.plane(0)[i], complex2.plane(1)[i]);
  return m;
}

}  // namespace

QualityMetrics scene_quality(const SceneTensor& recon, const SceneTensor& ref, double peak) {
  if (!recon.data.same_shape(ref.data))
    throw ShapeError("reconstruction " + recon.data.shape_string() + " vs reference " + ref.data.shape_string());
  QualityMetrics q;
  SsimConstants k;
  k.data_range = peak;
  if (ref.kind == Modality::mri) {
    const Image a = magnitude(recon.data), b = magnitude(ref.data);
    q.psnr = psnr(a, b, peak);
    q.ssim = ssim(a, b, k);
    return q;
  }
  q.psnr = psnr(recon.data, ref.data, peak);
  q.ssim = ssim(recon.data, ref.data, k);
  if (ref.kind == Modality::cassi && ref.data.channels() > 1) q.sam = sam_mean(recon.data, ref.data);
  return q;
}

EncoderReport analyze_encoder(const SensingOperator& op, int gram_window) {
  EncoderReport r;
  r.modality = op.modality();
  r.mode = std::string(to_string(op.params().mode));
  r.mutual_coherence = operator_coherence(op);
  const Spectrum s = operator_spectrum(op);
  r.condition_number = s.condition;
  r.singular_values = s.singular_values;
  const int n = op.scene_channels() * op.scene_height() * op.scene_width();
  r.gram_section = operator_gram_section(op, std::min(gram_window, n));
  const Image& phi = op.phi();
  double pass = 0.0;
  for (double v : phi.values()) pass += op.params().mode == BinarizeMode::sign ? (v > 0.0) : v;
  r.transmittance = pass / static_cast<double>(phi.size());
  if (op.modality() == Modality::cassi) {
    r.band_correlation = spectral_band_correlation(op);
    r.fft_magnitude = ca_fft_magnitude(phi, 0);
  } else if (op.modality() == Modality::spc) {
    Image first(1, op.scene_height(), op.scene_width());
    std::copy_n(phi.data(), first.size(), first.data());
    r.fft_magnitude = ca_fft_magnitude(first, 0);
  }
  return r;
}

namespace {

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[j] = m(i, j);
    rows.push_back(row);
  }
  return rows;
}

nlohmann::json finite_or_string(double v) {
  if (std::isfinite(v)) return v;
  return "inf";
}

}  // namespace

nlohmann::json report_to_json(const EncoderReport& r) {
  nlohmann::json j;
  j["modality"] = std::string(to_string(r.modality));
  j["mode"] = r.mode;
  j["mutual_coherence"] = r.mutual_coherence;
  j["condition_number"] = finite_or_string(r.condition_number);
  j["singular_values"] = r.singular_values;
  j["gram_window"] = r.gram_section.rows();
  j["gram_section"] = matrix_json(r.gram_section);
  j["transmittance"] = r.transmittance;
  if (r.band_correlation) {
    j["band_correlation"] = {{"raw", matrix_json(r.band_correlation->raw)},
                             {"normalized", matrix_json(r.band_correlation->normalized)},
                             {"average", r.band_correlation->average}};
  }
  if (r.fft_magnitude) j["fft_magnitude"] = matrix_json(*r.fft_magnitude);
  return j;
}

void write_heatmap(const Eigen::MatrixXd& m, const std::filesystem::path& path, int min_side) {
  if (m.size() == 0) throw ShapeError("empty heatmap");
  cv::Mat f;
  cv::eigen2cv(m, f);
  double lo = 0, hi = 0;
  cv::minMaxLoc(f, &lo, &hi);
  cv::Mat u8;
  f.convertTo(u8, CV_8U, hi > lo ? 255.0 / (hi - lo) : 0.0, hi > lo ? -lo * 255.0 / (hi - lo) : 0.0);
  const int scale = std::max(1, (min_side + static_cast<int>(std::min(m.rows(), m.cols())) - 1) /
                                    static_cast<int>(std::min(m.rows(), m.cols())));
  cv::Mat big, color;
  cv::resize(u8, big, cv::Size(), scale, scale, cv::INTER_NEAREST);
  cv::applyColorMap(big, color, cv::COLORMAP_VIRIDIS);
  if (!cv::imwrite(path.string(), color)) throw IoError("cannot write plot: " + path.string());
}

void write_line_plot(const std::vector<double>& values, const std::filesystem::path& path) {
  const int w = 640, h = 400, margin = 30;
  cv::Mat img(h, w, CV_8UC3, cv::Scalar(255, 255, 255));
  cv::rectangle(img, {margin, margin}, {w - margin, h - margin}, cv::Scalar(0, 0, 0), 1);
  if (!values.empty()) {
    const double top = *std::max_element(values.begin(), values.end());
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double fx = values.size() > 1 ? static_cast<double>(i) / (values.size() - 1) : 0.0;
      const double fy = top > 0 ? values[i] / top : 0.0;
      pts.emplace_back(margin + static_cast<int>(fx * (w - 2 * margin)), h - margin - static_cast<int>(fy * (h - 2 * margin)));
    }
    cv::polylines(img, pts, false, cv::Scalar(180, 60, 20), 2);
  }
  if (!cv::imwrite(path.string(), img)) throw IoError("cannot write plot: " + path.string());
}

std::vector<std::filesystem::path> write_report_plots(const EncoderReport& r, const std::filesystem::path& dir,
                                                      const std::string& prefix) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> out;
  out.push_back(dir / (prefix + "_spectrum.png"));
  write_line_plot(r.singular_values, out.back());
  out.push_back(dir / (prefix + "_gram.png"));
  write_heatmap(r.gram_section, out.back());
  if (r.band_correlation) {
    out.push_back(dir / (prefix + "_band_corr.png"));
    write_heatmap(r.band_correlation->normalized, out.back());
  }
  if (r.fft_magnitude) {
    out.push_back(dir / (prefix + "_fft.png"));
    write_heatmap(*r.fft_magnitude, out.back());
  }
  return out;
}

}  // namespace kdci
