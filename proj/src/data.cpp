#include "kdci/data.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

namespace kdci {

namespace {

std::string default_generator(Modality m) {
  switch (m) {
    case Modality::mri: return "phantom";
    case Modality::spc: return "shapes";
    case Modality::cassi: return "spectral-smooth";
  }
  return "";
}

std::mt19937_64 sample_rng(std::uint64_t seed, int split, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

void normalize_max(Image& img) {
  double peak = 0.0;
  for (double v : img.values()) peak = std::max(peak, std::abs(v));
  if (peak > 0.0) img *= 1.0 / peak;
}

struct Ellipse {
  double cx, cy, ax, ay, angle;
  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (x - cx) * c + (y - cy) * s;
    const double v = -(x - cx) * s + (y - cy) * c;
    return (u * u) / (ax * ax) + (v * v) / (ay * ay) <= 1.0;
  }
};

// Normalized coordinate in [-1, 1] of pixel index i along a side of length n.
double coord(int i, int n) { return (2.0 * i + 1.0) / n - 1.0; }

Image phantom_magnitude(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image mag(1, h, w);
  Ellipse body{0.1 * (u(rng) - 0.5), 0.1 * (u(rng) - 0.5), 0.65 + 0.25 * u(rng), 0.75 + 0.2 * u(rng),
               std::numbers::pi * (u(rng) - 0.5) * 0.3};
  const double body_level = 0.5 + 0.4 * u(rng);
  std::vector<std::pair<Ellipse, double>> inner;
  const int count = 3 + static_cast<int>(u(rng) * 6);
  for (int k = 0; k < count; ++k) {
    Ellipse e{0.9 * (u(rng) - 0.5), 0.9 * (u(rng) - 0.5), 0.05 + 0.3 * u(rng), 0.05 + 0.3 * u(rng),
              std::numbers::pi * u(rng)};
    inner.emplace_back(e, 0.8 * (u(rng) - 0.5));
  }
  const double gx = 0.3 * (u(rng) - 0.5), gy = 0.3 * (u(rng) - 0.5);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double px = coord(x, w), py = coord(y, h);
      if (!body.contains(px, py)) continue;
      double v = body_level;
      for (const auto& [e, level] : inner)
        if (e.contains(px, py)) v += level;
      v *= 1.0 + gx * px + gy * py;
      mag.at(0, y, x) = std::max(0.0, v);
    }
  normalize_max(mag);
  return mag;
}

SceneTensor make_mri_sample(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Image mag = phantom_magnitude(rng, h, w);
  const double c0 = std::numbers::pi * u(rng), c1 = 0.5 * std::numbers::pi * u(rng),
               c2 = 0.5 * std::numbers::pi * u(rng), c3 = 0.25 * std::numbers::pi * u(rng);
  SceneTensor x{Modality::mri, Image(2, h, w)};
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      const double px = coord(xx, w), py = coord(y, h);
      const double phase = c0 + c1 * px + c2 * py + c3 * px * py;
      x.data.at(0, y, xx) = mag.at(0, y, xx) * std::cos(phase);
      x.data.at(1, y, xx) = mag.at(0, y, xx) * std::sin(phase);
    }
  return x;
}

bool inside_polygon(const std::vector<std::pair<double, double>>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto [xi, yi] = poly[i];
    const auto [xj, yj] = poly[j];
    if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) in = !in;
  }
  return in;
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * dx - px, qy = ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

// Grayscale scene of polygons and strokes in pixel units; values in [0, 1].
Image shapes_plane(std::mt19937_64& rng, int h, int w, double blur) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(1, h, w);
  const int polygons = 2 + static_cast<int>(u(rng) * 3);
  for (int p = 0; p < polygons; ++p) {
    const double cx = w * (0.2 + 0.6 * u(rng)), cy = h * (0.2 + 0.6 * u(rng));
    const double radius = std::min(h, w) * (0.12 + 0.25 * u(rng));
    const int verts = 3 + static_cast<int>(u(rng) * 4);
    std::vector<double> angles(verts);
    for (double& a : angles) a = 2.0 * std::numbers::pi * u(rng);
    std::sort(angles.begin(), angles.end());
    std::vector<std::pair<double, double>> poly;
    for (double a : angles) {
      const double r = radius * (0.6 + 0.4 * u(rng));
      poly.emplace_back(cx + r * std::cos(a), cy + r * std::sin(a));
    }
    const double level = 0.3 + 0.7 * u(rng);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (inside_polygon(poly, x + 0.5, y + 0.5)) img.at(0, y, x) = std::max(img.at(0, y, x), level);
  }
  const int strokes = 1 + static_cast<int>(u(rng) * 3);
  for (int s = 0; s < strokes; ++s) {
    const double ax = w * u(rng), ay = h * u(rng), bx = w * u(rng), by = h * u(rng);
    const double half_width = 0.5 + 0.75 * u(rng);
    const double level = 0.3 + 0.7 * u(rng);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (segment_distance(x + 0.5, y + 0.5, ax, ay, bx, by) <= half_width)
          img.at(0, y, x) = std::max(img.at(0, y, x), level);
  }
  if (blur > 0.0) {
    cv::Mat m(h, w, CV_64F, img.data());
    cv::GaussianBlur(m, m, cv::Size(0, 0), blur, blur, cv::BORDER_REFLECT);
  }
  normalize_max(img);
  return img;
}

std::vector<double> smooth_spectrum(std::mt19937_64& rng, int bands) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> s(bands, 0.0);
  const int bumps = 1 + static_cast<int>(u(rng) * 2);
  const double base = 0.1 * u(rng);
  for (int l = 0; l < bands; ++l) s[l] = base;
  for (int k = 0; k < bumps; ++k) {
    const double center = u(rng), width = 0.3 + 0.3 * u(rng), amp = 0.4 + 0.6 * u(rng);
    for (int l = 0; l < bands; ++l) {
      const double lam = bands > 1 ? static_cast<double>(l) / (bands - 1) : 0.5;
      s[l] += amp * std::exp(-(lam - center) * (lam - center) / (2.0 * width * width));
    }
  }
  const double peak = *std::max_element(s.begin(), s.end());
  for (double& v : s) v /= peak;
  return s;
}

double max_adjacent_jump(const Image& cube) {
  double jump = 0.0;
  for (int l = 1; l < cube.channels(); ++l)
    for (int y = 0; y < cube.height(); ++y)
      for (int x = 0; x < cube.width(); ++x)
        jump = std::max(jump, std::abs(cube.at(l, y, x) - cube.at(l - 1, y, x)));
  return jump;
}

SceneTensor make_cassi_sample(std::mt19937_64& rng, int h, int w, int bands, double max_jump) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    SceneTensor x{Modality::cassi, Image(bands, h, w)};
    const auto background = smooth_spectrum(rng, bands);
    const double bg_level = 0.05 + 0.1 * u(rng);
    for (int l = 0; l < bands; ++l)
      for (double& v : x.data.plane(l)) v = bg_level * background[l];
    const int shapes = 2 + static_cast<int>(u(rng) * 4);
    for (int k = 0; k < shapes; ++k) {
      const auto spectrum = smooth_spectrum(rng, bands);
      const double level = 0.5 + 0.5 * u(rng);
      const bool ellipse = u(rng) < 0.5;
      Ellipse e{1.2 * (u(rng) - 0.5), 1.2 * (u(rng) - 0.5), 0.15 + 0.35 * u(rng), 0.15 + 0.35 * u(rng),
                std::numbers::pi * u(rng)};
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double px = coord(xx, w), py = coord(y, h);
          const bool hit = ellipse ? e.contains(px, py)
                                   : std::abs(px - e.cx) <= e.ax && std::abs(py - e.cy) <= e.ay;
          if (!hit) continue;
          for (int l = 0; l < bands; ++l) x.data.at(l, y, xx) = level * spectrum[l];
        }
    }
    normalize_max(x.data);
    if (max_adjacent_jump(x.data) <= max_jump) return x;
  }
  throw ConfigError("could not draw a spectral cube within the band-jump bound; raise max_band_jump");
}

template <typename Fn>
Dataset generate(DatasetSpec spec, Fn&& make) {
  Dataset d;
  const int counts[3] = {spec.train, spec.val, spec.test};
  std::vector<SceneTensor>* outs[3] = {&d.train, &d.val, &d.test};
  for (int split = 0; split < 3; ++split)
    for (int i = 0; i < counts[split]; ++i) {
      auto rng = sample_rng(spec.seed, split, i);
      outs[split]->push_back(make(rng));
    }
  d.spec = std::move(spec);
  return d;
}

}  // namespace

void DatasetSpec::validate() {
  if (generator.empty()) generator = default_generator(modality);
  if (train < 1 || val < 0 || test < 0) throw ConfigError("dataset split counts must be train >= 1, val/test >= 0");
  if (height < 1 || width < 1) throw ConfigError("dataset dims must be positive");
  if (modality == Modality::cassi && bands < 1) throw ConfigError("CASSI dataset needs bands >= 1");
  if (edge_blur < 0.0) throw ConfigError("edge_blur must be non-negative");
  static const std::set<std::string> known{"phantom", "shapes", "spectral-smooth", "external-dir"};
  if (!known.contains(generator)) throw ConfigError("unknown dataset generator '" + generator + "'");
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"modality", std::string(to_string(s.modality))},
       {"train", s.train},
       {"val", s.val},
       {"test", s.test},
       {"height", s.height},
       {"width", s.width},
       {"bands", s.bands},
       {"generator", s.generator},
       {"external_dir", s.external_dir},
       {"seed", s.seed},
       {"max_band_jump", s.max_band_jump},
       {"edge_blur", s.edge_blur}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  DatasetSpec d;
  s.modality = parse_modality(j.at("modality").get<std::string>());
  s.train = j.value("train", d.train);
  s.val = j.value("val", d.val);
  s.test = j.value("test", d.test);
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.bands = j.value("bands", d.bands);
  s.generator = j.value("generator", d.generator);
  s.external_dir = j.value("external_dir", d.external_dir);
  s.seed = j.value("seed", d.seed);
  s.max_band_jump = j.value("max_band_jump", d.max_band_jump);
  s.edge_blur = j.value("edge_blur", d.edge_blur);
}

Dataset synth_mri(DatasetSpec spec) {
  spec.modality = Modality::mri;
  spec.validate();
  auto pow2 = [](int v) { return v >= 16 && (v & (v - 1)) == 0; };
  if (!pow2(spec.height) || !pow2(spec.width)) throw ConfigError("MRI phantom dims must be powers of two >= 16");
  const int h = spec.height, w = spec.width;
  return generate(std::move(spec), [&](std::mt19937_64& rng) { return make_mri_sample(rng, h, w); });
}

Dataset synth_spc(DatasetSpec spec) {
  spec.modality = Modality::spc;
  spec.validate();
  const int h = spec.height, w = spec.width;
  const double blur = spec.edge_blur;
  return generate(std::move(spec), [&](std::mt19937_64& rng) {
    return SceneTensor{Modality::spc, shapes_plane(rng, h, w, blur)};
  });
}

Dataset synth_cassi(DatasetSpec spec) {
  spec.modality = Modality::cassi;
  spec.validate();
  const int h = spec.height, w = spec.width, bands = spec.bands;
  const double jump = spec.max_band_jump;
  return generate(std::move(spec), [&](std::mt19937_64& rng) { return make_cassi_sample(rng, h, w, bands, jump); });
}

Dataset ingest_external(const std::filesystem::path& dir, DatasetSpec spec) {
  spec.validate();
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a readable directory: " + dir.string());
  static const std::set<std::string> exts{".png", ".jpg", ".jpeg", ".pgm", ".ppm", ".bmp", ".tif", ".tiff"};
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (exts.contains(ext)) files.push_back(entry.path());
  }
  if (files.empty()) throw IoError("no image files in " + dir.string());
  std::sort(files.begin(), files.end());
  const std::size_t needed = static_cast<std::size_t>(spec.train) + spec.val + spec.test;
  if (needed > files.size())
    throw ConfigError("split needs " + std::to_string(needed) + " files but " + dir.string() + " has " +
                      std::to_string(files.size()));

  auto load_plane = [&](const cv::Mat& raw, const fs::path& file) {
    if (raw.empty()) throw IoError("unreadable image: " + file.string());
    cv::Mat gray = raw;
    if (gray.channels() == 3) cv::cvtColor(raw, gray, cv::COLOR_BGR2GRAY);
    else if (gray.channels() == 4) cv::cvtColor(raw, gray, cv::COLOR_BGRA2GRAY);
    cv::Mat f64, resized;
    gray.convertTo(f64, CV_64F);
    cv::resize(f64, resized, cv::Size(spec.width, spec.height), 0, 0, cv::INTER_AREA);
    return resized;
  };

  auto load = [&](const fs::path& file) {
    if (spec.modality == Modality::cassi) {
      std::vector<cv::Mat> pages;
      if (!cv::imreadmulti(file.string(), pages, cv::IMREAD_ANYDEPTH | cv::IMREAD_UNCHANGED))
        throw IoError("unreadable spectral container: " + file.string());
      if (static_cast<int>(pages.size()) != spec.bands)
        throw ShapeError(file.string() + " has " + std::to_string(pages.size()) + " bands, expected " +
                         std::to_string(spec.bands));
      SceneTensor x{Modality::cassi, Image(spec.bands, spec.height, spec.width)};
      for (int l = 0; l < spec.bands; ++l) {
        cv::Mat p = load_plane(pages[l], file);
        for (int y = 0; y < spec.height; ++y)
          for (int xx = 0; xx < spec.width; ++xx) x.data.at(l, y, xx) = p.at<double>(y, xx);
      }
      normalize_max(x.data);
      return x;
    }
    cv::Mat p = load_plane(cv::imread(file.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_ANYCOLOR), file);
    Image plane(1, spec.height, spec.width);
    for (int y = 0; y < spec.height; ++y)
      for (int xx = 0; xx < spec.width; ++xx) plane.at(0, y, xx) = p.at<double>(y, xx);
    normalize_max(plane);
    if (spec.modality == Modality::spc) return SceneTensor{Modality::spc, plane};
    SceneTensor x{Modality::mri, Image(2, spec.height, spec.width)};
    std::copy(plane.values().begin(), plane.values().end(), x.data.plane(0).begin());
    return x;
  };

  std::mt19937_64 rng(spec.seed);
  std::shuffle(files.begin(), files.end(), rng);
  Dataset d;
  std::size_t k = 0;
  for (int i = 0; i < spec.train; ++i) d.train.push_back(load(files[k++]));
  for (int i = 0; i < spec.val; ++i) d.val.push_back(load(files[k++]));
  for (int i = 0; i < spec.test; ++i) d.test.push_back(load(files[k++]));
  d.spec = std::move(spec);
  return d;
}

Dataset make_dataset(DatasetSpec spec) {
  spec.validate();
  if (spec.generator == "external-dir") return ingest_external(spec.external_dir, spec);
  switch (spec.modality) {
    case Modality::mri: return synth_mri(std::move(spec));
    case Modality::spc: return synth_spc(std::move(spec));
    case Modality::cassi: return synth_cassi(std::move(spec));
  }
  throw ConfigError("unreachable modality");
}

std::string dataset_hash(const DatasetSpec& spec) { return sha256_hex(nlohmann::json(spec).dump()); }

std::string sample_hash(const SceneTensor& x) { return sha256_hex(std::span<const double>(x.data.values())); }

namespace {

constexpr char kCacheMagic[4] = {'K', 'D', 'D', 'S'};
constexpr std::uint32_t kCacheVersion = 1;

template <typename T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated dataset cache: " + path.string());
  return v;
}

}  // namespace

void save_dataset_cache(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write dataset cache: " + path.string());
  os.write(kCacheMagic, 4);
  put(os, kCacheVersion);
  const std::string hash = dataset_hash(d.spec);
  put(os, static_cast<std::uint32_t>(hash.size()));
  os.write(hash.data(), static_cast<std::streamsize>(hash.size()));
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    put(os, static_cast<std::uint32_t>(split->size()));
    for (const auto& x : *split) {
      put(os, static_cast<std::int32_t>(x.kind));
      put(os, static_cast<std::int32_t>(x.data.channels()));
      put(os, static_cast<std::int32_t>(x.data.height()));
      put(os, static_cast<std::int32_t>(x.data.width()));
      os.write(reinterpret_cast<const char*>(x.data.data()), static_cast<std::streamsize>(x.data.size() * sizeof(double)));
    }
  }
  if (!os) throw IoError("failed writing dataset cache: " + path.string());
}

Dataset load_dataset_cache(const std::filesystem::path& path, const DatasetSpec& expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset cache: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kCacheMagic)) throw IoError("bad dataset cache magic: " + path.string());
  if (get<std::uint32_t>(is, path) != kCacheVersion) throw IoError("unsupported dataset cache version: " + path.string());
  const auto hash_len = get<std::uint32_t>(is, path);
  std::string hash(hash_len, '\0');
  if (!is.read(hash.data(), hash_len)) throw IoError("truncated dataset cache: " + path.string());
  if (hash != dataset_hash(expected)) throw IoError("dataset cache does not match spec: " + path.string());
  Dataset d;
  d.spec = expected;
  for (auto* split : {&d.train, &d.val, &d.test}) {
    const auto count = get<std::uint32_t>(is, path);
    for (std::uint32_t i = 0; i < count; ++i) {
      SceneTensor x;
      x.kind = static_cast<Modality>(get<std::int32_t>(is, path));
      const int c = get<std::int32_t>(is, path), h = get<std::int32_t>(is, path), w = get<std::int32_t>(is, path);
      x.data = Image(c, h, w);
      if (!is.read(reinterpret_cast<char*>(x.data.data()), static_cast<std::streamsize>(x.data.size() * sizeof(double))))
        throw IoError("truncated dataset cache: " + path.string());
      split->push_back(std::move(x));
    }
  }
  return d;
}

Dataset cached_dataset(DatasetSpec spec, const std::filesystem::path& cache_dir) {
  spec.validate();
  std::filesystem::create_directories(cache_dir);
  const auto path = cache_dir / ("dataset_" + dataset_hash(spec).substr(0, 16) + ".bin");
  if (std::filesystem::exists(path)) return load_dataset_cache(path, spec);
  Dataset d = make_dataset(spec);
  save_dataset_cache(d, path);
  return d;
}

}  // namespace kdci
