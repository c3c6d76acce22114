#include "kdci/common.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <random>
#include <sstream>

namespace kdci {

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::mri: return "mri";
    case Modality::spc: return "spc";
    case Modality::cassi: return "cassi";
  }
  return "?";
}

Modality parse_modality(std::string_view s) {
  if (s == "mri") return Modality::mri;
  if (s == "spc") return Modality::spc;
  if (s == "cassi") return Modality::cassi;
  throw ConfigError("unknown modality '" + std::string(s) + "'");
}

Image::Image(int channels, int height, int width, double fill)
    : channels_(channels), height_(height), width_(width) {
  if (channels < 0 || height < 0 || width < 0) throw ShapeError("negative image dimension");
  data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
}

std::string Image::shape_string() const {
  std::ostringstream os;
  os << '(' << channels_ << ", " << height_ << ", " << width_ << ')';
  return os.str();
}

double Image::squared_norm() const { return dot(data_, data_); }

bool Image::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Image& Image::operator+=(const Image& o) {
  if (!same_shape(o)) throw ShapeError("image add: " + shape_string() + " vs " + o.shape_string());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Image& Image::operator-=(const Image& o) {
  if (!same_shape(o)) throw ShapeError("image sub: " + shape_string() + " vs " + o.shape_string());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
  return *this;
}

Image& Image::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_hex(std::span<const double> values) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(values.data()),
                                                  values.size_bytes()));
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace kdci
