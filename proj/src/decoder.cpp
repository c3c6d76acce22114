#include "kdci/decoder.hpp"

#include <cmath>
#include <random>

namespace kdci {

void DecoderConfig::validate() const {
  if (in_channels < 1) throw ConfigError("decoder in_channels must be >= 1");
  if (width_factor < 1) throw ConfigError("decoder width_factor must be >= 1");
  if (depth < 1) throw ConfigError("decoder depth must be >= 1");
  if (base_filters < 0) throw ConfigError("decoder base_filters must be >= 0");
  if (!(input_scale > 0.0) || !std::isfinite(input_scale)) throw ConfigError("decoder input_scale must be > 0");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky slope must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = {{"in_channels", c.in_channels}, {"width_factor", c.width_factor}, {"depth", c.depth},
       {"base_filters", c.base_filters}, {"seed", c.seed}, {"residual", c.residual},
       {"input_scale", c.input_scale}, {"leaky_slope", c.leaky_slope}};
}

void from_json(const nlohmann::json& j, DecoderConfig& c) {
  DecoderConfig d;
  c.in_channels = j.value("in_channels", d.in_channels);
  c.width_factor = j.value("width_factor", d.width_factor);
  c.depth = j.value("depth", d.depth);
  c.base_filters = j.value("base_filters", d.base_filters);
  c.seed = j.value("seed", d.seed);
  c.residual = j.value("residual", d.residual);
  c.input_scale = j.value("input_scale", d.input_scale);
  c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
}

namespace {

using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstVec = Eigen::Map<const Eigen::VectorXd>;
using MutVec = Eigen::Map<Eigen::VectorXd>;

// Column index of (b, y, x) in a (channels, batch*h*w) feature matrix.
inline int col(int b, int y, int x, int h, int w) { return (b * h + y) * w + x; }

RowMat im2col3(const RowMat& in, int batch, int h, int w) {
  const int channels = static_cast<int>(in.rows());
  RowMat cols = RowMat::Zero(channels * 9, in.cols());
  for (int c = 0; c < channels; ++c)
    for (int ky = -1; ky <= 1; ++ky)
      for (int kx = -1; kx <= 1; ++kx) {
        const int row = c * 9 + (ky + 1) * 3 + (kx + 1);
        for (int b = 0; b < batch; ++b)
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky;
            if (sy < 0 || sy >= h) continue;
            const int x0 = std::max(0, -kx), x1 = std::min(w, w - kx);
            const double* src = in.data() + static_cast<std::ptrdiff_t>(c) * in.cols() + col(b, sy, 0, h, w);
            double* dst = cols.data() + static_cast<std::ptrdiff_t>(row) * cols.cols() + col(b, y, 0, h, w);
            for (int x = x0; x < x1; ++x) dst[x] = src[x + kx];
          }
      }
  return cols;
}

RowMat col2im3(const RowMat& cols, int channels, int batch, int h, int w) {
  RowMat out = RowMat::Zero(channels, cols.cols());
  for (int c = 0; c < channels; ++c)
    for (int ky = -1; ky <= 1; ++ky)
      for (int kx = -1; kx <= 1; ++kx) {
        const int row = c * 9 + (ky + 1) * 3 + (kx + 1);
        for (int b = 0; b < batch; ++b)
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky;
            if (sy < 0 || sy >= h) continue;
            const int x0 = std::max(0, -kx), x1 = std::min(w, w - kx);
            double* dst = out.data() + static_cast<std::ptrdiff_t>(c) * out.cols() + col(b, sy, 0, h, w);
            const double* src = cols.data() + static_cast<std::ptrdiff_t>(row) * cols.cols() + col(b, y, 0, h, w);
            for (int x = x0; x < x1; ++x) dst[x + kx] += src[x];
          }
      }
  return out;
}

RowMat leaky(const RowMat& pre, double slope) { return pre.cwiseMax(slope * pre); }

RowMat leaky_backward(const RowMat& d_out, const RowMat& pre, double slope) {
  return d_out.binaryExpr(pre, [slope](double g, double p) { return p > 0.0 ? g : slope * g; });
}

}  // namespace

DecoderNet::DecoderNet(DecoderConfig config, int height, int width)
    : config_(config), height_(height), width_(width) {
  config_.validate();
  const int factor = 1 << config_.depth;
  if (height < factor || width < factor || height % factor != 0 || width % factor != 0)
    throw ConfigError("decoder input " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by 2^depth = " + std::to_string(factor));

  const int f = config_.filters();
  const int depth = config_.depth;
  std::size_t offset = 0;
  auto add_conv = [&](int in, int out, int kernel) {
    ConvSpec s{in, out, kernel, offset, 0};
    offset += static_cast<std::size_t>(out) * in * kernel * kernel;
    s.b_off = offset;
    offset += out;
    convs_.push_back(s);
  };
  for (int i = 0; i < depth; ++i) {
    const int in = i == 0 ? config_.in_channels : f << (i - 1);
    add_conv(in, f << i, 3);
    add_conv(f << i, f << i, 3);
  }
  add_conv(f << (depth - 1), f << depth, 3);
  add_conv(f << depth, f << depth, 3);
  ups_.resize(depth);
  for (int i = depth - 1; i >= 0; --i) {
    UpSpec u{f << (i + 1), f << i, offset, 0};
    offset += 4 * static_cast<std::size_t>(u.out) * u.in;
    u.b_off = offset;
    offset += u.out;
    ups_[i] = u;
    add_conv(2 * (f << i), f << i, 3);
    add_conv(f << i, f << i, 3);
  }
  add_conv(f, config_.in_channels, 1);

  params_.assign(offset, 0.0);
  std::mt19937_64 rng(config_.seed);
  auto fill = [&](std::size_t begin, std::size_t count, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> unif(-bound, bound);
    for (std::size_t k = 0; k < count; ++k) params_[begin + k] = unif(rng);
  };
  for (const auto& c : convs_) {
    const int fan_in = c.in * c.kernel * c.kernel;
    fill(c.w_off, static_cast<std::size_t>(c.out) * fan_in, fan_in);
    fill(c.b_off, c.out, fan_in);
  }
  for (int i = depth - 1; i >= 0; --i) {
    const auto& u = ups_[i];
    fill(u.w_off, 4 * static_cast<std::size_t>(u.out) * u.in, u.in * 4);
    fill(u.b_off, u.out, u.in * 4);
  }
}

std::array<int, 3> DecoderNet::bottleneck_shape() const {
  const int factor = 1 << config_.depth;
  return {config_.filters() << config_.depth, height_ / factor, width_ / factor};
}

DecodeResult DecoderNet::decode(std::span<const Image> inputs) const { return run(inputs, nullptr); }

DecodeResult DecoderNet::decode(std::span<const Image> inputs, DecoderTape& tape) const { return run(inputs, &tape); }

DecodeResult DecoderNet::run(std::span<const Image> inputs, DecoderTape* tape) const {
  const int batch = static_cast<int>(inputs.size());
  const int channels = config_.in_channels;
  const int hw = height_ * width_;
  if (batch == 0) return {};
  for (const auto& img : inputs)
    if (img.channels() != channels || img.height() != height_ || img.width() != width_)
      throw ShapeError("decoder input " + img.shape_string() + " does not match configured (" +
                       std::to_string(channels) + ", " + std::to_string(height_) + ", " + std::to_string(width_) +
                       ")");

  RowMat x(channels, static_cast<Eigen::Index>(batch) * hw);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c) {
      auto p = inputs[b].plane(c);
      std::copy(p.begin(), p.end(), x.data() + static_cast<std::ptrdiff_t>(c) * x.cols() + b * hw);
    }
  x *= config_.input_scale;
  const RowMat scaled_input = config_.residual ? x : RowMat();

  if (tape) {
    tape->batch = batch;
    tape->convs.clear();
    tape->pools.clear();
    tape->up_inputs.assign(ups_.size(), RowMat());
  }
  const double slope = config_.leaky_slope;
  std::size_t conv_idx = 0;
  auto conv3 = [&](const RowMat& in, int h, int w) {
    const ConvSpec& s = convs_[conv_idx++];
    RowMat cols = im2col3(in, batch, h, w);
    RowMat pre = ConstMap(params_.data() + s.w_off, s.out, s.in * 9) * cols;
    pre.colwise() += ConstVec(params_.data() + s.b_off, s.out);
    RowMat out = leaky(pre, slope);
    if (tape) tape->convs.push_back({std::move(cols), std::move(pre)});
    return out;
  };

  int h = height_, w = width_;
  std::vector<RowMat> skips;
  RowMat cur = std::move(x);
  for (int i = 0; i < config_.depth; ++i) {
    cur = conv3(cur, h, w);
    cur = conv3(cur, h, w);
    skips.push_back(cur);
    const int ho = h / 2, wo = w / 2;
    RowMat pooled(cur.rows(), static_cast<Eigen::Index>(batch) * ho * wo);
    DecoderTape::Pool pool{std::vector<int>(pooled.size()), h, w};
    for (Eigen::Index c = 0; c < cur.rows(); ++c)
      for (int b = 0; b < batch; ++b)
        for (int y = 0; y < ho; ++y)
          for (int xx = 0; xx < wo; ++xx) {
            int best = col(b, 2 * y, 2 * xx, h, w);
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const int k = col(b, 2 * y + dy, 2 * xx + dx, h, w);
                if (cur(c, k) > cur(c, best)) best = k;
              }
            const int o = col(b, y, xx, ho, wo);
            pooled(c, o) = cur(c, best);
            pool.argmax[c * pooled.cols() + o] = best;
          }
    if (tape) tape->pools.push_back(std::move(pool));
    cur = std::move(pooled);
    h = ho;
    w = wo;
  }
  cur = conv3(cur, h, w);
  cur = conv3(cur, h, w);

  DecodeResult result;
  const auto bshape = bottleneck_shape();
  result.bottleneck.reserve(batch);
  for (int b = 0; b < batch; ++b) {
    Image fm(bshape[0], bshape[1], bshape[2]);
    const int plane = bshape[1] * bshape[2];
    for (int c = 0; c < bshape[0]; ++c)
      std::copy_n(cur.data() + static_cast<std::ptrdiff_t>(c) * cur.cols() + b * plane, plane, fm.plane(c).data());
    result.bottleneck.push_back(std::move(fm));
  }

  for (int i = config_.depth - 1; i >= 0; --i) {
    const UpSpec& u = ups_[i];
    const int ho = 2 * h, wo = 2 * w;
    RowMat up(u.out, static_cast<Eigen::Index>(batch) * ho * wo);
    for (int d = 0; d < 4; ++d) {
      const int dy = d / 2, dx = d % 2;
      RowMat part = ConstMap(params_.data() + u.w_off + static_cast<std::size_t>(d) * u.out * u.in, u.out, u.in) * cur;
      for (int b = 0; b < batch; ++b)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) up.col(col(b, 2 * y + dy, 2 * xx + dx, ho, wo)) = part.col(col(b, y, xx, h, w));
    }
    up.colwise() += ConstVec(params_.data() + u.b_off, u.out);
    if (tape) tape->up_inputs[i] = std::move(cur);
    h = ho;
    w = wo;
    RowMat cat(up.rows() + skips[i].rows(), up.cols());
    cat.topRows(up.rows()) = up;
    cat.bottomRows(skips[i].rows()) = skips[i];
    cur = conv3(cat, h, w);
    cur = conv3(cur, h, w);
  }

  const ConvSpec& head = convs_[conv_idx];
  RowMat out = ConstMap(params_.data() + head.w_off, head.out, head.in) * cur;
  out.colwise() += ConstVec(params_.data() + head.b_off, head.out);
  if (config_.residual) out += scaled_input;
  if (tape) tape->head_input = std::move(cur);

  result.reconstruction.reserve(batch);
  for (int b = 0; b < batch; ++b) {
    Image img(channels, height_, width_);
    for (int c = 0; c < channels; ++c)
      std::copy_n(out.data() + static_cast<std::ptrdiff_t>(c) * out.cols() + b * hw, hw, img.plane(c).data());
    result.reconstruction.push_back(std::move(img));
  }
  return result;
}

std::vector<Image> DecoderNet::backward(const DecoderTape& tape, std::span<const Image> d_recon,
                                        std::span<const Image> d_bottleneck, std::span<double> grad) const {
  const int batch = tape.batch;
  const int channels = config_.in_channels;
  const int hw = height_ * width_;
  if (grad.size() != params_.size()) throw ShapeError("gradient buffer size mismatch");
  if (static_cast<int>(d_recon.size()) != batch) throw ShapeError("reconstruction gradient batch mismatch");
  if (!d_bottleneck.empty() && static_cast<int>(d_bottleneck.size()) != batch)
    throw ShapeError("bottleneck gradient batch mismatch");
  const double slope = config_.leaky_slope;

  RowMat d_out(channels, static_cast<Eigen::Index>(batch) * hw);
  for (int b = 0; b < batch; ++b) {
    if (d_recon[b].channels() != channels || d_recon[b].height() != height_ || d_recon[b].width() != width_)
      throw ShapeError("reconstruction gradient shape " + d_recon[b].shape_string());
    for (int c = 0; c < channels; ++c) {
      auto p = d_recon[b].plane(c);
      std::copy(p.begin(), p.end(), d_out.data() + static_cast<std::ptrdiff_t>(c) * d_out.cols() + b * hw);
    }
  }
  RowMat d_input = config_.residual ? RowMat(d_out) : RowMat::Zero(channels, d_out.cols());

  int conv_idx = static_cast<int>(convs_.size()) - 1;
  const ConvSpec& head = convs_[conv_idx--];
  MutMap(grad.data() + head.w_off, head.out, head.in).noalias() += d_out * tape.head_input.transpose();
  MutVec(grad.data() + head.b_off, head.out) += d_out.rowwise().sum();
  RowMat d_cur = ConstMap(params_.data() + head.w_off, head.out, head.in).transpose() * d_out;

  int tape_idx = static_cast<int>(tape.convs.size()) - 1;
  auto conv3_back = [&](const RowMat& d_act, int h, int w) {
    const ConvSpec& s = convs_[conv_idx--];
    const auto& rec = tape.convs[tape_idx--];
    RowMat d_pre = leaky_backward(d_act, rec.pre_activation, slope);
    MutMap(grad.data() + s.w_off, s.out, s.in * 9).noalias() += d_pre * rec.cols.transpose();
    MutVec(grad.data() + s.b_off, s.out) += d_pre.rowwise().sum();
    RowMat d_cols = ConstMap(params_.data() + s.w_off, s.out, s.in * 9).transpose() * d_pre;
    return col2im3(d_cols, s.in, batch, h, w);
  };

  const int depth = config_.depth;
  std::vector<RowMat> d_skips(depth);
  int h = height_, w = width_;
  for (int i = 0; i < depth; ++i) {
    d_cur = conv3_back(d_cur, h, w);
    RowMat d_cat = conv3_back(d_cur, h, w);
    const UpSpec& u = ups_[i];
    d_skips[i] = d_cat.bottomRows(d_cat.rows() - u.out);
    RowMat d_up = d_cat.topRows(u.out);
    MutVec(grad.data() + u.b_off, u.out) += d_up.rowwise().sum();
    const int hi = h / 2, wi = w / 2;
    const RowMat& up_in = tape.up_inputs[i];
    RowMat d_in = RowMat::Zero(u.in, up_in.cols());
    RowMat part(u.out, up_in.cols());
    for (int d = 0; d < 4; ++d) {
      const int dy = d / 2, dx = d % 2;
      for (int b = 0; b < batch; ++b)
        for (int y = 0; y < hi; ++y)
          for (int xx = 0; xx < wi; ++xx) part.col(col(b, y, xx, hi, wi)) = d_up.col(col(b, 2 * y + dy, 2 * xx + dx, h, w));
      const std::size_t off = u.w_off + static_cast<std::size_t>(d) * u.out * u.in;
      MutMap(grad.data() + off, u.out, u.in).noalias() += part * up_in.transpose();
      d_in.noalias() += ConstMap(params_.data() + off, u.out, u.in).transpose() * part;
    }
    d_cur = std::move(d_in);
    h = hi;
    w = wi;
  }

  if (!d_bottleneck.empty()) {
    const auto bshape = bottleneck_shape();
    const int plane = bshape[1] * bshape[2];
    for (int b = 0; b < batch; ++b) {
      if (d_bottleneck[b].channels() != bshape[0] || d_bottleneck[b].height() != bshape[1] ||
          d_bottleneck[b].width() != bshape[2])
        throw ShapeError("bottleneck gradient shape " + d_bottleneck[b].shape_string());
      for (int c = 0; c < bshape[0]; ++c) {
        auto p = d_bottleneck[b].plane(c);
        double* dst = d_cur.data() + static_cast<std::ptrdiff_t>(c) * d_cur.cols() + b * plane;
        for (int k = 0; k < plane; ++k) dst[k] += p[k];
      }
    }
  }
  d_cur = conv3_back(d_cur, h, w);
  d_cur = conv3_back(d_cur, h, w);

  for (int i = depth - 1; i >= 0; --i) {
    const auto& pool = tape.pools[i];
    RowMat d_full = RowMat::Zero(d_cur.rows(), static_cast<Eigen::Index>(batch) * pool.height * pool.width);
    for (Eigen::Index c = 0; c < d_cur.rows(); ++c)
      for (Eigen::Index o = 0; o < d_cur.cols(); ++o) d_full(c, pool.argmax[c * d_cur.cols() + o]) += d_cur(c, o);
    h = pool.height;
    w = pool.width;
    d_full += d_skips[i];
    d_cur = conv3_back(d_full, h, w);
    d_cur = conv3_back(d_cur, h, w);
  }

  d_input += d_cur;
  d_input *= config_.input_scale;
  std::vector<Image> result;
  result.reserve(batch);
  for (int b = 0; b < batch; ++b) {
    Image img(channels, height_, width_);
    for (int c = 0; c < channels; ++c)
      std::copy_n(d_input.data() + static_cast<std::ptrdiff_t>(c) * d_input.cols() + b * hw, hw, img.plane(c).data());
    result.push_back(std::move(img));
  }
  return result;
}

double param_l2(const DecoderNet& net) {
  double acc = 0.0;
  for (double v : net.parameters()) acc += v * v;
  return acc;
}

std::string parameter_checksum(std::span<const double> params) { return sha256_hex(params); }

nlohmann::json decoder_to_json(const DecoderNet& net) {
  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["kind"] = "decoder";
  j["config"] = net.config();
  j["height"] = net.height();
  j["width"] = net.width();
  j["parameters"] = std::vector<double>(net.parameters().begin(), net.parameters().end());
  return j;
}

DecoderNet decoder_from_json(const nlohmann::json& j) {
  if (j.value("format_version", -1) != kCheckpointFormatVersion)
    throw IoError("unsupported decoder checkpoint format version");
  if (j.value("kind", std::string()) != "decoder") throw IoError("not a decoder checkpoint");
  DecoderNet net(j.at("config").get<DecoderConfig>(), j.at("height").get<int>(), j.at("width").get<int>());
  const auto params = j.at("parameters").get<std::vector<double>>();
  if (params.size() != net.num_parameters())
    throw IoError("decoder checkpoint holds " + std::to_string(params.size()) + " parameters, expected " +
                  std::to_string(net.num_parameters()));
  std::copy(params.begin(), params.end(), net.parameters().begin());
  return net;
}

}  // namespace kdci
