#include "samatch/unet.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace samatch {

namespace {

template <typename Scalar>
using Matrix = RowMatrix<Scalar>;

int level_channels(const UNetConfig& cfg, int level) { return cfg.base_channels << level; }

/// 3x3, zero-padded im2col. Row index = channel*9 + ky*3 + kx.
template <typename Scalar>
void im2col3x3(const Matrix<Scalar>& x, int batch, int h, int w, Matrix<Scalar>& col) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  col.resize(x.rows() * 9, x.cols());
  for (Eigen::Index ci = 0; ci < x.rows(); ++ci) {
    const Scalar* src = x.row(ci).data();
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        Scalar* dst = col.row(ci * 9 + ky * 3 + kx).data();
        const int dy = ky - 1;
        const int dx = kx - 1;
        const int c_lo = std::max(0, -dx);
        const int c_hi = std::min(w, w - dx);
        for (int b = 0; b < batch; ++b) {
          for (int r = 0; r < h; ++r) {
            Scalar* out = dst + b * hw + static_cast<Eigen::Index>(r) * w;
            const int rr = r + dy;
            if (rr < 0 || rr >= h) {
              std::fill(out, out + w, Scalar(0));
              continue;
            }
            const Scalar* in = src + b * hw + static_cast<Eigen::Index>(rr) * w + dx;
            for (int c = 0; c < c_lo; ++c) out[c] = Scalar(0);
            std::memcpy(out + c_lo, in + c_lo, sizeof(Scalar) * static_cast<std::size_t>(c_hi - c_lo));
            for (int c = c_hi; c < w; ++c) out[c] = Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im3x3(const Matrix<Scalar>& col, int batch, int h, int w, Matrix<Scalar>& dx_out) {
  const Eigen::Index channels = col.rows() / 9;
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  dx_out = Matrix<Scalar>::Zero(channels, col.cols());
  for (Eigen::Index ci = 0; ci < channels; ++ci) {
    Scalar* dst = dx_out.row(ci).data();
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Scalar* src = col.row(ci * 9 + ky * 3 + kx).data();
        const int dy = ky - 1;
        const int dx = kx - 1;
        const int c_lo = std::max(0, -dx);
        const int c_hi = std::min(w, w - dx);
        for (int b = 0; b < batch; ++b) {
          for (int r = 0; r < h; ++r) {
            const int rr = r + dy;
            if (rr < 0 || rr >= h) continue;
            const Scalar* in = src + b * hw + static_cast<Eigen::Index>(r) * w;
            Scalar* out = dst + b * hw + static_cast<Eigen::Index>(rr) * w + dx;
            for (int c = c_lo; c < c_hi; ++c) out[c] += in[c];
          }
        }
      }
    }
  }
}

template <typename Scalar>
Matrix<Scalar> maxpool2(const Matrix<Scalar>& x, int batch, int h, int w, std::vector<Eigen::Index>& argmax) {
  const int oh = h / 2;
  const int ow = w / 2;
  const Eigen::Index in_hw = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index out_hw = static_cast<Eigen::Index>(oh) * ow;
  Matrix<Scalar> out(x.rows(), batch * out_hw);
  argmax.resize(static_cast<std::size_t>(out.size()));
  for (Eigen::Index ch = 0; ch < x.rows(); ++ch) {
    const Scalar* src = x.row(ch).data();
    Scalar* dst = out.row(ch).data();
    for (int b = 0; b < batch; ++b) {
      for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
          const Eigen::Index base = b * in_hw + static_cast<Eigen::Index>(2 * r) * w + 2 * c;
          Eigen::Index best = base;
          for (const Eigen::Index cand : {base + 1, base + w, base + w + 1}) {
            if (src[cand] > src[best]) best = cand;
          }
          const Eigen::Index o = b * out_hw + static_cast<Eigen::Index>(r) * ow + c;
          dst[o] = src[best];
          argmax[static_cast<std::size_t>(ch * out.cols() + o)] = best;
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> upsample2(const Matrix<Scalar>& x, int batch, int h, int w) {
  const int oh = h * 2;
  const int ow = w * 2;
  const Eigen::Index in_hw = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index out_hw = static_cast<Eigen::Index>(oh) * ow;
  Matrix<Scalar> out(x.rows(), batch * out_hw);
  for (Eigen::Index ch = 0; ch < x.rows(); ++ch) {
    const Scalar* src = x.row(ch).data();
    Scalar* dst = out.row(ch).data();
    for (int b = 0; b < batch; ++b) {
      for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
          dst[b * out_hw + static_cast<Eigen::Index>(r) * ow + c] =
              src[b * in_hw + static_cast<Eigen::Index>(r / 2) * w + c / 2];
        }
      }
    }
  }
  return out;
}

/// Adjoint of nearest 2x upsampling: sums each 2x2 block.
template <typename Scalar>
Matrix<Scalar> upsample2_backward(const Matrix<Scalar>& g, int batch, int h, int w) {
  const int ow = w * 2;
  const Eigen::Index in_hw = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index out_hw = static_cast<Eigen::Index>(h * 2) * ow;
  Matrix<Scalar> out = Matrix<Scalar>::Zero(g.rows(), batch * in_hw);
  for (Eigen::Index ch = 0; ch < g.rows(); ++ch) {
    const Scalar* src = g.row(ch).data();
    Scalar* dst = out.row(ch).data();
    for (int b = 0; b < batch; ++b) {
      for (int r = 0; r < 2 * h; ++r) {
        for (int c = 0; c < ow; ++c) {
          dst[b * in_hw + static_cast<Eigen::Index>(r / 2) * w + c / 2] +=
              src[b * out_hw + static_cast<Eigen::Index>(r) * ow + c];
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Eigen::Array<Scalar, Eigen::Dynamic, 1> dropout_scales(const FeatureDropout& fp, int batch, Eigen::Index channels) {
  Eigen::Array<Scalar, Eigen::Dynamic, 1> scale(batch * channels);
  if (fp.probability <= 0.0) {
    scale.setOnes();
    return scale;
  }
  Rng rng(fp.seed);
  std::bernoulli_distribution keep(1.0 - std::min(fp.probability, 1.0));
  const Scalar kept = fp.probability >= 1.0 ? Scalar(0) : Scalar(1.0 / (1.0 - fp.probability));
  for (Eigen::Index i = 0; i < scale.size(); ++i) scale(i) = keep(rng) ? kept : Scalar(0);
  return scale;
}

/// Multiplies channel `ch` of sample `b` by scale(b * channels + ch).
template <typename Scalar>
void scale_channels(Matrix<Scalar>& x, const Eigen::Array<Scalar, Eigen::Dynamic, 1>& scale, int batch, Eigen::Index hw) {
  for (Eigen::Index ch = 0; ch < x.rows(); ++ch) {
    for (int b = 0; b < batch; ++b) {
      x.row(ch).segment(b * hw, hw) *= scale(b * x.rows() + ch);
    }
  }
}

std::uint64_t fnv_mix(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffu;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

template <typename Scalar>
UNet<Scalar>::UNet(const UNetConfig& config, std::uint64_t seed) : config_(config) {
  build_layout();
  initialize(seed);
}

template <typename Scalar>
void UNet<Scalar>::add_conv(const std::string& name, int in_channels, int out_channels, int kernel) {
  const Eigen::Index offset = layout_.empty() ? 0 : layout_.back().offset + layout_.back().size();
  ParamBlock weight{name + ".weight", offset, out_channels, static_cast<Eigen::Index>(in_channels) * kernel * kernel};
  ParamBlock bias{name + ".bias", offset + weight.size(), out_channels, 1};
  layout_.push_back(weight);
  layout_.push_back(bias);
  convs_.push_back(ConvSpec{weight, bias, in_channels, out_channels});
}

template <typename Scalar>
void UNet<Scalar>::build_layout() {
  if (config_.depth < 2) throw ConfigError("network depth must be >= 2");
  if (config_.base_channels < 1) throw ConfigError("network base_channels must be >= 1");
  if (config_.class_count < 1) throw ConfigError("network class_count must be >= 1");
  layout_.clear();
  convs_.clear();
  int in = 1;
  for (int l = 0; l < config_.depth; ++l) {
    const int ch = level_channels(config_, l);
    add_conv("enc" + std::to_string(l) + ".conv1", in, ch, 3);
    add_conv("enc" + std::to_string(l) + ".conv2", ch, ch, 3);
    in = ch;
  }
  for (int l = config_.depth - 2; l >= 0; --l) {
    const int ch = level_channels(config_, l);
    add_conv("dec" + std::to_string(l) + ".conv1", level_channels(config_, l + 1) + ch, ch, 3);
    add_conv("dec" + std::to_string(l) + ".conv2", ch, ch, 3);
  }
  add_conv("head", level_channels(config_, 0), config_.output_channels(), 1);
}

template <typename Scalar>
void UNet<Scalar>::initialize(std::uint64_t seed) {
  params_ = Params::Zero(layout_.back().offset + layout_.back().size());
  Rng rng(seed);
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const auto& w = convs_[i].weight;
    const bool head = i + 1 == convs_.size();
    const double stddev = std::sqrt((head ? 1.0 : 2.0) / static_cast<double>(w.cols));
    std::normal_distribution<double> normal(0.0, stddev);
    for (Eigen::Index k = 0; k < w.size(); ++k) params_(w.offset + k) = static_cast<Scalar>(normal(rng));
  }
}

template <typename Scalar>
void UNet<Scalar>::assign(const UNetConfig& config, std::vector<ParamBlock> layout, Params params) {
  config_ = config;
  build_layout();
  if (layout.size() != layout_.size() || params.size() != layout_.back().offset + layout_.back().size()) {
    throw ShapeError("parameter layout does not match the network architecture");
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name != layout_[i].name || layout[i].size() != layout_[i].size()) {
      throw ShapeError("parameter block '" + layout[i].name + "' does not match the architecture");
    }
  }
  params_ = std::move(params);
}

template <typename Scalar>
typename UNet<Scalar>::Matrix UNet<Scalar>::forward(const Matrix& input, int batch, int height, int width,
                                                    const FeatureDropout* dropout, Cache* cache) const {
  const int multiple = config_.size_multiple();
  if (height % multiple != 0 || width % multiple != 0 || height < multiple || width < multiple) {
    std::ostringstream msg;
    msg << "input " << height << "x" << width << " is not divisible by " << multiple
        << " (network depth " << config_.depth << ")";
    throw ShapeError(msg.str());
  }
  if (input.rows() != 1 || input.cols() != static_cast<Eigen::Index>(batch) * height * width) {
    throw ShapeError("network input must be 1 x (batch*height*width)");
  }
  if (cache) {
    cache->batch = batch;
    cache->height = height;
    cache->width = width;
    cache->columns.assign(convs_.size() - 1, Matrix());
    cache->activations.assign(convs_.size() - 1, Matrix());
    cache->pool_argmax.assign(static_cast<std::size_t>(config_.depth - 1), {});
    cache->dropout_scale.reset();
  }

  Matrix col;
  std::size_t conv_index = 0;
  auto conv3x3 = [&](const Matrix& x, int h, int w) {
    const ConvSpec& spec = convs_[conv_index];
    im2col3x3(x, batch, h, w, col);
    Eigen::Map<const Matrix> weight(params_.data() + spec.weight.offset, spec.weight.rows, spec.weight.cols);
    Eigen::Map<const Vector<Scalar>> bias(params_.data() + spec.bias.offset, spec.bias.rows);
    Matrix out = weight * col;
    out.colwise() += bias;
    out = out.cwiseMax(Scalar(0));
    if (cache) {
      cache->columns[conv_index] = std::move(col);
      cache->activations[conv_index] = out;
    }
    ++conv_index;
    return out;
  };

  std::vector<Matrix> skips;
  Matrix x = input;
  int h = height;
  int w = width;
  for (int l = 0; l < config_.depth; ++l) {
    x = conv3x3(x, h, w);
    x = conv3x3(x, h, w);
    if (l + 1 < config_.depth) {
      skips.push_back(x);
      std::vector<Eigen::Index> argmax;
      x = maxpool2(x, batch, h, w, argmax);
      if (cache) cache->pool_argmax[static_cast<std::size_t>(l)] = std::move(argmax);
      h /= 2;
      w /= 2;
    }
  }
  if (dropout) {
    auto scale = dropout_scales<Scalar>(*dropout, batch, x.rows());
    scale_channels(x, scale, batch, static_cast<Eigen::Index>(h) * w);
    if (cache) cache->dropout_scale = std::move(scale);
  }
  for (int l = config_.depth - 2; l >= 0; --l) {
    Matrix up = upsample2(x, batch, h, w);
    h *= 2;
    w *= 2;
    const Matrix& skip = skips[static_cast<std::size_t>(l)];
    Matrix cat(up.rows() + skip.rows(), up.cols());
    cat << up, skip;
    x = conv3x3(cat, h, w);
    x = conv3x3(x, h, w);
  }

  const ConvSpec& head = convs_.back();
  Eigen::Map<const Matrix> hw(params_.data() + head.weight.offset, head.weight.rows, head.weight.cols);
  Eigen::Map<const Vector<Scalar>> hb(params_.data() + head.bias.offset, head.bias.rows);
  Matrix logits = hw * x;
  logits.colwise() += hb;
  const auto maxes = logits.colwise().maxCoeff().eval();
  Matrix probs = (logits.rowwise() - maxes).array().exp().matrix();
  const auto sums = probs.colwise().sum().eval();
  probs.array().rowwise() /= sums.array();
  if (cache) cache->probs = probs;
  return probs;
}

template <typename Scalar>
typename UNet<Scalar>::Params UNet<Scalar>::backward(const Cache& cache, const Matrix& dprobs) const {
  if (cache.probs.size() == 0) throw PreconditionError("backward called without a recorded forward pass");
  if (dprobs.rows() != cache.probs.rows() || dprobs.cols() != cache.probs.cols()) {
    throw ShapeError("loss gradient shape does not match network output");
  }
  const int batch = cache.batch;
  Params grad = Params::Zero(params_.size());

  const Matrix& p = cache.probs;
  const auto inner = p.cwiseProduct(dprobs).colwise().sum().eval();
  Matrix dlogits = p.cwiseProduct((dprobs.rowwise() - inner));

  const ConvSpec& head = convs_.back();
  const Matrix& head_in = cache.activations.back();
  Eigen::Map<const Matrix> hw(params_.data() + head.weight.offset, head.weight.rows, head.weight.cols);
  Eigen::Map<Matrix>(grad.data() + head.weight.offset, head.weight.rows, head.weight.cols) =
      dlogits * head_in.transpose();
  grad.segment(head.bias.offset, head.bias.rows) = dlogits.rowwise().sum();
  Matrix dx = hw.transpose() * dlogits;

  // Walks convs_ in reverse; `conv_backward` consumes the gradient w.r.t.
  // a conv's ReLU output and returns the gradient w.r.t. its input.
  auto conv_backward = [&](std::size_t index, const Matrix& dout, int h, int w, bool need_input) {
    const ConvSpec& spec = convs_[index];
    Matrix dpre = (cache.activations[index].array() > Scalar(0)).select(dout, Scalar(0));
    const Matrix& col = cache.columns[index];
    Eigen::Map<Matrix>(grad.data() + spec.weight.offset, spec.weight.rows, spec.weight.cols) =
        dpre * col.transpose();
    grad.segment(spec.bias.offset, spec.bias.rows) = dpre.rowwise().sum();
    Matrix din;
    if (need_input) {
      Eigen::Map<const Matrix> weight(params_.data() + spec.weight.offset, spec.weight.rows, spec.weight.cols);
      const Matrix dcol = weight.transpose() * dpre;
      col2im3x3(dcol, batch, h, w, din);
    }
    return din;
  };

  const int depth = config_.depth;
  const int encoder_convs = 2 * depth;
  std::vector<Matrix> dskips(static_cast<std::size_t>(depth - 1));
  int h = cache.height;
  int w = cache.width;
  for (int l = 0; l <= depth - 2; ++l) {
    const std::size_t first = static_cast<std::size_t>(encoder_convs + 2 * (depth - 2 - l));
    dx = conv_backward(first + 1, dx, h, w, true);
    dx = conv_backward(first, dx, h, w, true);
    const Eigen::Index up_rows = level_channels(config_, l + 1);
    dskips[static_cast<std::size_t>(l)] = dx.bottomRows(dx.rows() - up_rows);
    const Matrix dup = dx.topRows(up_rows);
    h /= 2;
    w /= 2;
    dx = upsample2_backward(dup, batch, h, w);
  }
  if (cache.dropout_scale) {
    scale_channels(dx, *cache.dropout_scale, batch, static_cast<Eigen::Index>(h) * w);
  }
  for (int l = depth - 1; l >= 0; --l) {
    if (l + 1 < depth) {
      const auto& argmax = cache.pool_argmax[static_cast<std::size_t>(l)];
      h *= 2;
      w *= 2;
      Matrix dfull = dskips[static_cast<std::size_t>(l)];
      for (Eigen::Index ch = 0; ch < dx.rows(); ++ch) {
        for (Eigen::Index o = 0; o < dx.cols(); ++o) {
          dfull(ch, argmax[static_cast<std::size_t>(ch * dx.cols() + o)]) += dx(ch, o);
        }
      }
      dx = std::move(dfull);
    }
    const auto first = static_cast<std::size_t>(2 * l);
    dx = conv_backward(first + 1, dx, h, w, true);
    dx = conv_backward(first, dx, h, w, l > 0);
  }
  return grad;
}

template <typename Scalar>
std::uint64_t UNet<Scalar>::activation_signature(const Cache& cache) const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& act : cache.activations) {
    for (Eigen::Index i = 0; i < act.size(); ++i) h = fnv_mix(h, act.data()[i] > Scalar(0) ? 1u : 0u);
  }
  for (const auto& level : cache.pool_argmax) {
    for (const auto idx : level) h = fnv_mix(h, static_cast<std::uint64_t>(idx));
  }
  return h;
}

template class UNet<float>;
template class UNet<double>;

}  // namespace samatch
