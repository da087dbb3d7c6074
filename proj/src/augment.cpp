#include "samatch/augment.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace samatch::augment {

namespace {

struct SourceCoord {
  double row;
  double col;
};

/// Maps output pixels back into source-image coordinates.
class InverseMap {
 public:
  InverseMap(const GeometricTransform& t) : t_(t) {
    const bool odd = (t.quarter_turns % 2) != 0;
    inter_h_ = odd ? t.crop.width : t.crop.height;
    inter_w_ = odd ? t.crop.height : t.crop.width;
  }

  SourceCoord operator()(int r, int c) const {
    double y = t_.out_height > 1 ? static_cast<double>(r) * (inter_h_ - 1) / (t_.out_height - 1) : 0.0;
    double x = t_.out_width > 1 ? static_cast<double>(c) * (inter_w_ - 1) / (t_.out_width - 1) : 0.0;
    if (t_.flip_vertical) y = (inter_h_ - 1) - y;
    if (t_.flip_horizontal) x = (inter_w_ - 1) - x;
    const double ch = t_.crop.height - 1;
    const double cw = t_.crop.width - 1;
    double ar = y;
    double ac = x;
    switch (t_.quarter_turns) {
      case 1: ar = x; ac = cw - y; break;
      case 2: ar = ch - y; ac = cw - x; break;
      case 3: ar = ch - x; ac = y; break;
      default: break;
    }
    return {t_.crop.top + ar, t_.crop.left + ac};
  }

 private:
  const GeometricTransform& t_;
  int inter_h_ = 0;
  int inter_w_ = 0;
};

double sample_bilinear(const PlaneD& src, double y, double x) {
  const auto h = static_cast<int>(src.rows());
  const auto w = static_cast<int>(src.cols());
  const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, h - 1);
  const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double wy = y - y0;
  const double wx = x - x0;
  if (wy == 0.0 && wx == 0.0) return src(y0, x0);
  const double top = src(y0, x0) * (1.0 - wx) + src(y0, x1) * wx;
  const double bottom = src(y1, x0) * (1.0 - wx) + src(y1, x1) * wx;
  return top * (1.0 - wy) + bottom * wy;
}

template <typename Array>
typename Array::Scalar sample_nearest(const Array& src, double y, double x) {
  const auto r = std::clamp(static_cast<Eigen::Index>(std::lround(y)), Eigen::Index{0}, src.rows() - 1);
  const auto c = std::clamp(static_cast<Eigen::Index>(std::lround(x)), Eigen::Index{0}, src.cols() - 1);
  return src(r, c);
}

template <typename Array>
Array warp_nearest(const Array& src, const GeometricTransform& t) {
  const InverseMap map(t);
  Array out(t.out_height, t.out_width);
  for (int r = 0; r < t.out_height; ++r) {
    for (int c = 0; c < t.out_width; ++c) {
      const auto s = map(r, c);
      out(r, c) = sample_nearest(src, s.row, s.col);
    }
  }
  return out;
}

std::optional<PixelSpacing> warp_spacing(const std::optional<PixelSpacing>& spacing,
                                         const GeometricTransform& t) {
  if (!spacing) return std::nullopt;
  PixelSpacing s = *spacing;
  int h = t.crop.height;
  int w = t.crop.width;
  if (t.quarter_turns % 2 != 0) {
    std::swap(s.row_mm, s.col_mm);
    std::swap(h, w);
  }
  s.row_mm *= static_cast<double>(h) / t.out_height;
  s.col_mm *= static_cast<double>(w) / t.out_width;
  return s;
}

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

GeometricTransform sample_weak_transform(Rng& rng, int height, int width, const AugmentConfig& cfg) {
  if (height < kMinImageSide || width < kMinImageSide) {
    throw PreconditionError("sample_weak_transform: image must be at least 8x8");
  }
  std::uniform_int_distribution<int> turns(0, 3);
  std::bernoulli_distribution flip(cfg.flip_probability);
  std::uniform_real_distribution<double> fraction(cfg.crop_min_fraction, cfg.crop_max_fraction);

  GeometricTransform t;
  t.quarter_turns = turns(rng);
  t.flip_horizontal = flip(rng);
  t.flip_vertical = flip(rng);
  const auto side = [&](int full) {
    const int lo = (full + 1) / 2;
    return std::clamp(static_cast<int>(std::lround(fraction(rng) * full)), lo, full);
  };
  t.crop.height = side(height);
  t.crop.width = side(width);
  t.crop.top = std::uniform_int_distribution<int>(0, height - t.crop.height)(rng);
  t.crop.left = std::uniform_int_distribution<int>(0, width - t.crop.width)(rng);
  t.out_height = height;
  t.out_width = width;
  return t;
}

IntensityPerturbation sample_perturbation(Rng& rng, const AugmentConfig& cfg) {
  using Uniform = std::uniform_real_distribution<double>;
  IntensityPerturbation p;
  p.brightness_delta = Uniform(-cfg.brightness_max, cfg.brightness_max)(rng);
  p.contrast_gain = Uniform(cfg.contrast_min, cfg.contrast_max)(rng);
  p.gamma = Uniform(cfg.gamma_min, cfg.gamma_max)(rng);
  p.noise_sigma = Uniform(0.0, cfg.noise_sigma_max)(rng);
  return p;
}

void check_transform(const GeometricTransform& t, int height, int width) {
  const auto& w = t.crop;
  const bool inside = w.top >= 0 && w.left >= 0 && w.height >= 1 && w.width >= 1 &&
                      w.top + w.height <= height && w.left + w.width <= width;
  if (!inside) {
    std::ostringstream msg;
    msg << "crop window (" << w.top << "," << w.left << "," << w.height << "," << w.width
        << ") is not inside a " << height << "x" << width << " image";
    throw PreconditionError(msg.str());
  }
  if (t.quarter_turns < 0 || t.quarter_turns > 3) {
    throw PreconditionError("quarter_turns must be in {0,1,2,3}");
  }
  if (t.out_height < 1 || t.out_width < 1) throw PreconditionError("output size must be positive");
}

ImageSample apply_weak(const ImageSample& sample, const GeometricTransform& t) {
  check_transform(t, sample.height(), sample.width());
  const InverseMap map(t);
  ImageSample out;
  out.id = sample.id;
  out.source = sample.source;
  out.spacing = warp_spacing(sample.spacing, t);
  out.view = t;
  out.pixels.resize(t.out_height, t.out_width);
  for (int r = 0; r < t.out_height; ++r) {
    for (int c = 0; c < t.out_width; ++c) {
      const auto s = map(r, c);
      out.pixels(r, c) = sample_bilinear(sample.pixels, s.row, s.col);
    }
  }
  return out;
}

PlaneD perturb_intensity(const PlaneD& pixels, const IntensityPerturbation& p, Rng& rng) {
  PlaneD x = (pixels + p.brightness_delta).cwiseMax(0.0).cwiseMin(1.0);
  if (p.contrast_gain != 1.0) {
    const double mean = x.mean();
    x = ((x - mean) * p.contrast_gain + mean).cwiseMax(0.0).cwiseMin(1.0);
  }
  if (p.gamma != 1.0) x = x.pow(p.gamma);
  if (p.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, p.noise_sigma);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = clip01(x.data()[i] + noise(rng));
  }
  return x;
}

ImageSample apply_strong(const ImageSample& sample, const GeometricTransform& t,
                         const IntensityPerturbation& p, Rng& rng) {
  ImageSample out = apply_weak(sample, t);
  out.pixels = perturb_intensity(out.pixels, p, rng);
  return out;
}

LabelMask transform_mask(const LabelMask& mask, const GeometricTransform& t) {
  check_transform(t, mask.height(), mask.width());
  return LabelMask{warp_nearest(mask.classes, t), mask.class_count};
}

PseudoLabel transform_mask(const PseudoLabel& label, const GeometricTransform& t) {
  check_transform(t, label.height(), label.width());
  PseudoLabel out;
  out.classes = warp_nearest(label.classes, t);
  out.valid = warp_nearest(label.valid, t);
  out.origin = label.origin;
  out.class_count = label.class_count;
  return out;
}

PlaneD resize_bilinear(const PlaneD& src, int out_height, int out_width) {
  GeometricTransform t = GeometricTransform::identity(static_cast<int>(src.rows()),
                                                      static_cast<int>(src.cols()));
  t.out_height = out_height;
  t.out_width = out_width;
  const InverseMap map(t);
  PlaneD out(out_height, out_width);
  for (int r = 0; r < out_height; ++r) {
    for (int c = 0; c < out_width; ++c) {
      const auto s = map(r, c);
      out(r, c) = sample_bilinear(src, s.row, s.col);
    }
  }
  return out;
}

ClassPlane resize_nearest(const ClassPlane& src, int out_height, int out_width) {
  GeometricTransform t = GeometricTransform::identity(static_cast<int>(src.rows()),
                                                      static_cast<int>(src.cols()));
  t.out_height = out_height;
  t.out_width = out_width;
  return warp_nearest(src, t);
}

}  // namespace samatch::augment
