#pragma once

#include "samatch/core.hpp"

namespace samatch::augment {

/// Sampling ranges for the weak (geometric) and strong (intensity) views.
struct AugmentConfig {
  double crop_min_fraction = 0.75;
  double crop_max_fraction = 1.0;
  double flip_probability = 0.5;
  double brightness_max = 0.2;
  double contrast_min = 0.7;
  double contrast_max = 1.3;
  double gamma_min = 0.7;
  double gamma_max = 1.5;
  double noise_sigma_max = 0.1;
};

/// Intensity-only perturbation applied on top of the weak geometry.
struct IntensityPerturbation {
  double brightness_delta = 0.0;
  double contrast_gain = 1.0;
  double gamma = 1.0;
  double noise_sigma = 0.0;

  static IntensityPerturbation neutral() { return {}; }
};

GeometricTransform sample_weak_transform(Rng& rng, int height, int width,
                                         const AugmentConfig& cfg = {});
IntensityPerturbation sample_perturbation(Rng& rng, const AugmentConfig& cfg = {});

/// Throws PreconditionError if the crop leaves the image or sizes are degenerate.
void check_transform(const GeometricTransform& t, int height, int width);

/// Crop/rotate/flip with bilinear resampling to `t.out_height x t.out_width`.
ImageSample apply_weak(const ImageSample& sample, const GeometricTransform& t);

/// `apply_weak` followed by brightness, contrast, gamma and Gaussian noise,
/// with clipping back into [0,1] after each stage.
ImageSample apply_strong(const ImageSample& sample, const GeometricTransform& t,
                         const IntensityPerturbation& p, Rng& rng);

/// Intensity-only half of `apply_strong`, for callers that already hold the weak view.
PlaneD perturb_intensity(const PlaneD& pixels, const IntensityPerturbation& p, Rng& rng);

/// Same geometry as `apply_weak` with nearest-neighbour resampling, so class
/// ids are copied and never interpolated.
LabelMask transform_mask(const LabelMask& mask, const GeometricTransform& t);
PseudoLabel transform_mask(const PseudoLabel& label, const GeometricTransform& t);

/// Resizing with corner-aligned sampling; same-size resizes are exact copies.
PlaneD resize_bilinear(const PlaneD& src, int out_height, int out_width);
ClassPlane resize_nearest(const ClassPlane& src, int out_height, int out_width);

}  // namespace samatch::augment
