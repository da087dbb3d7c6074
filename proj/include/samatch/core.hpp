#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "samatch/error.hpp"

namespace samatch {

/// Row-major 2D array; row-major so that flattening matches the network's
/// pixel ordering (index = row * width + col).
template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using PlaneD = Plane<double>;
using ClassPlane = Plane<int>;
using MaskPlane = Plane<bool>;

/// Channel-major feature layout: one row per channel, one column per pixel.
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Rng = std::mt19937_64;

enum class SampleSource { labeled, unlabeled };

struct PixelSpacing {
  double row_mm = 1.0;
  double col_mm = 1.0;
  bool operator==(const PixelSpacing&) const = default;
};

struct CropWindow {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  bool operator==(const CropWindow&) const = default;
};

/// Axis-aligned geometric augmentation: crop, then `quarter_turns`
/// counter-clockwise rotations, then flips, then resize to the output size.
struct GeometricTransform {
  int quarter_turns = 0;
  bool flip_horizontal = false;
  bool flip_vertical = false;
  CropWindow crop;
  int out_height = 0;
  int out_width = 0;

  static GeometricTransform identity(int height, int width);
  bool operator==(const GeometricTransform&) const = default;
};

/// A 2D grayscale image with intensities in [0, 1].
///
/// `view` records the augmentation that produced this sample from the
/// original slice, so consumers holding source-geometry data (e.g. a
/// reference segmenter) can follow it into the augmented frame.
struct ImageSample {
  std::string id;
  PlaneD pixels;
  std::optional<PixelSpacing> spacing;
  SampleSource source = SampleSource::labeled;
  std::optional<GeometricTransform> view;

  int height() const { return static_cast<int>(pixels.rows()); }
  int width() const { return static_cast<int>(pixels.cols()); }
};

/// Per-pixel class map; 0 is background, 1..class_count are foreground.
struct LabelMask {
  ClassPlane classes;
  int class_count = 1;

  int height() const { return static_cast<int>(classes.rows()); }
  int width() const { return static_cast<int>(classes.cols()); }
};

enum class LabelOrigin { teacher, segmenter, ground_truth };

/// Hard labels with a validity gate; invalid pixels never contribute to a loss.
struct PseudoLabel {
  ClassPlane classes;
  MaskPlane valid;
  LabelOrigin origin = LabelOrigin::teacher;
  int class_count = 1;

  int height() const { return static_cast<int>(classes.rows()); }
  int width() const { return static_cast<int>(classes.cols()); }
};

/// Per-pixel class probabilities, stored (C+1) x (H*W).
template <typename Scalar>
struct SoftPrediction {
  RowMatrix<Scalar> probs;
  int height = 0;
  int width = 0;

  int channels() const { return static_cast<int>(probs.rows()); }
  int class_count() const { return channels() - 1; }
  Scalar at(int channel, int row, int col) const { return probs(channel, row * width + col); }
};

struct PixelViolation {
  int row = 0;
  int col = 0;
  std::string reason;
};

constexpr int kMinImageSide = 8;

/// Throws PreconditionError unless dims >= 8x8 and all pixels are finite in [0,1].
void validate(const ImageSample& sample);
/// Throws unless every class value lies in [0, class_count].
void validate(const LabelMask& mask);
void validate(const PseudoLabel& label);
void require_same_shape(const ImageSample& sample, const LabelMask& mask);

/// First pixel breaking the simplex invariant (channel sum 1 within 1e-6, all
/// entries finite and in [0,1]), or nullopt when the prediction is valid.
template <typename Scalar>
std::optional<PixelViolation> validate_prediction(const SoftPrediction<Scalar>& pred);

template <typename Scalar>
SoftPrediction<Scalar> one_hot(const ClassPlane& classes, int class_count);

/// Per-pixel argmax; ties resolve to the lowest class index.
template <typename Scalar>
ClassPlane argmax(const SoftPrediction<Scalar>& pred);

/// Label treated as an all-valid pseudo-label with ground-truth origin.
PseudoLabel as_pseudo_label(const LabelMask& mask);

/// Min-max normalization into [0,1]; constant images map to all zeros.
PlaneD minmax_normalize(const PlaneD& raw);

}  // namespace samatch
