#include "samatch/core.hpp"

#include <cmath>
#include <sstream>

namespace samatch {

GeometricTransform GeometricTransform::identity(int height, int width) {
  GeometricTransform t;
  t.crop = CropWindow{0, 0, height, width};
  t.out_height = height;
  t.out_width = width;
  return t;
}

void validate(const ImageSample& sample) {
  if (sample.height() < kMinImageSide || sample.width() < kMinImageSide) {
    std::ostringstream msg;
    msg << "image '" << sample.id << "' is " << sample.height() << "x" << sample.width()
        << ", smaller than the 8x8 minimum";
    throw PreconditionError(msg.str());
  }
  for (Eigen::Index r = 0; r < sample.pixels.rows(); ++r) {
    for (Eigen::Index c = 0; c < sample.pixels.cols(); ++c) {
      const double v = sample.pixels(r, c);
      if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
        std::ostringstream msg;
        msg << "image '" << sample.id << "' pixel (" << r << "," << c << ") = " << v
            << " outside [0,1]";
        throw PreconditionError(msg.str());
      }
    }
  }
}

namespace {

void check_classes(const ClassPlane& classes, int class_count, const char* what) {
  if (class_count < 1) throw PreconditionError(std::string(what) + ": class_count must be >= 1");
  if (classes.size() == 0) return;
  if (classes.minCoeff() < 0 || classes.maxCoeff() > class_count) {
    std::ostringstream msg;
    msg << what << ": class values must lie in [0," << class_count << "], found ["
        << classes.minCoeff() << "," << classes.maxCoeff() << "]";
    throw PreconditionError(msg.str());
  }
}

}  // namespace

void validate(const LabelMask& mask) { check_classes(mask.classes, mask.class_count, "label mask"); }

void validate(const PseudoLabel& label) {
  check_classes(label.classes, label.class_count, "pseudo label");
  if (label.valid.rows() != label.classes.rows() || label.valid.cols() != label.classes.cols()) {
    throw ShapeError("pseudo label: validity mask shape differs from class map");
  }
}

void require_same_shape(const ImageSample& sample, const LabelMask& mask) {
  if (sample.height() != mask.height() || sample.width() != mask.width()) {
    std::ostringstream msg;
    msg << "image '" << sample.id << "' is " << sample.height() << "x" << sample.width()
        << " but its label is " << mask.height() << "x" << mask.width();
    throw ShapeError(msg.str());
  }
}

template <typename Scalar>
std::optional<PixelViolation> validate_prediction(const SoftPrediction<Scalar>& pred) {
  const Eigen::Index pixels = static_cast<Eigen::Index>(pred.height) * pred.width;
  if (pred.probs.cols() != pixels || pred.channels() < 2) {
    return PixelViolation{0, 0, "probability array shape does not match declared dims"};
  }
  for (Eigen::Index i = 0; i < pixels; ++i) {
    const int row = static_cast<int>(i / pred.width);
    const int col = static_cast<int>(i % pred.width);
    double sum = 0.0;
    for (Eigen::Index c = 0; c < pred.probs.rows(); ++c) {
      const double p = static_cast<double>(pred.probs(c, i));
      if (!std::isfinite(p)) return PixelViolation{row, col, "non-finite probability"};
      if (p < 0.0 || p > 1.0) return PixelViolation{row, col, "probability outside [0,1]"};
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      std::ostringstream msg;
      msg << "channel sum " << sum << " differs from 1";
      return PixelViolation{row, col, msg.str()};
    }
  }
  return std::nullopt;
}

template <typename Scalar>
SoftPrediction<Scalar> one_hot(const ClassPlane& classes, int class_count) {
  SoftPrediction<Scalar> pred;
  pred.height = static_cast<int>(classes.rows());
  pred.width = static_cast<int>(classes.cols());
  pred.probs = RowMatrix<Scalar>::Zero(class_count + 1, classes.size());
  for (Eigen::Index i = 0; i < classes.size(); ++i) {
    const int k = classes.data()[i];
    if (k < 0 || k > class_count) throw PreconditionError("one_hot: class value out of range");
    pred.probs(k, i) = Scalar(1);
  }
  return pred;
}

template <typename Scalar>
ClassPlane argmax(const SoftPrediction<Scalar>& pred) {
  ClassPlane out(pred.height, pred.width);
  for (Eigen::Index i = 0; i < pred.probs.cols(); ++i) {
    Eigen::Index best = 0;
    pred.probs.col(i).maxCoeff(&best);
    out.data()[i] = static_cast<int>(best);
  }
  return out;
}

PseudoLabel as_pseudo_label(const LabelMask& mask) {
  PseudoLabel label;
  label.classes = mask.classes;
  label.valid = MaskPlane::Constant(mask.classes.rows(), mask.classes.cols(), true);
  label.origin = LabelOrigin::ground_truth;
  label.class_count = mask.class_count;
  return label;
}

PlaneD minmax_normalize(const PlaneD& raw) {
  const double lo = raw.minCoeff();
  const double hi = raw.maxCoeff();
  if (!(hi > lo)) return PlaneD::Zero(raw.rows(), raw.cols());
  return (raw - lo) / (hi - lo);
}

template std::optional<PixelViolation> validate_prediction(const SoftPrediction<float>&);
template std::optional<PixelViolation> validate_prediction(const SoftPrediction<double>&);
template SoftPrediction<float> one_hot<float>(const ClassPlane&, int);
template SoftPrediction<double> one_hot<double>(const ClassPlane&, int);
template ClassPlane argmax(const SoftPrediction<float>&);
template ClassPlane argmax(const SoftPrediction<double>&);

}  // namespace samatch
