#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "samatch/core.hpp"
#include "samatch/losses.hpp"
#include "samatch/unet.hpp"

namespace samatch {

enum class StrategyKind { fixmatch, unimatch };

struct MatchStrategy {
  StrategyKind kind = StrategyKind::fixmatch;
  double confidence_threshold = 0.95;
  double feature_dropout_p = 0.5;  ///< unimatch only

  /// Strong views each unlabeled sample must carry for this strategy.
  int strong_views() const { return kind == StrategyKind::unimatch ? 2 : 1; }
};

/// Student trained by gradient descent; teacher follows it by EMA only.
template <typename Scalar>
struct TeacherStudent {
  UNet<Scalar> student;
  UNet<Scalar> teacher;
  double ema_decay = 0.99;

  /// Teacher starts as an exact copy of the student.
  static TeacherStudent create(const UNetConfig& config, std::uint64_t seed, double ema_decay = 0.99) {
    TeacherStudent ts;
    ts.student = UNet<Scalar>(config, seed);
    ts.teacher = ts.student;
    ts.ema_decay = ema_decay;
    return ts;
  }
};

/// Stacks same-sized images into the network's 1 x (B*H*W) input layout.
template <typename Scalar>
RowMatrix<Scalar> stack_images(std::span<const ImageSample> images);

template <typename Scalar>
SoftPrediction<Scalar> forward(const UNet<Scalar>& net, const ImageSample& image,
                               const FeatureDropout* feature_perturb = nullptr);
template <typename Scalar>
std::vector<SoftPrediction<Scalar>> forward_batch(const UNet<Scalar>& net, std::span<const ImageSample> images,
                                                  const FeatureDropout* feature_perturb = nullptr);

/// Per-pixel argmax of the network output, as a label map.
template <typename Scalar>
LabelMask predict_labels(const UNet<Scalar>& net, const ImageSample& image);

/// Confidence-gated hard labels: class = argmax, valid = (max prob > threshold).
template <typename Scalar>
PseudoLabel generate_pseudo_label(const SoftPrediction<Scalar>& pred, double threshold);

/// theta_t <- alpha theta_t + (1 - alpha) theta_s, evaluated as
/// theta_t + (1 - alpha)(theta_s - theta_t) so equal weights stay bit-identical.
template <typename Scalar>
void ema_update(UNet<Scalar>& teacher, const UNet<Scalar>& student, double alpha);
template <typename Scalar>
void ema_update(TeacherStudent<Scalar>& ts) {
  ema_update(ts.teacher, ts.student, ts.ema_decay);
}

struct LabeledView {
  ImageSample image;  ///< strongly augmented labeled image
  LabelMask label;    ///< label in the same geometry
};

struct UnlabeledViews {
  ImageSample weak;
  std::vector<ImageSample> strong;  ///< share the weak view's geometry
};

/// Averaged loss components of one branch and their parameter gradient.
template <typename Scalar>
struct BranchGrad {
  LossPair<double> loss;
  Vector<Scalar> grad;
};

/// Dice + CE of the student on labeled views, averaged over the batch.
template <typename Scalar>
BranchGrad<Scalar> supervised_step(const UNet<Scalar>& student, std::span<const LabeledView> batch);

/// Unsupervised term of one strategy against fixed targets.
///
/// fixmatch: the first strong view only.
/// unimatch: both strong views plus a bottleneck-dropout forward of the weak
/// view, averaged with equal weight; the dropout mask derives from `dropout_seed`.
template <typename Scalar>
BranchGrad<Scalar> unsup_step(const MatchStrategy& strategy, const UNet<Scalar>& student,
                              std::span<const UnlabeledViews> batch, std::span<const PseudoLabel> targets,
                              std::uint64_t dropout_seed);

}  // namespace samatch
