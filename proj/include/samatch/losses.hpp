#pragma once

#include "samatch/core.hpp"

namespace samatch {

constexpr double kDiceSmoothing = 1e-5;
constexpr double kProbabilityFloor = 1e-12;

/// Loss value with its gradient w.r.t. the prediction's probabilities.
template <typename Scalar>
struct LossWithGrad {
  Scalar value = 0;
  RowMatrix<Scalar> grad;
};

/// Dice and cross-entropy components of one supervision term.
template <typename Scalar>
struct LossPair {
  Scalar dice = 0;
  Scalar ce = 0;
  Scalar sum() const { return dice + ce; }
};

/// Soft multi-class Dice loss, 1 - mean_c (2 sum p_c t_c + eps) / (sum p_c + sum t_c + eps),
/// over valid pixels only; classes 0..C all participate. Zero valid pixels -> 0.
template <typename Scalar>
Scalar dice_loss(const SoftPrediction<Scalar>& pred, const PseudoLabel& target);
template <typename Scalar>
Scalar dice_loss(const SoftPrediction<Scalar>& pred, const LabelMask& target);
template <typename Scalar>
LossWithGrad<Scalar> dice_loss_grad(const SoftPrediction<Scalar>& pred, const PseudoLabel& target);

/// Mean over valid pixels of -log(max(p[target], 1e-12)). Zero valid pixels -> 0.
template <typename Scalar>
Scalar ce_loss(const SoftPrediction<Scalar>& pred, const PseudoLabel& target);
template <typename Scalar>
Scalar ce_loss(const SoftPrediction<Scalar>& pred, const LabelMask& target);
template <typename Scalar>
LossWithGrad<Scalar> ce_loss_grad(const SoftPrediction<Scalar>& pred, const PseudoLabel& target);

template <typename Scalar>
LossPair<Scalar> unsupervised_loss(const SoftPrediction<Scalar>& student_pred, const PseudoLabel& pseudo);
template <typename Scalar>
LossPair<Scalar> supervised_loss(const SoftPrediction<Scalar>& pred, const LabelMask& label);

/// Gaussian ramp-up: lambda_max * exp(-5 (1 - min(t, L)/L)^2).
double lambda_schedule(long iteration, long ramp_length, double lambda_max);

struct LossBreakdown {
  double sup_dice = 0;
  double sup_ce = 0;
  double unsup_dice = 0;
  double unsup_ce = 0;
  double lambda = 0;
  double total = 0;
};

/// total = (sup_dice + sup_ce) + lambda * (unsup_dice + unsup_ce).
LossBreakdown total_loss(const LossPair<double>& sup, const LossPair<double>& unsup, double lambda);

}  // namespace samatch
