#include "samatch/losses.hpp"

#include <algorithm>
#include <cmath>

namespace samatch {

namespace {

template <typename Scalar>
void check_target(const SoftPrediction<Scalar>& pred, const PseudoLabel& target) {
  if (pred.height != target.height() || pred.width != target.width()) {
    throw ShapeError("prediction and target shapes differ");
  }
  if (target.valid.rows() != target.classes.rows() || target.valid.cols() != target.classes.cols()) {
    throw ShapeError("target validity mask shape differs from its class map");
  }
  if (target.classes.size() > 0 && target.classes.maxCoeff() >= pred.channels()) {
    throw ShapeError("target contains a class the prediction has no channel for");
  }
}

template <typename Scalar>
LossWithGrad<Scalar> dice_impl(const SoftPrediction<Scalar>& pred, const PseudoLabel& target, bool want_grad) {
  check_target(pred, target);
  const Eigen::Index channels = pred.probs.rows();
  const Eigen::Index pixels = pred.probs.cols();
  LossWithGrad<Scalar> out;
  if (want_grad) out.grad = RowMatrix<Scalar>::Zero(channels, pixels);
  if (!target.valid.any()) return out;

  const double eps = kDiceSmoothing;
  std::vector<double> inter(static_cast<std::size_t>(channels), 0.0);
  std::vector<double> psum(static_cast<std::size_t>(channels), 0.0);
  std::vector<double> tsum(static_cast<std::size_t>(channels), 0.0);
  for (Eigen::Index i = 0; i < pixels; ++i) {
    if (!target.valid.data()[i]) continue;
    const int t = target.classes.data()[i];
    for (Eigen::Index c = 0; c < channels; ++c) psum[static_cast<std::size_t>(c)] += pred.probs(c, i);
    inter[static_cast<std::size_t>(t)] += pred.probs(t, i);
    tsum[static_cast<std::size_t>(t)] += 1.0;
  }
  double mean_dice = 0.0;
  std::vector<double> denom(static_cast<std::size_t>(channels));
  std::vector<double> numer(static_cast<std::size_t>(channels));
  for (std::size_t c = 0; c < static_cast<std::size_t>(channels); ++c) {
    numer[c] = 2.0 * inter[c] + eps;
    denom[c] = psum[c] + tsum[c] + eps;
    mean_dice += numer[c] / denom[c];
  }
  mean_dice /= static_cast<double>(channels);
  out.value = static_cast<Scalar>(1.0 - mean_dice);

  if (want_grad) {
    const double scale = -1.0 / static_cast<double>(channels);
    for (Eigen::Index i = 0; i < pixels; ++i) {
      if (!target.valid.data()[i]) continue;
      const int t = target.classes.data()[i];
      for (Eigen::Index c = 0; c < channels; ++c) {
        const auto k = static_cast<std::size_t>(c);
        const double tc = c == t ? 1.0 : 0.0;
        const double d = (2.0 * tc * denom[k] - numer[k]) / (denom[k] * denom[k]);
        out.grad(c, i) = static_cast<Scalar>(scale * d);
      }
    }
  }
  return out;
}

template <typename Scalar>
LossWithGrad<Scalar> ce_impl(const SoftPrediction<Scalar>& pred, const PseudoLabel& target, bool want_grad) {
  check_target(pred, target);
  const Eigen::Index pixels = pred.probs.cols();
  LossWithGrad<Scalar> out;
  if (want_grad) out.grad = RowMatrix<Scalar>::Zero(pred.probs.rows(), pixels);
  const auto count = static_cast<double>(target.valid.count());
  if (count == 0.0) return out;
  double total = 0.0;
  for (Eigen::Index i = 0; i < pixels; ++i) {
    if (!target.valid.data()[i]) continue;
    const int t = target.classes.data()[i];
    const double p = static_cast<double>(pred.probs(t, i));
    total -= std::log(std::max(p, kProbabilityFloor));
    if (want_grad && p > kProbabilityFloor) out.grad(t, i) = static_cast<Scalar>(-1.0 / (count * p));
  }
  out.value = static_cast<Scalar>(total / count);
  return out;
}

}  // namespace

template <typename Scalar>
Scalar dice_loss(const SoftPrediction<Scalar>& pred, const PseudoLabel& target) {
  return dice_impl(pred, target, false).value;
}
template <typename Scalar>
Scalar dice_loss(const SoftPrediction<Scalar>& pred, const LabelMask& target) {
  return dice_impl(pred, as_pseudo_label(target), false).value;
}
template <typename Scalar>
LossWithGrad<Scalar> dice_loss_grad(const SoftPrediction<Scalar>& pred, const PseudoLabel& target) {
  return dice_impl(pred, target, true);
}

template <typename Scalar>
Scalar ce_loss(const SoftPrediction<Scalar>& pred, const PseudoLabel& target) {
  return ce_impl(pred, target, false).value;
}
template <typename Scalar>
Scalar ce_loss(const SoftPrediction<Scalar>& pred, const LabelMask& target) {
  return ce_impl(pred, as_pseudo_label(target), false).value;
}
template <typename Scalar>
LossWithGrad<Scalar> ce_loss_grad(const SoftPrediction<Scalar>& pred, const PseudoLabel& target) {
  return ce_impl(pred, target, true);
}

template <typename Scalar>
LossPair<Scalar> unsupervised_loss(const SoftPrediction<Scalar>& student_pred, const PseudoLabel& pseudo) {
  return {dice_loss(student_pred, pseudo), ce_loss(student_pred, pseudo)};
}

template <typename Scalar>
LossPair<Scalar> supervised_loss(const SoftPrediction<Scalar>& pred, const LabelMask& label) {
  return unsupervised_loss(pred, as_pseudo_label(label));
}

double lambda_schedule(long iteration, long ramp_length, double lambda_max) {
  if (ramp_length <= 0) throw PreconditionError("lambda_schedule: ramp_length must be positive");
  if (iteration < 0) throw PreconditionError("lambda_schedule: iteration must be non-negative");
  const double progress = static_cast<double>(std::min(iteration, ramp_length)) / static_cast<double>(ramp_length);
  const double gap = 1.0 - progress;
  return lambda_max * std::exp(-5.0 * gap * gap);
}

LossBreakdown total_loss(const LossPair<double>& sup, const LossPair<double>& unsup, double lambda) {
  if (lambda < 0.0) throw PreconditionError("total_loss: lambda must be non-negative");
  LossBreakdown out;
  out.sup_dice = sup.dice;
  out.sup_ce = sup.ce;
  out.unsup_dice = unsup.dice;
  out.unsup_ce = unsup.ce;
  out.lambda = lambda;
  out.total = (sup.dice + sup.ce) + lambda * (unsup.dice + unsup.ce);
  return out;
}

#define SAMATCH_INSTANTIATE_LOSSES(T)                                                   \
  template T dice_loss(const SoftPrediction<T>&, const PseudoLabel&);                   \
  template T dice_loss(const SoftPrediction<T>&, const LabelMask&);                     \
  template LossWithGrad<T> dice_loss_grad(const SoftPrediction<T>&, const PseudoLabel&); \
  template T ce_loss(const SoftPrediction<T>&, const PseudoLabel&);                     \
  template T ce_loss(const SoftPrediction<T>&, const LabelMask&);                       \
  template LossWithGrad<T> ce_loss_grad(const SoftPrediction<T>&, const PseudoLabel&);   \
  template LossPair<T> unsupervised_loss(const SoftPrediction<T>&, const PseudoLabel&);  \
  template LossPair<T> supervised_loss(const SoftPrediction<T>&, const LabelMask&);

SAMATCH_INSTANTIATE_LOSSES(float)
SAMATCH_INSTANTIATE_LOSSES(double)

#undef SAMATCH_INSTANTIATE_LOSSES

}  // namespace samatch
