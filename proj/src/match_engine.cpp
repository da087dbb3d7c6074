#include "samatch/match_engine.hpp"

#include <sstream>

namespace samatch {

template <typename Scalar>
RowMatrix<Scalar> stack_images(std::span<const ImageSample> images) {
  if (images.empty()) throw PreconditionError("cannot stack an empty image batch");
  const int h = images.front().height();
  const int w = images.front().width();
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  RowMatrix<Scalar> input(1, hw * static_cast<Eigen::Index>(images.size()));
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& img = images[b];
    if (img.height() != h || img.width() != w) {
      std::ostringstream msg;
      msg << "batch mixes image sizes: " << h << "x" << w << " and " << img.height() << "x" << img.width();
      throw ShapeError(msg.str());
    }
    input.row(0).segment(static_cast<Eigen::Index>(b) * hw, hw) =
        Eigen::Map<const Eigen::Matrix<double, 1, Eigen::Dynamic>>(img.pixels.data(), hw).template cast<Scalar>();
  }
  return input;
}

namespace {

template <typename Scalar>
SoftPrediction<Scalar> slice_prediction(const RowMatrix<Scalar>& probs, int index, int h, int w) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  return SoftPrediction<Scalar>{probs.middleCols(index * hw, hw), h, w};
}

/// Forward + per-sample (Dice, CE) averaged over the batch, then backward.
template <typename Scalar>
BranchGrad<Scalar> branch(const UNet<Scalar>& net, std::span<const ImageSample> images,
                          std::span<const PseudoLabel> targets, const FeatureDropout* fp) {
  if (images.size() != targets.size()) throw ShapeError("branch: image and target counts differ");
  const int h = images.front().height();
  const int w = images.front().width();
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  const auto batch = static_cast<int>(images.size());
  typename UNet<Scalar>::Cache cache;
  const auto probs = net.forward(stack_images<Scalar>(images), batch, h, w, fp, &cache);

  BranchGrad<Scalar> out;
  RowMatrix<Scalar> dprobs(probs.rows(), probs.cols());
  const double inv = 1.0 / batch;
  for (int b = 0; b < batch; ++b) {
    const auto pred = slice_prediction(probs, b, h, w);
    const auto dice = dice_loss_grad(pred, targets[static_cast<std::size_t>(b)]);
    const auto ce = ce_loss_grad(pred, targets[static_cast<std::size_t>(b)]);
    out.loss.dice += inv * static_cast<double>(dice.value);
    out.loss.ce += inv * static_cast<double>(ce.value);
    dprobs.middleCols(b * hw, hw) = (dice.grad + ce.grad) * static_cast<Scalar>(inv);
  }
  out.grad = net.backward(cache, dprobs);
  return out;
}

}  // namespace

template <typename Scalar>
SoftPrediction<Scalar> forward(const UNet<Scalar>& net, const ImageSample& image, const FeatureDropout* feature_perturb) {
  const auto batch = std::span<const ImageSample>(&image, 1);
  return SoftPrediction<Scalar>{net.forward(stack_images<Scalar>(batch), 1, image.height(), image.width(), feature_perturb),
                                image.height(), image.width()};
}

template <typename Scalar>
std::vector<SoftPrediction<Scalar>> forward_batch(const UNet<Scalar>& net, std::span<const ImageSample> images,
                                                  const FeatureDropout* feature_perturb) {
  std::vector<SoftPrediction<Scalar>> out;
  if (images.empty()) return out;
  const int h = images.front().height();
  const int w = images.front().width();
  const auto probs = net.forward(stack_images<Scalar>(images), static_cast<int>(images.size()), h, w, feature_perturb);
  out.reserve(images.size());
  for (std::size_t b = 0; b < images.size(); ++b) out.push_back(slice_prediction(probs, static_cast<int>(b), h, w));
  return out;
}

template <typename Scalar>
LabelMask predict_labels(const UNet<Scalar>& net, const ImageSample& image) {
  return LabelMask{argmax(forward(net, image)), net.config().class_count};
}

template <typename Scalar>
PseudoLabel generate_pseudo_label(const SoftPrediction<Scalar>& pred, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw PreconditionError("confidence threshold must lie in (0,1]");
  PseudoLabel out;
  out.classes.resize(pred.height, pred.width);
  out.valid.resize(pred.height, pred.width);
  out.origin = LabelOrigin::teacher;
  out.class_count = pred.class_count();
  for (Eigen::Index i = 0; i < pred.probs.cols(); ++i) {
    Eigen::Index best = 0;
    const Scalar top = pred.probs.col(i).maxCoeff(&best);
    out.classes.data()[i] = static_cast<int>(best);
    out.valid.data()[i] = static_cast<double>(top) > threshold;
  }
  return out;
}

template <typename Scalar>
void ema_update(UNet<Scalar>& teacher, const UNet<Scalar>& student, double alpha) {
  if (!(teacher.config() == student.config()) || teacher.parameter_count() != student.parameter_count()) {
    throw ShapeError("ema_update: teacher and student architectures differ");
  }
  const auto step = static_cast<Scalar>(1.0 - alpha);
  teacher.parameters() += step * (student.parameters() - teacher.parameters());
}

template <typename Scalar>
BranchGrad<Scalar> supervised_step(const UNet<Scalar>& student, std::span<const LabeledView> batch) {
  std::vector<ImageSample> images;
  std::vector<PseudoLabel> targets;
  for (const auto& view : batch) {
    require_same_shape(view.image, view.label);
    images.push_back(view.image);
    targets.push_back(as_pseudo_label(view.label));
  }
  return branch<Scalar>(student, images, targets, nullptr);
}

template <typename Scalar>
BranchGrad<Scalar> unsup_step(const MatchStrategy& strategy, const UNet<Scalar>& student,
                              std::span<const UnlabeledViews> batch, std::span<const PseudoLabel> targets,
                              std::uint64_t dropout_seed) {
  if (batch.size() != targets.size()) throw ShapeError("unsup_step: one target per unlabeled sample required");
  const int views = strategy.strong_views();
  for (const auto& item : batch) {
    if (static_cast<int>(item.strong.size()) < views) {
      std::ostringstream msg;
      msg << "strategy needs " << views << " strong view(s) per sample, got " << item.strong.size();
      throw PreconditionError(msg.str());
    }
  }
  auto collect = [&](int view) {
    std::vector<ImageSample> images;
    for (const auto& item : batch) images.push_back(view < 0 ? item.weak : item.strong[static_cast<std::size_t>(view)]);
    return images;
  };

  if (strategy.kind == StrategyKind::fixmatch) return branch<Scalar>(student, collect(0), targets, nullptr);

  const FeatureDropout fp{strategy.feature_dropout_p, dropout_seed};
  BranchGrad<Scalar> out = branch<Scalar>(student, collect(0), targets, nullptr);
  for (auto&& term : {branch<Scalar>(student, collect(1), targets, nullptr), branch<Scalar>(student, collect(-1), targets, &fp)}) {
    out.loss.dice += term.loss.dice;
    out.loss.ce += term.loss.ce;
    out.grad += term.grad;
  }
  out.loss.dice /= 3.0;
  out.loss.ce /= 3.0;
  out.grad /= Scalar(3);
  return out;
}

#define SAMATCH_INSTANTIATE_ENGINE(T)                                                                       \
  template RowMatrix<T> stack_images<T>(std::span<const ImageSample>);                                      \
  template SoftPrediction<T> forward(const UNet<T>&, const ImageSample&, const FeatureDropout*);            \
  template std::vector<SoftPrediction<T>> forward_batch(const UNet<T>&, std::span<const ImageSample>,       \
                                                        const FeatureDropout*);                             \
  template LabelMask predict_labels(const UNet<T>&, const ImageSample&);                                    \
  template PseudoLabel generate_pseudo_label(const SoftPrediction<T>&, double);                             \
  template void ema_update(UNet<T>&, const UNet<T>&, double);                                               \
  template BranchGrad<T> supervised_step(const UNet<T>&, std::span<const LabeledView>);                     \
  template BranchGrad<T> unsup_step(const MatchStrategy&, const UNet<T>&, std::span<const UnlabeledViews>,  \
                                    std::span<const PseudoLabel>, std::uint64_t);

SAMATCH_INSTANTIATE_ENGINE(float)
SAMATCH_INSTANTIATE_ENGINE(double)

#undef SAMATCH_INSTANTIATE_ENGINE

}  // namespace samatch
