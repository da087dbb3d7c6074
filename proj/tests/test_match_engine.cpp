#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "samatch/match_engine.hpp"

using namespace samatch;

namespace {

struct UnlabeledBatch {
  UNet<double> net{UNetConfig{2, 4, 1}, 3};
  std::vector<UnlabeledViews> batch;
  std::vector<PseudoLabel> targets;

  explicit UnlabeledBatch(std::uint64_t seed) {
    Rng rng(seed);
    for (int i = 0; i < 2; ++i) {
      UnlabeledViews u;
      u.weak = fixtures::random_image(rng, 8, 8);
      u.strong = {fixtures::random_image(rng, 8, 8), fixtures::random_image(rng, 8, 8)};
      batch.push_back(u);
      PseudoLabel p = as_pseudo_label(fixtures::random_label(rng, 8, 8, 1));
      p.valid(0, 0) = false;
      targets.push_back(p);
    }
  }
};

}  // namespace

TEST(PseudoLabel, GateIsStrictlyGreater) {
  SoftPrediction<double> p;
  p.height = 1;
  p.width = 3;
  p.probs = RowMatrix<double>(2, 3);
  p.probs << 0.95, 0.2, 0.5, 0.05, 0.8, 0.5;
  const auto l = generate_pseudo_label(p, 0.95);
  EXPECT_FALSE(l.valid(0, 0));
  EXPECT_FALSE(l.valid(0, 1));
  EXPECT_EQ(l.classes(0, 0), 0);
  EXPECT_EQ(l.classes(0, 1), 1);
  EXPECT_EQ(l.classes(0, 2), 0);
  EXPECT_EQ(l.origin, LabelOrigin::teacher);
  EXPECT_TRUE(generate_pseudo_label(p, 0.5).valid(0, 1));
  EXPECT_FALSE(generate_pseudo_label(p, 0.5).valid(0, 2));
}

TEST(Ema, TeacherStartsAsCopyAndEqualWeightsStayExact) {
  auto ts = TeacherStudent<float>::create(UNetConfig{2, 4, 1}, 1, 0.99);
  EXPECT_EQ(ts.student.parameters(), ts.teacher.parameters());
  for (int i = 0; i < 10; ++i) ema_update(ts);
  EXPECT_EQ(ts.student.parameters(), ts.teacher.parameters());
}

TEST(Ema, AlphaZeroCopiesAndAlphaOneFreezes) {
  const UNet<double> s(UNetConfig{2, 4, 1}, 1);
  UNet<double> t(UNetConfig{2, 4, 1}, 2);
  const auto before = t.parameters();
  ema_update(t, s, 1.0);
  EXPECT_EQ(t.parameters(), before);
  ema_update(t, s, 0.0);
  EXPECT_LT((t.parameters() - s.parameters()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Ema, ArchitectureMismatchThrows) {
  const UNet<double> s(UNetConfig{2, 4, 1}, 1);
  UNet<double> t(UNetConfig{2, 8, 1}, 1);
  EXPECT_THROW(ema_update(t, s, 0.9), Error);
}

TEST(Unsup, FixMatchUsesOnlyFirstStrongView) {
  UnlabeledBatch a(1);
  UnlabeledBatch b(1);
  for (auto& u : b.batch) u.strong[1].pixels = 1.0 - u.strong[1].pixels;
  MatchStrategy fix;
  const auto ga = unsup_step<double>(fix, a.net, a.batch, a.targets, 0);
  const auto gb = unsup_step<double>(fix, b.net, b.batch, b.targets, 0);
  EXPECT_EQ(ga.grad, gb.grad);
  EXPECT_EQ(ga.loss.dice, gb.loss.dice);
}

TEST(Unsup, UniMatchAveragesThreeStreams) {
  UnlabeledBatch s(2);
  MatchStrategy uni;
  uni.kind = StrategyKind::unimatch;
  MatchStrategy fix;
  const auto whole = unsup_step<double>(uni, s.net, s.batch, s.targets, 42);

  auto swapped = s.batch;
  for (auto& u : swapped) std::swap(u.strong[0], u.strong[1]);
  const auto s0 = unsup_step<double>(fix, s.net, s.batch, s.targets, 0);
  const auto s1 = unsup_step<double>(fix, s.net, swapped, s.targets, 0);
  // Dropout stream: the weak views as one batch, so each sample keeps its own mask.
  const FeatureDropout fp{uni.feature_dropout_p, 42};
  std::vector<ImageSample> weak;
  for (const auto& u : s.batch) weak.push_back(u.weak);
  const auto preds = forward_batch(s.net, std::span<const ImageSample>(weak), &fp);
  double ce = 0.0;
  for (std::size_t i = 0; i < s.batch.size(); ++i) ce += ce_loss(preds[i], s.targets[i]);
  ce /= static_cast<double>(s.batch.size());
  EXPECT_NEAR(whole.loss.ce, (s0.loss.ce + s1.loss.ce + ce) / 3.0, 1e-12);
}

TEST(Unsup, UniMatchNeedsTwoStrongViews) {
  UnlabeledBatch s(3);
  for (auto& u : s.batch) u.strong.resize(1);
  MatchStrategy uni;
  uni.kind = StrategyKind::unimatch;
  EXPECT_THROW(unsup_step<double>(uni, s.net, s.batch, s.targets, 0), PreconditionError);
  s.targets.pop_back();
  EXPECT_THROW(unsup_step<double>(MatchStrategy{}, s.net, s.batch, s.targets, 0), ShapeError);
}

TEST(Unsup, InvalidPixelsDoNotAffectGradient) {
  UnlabeledBatch a(4);
  UnlabeledBatch b(4);
  for (auto& t : b.targets) t.classes(0, 0) = 1 - t.classes(0, 0);
  MatchStrategy uni;
  uni.kind = StrategyKind::unimatch;
  EXPECT_EQ(unsup_step<double>(uni, a.net, a.batch, a.targets, 9).grad,
            unsup_step<double>(uni, b.net, b.batch, b.targets, 9).grad);
}

TEST(Predict, LabelsAreArgmax) {
  const UNet<double> net(UNetConfig{2, 4, 2}, 5);
  Rng rng(5);
  const auto img = fixtures::random_image(rng, 8, 8);
  EXPECT_TRUE((predict_labels(net, img).classes == argmax(forward(net, img))).all());
}
