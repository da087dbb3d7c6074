#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "samatch/match_engine.hpp"
#include "samatch/unet.hpp"

using namespace samatch;

TEST(UNet, SeededInitialization) {
  const UNetConfig cfg{3, 4, 2};
  const UNet<float> a(cfg, 5);
  const UNet<float> b(cfg, 5);
  const UNet<float> c(cfg, 6);
  EXPECT_EQ(a.parameters(), b.parameters());
  EXPECT_NE(a.parameters(), c.parameters());
}

TEST(UNet, LayoutCoversParameterVector) {
  const UNet<double> net(UNetConfig{3, 4, 1}, 1);
  Eigen::Index next = 0;
  for (const auto& block : net.layout()) {
    EXPECT_EQ(block.offset, next);
    next += block.size();
  }
  EXPECT_EQ(next, net.parameter_count());
}

TEST(UNet, OutputIsSoftmaxOfRightShape) {
  const UNet<double> net(UNetConfig{3, 4, 2}, 1);
  Rng rng(1);
  const auto img = fixtures::random_image(rng, 16, 12);
  const auto pred = forward(net, img);
  EXPECT_EQ(pred.channels(), 3);
  EXPECT_EQ(pred.height, 16);
  EXPECT_EQ(pred.width, 12);
  EXPECT_FALSE(validate_prediction(pred).has_value());
}

TEST(UNet, IndivisibleInputThrows) {
  const UNet<double> net(UNetConfig{3, 4, 1}, 1);
  Rng rng(2);
  EXPECT_THROW(forward(net, fixtures::random_image(rng, 10, 12)), ShapeError);
}

TEST(UNet, BatchForwardMatchesSingle) {
  const UNet<double> net(UNetConfig{2, 4, 1}, 3);
  Rng rng(3);
  std::vector<ImageSample> imgs = {fixtures::random_image(rng, 8, 8), fixtures::random_image(rng, 8, 8)};
  const auto batch = forward_batch(net, std::span<const ImageSample>(imgs));
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const auto single = forward(net, imgs[i]);
    EXPECT_LT((batch[i].probs - single.probs).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(UNet, DropoutMaskIsPureFunctionOfSeed) {
  const UNet<double> net(UNetConfig{2, 8, 1}, 4);
  Rng rng(4);
  const auto img = fixtures::random_image(rng, 8, 8);
  const FeatureDropout a{0.5, 10};
  const FeatureDropout b{0.5, 11};
  EXPECT_EQ(forward(net, img, &a).probs, forward(net, img, &a).probs);
  EXPECT_NE(forward(net, img, &a).probs, forward(net, img, &b).probs);
  EXPECT_NE(forward(net, img, &a).probs, forward(net, img).probs);
}

TEST(UNet, SupervisedGradientMatchesFiniteDifferences) {
  const UNet<double> net(UNetConfig{2, 4, 2}, 7);
  Rng rng(1);
  std::vector<LabeledView> views;
  std::vector<ImageSample> images;
  for (int b = 0; b < 2; ++b) {
    views.push_back({fixtures::random_image(rng, 8, 8), fixtures::random_label(rng, 8, 8, 2)});
    images.push_back(views.back().image);
  }
  const auto g = supervised_step<double>(net, views);
  const auto r = fixtures::gradient_check(
      net, g.grad, [&](const UNet<double>& n) { return supervised_step<double>(n, views).loss.sum(); },
      [&](const UNet<double>& n) { return fixtures::batch_signature(n, images); });
  EXPECT_GT(r.checked, net.parameter_count() / 2);
  EXPECT_LT(r.worst_component, 1e-4);
  EXPECT_LT(r.norm_error, 1e-4);
}

TEST(UNet, FloatCastKeepsValues) {
  const UNet<double> net(UNetConfig{2, 4, 1}, 8);
  const UNet<float> f = net.cast<float>();
  EXPECT_EQ(f.config(), net.config());
  EXPECT_LT((f.parameters().cast<double>() - net.parameters()).cwiseAbs().maxCoeff(), 1e-6);
}
