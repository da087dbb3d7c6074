#include <gtest/gtest.h>

#include <fstream>

#include "fixtures.hpp"
#include "samatch/augment.hpp"
#include "samatch/segmenter.hpp"

using namespace samatch;

namespace {

LabelMask two_blobs() {
  LabelMask m{ClassPlane::Zero(24, 24), 2};
  m.classes.block(2, 2, 6, 8) = 1;
  m.classes.block(14, 12, 7, 7) = 1;
  m.classes.block(12, 2, 5, 5) = 2;
  return m;
}

ImageSample image_for(const LabelMask& m, const std::string& id) {
  ImageSample s;
  s.id = id;
  s.pixels = m.classes.cast<double>() / 2.0;
  return s;
}

MaskPlane dilate(const MaskPlane& m) {
  MaskPlane out = m;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const auto rr = r + dr;
          const auto cc = c + dc;
          if (rr >= 0 && rr < m.rows() && cc >= 0 && cc < m.cols() && m(rr, cc)) out(r, c) = true;
        }
      }
    }
  }
  return out;
}

MaskPlane erode(const MaskPlane& m) { return !dilate(!m); }

OracleSegmenter oracle_for(const LabelMask& m, const std::string& id, int noise = 0, double failure = 0.0) {
  OracleSegmenterSpec spec;
  spec.truth[id] = m;
  spec.boundary_noise = noise;
  spec.failure_rate = failure;
  return OracleSegmenter(spec);
}

/// Returns fixed score maps per class.
class FixedSegmenter final : public PromptableSegmenter {
 public:
  std::map<int, PlaneD> maps;
  std::string kind() const override { return "fixed"; }
  SegmenterCapabilities capabilities() const override { return {true, true}; }

 protected:
  PlaneD segment_impl(const ImageSample&, const ClassPromptSet& p) const override { return maps.at(p.class_id); }
};

std::string fake_worker(const std::string& mode = "normal") {
  return "python3 " SAMATCH_TEST_DIR "/fake_segmenter_worker.py " + mode;
}

}  // namespace

TEST(Oracle, ZeroNoiseReturnsExactClassMask) {
  const auto m = two_blobs();
  const auto seg = oracle_for(m, "a");
  const auto img = image_for(m, "a");
  for (int k = 1; k <= 2; ++k) {
    const PlaneD out = seg.segment(img, ClassPromptSet{k, {}, BoxPrompt{0, 0, 1, 1}});
    EXPECT_TRUE(((out > 0.5) == (m.classes == k)).all());
  }
}

TEST(Oracle, FollowsAugmentedView) {
  const auto m = two_blobs();
  const auto seg = oracle_for(m, "a");
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    const auto t = augment::sample_weak_transform(rng, 24, 24);
    const auto view = augment::apply_weak(image_for(m, "a"), t);
    const auto expected = augment::transform_mask(m, t);
    const PlaneD out = seg.segment(view, ClassPromptSet{1, {{0, 0, Polarity::positive}}, std::nullopt});
    EXPECT_TRUE(((out > 0.5) == (expected.classes == 1)).all());
  }
}

TEST(Oracle, BoundaryNoiseDilatesOrErodesDeterministically) {
  const auto m = two_blobs();
  const MaskPlane truth = m.classes == 1;
  int dilated = 0;
  int eroded = 0;
  for (int i = 0; i < 20; ++i) {
    const std::string id = "img" + std::to_string(i);
    const auto seg = oracle_for(m, id, 1);
    const auto img = image_for(m, id);
    const ClassPromptSet p{1, {}, BoxPrompt{2, 2, 7, 9}};
    const MaskPlane out = seg.segment(img, p) > 0.5;
    EXPECT_TRUE((out == (seg.segment(img, p) > 0.5)).all());
    if ((out == dilate(truth)).all()) ++dilated;
    else if ((out == erode(truth)).all()) ++eroded;
    else ADD_FAILURE() << "noise produced neither a dilation nor an erosion";
  }
  EXPECT_GT(dilated, 0);
  EXPECT_GT(eroded, 0);
}

TEST(Oracle, FailureKeepsOnlyPromptedComponent) {
  const auto m = two_blobs();
  const auto seg = oracle_for(m, "a", 0, 1.0);
  const auto img = image_for(m, "a");
  const MaskPlane out = seg.segment(img, ClassPromptSet{1, {{16, 14, Polarity::positive}}, std::nullopt}) > 0.5;
  EXPECT_EQ(out.count(), 49);
  EXPECT_TRUE(out(16, 14));
  EXPECT_FALSE(out(3, 3));
}

TEST(Oracle, UnknownImageAndBadSpec) {
  const auto m = two_blobs();
  const auto seg = oracle_for(m, "a");
  EXPECT_THROW(seg.segment(image_for(m, "b"), ClassPromptSet{1, {}, BoxPrompt{}}), Error);
  EXPECT_THROW(oracle_for(m, "a", -1), ConfigError);
  EXPECT_THROW(oracle_for(m, "a", 0, 1.5), ConfigError);
}

TEST(Capabilities, UnsupportedPromptKindIsRejected) {
  const ClassPromptSet box_only{1, {}, BoxPrompt{0, 0, 3, 3}};
  const ClassPromptSet points_only{1, {{1, 1, Polarity::positive}}, std::nullopt};
  EXPECT_THROW(check_prompt_supported({true, false}, box_only, "sam"), UnsupportedPromptError);
  EXPECT_THROW(check_prompt_supported({false, true}, points_only, "medsam"), UnsupportedPromptError);
  EXPECT_NO_THROW(check_prompt_supported({true, false}, points_only, "sam"));
}

TEST(Segment, OutputsAreClampedAndShapeChecked) {
  FixedSegmenter seg;
  seg.maps[1] = PlaneD::Constant(8, 8, 1.5);
  seg.maps[2] = PlaneD::Zero(4, 4);
  Rng rng(1);
  const auto img = fixtures::random_image(rng, 8, 8);
  EXPECT_EQ(seg.segment(img, ClassPromptSet{1, {}, BoxPrompt{}}).maxCoeff(), 1.0);
  EXPECT_THROW(seg.segment(img, ClassPromptSet{2, {}, BoxPrompt{}}), ShapeError);
}

TEST(Refine, HighestScoreWinsAndAbsentClassesFallBack) {
  FixedSegmenter seg;
  seg.maps[1] = PlaneD::Zero(8, 8);
  seg.maps[2] = PlaneD::Zero(8, 8);
  seg.maps[1].block(0, 0, 4, 8) = 0.9;
  seg.maps[2].block(2, 0, 4, 8) = 0.7;
  seg.maps[2](3, 3) = 0.95;
  Rng rng(1);
  const auto img = fixtures::random_image(rng, 8, 8);
  PseudoLabel fallback{ClassPlane::Zero(8, 8), MaskPlane::Constant(8, 8, false), LabelOrigin::teacher, 3};
  fallback.classes.block(6, 6, 2, 2) = 3;
  fallback.valid(7, 7) = true;
  fallback.classes(0, 0) = 2;  // overridden: class 2 is prompted
  PromptBundle bundle;
  bundle.classes = {{1, {}, BoxPrompt{}}, {2, {}, BoxPrompt{}}};
  const auto out = refine_pseudo_label(seg, img, bundle, fallback);
  EXPECT_EQ(out.origin, LabelOrigin::segmenter);
  EXPECT_EQ(out.classes(0, 0), 1);
  EXPECT_EQ(out.classes(2, 1), 1);   // 0.9 beats 0.7
  EXPECT_EQ(out.classes(3, 3), 2);   // 0.95 beats 0.9
  EXPECT_EQ(out.classes(5, 0), 2);
  EXPECT_EQ(out.classes(6, 0), 0);
  EXPECT_EQ(out.classes(6, 6), 3);
  EXPECT_FALSE(out.valid(6, 6));
  EXPECT_TRUE(out.valid(7, 7));
  EXPECT_TRUE(out.valid(0, 0));
}

TEST(Refine, EmptyBundleReturnsFallback) {
  FixedSegmenter seg;
  Rng rng(2);
  const auto img = fixtures::random_image(rng, 8, 8);
  const PseudoLabel fallback = as_pseudo_label(fixtures::random_label(rng, 8, 8, 2));
  const auto out = refine_pseudo_label(seg, img, PromptBundle{}, fallback);
  EXPECT_TRUE((out.classes == fallback.classes).all());
  EXPECT_EQ(out.origin, fallback.origin);
}

TEST(Finetune, RequiresTrainableSegmenterAndGroundTruthPrompts) {
  const auto m = two_blobs();
  auto seg = oracle_for(m, "a");
  const auto img = image_for(m, "a");
  PromptBundle gt;
  gt.source = PromptSource::ground_truth;
  gt.classes = {{1, {}, BoxPrompt{2, 2, 7, 9}}};
  EXPECT_THROW(finetune_step(seg, img, m, gt, 0.1), PreconditionError);
  LinearPromptSegmenter linear(1);
  PromptBundle teacher = gt;
  teacher.source = PromptSource::teacher_prediction;
  EXPECT_THROW(finetune_step(linear, img, m, teacher, 0.1), PreconditionError);
  EXPECT_NO_THROW(finetune_step(linear, img, m, gt, 0.1));
}

TEST(BinaryLoss, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  const PlaneD scores = fixtures::random_image(rng, 6, 6).pixels * 0.9 + 0.05;
  const MaskPlane target = fixtures::random_label(rng, 6, 6, 1).classes == 1;
  PlaneD grad;
  const double loss = binary_segmentation_loss(scores, target, &grad);
  EXPECT_DOUBLE_EQ(loss, binary_segmentation_loss(scores, target));
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    PlaneD a = scores;
    PlaneD b = scores;
    a.data()[i] += 1e-6;
    b.data()[i] -= 1e-6;
    EXPECT_NEAR(grad.data()[i], (binary_segmentation_loss(a, target) - binary_segmentation_loss(b, target)) / 2e-6,
                1e-6);
  }
}

TEST(Linear, ScoresInRangeAndPromptSensitive) {
  const LinearPromptSegmenter seg(4);
  const auto m = two_blobs();
  const auto img = image_for(m, "a");
  const PlaneD with_box = seg.segment(img, ClassPromptSet{1, {}, BoxPrompt{2, 2, 7, 9}});
  EXPECT_GE(with_box.minCoeff(), 0.0);
  EXPECT_LE(with_box.maxCoeff(), 1.0);
  EXPECT_GT(with_box.block(2, 2, 6, 8).mean(), with_box.block(14, 12, 7, 7).mean());
  EXPECT_EQ(seg.trainable_parts(), (std::vector<std::string>{"prompt_encoder", "mask_decoder"}));
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  LinearPromptSegmenter seg(5);
  const auto m = two_blobs();
  const auto img = image_for(m, "a");
  Rng rng(5);
  const auto bundle = prompting::prompts_from_label(m, rng, PromptMode::points);
  Eigen::VectorXd grad;
  seg.loss_and_gradient(img, m, bundle, &grad);
  const auto theta = seg.trainable_parameters();
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    std::vector<double> plus(theta.data(), theta.data() + theta.size());
    std::vector<double> minus = plus;
    plus[k] += 1e-6;
    minus[k] -= 1e-6;
    seg.load_state(plus);
    const double lp = seg.loss_and_gradient(img, m, bundle, nullptr);
    seg.load_state(minus);
    const double lm = seg.loss_and_gradient(img, m, bundle, nullptr);
    EXPECT_NEAR(grad(k), (lp - lm) / 2e-6, 1e-5 * std::max(1.0, std::abs(grad(k)))) << "parameter " << k;
  }
}

TEST(Linear, FinetuneLowersLossAndKeepsEncoderFrozen) {
  LinearPromptSegmenter seg(6);
  const auto m = two_blobs();
  const auto img = image_for(m, "a");
  Rng rng(6);
  const auto bundle = prompting::prompts_from_label(m, rng, PromptMode::box);
  const Eigen::VectorXd encoder = seg.frozen_parameters();
  const double first = seg.finetune(img, m, bundle, 0.05);
  double last = first;
  for (int i = 0; i < 30; ++i) last = seg.finetune(img, m, bundle, 0.05);
  EXPECT_LT(last, first);
  EXPECT_EQ(seg.frozen_parameters(), encoder);
}

TEST(Linear, StateRoundTrip) {
  LinearPromptSegmenter a(7);
  const auto m = two_blobs();
  Rng rng(7);
  a.finetune(image_for(m, "a"), m, prompting::prompts_from_label(m, rng, PromptMode::box), 0.1);
  LinearPromptSegmenter b(7);
  b.load_state(a.save_state());
  EXPECT_EQ(a.trainable_parameters(), b.trainable_parameters());
  EXPECT_THROW(b.load_state({1.0, 2.0}), ShapeError);
  auto oracle = oracle_for(m, "a");
  EXPECT_THROW(oracle.load_state({1.0}), ShapeError);
  EXPECT_NO_THROW(oracle.load_state({}));
}

// ---------------------------------------------------------------------------
// External models

class External : public ::testing::Test {
 protected:
  void SetUp() override {
    checkpoint_ = dir_.path / "sam_vit_b.pth";
    std::ofstream out(checkpoint_, std::ios::binary);
    out << "PK\x03\x04" << "archive/data.pkl" << "image_encoder.patch_embed prompt_encoder.pe mask_decoder.iou";
  }
  ExternalSegmenterConfig config(ExternalModel model, const std::string& mode = "normal") const {
    return {model, checkpoint_.string(), "cpu", fake_worker(mode)};
  }
  fixtures::TempDir dir_{"external"};
  std::filesystem::path checkpoint_;
};

TEST_F(External, CheckpointValidation) {
  auto cfg = config(ExternalModel::sam);
  cfg.checkpoint_path = (dir_.path / "missing.pth").string();
  EXPECT_THROW(load_external_segmenter(cfg), IoError);
  const auto junk = dir_.path / "junk.pth";
  std::ofstream(junk) << "not a checkpoint";
  cfg.checkpoint_path = junk.string();
  EXPECT_THROW(load_external_segmenter(cfg), IoError);
  const auto partial = dir_.path / "partial.pth";
  std::ofstream(partial, std::ios::binary) << "PK\x03\x04" << "data.pkl" << "image_encoder.x";
  cfg.checkpoint_path = partial.string();
  EXPECT_THROW(load_external_segmenter(cfg), IoError);
}

TEST_F(External, SamTakesPointsOnly) {
  const auto seg = load_external_segmenter(config(ExternalModel::sam));
  EXPECT_EQ(seg->kind(), "sam");
  Rng rng(1);
  const auto img = fixtures::random_image(rng, 16, 16, "x");
  EXPECT_THROW(seg->segment(img, ClassPromptSet{1, {}, BoxPrompt{0, 0, 3, 3}}), UnsupportedPromptError);
  const PlaneD out = seg->segment(img, ClassPromptSet{1, {{8, 8, Polarity::positive}}, BoxPrompt{0, 0, 3, 3}});
  EXPECT_DOUBLE_EQ(out(8, 8), 0.9);
  EXPECT_DOUBLE_EQ(out(0, 0), 0.0);  // the box was not forwarded
}

TEST_F(External, MedSamTakesBoxesAndFinetunes) {
  const auto seg = load_external_segmenter(config(ExternalModel::medsam));
  Rng rng(2);
  const auto img = fixtures::random_image(rng, 16, 16, "x");
  const PlaneD out = seg->segment(img, ClassPromptSet{1, {}, BoxPrompt{2, 3, 5, 9}});
  EXPECT_EQ(out.sum(), 4.0 * 7.0);
  EXPECT_TRUE(seg->trainable());
  LabelMask truth{ClassPlane::Zero(16, 16), 1};
  PromptBundle bundle;
  bundle.source = PromptSource::ground_truth;
  bundle.classes = {{1, {}, BoxPrompt{2, 3, 5, 9}}};
  EXPECT_DOUBLE_EQ(finetune_step(*seg, img, truth, bundle, 1e-5), 1.0);
  EXPECT_DOUBLE_EQ(finetune_step(*seg, img, truth, bundle, 1e-5), 0.5);
}

TEST_F(External, WorkerErrorsMapToLibraryErrors) {
  EXPECT_THROW(load_external_segmenter(config(ExternalModel::sam, "fail_load")), IoError);
  const auto seg = load_external_segmenter(config(ExternalModel::medsam, "bad_shape"));
  Rng rng(3);
  EXPECT_THROW(seg->segment(fixtures::random_image(rng, 8, 8), ClassPromptSet{1, {}, BoxPrompt{0, 0, 1, 1}}),
               ShapeError);
  auto cfg = config(ExternalModel::sam);
  cfg.worker_command = "exit 3";
  EXPECT_THROW(load_external_segmenter(cfg), Error);
}

TEST(ExternalModelName, Parse) {
  EXPECT_EQ(parse_external_model("sam"), ExternalModel::sam);
  EXPECT_EQ(parse_external_model("medsam"), ExternalModel::medsam);
  EXPECT_THROW(parse_external_model("sam2"), ConfigError);
}
