#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "fixtures.hpp"
#include "samatch/trainer.hpp"

using namespace samatch;
using namespace samatch::trainer;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

class Training : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fixtures::TempDir("trainer");
    data::SynthConfig cfg;
    cfg.n_images = 12;
    cfg.image_size = 16;
    cfg.labeled = 2;
    cfg.val = 2;
    cfg.test = 2;
    cfg.seed = 1;
    data::synth_generate(cfg, dir_->path / "data");
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static RunConfig small_config(const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> ov = {
        "data.manifest=\"" + (dir_->path / "data" / "manifest.json").string() + "\"",
        "output_dir=\"" + (dir_->path / out).string() + "\"",
        "data.image_size=16",
        "trainer.total_iterations=6",
        "trainer.warmup_iterations=3",
        "trainer.batch_size=4",
        "trainer.eval_every=2",
        "trainer.checkpoint_every=3",
        "model.depth=2",
        "model.base_channels=4",
    };
    ov.insert(ov.end(), extra.begin(), extra.end());
    return resolve_config(std::nullopt, ov);
  }

  static fs::path path(const std::string& name) { return dir_->path / name; }

  static fixtures::TempDir* dir_;
};

fixtures::TempDir* Training::dir_ = nullptr;

}  // namespace

TEST(PolyLr, DecayAndFloor) {
  EXPECT_DOUBLE_EQ(poly_lr(0, 100, 0.01), 0.01);
  EXPECT_NEAR(poly_lr(50, 100, 0.01), 0.01 * std::pow(0.5, 0.9), 1e-15);
  EXPECT_NEAR(poly_lr(50, 100, 0.01), 0.0053589, 1e-7);
  EXPECT_DOUBLE_EQ(poly_lr(100, 100, 0.01), 1e-6);
  EXPECT_DOUBLE_EQ(poly_lr(100, 100, 5e-7), 5e-7);
  EXPECT_EQ(poly_lr(40, 100, 0.0), 0.0);
  EXPECT_THROW(poly_lr(101, 100, 0.01), PreconditionError);
  EXPECT_THROW(poly_lr(-1, 100, 0.01), PreconditionError);
}

TEST(Config, DefaultsRoundTrip) {
  const RunConfig c;
  const RunConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(c.total_iterations, 60000);
  EXPECT_EQ(c.warmup_iterations, 30000);
  EXPECT_EQ(c.interactive_iterations(), 30000);
  EXPECT_EQ(c.batch_size, 8);
  EXPECT_EQ(c.labeled_per_batch(), 4);
  EXPECT_DOUBLE_EQ(c.match_lr, 0.01);
  EXPECT_DOUBLE_EQ(c.segmenter_lr, 5e-5);
  EXPECT_DOUBLE_EQ(c.ema_decay, 0.99);
  EXPECT_DOUBLE_EQ(c.lambda_max, 0.1);
  EXPECT_DOUBLE_EQ(c.strategy.confidence_threshold, 0.95);
  EXPECT_EQ(c.effective_lambda_ramp(), 10000);
}

TEST(Config, UnknownKeysNameTheirPath) {
  nlohmann::json doc = {{"trainer", {{"totl_iterations", 5}}}};
  try {
    config_from_json(doc);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("trainer.totl_iterations"), std::string::npos);
  }
  auto d = to_json(RunConfig{});
  EXPECT_THROW(apply_override(d, "strategy.knd=\"unimatch\""), ConfigError);
  EXPECT_THROW(apply_override(d, "no_equals_sign"), ConfigError);
}

TEST(Config, OverridesParseJsonAndFallBackToString) {
  const auto c = resolve_config(std::nullopt, {"strategy.kind=unimatch", "trainer.total_iterations=10",
                                               "trainer.warmup_iterations=4", "strategy.confidence_threshold=0.9",
                                               "segmenter.finetune_interactive=true"});
  EXPECT_EQ(c.strategy.kind, StrategyKind::unimatch);
  EXPECT_EQ(c.total_iterations, 10);
  EXPECT_EQ(c.interactive_iterations(), 6);
  EXPECT_DOUBLE_EQ(c.strategy.confidence_threshold, 0.9);
  EXPECT_TRUE(c.segmenter.finetune_interactive);
  EXPECT_THROW(resolve_config(std::nullopt, {"trainer.total_iterations=\"many\""}), ConfigError);
}

TEST(Config, FileThenOverrides) {
  fixtures::TempDir tmp("cfg");
  std::ofstream(tmp.path / "c.json") << R"({"seed": 4, "trainer": {"batch_size": 6}})";
  const auto c = resolve_config(tmp.path / "c.json", {"seed=9"});
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.batch_size, 6);
  std::ofstream(tmp.path / "bad.json") << "{ not json";
  EXPECT_THROW(resolve_config(tmp.path / "bad.json", {}), ConfigError);
  EXPECT_THROW(resolve_config(tmp.path / "missing.json", {}), ConfigError);
}

TEST(Config, InteractiveIterationsMustAgree) {
  EXPECT_NO_THROW(resolve_config(std::nullopt, {"trainer.total_iterations=10", "trainer.warmup_iterations=4",
                                                "trainer.interactive_iterations=6"}));
  EXPECT_THROW(resolve_config(std::nullopt, {"trainer.total_iterations=10", "trainer.warmup_iterations=4",
                                             "trainer.interactive_iterations=5"}),
               ConfigError);
}

TEST(Config, Validation) {
  RunConfig c;
  EXPECT_NO_THROW(validate(c));
  c.segmenter.kind = "none";
  EXPECT_THROW(validate(c), ConfigError);
  c.warmup_iterations = c.total_iterations;
  EXPECT_NO_THROW(validate(c));
  c.image_size = 100;  // not a multiple of 16
  EXPECT_THROW(validate(c), ConfigError);
  c = RunConfig{};
  c.labeled_fraction = 1.0;
  EXPECT_THROW(validate(c), ConfigError);
  c = RunConfig{};
  c.segmenter.kind = "sam2";
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Config, PromptModeAndMethodNames) {
  RunConfig c;
  EXPECT_EQ(c.prompt_mode(), PromptMode::box);
  c.segmenter.kind = "sam";
  EXPECT_EQ(c.prompt_mode(), PromptMode::points);
  EXPECT_EQ(method_name(c), "Fix-SAM");
  c.segmenter.kind = "medsam";
  c.strategy.kind = StrategyKind::unimatch;
  EXPECT_EQ(method_name(c), "Uni-MedSAM");
  c.segmenter.kind = "none";
  EXPECT_EQ(method_name(c), "UniMatch");
  c.strategy.kind = StrategyKind::fixmatch;
  EXPECT_EQ(method_name(c), "FixMatch");
}

TEST(Cycler, EveryPassVisitsEachIndexOnce) {
  BatchCycler cyc;
  cyc.pool = 5;
  Rng rng(3);
  for (int pass = 0; pass < 4; ++pass) {
    std::set<std::size_t> seen;
    for (int i = 0; i < 5; ++i) seen.insert(cyc.next(rng));
    EXPECT_EQ(seen.size(), 5u);
  }
}

TEST(Rng, StreamsAreSeededAndDistinct) {
  auto a = RngStreams::from_seed(5);
  auto b = RngStreams::from_seed(5);
  EXPECT_EQ(a.augment(), b.augment());
  auto c = RngStreams::from_seed(5);
  EXPECT_NE(c.augment(), c.perturb());
  EXPECT_NE(RngStreams::from_seed(6).batch(), RngStreams::from_seed(5).batch());
}

TEST_F(Training, PhaseFollowsIteration) {
  const auto cfg = small_config("phase");
  const auto manifest = data::load_manifest(cfg.manifest);
  const auto data = load_train_data(manifest, cfg.image_size);
  auto seg = make_segmenter(cfg, manifest);
  TrainState state = initial_state(cfg, data);
  EXPECT_EQ(state.ts.student.config().class_count, 2);
  for (int i = 0; i < 6; ++i) {
    const Phase expected = i < 3 ? Phase::warmup : Phase::interactive;
    EXPECT_EQ(state.phase(cfg.warmup_iterations), expected);
    train_step(state, data, cfg, seg.get());
    EXPECT_EQ(state.history.back().phase, expected);
    EXPECT_EQ(state.history.back().iteration, i + 1);
  }
  TrainState no_seg = initial_state(cfg, data);
  no_seg.iteration = 3;
  EXPECT_THROW(train_step(no_seg, data, cfg, nullptr), ConfigError);
}

TEST_F(Training, ZeroLearningRateLeavesStudentUnchanged) {
  const auto cfg = small_config("zero_lr", {"trainer.match_lr=0"});
  const auto manifest = data::load_manifest(cfg.manifest);
  const auto data = load_train_data(manifest, cfg.image_size);
  auto seg = make_segmenter(cfg, manifest);
  TrainState state = initial_state(cfg, data);
  const auto before = state.ts.student.parameters();
  for (int i = 0; i < 5; ++i) train_step(state, data, cfg, seg.get());
  EXPECT_EQ(state.ts.student.parameters(), before);
  EXPECT_EQ(state.ts.teacher.parameters(), before);
  EXPECT_EQ(state.history.back().lr, 0.0);
}

TEST_F(Training, LossBreakdownIsConsistent) {
  const auto cfg = small_config("losses");
  const auto manifest = data::load_manifest(cfg.manifest);
  const auto data = load_train_data(manifest, cfg.image_size);
  auto seg = make_segmenter(cfg, manifest);
  TrainState state = initial_state(cfg, data);
  for (int i = 0; i < 4; ++i) train_step(state, data, cfg, seg.get());
  for (const auto& row : state.history) {
    const auto& l = row.loss;
    EXPECT_NEAR(l.total, l.sup_dice + l.sup_ce + l.lambda * (l.unsup_dice + l.unsup_ce), 1e-12);
    EXPECT_NEAR(l.lambda, lambda_schedule(row.iteration - 1, cfg.effective_lambda_ramp(), cfg.lambda_max), 1e-15);
    EXPECT_NEAR(row.lr, poly_lr(row.iteration - 1, cfg.total_iterations, cfg.match_lr), 1e-15);
  }
}

TEST_F(Training, CheckpointRoundTripIsByteIdentical) {
  const auto cfg = small_config("ckpt", {"segmenter.kind=\"linear\"", "segmenter.finetune_interactive=true"});
  const auto manifest = data::load_manifest(cfg.manifest);
  const auto data = load_train_data(manifest, cfg.image_size);
  auto seg = make_segmenter(cfg, manifest);
  TrainState state = initial_state(cfg, data);
  for (int i = 0; i < 4; ++i) train_step(state, data, cfg, seg.get());
  fs::create_directories(path("ckpt"));
  save_checkpoint(path("ckpt") / "a.ckpt", cfg, state, seg.get());
  const auto loaded = load_checkpoint(path("ckpt") / "a.ckpt");
  EXPECT_EQ(loaded.state.iteration, 4);
  EXPECT_EQ(loaded.segmenter_state, seg->save_state());
  auto seg2 = make_segmenter(cfg, manifest);
  TrainState restored = initial_state(cfg, data);
  restore(loaded, cfg, restored, seg2.get());
  save_checkpoint(path("ckpt") / "b.ckpt", cfg, restored, seg2.get());
  EXPECT_EQ(slurp(path("ckpt") / "a.ckpt"), slurp(path("ckpt") / "b.ckpt"));

  // Continuing from either state gives the same next step.
  train_step(state, data, cfg, seg.get());
  train_step(restored, data, cfg, seg2.get());
  EXPECT_EQ(state.ts.student.parameters(), restored.ts.student.parameters());
}

TEST_F(Training, CheckpointErrors) {
  const auto cfg = small_config("ckpt_err");
  const auto manifest = data::load_manifest(cfg.manifest);
  const auto data = load_train_data(manifest, cfg.image_size);
  TrainState state = initial_state(cfg, data);
  fs::create_directories(path("ckpt_err"));
  const auto file = path("ckpt_err") / "a.ckpt";
  save_checkpoint(file, cfg, state, nullptr);

  std::string bytes = slurp(file);
  std::string bumped = bytes;
  bumped[8] = 2;  // version field follows the 8-byte magic
  std::ofstream(path("ckpt_err") / "v2.ckpt", std::ios::binary) << bumped;
  EXPECT_THROW(load_checkpoint(path("ckpt_err") / "v2.ckpt"), VersionError);
  std::ofstream(path("ckpt_err") / "long.ckpt", std::ios::binary) << bytes << "x";
  EXPECT_THROW(load_checkpoint(path("ckpt_err") / "long.ckpt"), IoError);
  std::ofstream(path("ckpt_err") / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load_checkpoint(path("ckpt_err") / "short.ckpt"), IoError);
  EXPECT_THROW(load_checkpoint(path("ckpt_err") / "none.ckpt"), IoError);

  const auto wider = small_config("ckpt_err", {"model.base_channels=8"});
  TrainState other = initial_state(wider, data);
  EXPECT_THROW(restore(load_checkpoint(file), wider, other, nullptr), ConfigError);
}

TEST_F(Training, RunWritesRunDirectory) {
  const auto cfg = small_config("run", {"trainer.overlays=true"});
  std::vector<long> seen;
  RunOptions opt;
  opt.on_step = [&](const HistoryRow& r) { seen.push_back(r.iteration); };
  const auto result = run(cfg, opt);
  EXPECT_EQ(seen, (std::vector<long>{1, 2, 3, 4, 5, 6}));
  const fs::path dir = path("run");
  for (const char* f : {"config.json", "metrics.csv", "report.json", "checkpoints/best.ckpt",
                        "checkpoints/iter_000003.ckpt", "checkpoints/iter_000006.ckpt"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_FALSE(fs::is_empty(dir / "overlays"));
  const auto csv = lines_of(dir / "metrics.csv");
  ASSERT_EQ(csv.size(), 7u);
  EXPECT_EQ(csv[0], "iteration,phase,sup_dice,sup_ce,unsup_dice,unsup_ce,lambda,total,lr,val_dice");
  EXPECT_EQ(csv[1].substr(0, 9), "1,warmup,");
  EXPECT_EQ(csv[1].back(), ',');  // no validation at iteration 1
  EXPECT_NE(csv[2].back(), ',');
  EXPECT_EQ(csv[4].substr(0, 14), "4,interactive,");

  const auto& report = result.report;
  EXPECT_EQ(report.at("method"), "Fix-Oracle");
  ASSERT_EQ(report.at("splits").size(), 2u);
  EXPECT_EQ(report.at("splits").at(1).at("split"), "test");
  EXPECT_EQ(report.at("per_case").at("test").size(), 2u);
  EXPECT_GE(report.at("best_iteration").get<long>(), 2);

  std::ifstream in(dir / "config.json");
  EXPECT_EQ(config_from_json(nlohmann::json::parse(in)).total_iterations, 6);
}

TEST_F(Training, MissingManifestIsAConfigError) {
  auto cfg = small_config("missing");
  cfg.manifest = (path("nowhere") / "manifest.json").string();
  try {
    run(cfg);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("nowhere"), std::string::npos);
  }
}

TEST_F(Training, BaselineWithoutSegmenter) {
  const auto cfg = small_config("baseline", {"segmenter.kind=\"none\"", "trainer.warmup_iterations=6",
                                             "strategy.kind=\"unimatch\""});
  const auto result = run(cfg);
  EXPECT_EQ(result.report.at("method"), "UniMatch");
  for (const auto& row : result.state.history) EXPECT_EQ(row.phase, Phase::warmup);
}
