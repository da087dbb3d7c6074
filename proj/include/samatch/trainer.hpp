#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "samatch/augment.hpp"
#include "samatch/data.hpp"
#include "samatch/match_engine.hpp"
#include "samatch/metrics.hpp"
#include "samatch/prompting.hpp"
#include "samatch/segmenter.hpp"

namespace samatch::trainer {

namespace fs = std::filesystem;

struct SegmenterSettings {
  std::string kind = "oracle";  ///< oracle | linear | sam | medsam | none
  std::string prompt_mode = "auto";  ///< auto picks points for sam, box otherwise
  double threshold = 0.5;
  int boundary_noise = 0;
  double failure_rate = 0.0;
  std::string checkpoint_path;
  std::string device = "cpu";
  std::string worker_command = "python3 tools/sam_worker.py";
  bool finetune_interactive = false;
  prompting::PointSampling sampling;
};

struct RunConfig {
  std::string manifest;
  std::string output_dir = "run";
  int image_size = 256;  ///< 0 keeps the stored size

  long total_iterations = 60000;
  long warmup_iterations = 30000;
  int batch_size = 8;
  double labeled_fraction = 0.5;
  double match_lr = 0.01;
  double segmenter_lr = 5e-5;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_power = 0.9;
  double ema_decay = 0.99;
  double lambda_max = 0.1;
  long lambda_ramp = 0;  ///< 0 means total_iterations / 6
  long eval_every = 1000;
  long checkpoint_every = 5000;
  bool overlays = false;

  UNetConfig model{5, 16, 1};
  MatchStrategy strategy;
  SegmenterSettings segmenter;
  augment::AugmentConfig augment;

  std::uint64_t seed = 0;

  long interactive_iterations() const { return total_iterations - warmup_iterations; }
  long effective_lambda_ramp() const { return lambda_ramp > 0 ? lambda_ramp : std::max(1L, total_iterations / 6); }
  int labeled_per_batch() const;
  int unlabeled_per_batch() const { return batch_size - labeled_per_batch(); }
  PromptMode prompt_mode() const;
};

/// Every key with its current value; the schema used for key validation.
nlohmann::json to_json(const RunConfig& config);
/// Throws ConfigError naming the first unknown or ill-typed key.
RunConfig config_from_json(const nlohmann::json& doc);
/// Sets one dotted path ("trainer.total_iterations=4"); the value is parsed as
/// JSON and falls back to a string. Unknown paths are rejected.
void apply_override(nlohmann::json& doc, const std::string& assignment);
/// Defaults, then `file` (if any), then each override in order.
RunConfig resolve_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides);
void validate(const RunConfig& config);

/// Polynomial decay, floored at min(1e-6, base_lr).
double poly_lr(long iteration, long total, double base_lr, double power = 0.9);

/// Cycles over a pool in an order reshuffled at the start of every pass.
struct BatchCycler {
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::size_t pool = 0;

  std::size_t next(Rng& rng);
};

struct RngStreams {
  Rng augment;
  Rng perturb;
  Rng prompt;
  Rng batch;

  static RngStreams from_seed(std::uint64_t seed);
};

enum class Phase { warmup, interactive };
std::string to_string(Phase phase);

struct HistoryRow {
  long iteration = 0;  ///< 1-based: the step this row records
  Phase phase = Phase::warmup;
  LossBreakdown loss;
  double lr = 0.0;
  std::optional<double> val_dice;
};

struct TrainData {
  std::vector<data::Slice> labeled;
  std::vector<data::Slice> unlabeled;
  std::vector<data::Slice> val;
  std::vector<data::Slice> test;
  int class_count = 1;
};

TrainData load_train_data(const data::SplitManifest& manifest, int image_size);

/// Reference labels of every slice in the manifest, unlabeled cases included;
/// only the oracle segmenter consumes these.
std::map<std::string, LabelMask> reference_labels(const data::SplitManifest& manifest, int image_size);

std::unique_ptr<PromptableSegmenter> make_segmenter(const RunConfig& config, const data::SplitManifest& manifest);

struct TrainState {
  long iteration = 0;
  TeacherStudent<float> ts;
  Vector<float> velocity;
  RngStreams rng;
  BatchCycler labeled;
  BatchCycler unlabeled;
  std::vector<HistoryRow> history;
  double best_val_dice = -1.0;
  long best_iteration = -1;

  Phase phase(long warmup_iterations) const {
    return iteration < warmup_iterations ? Phase::warmup : Phase::interactive;
  }
};

TrainState initial_state(const RunConfig& config, const TrainData& data);

struct Batch {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
};

/// Indices into the labeled and unlabeled pools; errors on an empty pool.
Batch make_batch(TrainState& state, const TrainData& data, const RunConfig& config);

/// One step of either phase; the phase comes from the iteration counter.
/// `seg` may be null only in the warm-up phase.
void train_step(TrainState& state, const TrainData& data, const RunConfig& config, PromptableSegmenter* seg);
void warmup_step(TrainState& state, const TrainData& data, const RunConfig& config, PromptableSegmenter* seg,
                 const Batch& batch);
void interactive_step(TrainState& state, const TrainData& data, const RunConfig& config, PromptableSegmenter& seg,
                      const Batch& batch);

constexpr std::uint32_t kCheckpointVersion = 1;

/// Versioned binary snapshot: config, iteration, phase, networks, optimizer
/// velocity, segmenter state, RNG streams, cyclers, history and best score.
void save_checkpoint(const fs::path& path, const RunConfig& config, const TrainState& state,
                     const PromptableSegmenter* seg);

struct Checkpoint {
  RunConfig config;
  TrainState state;
  std::vector<double> segmenter_state;
};
Checkpoint load_checkpoint(const fs::path& path);

/// Restores a checkpoint into a run with `config`; the architecture must match.
void restore(const Checkpoint& ckpt, const RunConfig& config, TrainState& state, PromptableSegmenter* seg);

struct Evaluation {
  std::vector<CaseMetrics> cases;
  MetricsTable table;
};

Evaluation evaluate(const UNet<float>& net, const std::vector<data::Slice>& slices, int class_count);

void write_metrics_csv(const fs::path& path, const std::vector<HistoryRow>& history);

struct RunResult {
  fs::path run_dir;
  nlohmann::json report;
  TrainState state;
};

struct RunOptions {
  std::optional<fs::path> resume;
  /// Stop after this many total iterations without the final report (tests).
  std::optional<long> stop_at;
  std::function<void(const HistoryRow&)> on_step;
};

/// Trains, evaluates on validation, keeps the best checkpoint and writes the
/// run directory (config.json, metrics.csv, checkpoints/, report.json).
RunResult run(const RunConfig& config, const RunOptions& options = {});

/// report.json body for one method over the given splits.
nlohmann::json make_report(const std::string& method, const std::vector<std::pair<std::string, Evaluation>>& splits);

std::string method_name(const RunConfig& config);

}  // namespace samatch::trainer
