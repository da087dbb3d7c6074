#include "samatch/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace samatch::trainer {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

int RunConfig::labeled_per_batch() const {
  return static_cast<int>(std::lround(batch_size * labeled_fraction));
}

PromptMode RunConfig::prompt_mode() const {
  if (segmenter.prompt_mode == "auto") {
    return segmenter.kind == "sam" ? PromptMode::points : PromptMode::box;
  }
  return prompting::parse_prompt_mode(segmenter.prompt_mode);
}

json to_json(const RunConfig& c) {
  const auto& a = c.augment;
  const auto& s = c.segmenter;
  return json{
      {"output_dir", c.output_dir},
      {"seed", c.seed},
      {"data", {{"manifest", c.manifest}, {"image_size", c.image_size}}},
      {"trainer",
       {{"total_iterations", c.total_iterations},
        {"warmup_iterations", c.warmup_iterations},
        {"interactive_iterations", c.interactive_iterations()},
        {"batch_size", c.batch_size},
        {"labeled_fraction", c.labeled_fraction},
        {"match_lr", c.match_lr},
        {"segmenter_lr", c.segmenter_lr},
        {"momentum", c.momentum},
        {"weight_decay", c.weight_decay},
        {"lr_power", c.lr_power},
        {"ema_decay", c.ema_decay},
        {"lambda_max", c.lambda_max},
        {"lambda_ramp", c.lambda_ramp},
        {"eval_every", c.eval_every},
        {"checkpoint_every", c.checkpoint_every},
        {"overlays", c.overlays}}},
      {"model", {{"depth", c.model.depth}, {"base_channels", c.model.base_channels}}},
      {"strategy",
       {{"kind", c.strategy.kind == StrategyKind::unimatch ? "unimatch" : "fixmatch"},
        {"confidence_threshold", c.strategy.confidence_threshold},
        {"feature_dropout_p", c.strategy.feature_dropout_p}}},
      {"segmenter",
       {{"kind", s.kind},
        {"prompt_mode", s.prompt_mode},
        {"threshold", s.threshold},
        {"boundary_noise", s.boundary_noise},
        {"failure_rate", s.failure_rate},
        {"checkpoint_path", s.checkpoint_path},
        {"device", s.device},
        {"worker_command", s.worker_command},
        {"finetune_interactive", s.finetune_interactive},
        {"points",
         {{"positives", s.sampling.positives},
          {"negatives", s.sampling.negatives},
          {"confidence", s.sampling.confidence}}}}},
      {"augment",
       {{"crop_min_fraction", a.crop_min_fraction},
        {"crop_max_fraction", a.crop_max_fraction},
        {"flip_probability", a.flip_probability},
        {"brightness_max", a.brightness_max},
        {"contrast_min", a.contrast_min},
        {"contrast_max", a.contrast_max},
        {"gamma_min", a.gamma_min},
        {"gamma_max", a.gamma_max},
        {"noise_sigma_max", a.noise_sigma_max}}},
  };
}

namespace {

json schema() {
  json doc = to_json(RunConfig{});
  doc["trainer"]["interactive_iterations"] = nullptr;
  return doc;
}

void merge_checked(json& target, const json& source, const std::string& path) {
  if (!source.is_object()) throw ConfigError("config section '" + (path.empty() ? "<root>" : path) + "' must be an object");
  for (const auto& [key, value] : source.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!target.contains(key)) throw ConfigError("unknown config key '" + here + "'");
    if (target[key].is_object()) {
      merge_checked(target[key], value, here);
    } else {
      target[key] = value;
    }
  }
}

template <typename T>
void read(const json& doc, const char* section, const char* key, T& out) {
  const json& node = section ? doc.at(section).at(key) : doc.at(key);
  try {
    out = node.get<T>();
  } catch (const json::exception&) {
    const std::string where = section ? std::string(section) + "." + key : std::string(key);
    throw ConfigError("config key '" + where + "' has the wrong type (" + node.dump() + ")");
  }
}

}  // namespace

RunConfig config_from_json(const json& input) {
  json doc = schema();
  merge_checked(doc, input, "");
  RunConfig c;
  read(doc, nullptr, "output_dir", c.output_dir);
  read(doc, nullptr, "seed", c.seed);
  read(doc, "data", "manifest", c.manifest);
  read(doc, "data", "image_size", c.image_size);
  read(doc, "trainer", "total_iterations", c.total_iterations);
  read(doc, "trainer", "warmup_iterations", c.warmup_iterations);
  read(doc, "trainer", "batch_size", c.batch_size);
  read(doc, "trainer", "labeled_fraction", c.labeled_fraction);
  read(doc, "trainer", "match_lr", c.match_lr);
  read(doc, "trainer", "segmenter_lr", c.segmenter_lr);
  read(doc, "trainer", "momentum", c.momentum);
  read(doc, "trainer", "weight_decay", c.weight_decay);
  read(doc, "trainer", "lr_power", c.lr_power);
  read(doc, "trainer", "ema_decay", c.ema_decay);
  read(doc, "trainer", "lambda_max", c.lambda_max);
  read(doc, "trainer", "lambda_ramp", c.lambda_ramp);
  read(doc, "trainer", "eval_every", c.eval_every);
  read(doc, "trainer", "checkpoint_every", c.checkpoint_every);
  read(doc, "trainer", "overlays", c.overlays);
  const json& interactive = doc["trainer"]["interactive_iterations"];
  if (!interactive.is_null()) {
    long n = 0;
    read(doc, "trainer", "interactive_iterations", n);
    if (n != c.interactive_iterations()) {
      throw ConfigError("trainer.interactive_iterations (" + std::to_string(n) +
                        ") must equal total_iterations - warmup_iterations (" +
                        std::to_string(c.interactive_iterations()) + ")");
    }
  }
  read(doc, "model", "depth", c.model.depth);
  read(doc, "model", "base_channels", c.model.base_channels);
  std::string kind;
  read(doc, "strategy", "kind", kind);
  if (kind == "fixmatch") {
    c.strategy.kind = StrategyKind::fixmatch;
  } else if (kind == "unimatch") {
    c.strategy.kind = StrategyKind::unimatch;
  } else {
    throw ConfigError("strategy.kind must be fixmatch or unimatch, got '" + kind + "'");
  }
  read(doc, "strategy", "confidence_threshold", c.strategy.confidence_threshold);
  read(doc, "strategy", "feature_dropout_p", c.strategy.feature_dropout_p);
  auto& s = c.segmenter;
  read(doc, "segmenter", "kind", s.kind);
  read(doc, "segmenter", "prompt_mode", s.prompt_mode);
  read(doc, "segmenter", "threshold", s.threshold);
  read(doc, "segmenter", "boundary_noise", s.boundary_noise);
  read(doc, "segmenter", "failure_rate", s.failure_rate);
  read(doc, "segmenter", "checkpoint_path", s.checkpoint_path);
  read(doc, "segmenter", "device", s.device);
  read(doc, "segmenter", "worker_command", s.worker_command);
  read(doc, "segmenter", "finetune_interactive", s.finetune_interactive);
  const json& points = doc["segmenter"]["points"];
  read(points, nullptr, "positives", s.sampling.positives);
  read(points, nullptr, "negatives", s.sampling.negatives);
  read(points, nullptr, "confidence", s.sampling.confidence);
  auto& a = c.augment;
  read(doc, "augment", "crop_min_fraction", a.crop_min_fraction);
  read(doc, "augment", "crop_max_fraction", a.crop_max_fraction);
  read(doc, "augment", "flip_probability", a.flip_probability);
  read(doc, "augment", "brightness_max", a.brightness_max);
  read(doc, "augment", "contrast_min", a.contrast_min);
  read(doc, "augment", "contrast_max", a.contrast_max);
  read(doc, "augment", "gamma_min", a.gamma_min);
  read(doc, "augment", "gamma_max", a.gamma_max);
  read(doc, "augment", "noise_sigma_max", a.noise_sigma_max);
  validate(c);
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json nested = value;
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) nested = json{{*it, nested}};
  json probe = schema();
  merge_checked(probe, nested, "");
  merge_checked(doc, nested, "");
}

RunConfig resolve_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("config file not found: " + file->string());
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config file " + file->string() + " is not valid JSON: " + e.what());
    }
    json probe = schema();
    merge_checked(probe, doc, "");
  }
  json merged = schema();
  merge_checked(merged, doc, "");
  for (const auto& o : overrides) apply_override(merged, o);
  return config_from_json(merged);
}

void validate(const RunConfig& c) {
  auto require = [](bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
  };
  require(c.total_iterations >= 1, "trainer.total_iterations must be >= 1");
  require(c.warmup_iterations >= 0 && c.warmup_iterations <= c.total_iterations,
          "trainer.warmup_iterations must lie in [0, total_iterations]");
  require(c.batch_size >= 2, "trainer.batch_size must be >= 2");
  require(c.labeled_per_batch() >= 1 && c.unlabeled_per_batch() >= 1,
          "trainer.labeled_fraction must leave at least one labeled and one unlabeled sample per batch");
  require(c.match_lr >= 0 && c.segmenter_lr >= 0, "learning rates must be >= 0");
  require(c.momentum >= 0 && c.momentum < 1, "trainer.momentum must lie in [0,1)");
  require(c.weight_decay >= 0, "trainer.weight_decay must be >= 0");
  require(c.lr_power > 0, "trainer.lr_power must be > 0");
  require(c.ema_decay >= 0 && c.ema_decay <= 1, "trainer.ema_decay must lie in [0,1]");
  require(c.lambda_max >= 0, "trainer.lambda_max must be >= 0");
  require(c.lambda_ramp >= 0, "trainer.lambda_ramp must be >= 0");
  require(c.eval_every >= 1 && c.checkpoint_every >= 1, "eval_every and checkpoint_every must be >= 1");
  require(c.model.depth >= 1 && c.model.depth <= 8, "model.depth must lie in [1,8]");
  require(c.model.base_channels >= 1, "model.base_channels must be >= 1");
  require(c.image_size == 0 || (c.image_size >= kMinImageSide && c.image_size % c.model.size_multiple() == 0),
          "data.image_size must be 0 or a multiple of " + std::to_string(c.model.size_multiple()) + " and >= 8");
  require(c.strategy.confidence_threshold > 0 && c.strategy.confidence_threshold <= 1,
          "strategy.confidence_threshold must lie in (0,1]");
  require(c.strategy.feature_dropout_p >= 0 && c.strategy.feature_dropout_p < 1,
          "strategy.feature_dropout_p must lie in [0,1)");
  const auto& s = c.segmenter;
  require(s.kind == "oracle" || s.kind == "linear" || s.kind == "sam" || s.kind == "medsam" || s.kind == "none",
          "segmenter.kind must be oracle, linear, sam, medsam or none");
  require(s.kind != "none" || c.warmup_iterations == c.total_iterations,
          "segmenter.kind none requires warmup_iterations == total_iterations");
  require(s.prompt_mode == "auto" || s.prompt_mode == "points" || s.prompt_mode == "box",
          "segmenter.prompt_mode must be auto, points or box");
  require(s.threshold > 0 && s.threshold <= 1, "segmenter.threshold must lie in (0,1]");
  require(s.boundary_noise >= 0, "segmenter.boundary_noise must be >= 0");
  require(s.failure_rate >= 0 && s.failure_rate <= 1, "segmenter.failure_rate must lie in [0,1]");
  require(s.sampling.positives >= 0 && s.sampling.negatives >= 0, "segmenter.points counts must be >= 0");
  require(c.augment.crop_min_fraction > 0 && c.augment.crop_min_fraction <= c.augment.crop_max_fraction &&
              c.augment.crop_max_fraction <= 1,
          "augment crop fractions must satisfy 0 < min <= max <= 1");
}

double poly_lr(long iteration, long total, double base_lr, double power) {
  if (total <= 0 || iteration < 0 || iteration > total) {
    throw PreconditionError("poly_lr: iteration " + std::to_string(iteration) + " outside [0, " +
                            std::to_string(total) + "]");
  }
  const double lr = base_lr * std::pow(1.0 - static_cast<double>(iteration) / static_cast<double>(total), power);
  return std::max(lr, std::min(1e-6, base_lr));
}

// ---------------------------------------------------------------------------
// State

std::size_t BatchCycler::next(Rng& rng) {
  if (pool == 0) throw ConfigError("cannot draw a batch from an empty pool");
  if (cursor >= order.size()) {
    order.resize(pool);
    for (std::size_t i = 0; i < pool; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    cursor = 0;
  }
  return order[cursor++];
}

RngStreams RngStreams::from_seed(std::uint64_t seed) {
  auto stream = [seed](std::uint32_t id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), id};
    return Rng(seq);
  };
  return {stream(1), stream(2), stream(3), stream(4)};
}

std::string to_string(Phase phase) { return phase == Phase::warmup ? "warmup" : "interactive"; }

TrainData load_train_data(const data::SplitManifest& manifest, int image_size) {
  TrainData out;
  out.class_count = manifest.class_count;
  const data::LoadOptions options{image_size, true};
  auto gather = [&](data::Split split, std::vector<data::Slice>& into) {
    for (const auto* entry : manifest.select(split)) {
      auto slices = data::load_slices(*entry, manifest.class_count, options);
      for (auto& s : slices) {
        if (split != data::Split::train_unlabeled && !s.label) {
          throw IoError("case " + entry->case_id + " in split " + data::to_string(split) + " has no labels");
        }
        into.push_back(std::move(s));
      }
    }
  };
  gather(data::Split::train_labeled, out.labeled);
  gather(data::Split::train_unlabeled, out.unlabeled);
  gather(data::Split::val, out.val);
  gather(data::Split::test, out.test);
  return out;
}

std::map<std::string, LabelMask> reference_labels(const data::SplitManifest& manifest, int image_size) {
  std::map<std::string, LabelMask> out;
  for (auto entry : manifest.entries) {
    if (!entry.label_path) continue;
    entry.split = data::Split::val;
    entry.frame_filter.clear();
    for (auto& s : data::load_slices(entry, manifest.class_count, {image_size, true})) {
      if (s.label) out.emplace(s.image.id, std::move(*s.label));
    }
  }
  return out;
}

std::unique_ptr<PromptableSegmenter> make_segmenter(const RunConfig& config, const data::SplitManifest& manifest) {
  const auto& s = config.segmenter;
  if (s.kind == "none") return nullptr;
  if (s.kind == "oracle") {
    OracleSegmenterSpec spec;
    spec.truth = reference_labels(manifest, config.image_size);
    spec.boundary_noise = s.boundary_noise;
    spec.failure_rate = s.failure_rate;
    spec.seed = config.seed;
    return std::make_unique<OracleSegmenter>(std::move(spec));
  }
  if (s.kind == "linear") return std::make_unique<LinearPromptSegmenter>(config.seed);
  ExternalSegmenterConfig ext;
  ext.model = parse_external_model(s.kind);
  ext.checkpoint_path = s.checkpoint_path;
  ext.device = s.device;
  ext.worker_command = s.worker_command;
  return load_external_segmenter(ext);
}

TrainState initial_state(const RunConfig& config, const TrainData& data) {
  if (data.labeled.empty()) throw ConfigError("the manifest has no labeled training slices");
  if (data.unlabeled.empty()) throw ConfigError("the manifest has no unlabeled training slices");
  TrainState state;
  UNetConfig model = config.model;
  model.class_count = data.class_count;
  state.ts = TeacherStudent<float>::create(model, config.seed, config.ema_decay);
  state.velocity = Vector<float>::Zero(state.ts.student.parameter_count());
  state.rng = RngStreams::from_seed(config.seed);
  state.labeled.pool = data.labeled.size();
  state.unlabeled.pool = data.unlabeled.size();
  return state;
}

Batch make_batch(TrainState& state, const TrainData& data, const RunConfig& config) {
  if (data.labeled.empty() || data.unlabeled.empty()) throw ConfigError("labeled and unlabeled pools must be non-empty");
  state.labeled.pool = data.labeled.size();
  state.unlabeled.pool = data.unlabeled.size();
  Batch b;
  for (int i = 0; i < config.labeled_per_batch(); ++i) b.labeled.push_back(state.labeled.next(state.rng.batch));
  for (int i = 0; i < config.unlabeled_per_batch(); ++i) b.unlabeled.push_back(state.unlabeled.next(state.rng.batch));
  return b;
}

// ---------------------------------------------------------------------------
// Steps

namespace {

std::vector<LabeledView> labeled_views(TrainState& state, const TrainData& data, const RunConfig& config,
                                       const Batch& batch) {
  std::vector<LabeledView> views;
  for (const auto i : batch.labeled) {
    const auto& slice = data.labeled[i];
    const auto t = augment::sample_weak_transform(state.rng.augment, slice.image.height(), slice.image.width(),
                                                  config.augment);
    const auto p = augment::sample_perturbation(state.rng.perturb, config.augment);
    views.push_back({augment::apply_strong(slice.image, t, p, state.rng.perturb), augment::transform_mask(*slice.label, t)});
  }
  return views;
}

std::vector<UnlabeledViews> unlabeled_views(TrainState& state, const TrainData& data, const RunConfig& config,
                                            const Batch& batch) {
  std::vector<UnlabeledViews> views;
  for (const auto i : batch.unlabeled) {
    const auto& image = data.unlabeled[i].image;
    const auto t = augment::sample_weak_transform(state.rng.augment, image.height(), image.width(), config.augment);
    UnlabeledViews v;
    v.weak = augment::apply_weak(image, t);
    for (int k = 0; k < config.strategy.strong_views(); ++k) {
      const auto p = augment::sample_perturbation(state.rng.perturb, config.augment);
      ImageSample strong = v.weak;
      strong.pixels = augment::perturb_intensity(v.weak.pixels, p, state.rng.perturb);
      v.strong.push_back(std::move(strong));
    }
    views.push_back(std::move(v));
  }
  return views;
}

std::vector<ImageSample> weak_images(const std::vector<UnlabeledViews>& views) {
  std::vector<ImageSample> out;
  for (const auto& v : views) out.push_back(v.weak);
  return out;
}

void finetune_segmenter(PromptableSegmenter& seg, TrainState& state, const RunConfig& config,
                        const std::vector<LabeledView>& views) {
  for (const auto& v : views) {
    const auto bundle = prompting::prompts_from_label(v.label, state.rng.prompt, config.prompt_mode(),
                                                      config.segmenter.sampling);
    if (!bundle.empty()) finetune_step(seg, v.image, v.label, bundle, config.segmenter_lr);
  }
}

void optimize(TrainState& state, const RunConfig& config, const BranchGrad<float>& sup,
              const BranchGrad<float>& unsup, Phase phase) {
  const double lambda = lambda_schedule(state.iteration, config.effective_lambda_ramp(), config.lambda_max);
  const double lr = poly_lr(state.iteration, config.total_iterations, config.match_lr, config.lr_power);
  auto& theta = state.ts.student.parameters();
  const Vector<float> grad = sup.grad + static_cast<float>(lambda) * unsup.grad +
                             static_cast<float>(config.weight_decay) * theta;
  state.velocity = static_cast<float>(config.momentum) * state.velocity + grad;
  theta -= static_cast<float>(lr) * state.velocity;
  ema_update(state.ts);

  HistoryRow row;
  row.iteration = state.iteration + 1;  // steps completed once this one lands
  row.phase = phase;
  row.loss = total_loss(sup.loss, unsup.loss, lambda);
  row.lr = lr;
  state.history.push_back(row);
}

}  // namespace

void warmup_step(TrainState& state, const TrainData& data, const RunConfig& config, PromptableSegmenter* seg,
                 const Batch& batch) {
  if (state.phase(config.warmup_iterations) != Phase::warmup) throw PreconditionError("warmup_step called after warm-up");
  const auto labeled = labeled_views(state, data, config, batch);
  const auto unlabeled = unlabeled_views(state, data, config, batch);
  const auto weak = weak_images(unlabeled);
  std::vector<PseudoLabel> targets;
  for (const auto& pred : forward_batch(state.ts.teacher, std::span<const ImageSample>(weak))) {
    targets.push_back(generate_pseudo_label(pred, config.strategy.confidence_threshold));
  }
  const auto dropout_seed = state.rng.perturb();
  const auto sup = supervised_step(state.ts.student, std::span<const LabeledView>(labeled));
  const auto unsup = unsup_step(config.strategy, state.ts.student, std::span<const UnlabeledViews>(unlabeled),
                                std::span<const PseudoLabel>(targets), dropout_seed);
  optimize(state, config, sup, unsup, Phase::warmup);
  if (seg && seg->trainable()) finetune_segmenter(*seg, state, config, labeled);
  ++state.iteration;
}

void interactive_step(TrainState& state, const TrainData& data, const RunConfig& config, PromptableSegmenter& seg,
                      const Batch& batch) {
  if (state.phase(config.warmup_iterations) != Phase::interactive) {
    throw PreconditionError("interactive_step called during warm-up");
  }
  const auto labeled = labeled_views(state, data, config, batch);
  const auto unlabeled = unlabeled_views(state, data, config, batch);
  const auto weak = weak_images(unlabeled);
  const auto preds = forward_batch(state.ts.teacher, std::span<const ImageSample>(weak));
  std::vector<PseudoLabel> targets;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const PseudoLabel fallback = generate_pseudo_label(preds[i], config.strategy.confidence_threshold);
    const auto bundle = prompting::prompts_from_prediction(preds[i], fallback, config.prompt_mode(), state.rng.prompt,
                                                           config.segmenter.sampling);
    targets.push_back(refine_pseudo_label(seg, weak[i], bundle, fallback, config.segmenter.threshold));
  }
  const auto dropout_seed = state.rng.perturb();
  const auto sup = supervised_step(state.ts.student, std::span<const LabeledView>(labeled));
  const auto unsup = unsup_step(config.strategy, state.ts.student, std::span<const UnlabeledViews>(unlabeled),
                                std::span<const PseudoLabel>(targets), dropout_seed);
  optimize(state, config, sup, unsup, Phase::interactive);
  if (config.segmenter.finetune_interactive && seg.trainable()) finetune_segmenter(seg, state, config, labeled);
  ++state.iteration;
}

void train_step(TrainState& state, const TrainData& data, const RunConfig& config, PromptableSegmenter* seg) {
  const Batch batch = make_batch(state, data, config);
  if (state.phase(config.warmup_iterations) == Phase::warmup) {
    warmup_step(state, data, config, seg, batch);
  } else {
    if (!seg) throw ConfigError("the interactive phase needs a segmenter");
    interactive_step(state, data, config, *seg, batch);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'A', 'M', 'A', 'T', 'C', 'H', 'K'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename T>
  void array(const T* data, std::size_t n) {
    pod<std::uint64_t>(n);
    out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(*data)));
  }
  void rng(const Rng& r) {
    std::ostringstream ss;
    ss << r;
    str(ss.str());
  }
  void cycler(const BatchCycler& c) {
    pod<std::uint64_t>(c.pool);
    pod<std::uint64_t>(c.cursor);
    std::vector<std::uint64_t> order(c.order.begin(), c.order.end());
    array(order.data(), order.size());
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) throw IoError("truncated checkpoint: " + path_);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ull << 30)) throw IoError("corrupt checkpoint: " + path_);
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) throw IoError("truncated checkpoint: " + path_);
    return s;
  }
  template <typename T>
  std::vector<T> array() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ull << 32)) throw IoError("corrupt checkpoint: " + path_);
    std::vector<T> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
    if (!in_) throw IoError("truncated checkpoint: " + path_);
    return v;
  }
  Rng rng() {
    std::istringstream ss(str());
    Rng r;
    ss >> r;
    if (!ss) throw IoError("corrupt RNG state in checkpoint: " + path_);
    return r;
  }
  BatchCycler cycler() {
    BatchCycler c;
    c.pool = pod<std::uint64_t>();
    c.cursor = pod<std::uint64_t>();
    const auto order = array<std::uint64_t>();
    c.order.assign(order.begin(), order.end());
    return c;
  }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const fs::path& path, const RunConfig& config, const TrainState& state,
                     const PromptableSegmenter* seg) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp.string());
    Writer w(out);
    out.write(kMagic, sizeof kMagic);
    w.pod<std::uint32_t>(kCheckpointVersion);
    w.str(to_json(config).dump());
    w.pod<std::int64_t>(state.iteration);
    w.pod<std::uint8_t>(state.phase(config.warmup_iterations) == Phase::warmup ? 0 : 1);
    w.pod<std::int32_t>(state.ts.student.config().class_count);
    const auto& s = state.ts.student.parameters();
    const auto& t = state.ts.teacher.parameters();
    w.array(s.data(), static_cast<std::size_t>(s.size()));
    w.array(t.data(), static_cast<std::size_t>(t.size()));
    w.array(state.velocity.data(), static_cast<std::size_t>(state.velocity.size()));
    const std::vector<double> seg_state = seg ? seg->save_state() : std::vector<double>{};
    w.array(seg_state.data(), seg_state.size());
    w.rng(state.rng.augment);
    w.rng(state.rng.perturb);
    w.rng(state.rng.prompt);
    w.rng(state.rng.batch);
    w.cycler(state.labeled);
    w.cycler(state.unlabeled);
    w.pod<std::uint64_t>(state.history.size());
    for (const auto& row : state.history) {
      w.pod<std::int64_t>(row.iteration);
      w.pod<std::uint8_t>(row.phase == Phase::warmup ? 0 : 1);
      for (const double v : {row.loss.sup_dice, row.loss.sup_ce, row.loss.unsup_dice, row.loss.unsup_ce,
                             row.loss.lambda, row.loss.total, row.lr}) {
        w.pod<double>(v);
      }
      w.pod<std::uint8_t>(row.val_dice ? 1 : 0);
      w.pod<double>(row.val_dice.value_or(0.0));
    }
    w.pod<double>(state.best_val_dice);
    w.pod<std::int64_t>(state.best_iteration);
    out.flush();
    if (!out) throw IoError("failed writing checkpoint (disk full?): " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint not found: " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + sizeof magic, kMagic)) throw IoError("not a samatch checkpoint: " + path.string());
  Reader r(in, path.string());
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint " + path.string() + " has schema version " + std::to_string(version) +
                       ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  try {
    ck.config = config_from_json(json::parse(r.str()));
  } catch (const json::exception& e) {
    throw IoError("corrupt config in checkpoint " + path.string() + ": " + e.what());
  }
  auto& st = ck.state;
  st.iteration = r.pod<std::int64_t>();
  const auto phase = r.pod<std::uint8_t>();
  if ((phase == 0) != (st.phase(ck.config.warmup_iterations) == Phase::warmup)) {
    throw IoError("checkpoint " + path.string() + " records a phase inconsistent with its iteration");
  }
  UNetConfig model = ck.config.model;
  model.class_count = r.pod<std::int32_t>();
  st.ts = TeacherStudent<float>::create(model, 0, ck.config.ema_decay);
  const auto student = r.array<float>();
  const auto teacher = r.array<float>();
  const auto velocity = r.array<float>();
  const auto n = static_cast<std::size_t>(st.ts.student.parameter_count());
  if (student.size() != n || teacher.size() != n || velocity.size() != n) {
    throw ShapeError("checkpoint " + path.string() + " parameter count does not match its model config");
  }
  st.ts.student.parameters() = Eigen::Map<const Vector<float>>(student.data(), static_cast<Eigen::Index>(n));
  st.ts.teacher.parameters() = Eigen::Map<const Vector<float>>(teacher.data(), static_cast<Eigen::Index>(n));
  st.velocity = Eigen::Map<const Vector<float>>(velocity.data(), static_cast<Eigen::Index>(n));
  ck.segmenter_state = r.array<double>();
  st.rng.augment = r.rng();
  st.rng.perturb = r.rng();
  st.rng.prompt = r.rng();
  st.rng.batch = r.rng();
  st.labeled = r.cycler();
  st.unlabeled = r.cycler();
  const auto rows = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < rows; ++i) {
    HistoryRow row;
    row.iteration = r.pod<std::int64_t>();
    row.phase = r.pod<std::uint8_t>() == 0 ? Phase::warmup : Phase::interactive;
    row.loss.sup_dice = r.pod<double>();
    row.loss.sup_ce = r.pod<double>();
    row.loss.unsup_dice = r.pod<double>();
    row.loss.unsup_ce = r.pod<double>();
    row.loss.lambda = r.pod<double>();
    row.loss.total = r.pod<double>();
    row.lr = r.pod<double>();
    const bool has_val = r.pod<std::uint8_t>() != 0;
    const double val = r.pod<double>();
    if (has_val) row.val_dice = val;
    st.history.push_back(row);
  }
  st.best_val_dice = r.pod<double>();
  st.best_iteration = r.pod<std::int64_t>();
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in checkpoint: " + path.string());
  return ck;
}

void restore(const Checkpoint& ckpt, const RunConfig& config, TrainState& state, PromptableSegmenter* seg) {
  UNetConfig model = config.model;
  model.class_count = state.ts.student.config().class_count;
  if (!(ckpt.state.ts.student.config() == model)) {
    throw ConfigError("checkpoint architecture differs from the configured model");
  }
  if (ckpt.state.labeled.pool != state.labeled.pool || ckpt.state.unlabeled.pool != state.unlabeled.pool) {
    throw ConfigError("checkpoint was trained on differently sized labeled/unlabeled pools");
  }
  if (ckpt.state.iteration > config.total_iterations) {
    throw ConfigError("checkpoint iteration exceeds trainer.total_iterations");
  }
  state = ckpt.state;
  state.ts.ema_decay = config.ema_decay;
  if (seg) {
    seg->load_state(ckpt.segmenter_state);
  } else if (!ckpt.segmenter_state.empty()) {
    throw ConfigError("checkpoint carries segmenter state but no segmenter is configured");
  }
}

// ---------------------------------------------------------------------------
// Evaluation and the run loop

Evaluation evaluate(const UNet<float>& net, const std::vector<data::Slice>& slices, int class_count) {
  if (slices.empty()) throw PreconditionError("cannot evaluate an empty split");
  Evaluation out;
  for (const auto& s : slices) {
    if (!s.label) throw PreconditionError("slice " + s.image.id + " has no reference label");
    LabelMask pred = predict_labels(net, s.image);
    pred.class_count = class_count;
    out.cases.push_back(evaluate_case(s.image.id, pred, *s.label, s.image.spacing));
  }
  out.table = aggregate(out.cases);
  return out;
}

void write_metrics_csv(const fs::path& path, const std::vector<HistoryRow>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "iteration,phase,sup_dice,sup_ce,unsup_dice,unsup_ce,lambda,total,lr,val_dice\n";
  char buf[512];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%ld,%s,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,", r.iteration,
                  to_string(r.phase).c_str(), r.loss.sup_dice, r.loss.sup_ce, r.loss.unsup_dice, r.loss.unsup_ce,
                  r.loss.lambda, r.loss.total, r.lr);
    out << buf;
    if (r.val_dice) {
      std::snprintf(buf, sizeof buf, "%.10g", *r.val_dice);
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

json make_report(const std::string& method, const std::vector<std::pair<std::string, Evaluation>>& splits) {
  json out{{"method", method}, {"splits", json::array()}, {"per_case", json::object()}};
  for (const auto& [name, eval] : splits) {
    out["splits"].push_back(to_json(eval.table, name, method));
    json cases = json::array();
    for (const auto& c : eval.cases) cases.push_back(to_json(c));
    out["per_case"][name] = cases;
  }
  return out;
}

std::string method_name(const RunConfig& config) {
  const bool uni = config.strategy.kind == StrategyKind::unimatch;
  const auto& kind = config.segmenter.kind;
  if (kind == "none" || config.warmup_iterations == config.total_iterations) return uni ? "UniMatch" : "FixMatch";
  std::string seg = kind == "sam" ? "SAM" : kind == "medsam" ? "MedSAM" : kind == "oracle" ? "Oracle" : "Linear";
  return (uni ? "Uni-" : "Fix-") + seg;
}

namespace {

std::string iteration_name(long iteration) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iter_%06ld.ckpt", iteration);
  return buf;
}

}  // namespace

RunResult run(const RunConfig& config, const RunOptions& options) {
  validate(config);
  if (config.manifest.empty()) throw ConfigError("data.manifest is not set");
  if (!fs::exists(config.manifest)) throw ConfigError("manifest not found: " + config.manifest);
  const auto manifest = data::load_manifest(config.manifest);
  const TrainData train_data = load_train_data(manifest, config.image_size);
  auto seg = make_segmenter(config, manifest);

  const fs::path dir(config.output_dir);
  const fs::path ckpt_dir = dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  {
    std::ofstream out(dir / "config.json");
    if (!out) throw IoError("cannot write " + (dir / "config.json").string());
    out << to_json(config).dump(2) << '\n';
  }

  TrainState state = initial_state(config, train_data);
  if (options.resume) restore(load_checkpoint(*options.resume), config, state, seg.get());

  const long stop = std::min(options.stop_at.value_or(config.total_iterations), config.total_iterations);
  while (state.iteration < stop) {
    train_step(state, train_data, config, seg.get());
    HistoryRow& row = state.history.back();
    const bool eval_now = state.iteration % config.eval_every == 0 || state.iteration == config.total_iterations;
    if (eval_now && !train_data.val.empty()) {
      const auto val = evaluate(state.ts.student, train_data.val, train_data.class_count);
      row.val_dice = val.table.mean_dice;
      if (val.table.mean_dice > state.best_val_dice) {
        state.best_val_dice = val.table.mean_dice;
        state.best_iteration = state.iteration;
        save_checkpoint(ckpt_dir / "best.ckpt", config, state, seg.get());
      }
    }
    if (options.on_step) options.on_step(row);
    if (state.iteration % config.checkpoint_every == 0 || state.iteration == stop) {
      save_checkpoint(ckpt_dir / iteration_name(state.iteration), config, state, seg.get());
      write_metrics_csv(dir / "metrics.csv", state.history);
    }
  }
  write_metrics_csv(dir / "metrics.csv", state.history);

  RunResult result;
  result.run_dir = dir;
  if (state.iteration < config.total_iterations) {
    result.state = std::move(state);
    return result;
  }

  UNet<float> final_net = state.ts.student;
  if (state.best_iteration >= 0 && fs::exists(ckpt_dir / "best.ckpt")) {
    final_net = load_checkpoint(ckpt_dir / "best.ckpt").state.ts.student;
  }
  std::vector<std::pair<std::string, Evaluation>> splits;
  if (!train_data.val.empty()) splits.emplace_back("val", evaluate(final_net, train_data.val, train_data.class_count));
  if (!train_data.test.empty()) splits.emplace_back("test", evaluate(final_net, train_data.test, train_data.class_count));
  result.report = make_report(method_name(config), splits);
  result.report["best_iteration"] = state.best_iteration;
  {
    std::ofstream out(dir / "report.json");
    if (!out) throw IoError("cannot write " + (dir / "report.json").string());
    out << result.report.dump(2) << '\n';
  }
  if (config.overlays) {
    fs::create_directories(dir / "overlays");
    for (const auto& s : train_data.test) {
      std::string name = s.image.id;
      std::replace(name.begin(), name.end(), '/', '_');
      data::write_overlay(dir / "overlays" / (name + ".png"), s.image.pixels, predict_labels(final_net, s.image));
    }
  }
  result.state = std::move(state);
  return result;
}

}  // namespace samatch::trainer
