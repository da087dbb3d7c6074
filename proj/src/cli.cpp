#include "samatch/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "samatch/trainer.hpp"

namespace samatch::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_table(const MetricsTable& t, const std::string& title) {
  std::ostringstream out;
  char buf[256];
  out << title << " (" << t.n_cases << " cases)\n";
  std::snprintf(buf, sizeof buf, "%-8s %-20s %-20s\n", "class", "dice", "hd95");
  out << buf;
  for (const auto& c : t.per_class) {
    char dice[64];
    char hd[64];
    std::snprintf(dice, sizeof dice, "%.4f +- %.4f", c.dice_mean, c.dice_sd);
    std::snprintf(hd, sizeof hd, "%.4f +- %.4f", c.hd95_mean, c.hd95_sd);
    std::snprintf(buf, sizeof buf, "%-8d %-20s %-20s\n", c.class_id, dice, hd);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%-8s %-20.4f %-20.4f\n", "mean", t.mean_dice, t.mean_hd95);
  out << buf;
  const auto& f = t.convention_flag_counts;
  if (f.at("pred_empty") + f.at("truth_empty") > 0) {
    out << "empty-mask conventions: pred_empty=" << f.at("pred_empty") << " truth_empty=" << f.at("truth_empty")
        << "\n";
  }
  return out.str();
}

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string file_stem(std::string id) {
  std::replace(id.begin(), id.end(), '/', '_');
  return id;
}

std::vector<data::Slice> split_slices(const data::SplitManifest& manifest, data::Split split, int image_size,
                                      bool labels) {
  std::vector<data::Slice> out;
  for (const auto* e : manifest.select(split)) {
    for (auto& s : data::load_slices(*e, manifest.class_count, {image_size, labels})) out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  data::SynthConfig cfg;
  std::string out;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const auto manifest = data::synth_generate(a.cfg, a.out);
  out << "wrote " << a.cfg.n_images << " synthetic cases to " << a.out << " (manifest: "
      << (fs::path(a.out) / "manifest.json").string() << ", " << manifest.select(data::Split::train_labeled).size()
      << " labeled)\n";
  return kOk;
}

struct ManifestArgs {
  std::string root;
  std::string protocol;
  int labeled = 1;
  int val = 0;
  int test = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_manifest(const ManifestArgs& a, std::ostream& out) {
  const auto protocol =
      a.protocol == "custom" ? data::custom_protocol(a.labeled, a.val, a.test) : data::named_protocol(a.protocol);
  const auto manifest = data::build_manifest(a.root, protocol, a.seed);
  const fs::path path = a.out.empty() ? fs::path(a.root) / "manifest.json" : fs::path(a.out);
  data::save_manifest(manifest, path);
  out << "manifest " << path.string() << ": " << manifest.select(data::Split::train_labeled).size() << " labeled, "
      << manifest.select(data::Split::train_unlabeled).size() << " unlabeled, "
      << manifest.select(data::Split::val).size() << " val, " << manifest.select(data::Split::test).size()
      << " test\n";
  return kOk;
}

struct ConvertArgs {
  std::string image;
  std::string label;
  std::string root;
  data::ConvertOptions options;
};

int cmd_convert(const ConvertArgs& a, std::ostream& out) {
  std::optional<fs::path> label;
  if (!a.label.empty()) label = a.label;
  data::convert_nifti(a.image, label, a.root, a.options);
  out << "converted " << a.image << " into " << (fs::path(a.root) / a.options.case_id).string() << "\n";
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string resume;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  std::optional<fs::path> file;
  if (!a.config.empty()) file = a.config;
  const auto config = trainer::resolve_config(file, a.overrides);
  trainer::RunOptions options;
  if (!a.resume.empty()) options.resume = a.resume;
  const long total = config.total_iterations;
  const long every = std::max(1L, config.eval_every);
  options.on_step = [&](const trainer::HistoryRow& row) {
    if (row.iteration % every != 0 && row.iteration != total) return;
    char buf[256];
    std::snprintf(buf, sizeof buf, "iter %ld/%ld [%s] loss %.4f (sup %.4f unsup %.4f lambda %.4f) lr %.2e",
                  row.iteration, total, trainer::to_string(row.phase).c_str(), row.loss.total,
                  row.loss.sup_dice + row.loss.sup_ce, row.loss.unsup_dice + row.loss.unsup_ce, row.loss.lambda,
                  row.lr);
    out << buf;
    if (row.val_dice) out << " val_dice " << *row.val_dice;
    out << '\n';
  };
  const auto result = trainer::run(config, options);
  for (const auto& split : result.report.value("splits", json::array())) {
    MetricsTable t;
    t.n_cases = split.at("n_cases").get<int>();
    t.mean_dice = split.at("mean_dice").get<double>();
    t.mean_hd95 = split.at("mean_hd95").get<double>();
    t.convention_flag_counts = split.at("convention_flag_counts").get<std::map<std::string, int>>();
    for (const auto& c : split.at("per_class")) {
      t.per_class.push_back({c.at("class").get<int>(), c.at("dice_mean").get<double>(), c.at("dice_sd").get<double>(),
                             c.at("hd95_mean").get<double>(), c.at("hd95_sd").get<double>()});
    }
    out << format_table(t, result.report.at("method").get<std::string>() + " / " + split.at("split").get<std::string>());
  }
  out << "run directory: " << result.run_dir.string() << "\n";
  return kOk;
}

struct EvaluateArgs {
  std::string checkpoint;
  std::string predictions_dir;
  std::string manifest;
  std::string split = "test";
  std::string out = "report.json";
  std::string overlays;
  int image_size = -1;
  std::string method;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  if (a.checkpoint.empty() == a.predictions_dir.empty()) {
    throw ConfigError("evaluate needs exactly one of --checkpoint or --predictions-dir");
  }
  const auto split = data::parse_split(a.split);
  std::optional<trainer::Checkpoint> ckpt;
  if (!a.checkpoint.empty()) ckpt = trainer::load_checkpoint(a.checkpoint);
  std::string manifest_path = a.manifest;
  if (manifest_path.empty() && ckpt) manifest_path = ckpt->config.manifest;
  if (manifest_path.empty()) throw ConfigError("evaluate needs --manifest");
  if (!fs::exists(manifest_path)) throw ConfigError("manifest not found: " + manifest_path);
  const auto manifest = data::load_manifest(manifest_path);
  int image_size = a.image_size >= 0 ? a.image_size : ckpt ? ckpt->config.image_size : 0;
  const auto slices = split_slices(manifest, split, image_size, true);
  if (slices.empty()) throw ConfigError("split '" + a.split + "' of " + manifest_path + " is empty");

  trainer::Evaluation eval;
  std::string method = a.method;
  if (ckpt) {
    const auto& net = ckpt->state.ts.student;
    eval = trainer::evaluate(net, slices, manifest.class_count);
    if (method.empty()) method = trainer::method_name(ckpt->config);
    if (!a.overlays.empty()) {
      fs::create_directories(a.overlays);
      for (const auto& s : slices) {
        data::write_overlay(fs::path(a.overlays) / (file_stem(s.image.id) + ".png"), s.image.pixels,
                            predict_labels(net, s.image));
      }
    }
  } else {
    if (method.empty()) method = "predictions";
    for (const auto& s : slices) {
      if (!s.label) throw PreconditionError("slice " + s.image.id + " has no reference label");
      const auto slash = s.image.id.find('/');
      const fs::path path = fs::path(a.predictions_dir) / s.image.id.substr(0, slash) /
                            ("lbl_" + s.image.id.substr(slash + 1) + ".png");
      if (!fs::exists(path)) throw IoError("prediction missing: " + path.string());
      const auto raw = data::read_png(path);
      LabelMask pred{augment::resize_nearest(raw.cast<int>(), s.image.height(), s.image.width()), manifest.class_count};
      eval.cases.push_back(evaluate_case(s.image.id, pred, *s.label, s.image.spacing));
    }
    eval.table = aggregate(eval.cases);
  }
  const json report = trainer::make_report(method, {{a.split, eval}});
  write_json(a.out, report);
  out << format_table(eval.table, method + " / " + a.split);
  out << "report: " << a.out << "\n";
  return kOk;
}

struct PromptArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "train_unlabeled";
  std::string mode = "box";
  std::string out = "prompts.jsonl";
  double threshold = -1.0;
  std::uint64_t seed = 0;
  bool from_labels = false;
};

struct Teacher {
  std::optional<trainer::Checkpoint> ckpt;
  data::SplitManifest manifest;
  int image_size = 0;
  double threshold = 0.95;
};

Teacher load_teacher(const std::string& checkpoint, const std::string& manifest_path, double threshold,
                     bool need_checkpoint) {
  Teacher t;
  if (!checkpoint.empty()) {
    t.ckpt = trainer::load_checkpoint(checkpoint);
  } else if (need_checkpoint) {
    throw ConfigError("--checkpoint is required unless prompts come from labels");
  }
  std::string path = manifest_path;
  if (path.empty() && t.ckpt) path = t.ckpt->config.manifest;
  if (path.empty()) throw ConfigError("--manifest is required");
  if (!fs::exists(path)) throw ConfigError("manifest not found: " + path);
  t.manifest = data::load_manifest(path);
  t.image_size = t.ckpt ? t.ckpt->config.image_size : 0;
  t.threshold = threshold > 0 ? threshold : t.ckpt ? t.ckpt->config.strategy.confidence_threshold : 0.95;
  return t;
}

/// Teacher pseudo-label and prompts for one slice.
std::pair<PseudoLabel, PromptBundle> prompts_for(const Teacher& t, const data::Slice& s,
                                                 const std::map<std::string, LabelMask>& refs, PromptMode mode,
                                                 bool from_labels, Rng& rng) {
  if (from_labels) {
    const auto it = refs.find(s.image.id);
    if (it == refs.end()) throw PreconditionError("no reference label for " + s.image.id);
    return {as_pseudo_label(it->second), prompting::prompts_from_label(it->second, rng, mode)};
  }
  const auto pred = forward(t.ckpt->state.ts.teacher, s.image);
  auto pseudo = generate_pseudo_label(pred, t.threshold);
  auto bundle = prompting::prompts_from_prediction(pred, pseudo, mode, rng);
  return {std::move(pseudo), std::move(bundle)};
}

int cmd_extract_prompts(const PromptArgs& a, std::ostream& out) {
  const Teacher t = load_teacher(a.checkpoint, a.manifest, a.threshold, !a.from_labels);
  const auto mode = prompting::parse_prompt_mode(a.mode);
  const auto slices = split_slices(t.manifest, data::parse_split(a.split), t.image_size, false);
  const auto refs = a.from_labels ? trainer::reference_labels(t.manifest, t.image_size) : std::map<std::string, LabelMask>{};
  Rng rng(a.seed);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  std::ofstream file(a.out);
  if (!file) throw IoError("cannot write " + a.out);
  for (const auto& s : slices) {
    const auto [pseudo, bundle] = prompts_for(t, s, refs, mode, a.from_labels, rng);
    file << prompting::to_json(s.image.id, bundle).dump() << '\n';
  }
  out << "wrote " << slices.size() << " prompt records to " << a.out << "\n";
  return kOk;
}

struct RefineArgs {
  PromptArgs prompt;
  std::string prompts_file;
  std::string segmenter = "oracle";
  std::string segmenter_checkpoint;
  std::string worker = "python3 tools/sam_worker.py";
  int boundary_noise = 0;
  double failure_rate = 0.0;
  double score_threshold = 0.5;
  std::string out_dir = "refined";
};

int cmd_refine(const RefineArgs& a, std::ostream& out) {
  const bool from_file = !a.prompts_file.empty();
  const Teacher t = load_teacher(a.prompt.checkpoint, a.prompt.manifest, a.prompt.threshold, !a.prompt.from_labels);
  const auto mode = prompting::parse_prompt_mode(a.prompt.mode);
  const auto slices = split_slices(t.manifest, data::parse_split(a.prompt.split), t.image_size, false);
  const auto refs = trainer::reference_labels(t.manifest, t.image_size);

  trainer::RunConfig rc;
  rc.image_size = t.image_size;
  rc.seed = a.prompt.seed;
  rc.segmenter.kind = a.segmenter;
  rc.segmenter.checkpoint_path = a.segmenter_checkpoint;
  rc.segmenter.worker_command = a.worker;
  rc.segmenter.boundary_noise = a.boundary_noise;
  rc.segmenter.failure_rate = a.failure_rate;
  if (a.segmenter == "none") throw ConfigError("refine needs a segmenter");
  auto seg = trainer::make_segmenter(rc, t.manifest);

  std::map<std::string, PromptBundle> stored;
  if (from_file) {
    std::ifstream in(a.prompts_file);
    if (!in) throw IoError("cannot open prompts file " + a.prompts_file);
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      std::string id;
      json record;
      try {
        record = json::parse(line);
      } catch (const json::exception& e) {
        throw IoError("malformed prompt record in " + a.prompts_file + ": " + e.what());
      }
      auto bundle = prompting::bundle_from_json(record, &id);
      stored.emplace(id, std::move(bundle));
    }
  }

  Rng rng(a.prompt.seed);
  json quality = json::array();
  double before_sum = 0.0;
  double after_sum = 0.0;
  int with_reference = 0;
  for (const auto& s : slices) {
    auto [pseudo, bundle] = (from_file && !t.ckpt)
                                ? std::pair<PseudoLabel, PromptBundle>{}
                                : prompts_for(t, s, refs, mode, a.prompt.from_labels, rng);
    if (from_file) {
      const auto it = stored.find(s.image.id);
      if (it == stored.end()) throw IoError("prompts file has no record for " + s.image.id);
      bundle = it->second;
      if (!t.ckpt) {
        pseudo.classes = ClassPlane::Zero(s.image.height(), s.image.width());
        pseudo.valid = MaskPlane::Constant(s.image.height(), s.image.width(), false);
        pseudo.class_count = t.manifest.class_count;
      }
    }
    const PseudoLabel refined = refine_pseudo_label(*seg, s.image, bundle, pseudo, a.score_threshold);
    const auto slash = s.image.id.find('/');
    const fs::path dir = fs::path(a.out_dir) / s.image.id.substr(0, slash);
    fs::create_directories(dir);
    data::write_png8(dir / ("lbl_" + s.image.id.substr(slash + 1) + ".png"), refined.classes.cast<std::uint8_t>());

    json item{{"image_id", s.image.id}};
    const auto ref = refs.find(s.image.id);
    if (ref == refs.end()) {
      item["reference"] = "absent";
    } else {
      const auto before = evaluate_case(s.image.id, LabelMask{pseudo.classes, t.manifest.class_count}, ref->second);
      const auto after = evaluate_case(s.image.id, LabelMask{refined.classes, t.manifest.class_count}, ref->second);
      double b = 0.0;
      double f = 0.0;
      for (std::size_t k = 0; k < before.dice.size(); ++k) {
        b += before.dice[k] / double(before.dice.size());
        f += after.dice[k] / double(after.dice.size());
      }
      item["reference"] = "present";
      item["dice_before"] = b;
      item["dice_after"] = f;
      before_sum += b;
      after_sum += f;
      ++with_reference;
    }
    quality.push_back(std::move(item));
  }
  write_json(fs::path(a.out_dir) / "quality.json", json{{"images", quality}});
  out << "refined " << slices.size() << " images into " << a.out_dir;
  if (with_reference > 0) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "; mean dice before %.4f after %.4f over %d referenced images",
                  before_sum / with_reference, after_sum / with_reference, with_reference);
    out << buf;
  }
  out << "\n";
  return kOk;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string split = "test";
  std::string out;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  struct Entry {
    std::string method;
    std::vector<CaseMetrics> cases;
    MetricsTable table;
  };
  std::vector<Entry> entries;
  for (const auto& r : a.runs) {
    fs::path path(r);
    if (fs::is_directory(path)) path /= "report.json";
    const json report = read_json(path);
    const auto& per_case = report.at("per_case");
    if (!per_case.contains(a.split)) throw ConfigError(path.string() + " has no '" + a.split + "' split");
    Entry e;
    e.method = report.at("method").get<std::string>();
    for (const auto& c : per_case.at(a.split)) e.cases.push_back(case_metrics_from_json(c));
    e.table = aggregate(e.cases);
    entries.push_back(std::move(e));
  }
  json doc{{"split", a.split}, {"methods", json::array()}, {"wilcoxon", json::array()}};
  for (const auto& e : entries) {
    out << format_table(e.table, e.method + " / " + a.split);
    doc["methods"].push_back(to_json(e.table, a.split, e.method));
  }
  auto case_means = [](const Entry& e) {
    std::vector<double> v;
    for (const auto& c : e.cases) {
      double m = 0.0;
      for (const double d : c.dice) m += d / double(c.dice.size());
      v.push_back(m);
    }
    return v;
  };
  const auto base = case_means(entries.front());
  for (std::size_t i = 1; i < entries.size(); ++i) {
    const auto other = case_means(entries[i]);
    if (other.size() != base.size()) throw ConfigError("runs were evaluated on different case lists");
    for (std::size_t k = 0; k < base.size(); ++k) {
      if (entries[i].cases[k].case_id != entries.front().cases[k].case_id) {
        throw ConfigError("runs were evaluated on different case lists");
      }
    }
    const double p = wilcoxon_signed_rank(other, base);
    char buf[256];
    std::snprintf(buf, sizeof buf, "wilcoxon %s vs %s: p = %.6g\n", entries[i].method.c_str(),
                  entries.front().method.c_str(), p);
    out << buf;
    doc["wilcoxon"].push_back({{"method", entries[i].method}, {"baseline", entries.front().method}, {"p_value", p}});
  }
  if (!a.out.empty()) write_json(a.out, doc);
  return kOk;
}

}  // namespace

int main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semi-supervised segmentation with promptable pseudo-label refinement"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic shapes dataset");
  s->add_option("--out", synth.out, "output dataset root")->required();
  s->add_option("--n-images", synth.cfg.n_images);
  s->add_option("--image-size", synth.cfg.image_size);
  s->add_option("--class-count", synth.cfg.class_count);
  s->add_option("--min-shapes", synth.cfg.min_shapes);
  s->add_option("--max-shapes", synth.cfg.max_shapes);
  s->add_option("--background", synth.cfg.background);
  s->add_option("--contrast", synth.cfg.contrast);
  s->add_option("--class-contrast-step", synth.cfg.class_contrast_step);
  s->add_option("--bias", synth.cfg.bias_amplitude);
  s->add_option("--noise", synth.cfg.noise_sigma);
  s->add_option("--labeled", synth.cfg.labeled);
  s->add_option("--val", synth.cfg.val);
  s->add_option("--test", synth.cfg.test);
  s->add_option("--seed", synth.cfg.seed);

  ManifestArgs man;
  auto* m = app.add_subcommand("manifest", "build a split manifest for a dataset tree");
  m->add_option("--root", man.root)->required();
  m->add_option("--protocol", man.protocol, "acdc_1|acdc_3|busi_10|busi_30|mrliver_1|mrliver_3|mrliver_5|custom")
      ->required();
  m->add_option("--labeled", man.labeled, "custom protocol only");
  m->add_option("--val", man.val, "custom protocol only");
  m->add_option("--test", man.test, "custom protocol only");
  m->add_option("--seed", man.seed);
  m->add_option("--out", man.out, "default <root>/manifest.json");

  ConvertArgs conv;
  auto* c = app.add_subcommand("convert", "convert a NIfTI volume into the case layout");
  c->add_option("--image", conv.image)->required();
  c->add_option("--label", conv.label);
  c->add_option("--root", conv.root)->required();
  c->add_option("--case-id", conv.options.case_id)->required();
  c->add_option("--frame", conv.options.frame, "tag for the slices, e.g. ED");
  c->add_option("--modality", conv.options.modality);
  c->add_option("--class-count", conv.options.class_count);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "run warm-up and interactive training");
  t->add_option("--config", train.config, "JSON run configuration");
  t->add_option("--override", train.overrides, "dotted key=value, repeatable");
  t->add_option("--resume", train.resume, "checkpoint to continue from");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "score a checkpoint or a predictions tree");
  e->add_option("--checkpoint", ev.checkpoint);
  e->add_option("--predictions-dir", ev.predictions_dir, "tree of <case>/lbl_###.png predictions");
  e->add_option("--manifest", ev.manifest);
  e->add_option("--split", ev.split);
  e->add_option("--out", ev.out);
  e->add_option("--overlays", ev.overlays, "directory for contour overlays");
  e->add_option("--image-size", ev.image_size);
  e->add_option("--method", ev.method);

  PromptArgs pa;
  auto* p = app.add_subcommand("extract-prompts", "write teacher-derived prompts as JSON lines");
  p->add_option("--checkpoint", pa.checkpoint);
  p->add_option("--manifest", pa.manifest);
  p->add_option("--split", pa.split);
  p->add_option("--mode", pa.mode, "points|box");
  p->add_option("--out", pa.out);
  p->add_option("--threshold", pa.threshold, "confidence gate; default from the checkpoint");
  p->add_option("--seed", pa.seed);
  p->add_flag("--from-labels", pa.from_labels, "derive prompts from reference labels instead");

  RefineArgs ra;
  auto* r = app.add_subcommand("refine", "refine pseudo-labels with a promptable segmenter");
  r->add_option("--checkpoint", ra.prompt.checkpoint);
  r->add_option("--manifest", ra.prompt.manifest);
  r->add_option("--split", ra.prompt.split);
  r->add_option("--mode", ra.prompt.mode);
  r->add_option("--threshold", ra.prompt.threshold);
  r->add_option("--seed", ra.prompt.seed);
  r->add_flag("--from-labels", ra.prompt.from_labels);
  r->add_option("--prompts", ra.prompts_file, "JSON-lines prompts from extract-prompts");
  r->add_option("--segmenter", ra.segmenter, "oracle|linear|sam|medsam");
  r->add_option("--segmenter-checkpoint", ra.segmenter_checkpoint);
  r->add_option("--worker", ra.worker);
  r->add_option("--boundary-noise", ra.boundary_noise);
  r->add_option("--failure-rate", ra.failure_rate);
  r->add_option("--score-threshold", ra.score_threshold);
  r->add_option("--out-dir", ra.out_dir);

  ReportArgs rep;
  auto* q = app.add_subcommand("report", "compare runs; Wilcoxon tests against the first");
  q->add_option("runs", rep.runs, "run directories or report.json files")->required()->expected(1, -1);
  q->add_option("--split", rep.split);
  q->add_option("--out", rep.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    return kValidationError;
  }

  try {
    if (*s) return cmd_synth(synth, out);
    if (*m) return cmd_manifest(man, out);
    if (*c) return cmd_convert(conv, out);
    if (*t) return cmd_train(train, out);
    if (*e) return cmd_evaluate(ev, out);
    if (*p) return cmd_extract_prompts(pa, out);
    if (*r) return cmd_refine(ra, out);
    if (*q) return cmd_report(rep, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kValidationError;
  } catch (const PreconditionError& ex) {
    err << "error: " << ex.what() << "\n";
    return kValidationError;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kRuntimeError;
  }
  return kValidationError;
}

}  // namespace samatch::cli
