#include "samatch/prompting.hpp"

#include <algorithm>
#include <array>

namespace samatch {

bool ClassPromptSet::has_positive_point() const {
  return std::any_of(points.begin(), points.end(), [](const PointPrompt& p) { return p.polarity == Polarity::positive; });
}

const ClassPromptSet* PromptBundle::find(int class_id) const {
  for (const auto& entry : classes) {
    if (entry.class_id == class_id) return &entry;
  }
  return nullptr;
}

namespace prompting {

namespace {

struct Pixel {
  int row;
  int col;
};

/// Draws up to `count` distinct entries uniformly by partial Fisher-Yates.
std::vector<Pixel> sample_without_replacement(std::vector<Pixel> pool, int count, Rng& rng) {
  const auto n = static_cast<int>(pool.size());
  const int take = std::min(count, n);
  for (int i = 0; i < take; ++i) {
    const int j = std::uniform_int_distribution<int>(i, n - 1)(rng);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(take));
  return pool;
}

void check_class(int class_id, int class_count) {
  if (class_id < 1 || class_id > class_count) {
    throw PreconditionError("prompt class id " + std::to_string(class_id) + " outside [1," +
                            std::to_string(class_count) + "]");
  }
}

}  // namespace

ComponentMap connected_components(const MaskPlane& binary) {
  const auto h = static_cast<int>(binary.rows());
  const auto w = static_cast<int>(binary.cols());
  ComponentMap out;
  out.labels = ClassPlane::Zero(h, w);
  std::vector<Pixel> stack;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!binary(r, c) || out.labels(r, c) != 0) continue;
      Component comp;
      comp.label = static_cast<int>(out.components.size()) + 1;
      comp.first_row = r;
      comp.first_col = c;
      comp.bounds = BoxPrompt{r, c, r, c};
      out.labels(r, c) = comp.label;
      stack.push_back({r, c});
      while (!stack.empty()) {
        const Pixel p = stack.back();
        stack.pop_back();
        ++comp.size;
        comp.bounds.row_min = std::min(comp.bounds.row_min, p.row);
        comp.bounds.row_max = std::max(comp.bounds.row_max, p.row);
        comp.bounds.col_min = std::min(comp.bounds.col_min, p.col);
        comp.bounds.col_max = std::max(comp.bounds.col_max, p.col);
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const int nr = p.row + dr;
            const int nc = p.col + dc;
            if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
            if (!binary(nr, nc) || out.labels(nr, nc) != 0) continue;
            out.labels(nr, nc) = comp.label;
            stack.push_back({nr, nc});
          }
        }
      }
      out.components.push_back(comp);
    }
  }
  return out;
}

std::optional<BoxPrompt> extract_box_prompt(const PseudoLabel& pseudo, int class_id) {
  check_class(class_id, pseudo.class_count);
  const MaskPlane binary = (pseudo.classes == class_id) && pseudo.valid;
  const auto map = connected_components(binary);
  if (map.components.empty()) return std::nullopt;
  const Component* best = &map.components.front();
  for (const auto& comp : map.components) {
    if (comp.size > best->size) best = &comp;
  }
  BoxPrompt box = best->bounds;
  const int h = pseudo.height();
  const int w = pseudo.width();
  auto pad = [](int& lo, int& hi, int limit) {
    const int extent = hi - lo + 1;
    if (extent >= 3) return;
    const int margin = (3 - extent + 1) / 2;
    lo -= margin;
    hi += margin;
    lo = std::max(lo, 0);
    hi = std::min(hi, limit - 1);
  };
  pad(box.row_min, box.row_max, h);
  pad(box.col_min, box.col_max, w);
  return box;
}

template <typename Scalar>
std::optional<ClassPromptSet> extract_point_prompts(const SoftPrediction<Scalar>& pred, const PseudoLabel& pseudo,
                                                    int class_id, Rng& rng, const PointSampling& sampling) {
  check_class(class_id, pseudo.class_count);
  if (pred.height != pseudo.height() || pred.width != pseudo.width()) {
    throw ShapeError("point prompts: prediction and pseudo label shapes differ");
  }
  if (class_id >= pred.channels()) throw ShapeError("point prompts: prediction lacks the requested class channel");

  std::vector<Pixel> positives;
  std::vector<Pixel> negatives;
  std::optional<Pixel> most_probable;
  double best_prob = -1.0;
  for (int r = 0; r < pseudo.height(); ++r) {
    for (int c = 0; c < pseudo.width(); ++c) {
      if (pseudo.classes(r, c) != class_id) {
        negatives.push_back({r, c});
        continue;
      }
      const double p = static_cast<double>(pred.at(class_id, r, c));
      if (pseudo.valid(r, c) && p > sampling.confidence) positives.push_back({r, c});
      if (p > best_prob) {
        best_prob = p;
        most_probable = Pixel{r, c};
      }
    }
  }
  if (positives.empty()) {
    if (!most_probable) return std::nullopt;
    positives.push_back(*most_probable);
  }

  ClassPromptSet out;
  out.class_id = class_id;
  for (const auto& p : sample_without_replacement(std::move(positives), sampling.positives, rng)) {
    out.points.push_back({p.row, p.col, Polarity::positive});
  }
  for (const auto& p : sample_without_replacement(std::move(negatives), sampling.negatives, rng)) {
    out.points.push_back({p.row, p.col, Polarity::negative});
  }
  if (out.points.empty()) return std::nullopt;
  return out;
}

template <typename Scalar>
PromptBundle prompts_from_prediction(const SoftPrediction<Scalar>& pred, const PseudoLabel& pseudo, PromptMode mode,
                                     Rng& rng, const PointSampling& sampling) {
  PromptBundle bundle;
  bundle.source = PromptSource::teacher_prediction;
  for (int k = 1; k <= pseudo.class_count; ++k) {
    if (mode == PromptMode::box) {
      if (auto box = extract_box_prompt(pseudo, k)) bundle.classes.push_back(ClassPromptSet{k, {}, box});
    } else if (auto points = extract_point_prompts(pred, pseudo, k, rng, sampling)) {
      bundle.classes.push_back(std::move(*points));
    }
  }
  return bundle;
}

PromptBundle prompts_from_label(const LabelMask& label, Rng& rng, PromptMode mode, const PointSampling& sampling) {
  const PseudoLabel pseudo = as_pseudo_label(label);
  PromptBundle bundle;
  if (mode == PromptMode::box) {
    for (int k = 1; k <= label.class_count; ++k) {
      if (auto box = extract_box_prompt(pseudo, k)) bundle.classes.push_back(ClassPromptSet{k, {}, box});
    }
  } else {
    bundle = prompts_from_prediction(one_hot<double>(label.classes, label.class_count), pseudo, mode, rng, sampling);
  }
  bundle.source = PromptSource::ground_truth;
  return bundle;
}

nlohmann::json to_json(const std::string& image_id, const PromptBundle& bundle) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& entry : bundle.classes) {
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : entry.points) {
      points.push_back({p.row, p.col, p.polarity == Polarity::positive ? "positive" : "negative"});
    }
    nlohmann::json item{{"class", entry.class_id}, {"points", points}};
    if (entry.box) {
      item["box"] = {entry.box->row_min, entry.box->col_min, entry.box->row_max, entry.box->col_max};
    } else {
      item["box"] = nullptr;
    }
    classes.push_back(std::move(item));
  }
  return nlohmann::json{{"image_id", image_id},
                        {"source", bundle.source == PromptSource::ground_truth ? "ground_truth" : "teacher_prediction"},
                        {"classes", classes}};
}

PromptBundle bundle_from_json(const nlohmann::json& record, std::string* image_id) {
  try {
    PromptBundle bundle;
    bundle.source = record.at("source").get<std::string>() == "ground_truth" ? PromptSource::ground_truth
                                                                            : PromptSource::teacher_prediction;
    for (const auto& item : record.at("classes")) {
      ClassPromptSet entry;
      entry.class_id = item.at("class").get<int>();
      for (const auto& p : item.at("points")) {
        const auto polarity = p.at(2).get<std::string>();
        if (polarity != "positive" && polarity != "negative") throw IoError("unknown point polarity '" + polarity + "'");
        entry.points.push_back({p.at(0).get<int>(), p.at(1).get<int>(),
                                polarity == "positive" ? Polarity::positive : Polarity::negative});
      }
      if (item.contains("box") && !item.at("box").is_null()) {
        const auto& b = item.at("box");
        entry.box = BoxPrompt{b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
      }
      bundle.classes.push_back(std::move(entry));
    }
    if (image_id) *image_id = record.at("image_id").get<std::string>();
    return bundle;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed prompt record: ") + e.what());
  }
}

PromptMode parse_prompt_mode(const std::string& text) {
  if (text == "points") return PromptMode::points;
  if (text == "box") return PromptMode::box;
  throw ConfigError("unknown prompt mode '" + text + "' (expected points or box)");
}

std::string to_string(PromptMode mode) { return mode == PromptMode::box ? "box" : "points"; }

template std::optional<ClassPromptSet> extract_point_prompts(const SoftPrediction<float>&, const PseudoLabel&, int,
                                                             Rng&, const PointSampling&);
template std::optional<ClassPromptSet> extract_point_prompts(const SoftPrediction<double>&, const PseudoLabel&, int,
                                                             Rng&, const PointSampling&);
template PromptBundle prompts_from_prediction(const SoftPrediction<float>&, const PseudoLabel&, PromptMode, Rng&,
                                              const PointSampling&);
template PromptBundle prompts_from_prediction(const SoftPrediction<double>&, const PseudoLabel&, PromptMode, Rng&,
                                              const PointSampling&);

}  // namespace prompting
}  // namespace samatch
