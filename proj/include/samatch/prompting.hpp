#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "samatch/core.hpp"

namespace samatch {

enum class Polarity { positive, negative };

struct PointPrompt {
  int row = 0;
  int col = 0;
  Polarity polarity = Polarity::positive;
  bool operator==(const PointPrompt&) const = default;
};

/// Inclusive pixel bounds.
struct BoxPrompt {
  int row_min = 0;
  int col_min = 0;
  int row_max = 0;
  int col_max = 0;
  bool contains(int row, int col) const {
    return row >= row_min && row <= row_max && col >= col_min && col <= col_max;
  }
  bool operator==(const BoxPrompt&) const = default;
};

struct ClassPromptSet {
  int class_id = 1;
  std::vector<PointPrompt> points;
  std::optional<BoxPrompt> box;

  bool has_positive_point() const;
  bool operator==(const ClassPromptSet&) const = default;
};

enum class PromptSource { teacher_prediction, ground_truth };
enum class PromptMode { points, box };

struct PromptBundle {
  std::vector<ClassPromptSet> classes;  ///< ascending class_id, at most one entry each
  PromptSource source = PromptSource::teacher_prediction;

  bool empty() const { return classes.empty(); }
  const ClassPromptSet* find(int class_id) const;
  bool operator==(const PromptBundle&) const = default;
};

namespace prompting {

struct Component {
  int label = 0;  ///< 1-based, equals position in row-major first-pixel order
  int size = 0;
  int first_row = 0;
  int first_col = 0;
  BoxPrompt bounds;  ///< tight bounding box
};

struct ComponentMap {
  ClassPlane labels;  ///< 0 outside every component
  std::vector<Component> components;
};

/// 8-connected labeling; labels are assigned in row-major order of each
/// component's first pixel.
ComponentMap connected_components(const MaskPlane& binary);

/// Bounding box of the largest 8-connected component of (class == id && valid).
/// Size ties go to the component found first in row-major order. A side
/// shorter than 3 pixels gets an equal margin on both ends (so a 2-pixel side
/// grows to 4), then the box is clipped to the image.
std::optional<BoxPrompt> extract_box_prompt(const PseudoLabel& pseudo, int class_id);

struct PointSampling {
  int positives = 1;
  int negatives = 9;
  double confidence = 0.95;
};

/// Positive points from confident valid pixels of the class (falling back to
/// its single most probable pixel), negative points from pixels of any other
/// class, both sampled uniformly without replacement.
template <typename Scalar>
std::optional<ClassPromptSet> extract_point_prompts(const SoftPrediction<Scalar>& pred, const PseudoLabel& pseudo,
                                                    int class_id, Rng& rng, const PointSampling& sampling = {});

/// Prompts for every class the teacher labels, in ascending class order.
template <typename Scalar>
PromptBundle prompts_from_prediction(const SoftPrediction<Scalar>& pred, const PseudoLabel& pseudo, PromptMode mode,
                                     Rng& rng, const PointSampling& sampling = {});

/// Prompts from a reference label, treated as all-valid with confidence 1.
PromptBundle prompts_from_label(const LabelMask& label, Rng& rng, PromptMode mode,
                                const PointSampling& sampling = {});

/// One line-delimited record: {"image_id", "source", "classes":[{"class","points":[[r,c,"positive"],..],"box":[r0,c0,r1,c1]}]}.
nlohmann::json to_json(const std::string& image_id, const PromptBundle& bundle);
/// Inverse of `to_json`; returns the image id through `image_id`.
PromptBundle bundle_from_json(const nlohmann::json& record, std::string* image_id = nullptr);

PromptMode parse_prompt_mode(const std::string& text);
std::string to_string(PromptMode mode);

}  // namespace prompting
}  // namespace samatch
