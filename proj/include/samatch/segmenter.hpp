#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "samatch/core.hpp"
#include "samatch/prompting.hpp"

namespace samatch {

struct SegmenterCapabilities {
  bool accepts_points = false;
  bool accepts_boxes = false;
};

/// A model mapping (image, prompts for one class) to foreground scores.
///
/// `segment` validates the prompt kind against the capabilities and then
/// dispatches to the implementation; outputs have the image's shape, lie in
/// [0,1] and depend only on the inputs and current parameters.
class PromptableSegmenter {
 public:
  virtual ~PromptableSegmenter() = default;

  virtual std::string kind() const = 0;
  virtual SegmenterCapabilities capabilities() const = 0;
  virtual bool trainable() const { return false; }
  virtual std::vector<std::string> trainable_parts() const { return {}; }

  PlaneD segment(const ImageSample& image, const ClassPromptSet& prompts) const;

  /// One gradient step on the trainable parts over every class in `bundle`;
  /// returns the summed Dice + BCE loss measured before the step.
  virtual double finetune(const ImageSample& image, const LabelMask& truth, const PromptBundle& bundle, double lr);

  /// Trainable parameters for checkpointing; empty when nothing is trainable.
  virtual std::vector<double> save_state() const { return {}; }
  virtual void load_state(const std::vector<double>& state);

 protected:
  virtual PlaneD segment_impl(const ImageSample& image, const ClassPromptSet& prompts) const = 0;
};

/// Throws UnsupportedPromptError if `prompts` offers no kind the capabilities accept.
void check_prompt_supported(const SegmenterCapabilities& caps, const ClassPromptSet& prompts, const std::string& kind);

/// Test segmenter answering from hidden reference labels.
///
/// With zero noise and zero failure rate it returns the exact binary mask of
/// the prompted class, following the sample's recorded augmentation. Noise
/// dilates or erodes that mask by `boundary_noise` pixels; a failure returns
/// only the connected component under the prompt.
struct OracleSegmenterSpec {
  std::map<std::string, LabelMask> truth;
  int boundary_noise = 0;
  double failure_rate = 0.0;
  std::uint64_t seed = 0;
};

class OracleSegmenter final : public PromptableSegmenter {
 public:
  explicit OracleSegmenter(OracleSegmenterSpec spec);

  std::string kind() const override { return "oracle"; }
  SegmenterCapabilities capabilities() const override { return {true, true}; }

 protected:
  PlaneD segment_impl(const ImageSample& image, const ClassPromptSet& prompts) const override;

 private:
  OracleSegmenterSpec spec_;
};

/// Small trainable segmenter with the same split as the foundation models:
/// a frozen image encoder (fixed random 3x3 filter bank), a prompt encoder
/// (gains on box/positive/negative prompt maps) and a linear mask decoder.
class LinearPromptSegmenter final : public PromptableSegmenter {
 public:
  static constexpr int kFilters = 4;

  explicit LinearPromptSegmenter(std::uint64_t seed = 0);

  std::string kind() const override { return "linear"; }
  SegmenterCapabilities capabilities() const override { return {true, true}; }
  bool trainable() const override { return true; }
  std::vector<std::string> trainable_parts() const override { return {"prompt_encoder", "mask_decoder"}; }

  double finetune(const ImageSample& image, const LabelMask& truth, const PromptBundle& bundle, double lr) override;
  std::vector<double> save_state() const override;
  void load_state(const std::vector<double>& state) override;

  const Eigen::VectorXd& frozen_parameters() const { return encoder_; }
  const Eigen::VectorXd& trainable_parameters() const { return trainable_; }

  /// Summed loss and its gradient w.r.t. the trainable parameters.
  double loss_and_gradient(const ImageSample& image, const LabelMask& truth, const PromptBundle& bundle,
                           Eigen::VectorXd* grad) const;

 protected:
  PlaneD segment_impl(const ImageSample& image, const ClassPromptSet& prompts) const override;

 private:
  struct Features;
  Features features(const ImageSample& image, const ClassPromptSet& prompts) const;

  Eigen::VectorXd encoder_;    ///< kFilters x (9 weights + bias), frozen
  Eigen::VectorXd trainable_;  ///< 3 prompt gains, kFilters+1 image weights, 3 prompt weights, bias
};

/// Binary Dice (eps 1e-5) + mean BCE (probabilities clamped at 1e-12) between
/// a score map and a binary target, with the gradient w.r.t. the scores.
double binary_segmentation_loss(const PlaneD& scores, const MaskPlane& target, PlaneD* grad = nullptr);

/// Fuses per-class segmenter outputs into a pseudo-label.
///
/// Each bundled class is binarized at `threshold`; a pixel covered by several
/// classes takes the highest score (lowest id on ties), an uncovered pixel is
/// background, and all are valid. Pixels the fallback assigns to classes
/// missing from the bundle are copied with the fallback's validity. An empty
/// bundle returns the fallback itself.
PseudoLabel refine_pseudo_label(const PromptableSegmenter& seg, const ImageSample& image, const PromptBundle& bundle,
                                const PseudoLabel& fallback, double threshold = 0.5);

/// Checks trainability and bundle provenance, then delegates to `finetune`.
double finetune_step(PromptableSegmenter& seg, const ImageSample& image, const LabelMask& truth,
                     const PromptBundle& bundle, double lr);

enum class ExternalModel { sam, medsam };

struct ExternalSegmenterConfig {
  ExternalModel model = ExternalModel::sam;
  std::string checkpoint_path;
  std::string device = "cpu";
  /// Command of the inference worker speaking the JSON-lines protocol.
  std::string worker_command = "python3 tools/sam_worker.py";
};

/// Validates an upstream checkpoint and returns an adapter that runs the
/// model in a worker process. SAM accepts points only, MedSAM boxes only;
/// the image encoder stays frozen during fine-tuning.
std::unique_ptr<PromptableSegmenter> load_external_segmenter(const ExternalSegmenterConfig& config);

ExternalModel parse_external_model(const std::string& text);

}  // namespace samatch
