#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "samatch/core.hpp"

namespace samatch {

/// Empty-mask conventions applied while scoring one class of one case.
enum ConventionFlag : unsigned {
  kNoConvention = 0,
  kBothEmpty = 1u << 0,  ///< dice 1, hd95 0
  kPredEmpty = 1u << 1,  ///< prediction empty, reference not: dice 0, hd95 = diagonal
  kTruthEmpty = 1u << 2,  ///< reference empty, prediction not: dice 0, hd95 = diagonal
};

/// Dice of two binary masks; both empty gives 1.
double dice(const MaskPlane& a, const MaskPlane& b);

/// Pixels of the mask with a 4-neighbour outside it or lying on the image border.
MaskPlane mask_boundary(const MaskPlane& mask);

/// Symmetric 95th-percentile boundary distance (nearest rank), scaled by
/// spacing when given. Both empty gives 0; one empty gives the image diagonal
/// and sets `flags` to kPredEmpty (a empty) or kTruthEmpty (b empty).
double hd95(const MaskPlane& a, const MaskPlane& b, const std::optional<PixelSpacing>& spacing = std::nullopt,
            unsigned* flags = nullptr);

struct CaseMetrics {
  std::string case_id;
  std::vector<double> dice;    ///< index k-1 for class k
  std::vector<double> hd95;
  std::vector<unsigned> flags;
};

CaseMetrics evaluate_case(const std::string& case_id, const LabelMask& pred, const LabelMask& truth,
                          const std::optional<PixelSpacing>& spacing = std::nullopt);

struct ClassSummary {
  int class_id = 1;
  double dice_mean = 0.0;
  double dice_sd = 0.0;
  double hd95_mean = 0.0;
  double hd95_sd = 0.0;
};

struct MetricsTable {
  std::vector<ClassSummary> per_class;
  double mean_dice = 0.0;
  double mean_hd95 = 0.0;
  int n_cases = 0;
  std::map<std::string, int> convention_flag_counts;
};

/// Mean and population sd per class; overall means average the class means.
MetricsTable aggregate(std::span<const CaseMetrics> cases);

/// {split, method, per_class, mean_dice, mean_hd95, n_cases, convention_flag_counts}
nlohmann::json to_json(const MetricsTable& table, const std::string& split, const std::string& method);
nlohmann::json to_json(const CaseMetrics& metrics);
CaseMetrics case_metrics_from_json(const nlohmann::json& record);

/// Two-sided p-value. Zero differences are dropped and tied |d| share the
/// average rank; exact over all sign patterns for n <= 12, otherwise normal
/// approximation with tie and continuity correction. No nonzero pair gives 1.
double wilcoxon_signed_rank(std::span<const double> xs, std::span<const double> ys);

}  // namespace samatch
