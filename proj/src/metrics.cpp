#include "samatch/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace samatch {

namespace {

void require_same_shape(const MaskPlane& a, const MaskPlane& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": mask shapes differ (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                     ")");
  }
}

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// sample step `step`.
void edt_1d(const double* f, double* d, int n, double step, std::vector<int>& v, std::vector<double>& z) {
  const double s2 = step * step;
  int k = 0;
  int first = 0;
  while (first < n && f[first] == kInf) ++first;
  if (first == n) {
    std::fill(d, d + n, kInf);
    return;
  }
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = first + 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    double s = 0.0;
    while (true) {
      const int p = v[static_cast<std::size_t>(k)];
      s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(k) + 1] < q) ++k;
    const int p = v[static_cast<std::size_t>(k)];
    d[q] = s2 * double(q - p) * (q - p) + f[p];
  }
}

/// Squared Euclidean distance from every pixel to the nearest set pixel.
PlaneD squared_distance_to(const MaskPlane& sites, double row_step, double col_step) {
  const auto h = static_cast<int>(sites.rows());
  const auto w = static_cast<int>(sites.cols());
  PlaneD grid(h, w);
  for (Eigen::Index i = 0; i < sites.size(); ++i) grid.data()[i] = sites.data()[i] ? 0.0 : kInf;
  const int n = std::max(h, w);
  std::vector<double> f(static_cast<std::size_t>(n));
  std::vector<double> d(static_cast<std::size_t>(n));
  std::vector<int> v(static_cast<std::size_t>(n));
  std::vector<double> z(static_cast<std::size_t>(n) + 1);
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r < h; ++r) f[static_cast<std::size_t>(r)] = grid(r, c);
    edt_1d(f.data(), d.data(), h, row_step, v, z);
    for (int r = 0; r < h; ++r) grid(r, c) = d[static_cast<std::size_t>(r)];
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) f[static_cast<std::size_t>(c)] = grid(r, c);
    edt_1d(f.data(), d.data(), w, col_step, v, z);
    for (int c = 0; c < w; ++c) grid(r, c) = d[static_cast<std::size_t>(c)];
  }
  return grid;
}

double directed_percentile(const MaskPlane& from, const PlaneD& sq_dist_to_other) {
  std::vector<double> dist;
  for (Eigen::Index i = 0; i < from.size(); ++i) {
    if (from.data()[i]) dist.push_back(sq_dist_to_other.data()[i]);
  }
  const auto n = dist.size();
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  const auto index = std::max<std::size_t>(rank, 1) - 1;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(index), dist.end());
  return std::sqrt(dist[index]);
}

std::vector<double> ranks_of(const std::vector<double>& magnitudes) {
  const auto n = magnitudes.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return magnitudes[a] < magnitudes[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && magnitudes[order[j + 1]] == magnitudes[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

double population_sd(const std::vector<double>& v, double mean) {
  double acc = 0.0;
  for (const double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / double(v.size()));
}

}  // namespace

double dice(const MaskPlane& a, const MaskPlane& b) {
  require_same_shape(a, b, "dice");
  const auto inter = (a && b).count();
  const auto total = a.count() + b.count();
  if (total == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

MaskPlane mask_boundary(const MaskPlane& mask) {
  const auto h = mask.rows();
  const auto w = mask.cols();
  MaskPlane out = MaskPlane::Constant(h, w, false);
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      if (!mask(r, c)) continue;
      out(r, c) = r == 0 || c == 0 || r == h - 1 || c == w - 1 || !mask(r - 1, c) || !mask(r + 1, c) ||
                  !mask(r, c - 1) || !mask(r, c + 1);
    }
  }
  return out;
}

double hd95(const MaskPlane& a, const MaskPlane& b, const std::optional<PixelSpacing>& spacing, unsigned* flags) {
  require_same_shape(a, b, "hd95");
  const double sr = spacing ? spacing->row_mm : 1.0;
  const double sc = spacing ? spacing->col_mm : 1.0;
  const bool a_empty = !a.any();
  const bool b_empty = !b.any();
  if (flags) *flags = kNoConvention;
  if (a_empty && b_empty) {
    if (flags) *flags = kBothEmpty;
    return 0.0;
  }
  if (a_empty || b_empty) {
    if (flags) *flags = a_empty ? kPredEmpty : kTruthEmpty;
    return std::hypot(sr * double(a.rows()), sc * double(a.cols()));
  }
  const MaskPlane ba = mask_boundary(a);
  const MaskPlane bb = mask_boundary(b);
  const double ab = directed_percentile(ba, squared_distance_to(bb, sr, sc));
  const double ba_dist = directed_percentile(bb, squared_distance_to(ba, sr, sc));
  return std::max(ab, ba_dist);
}

CaseMetrics evaluate_case(const std::string& case_id, const LabelMask& pred, const LabelMask& truth,
                          const std::optional<PixelSpacing>& spacing) {
  if (pred.height() != truth.height() || pred.width() != truth.width()) {
    throw ShapeError("evaluate_case '" + case_id + "': prediction and reference shapes differ");
  }
  if (pred.class_count != truth.class_count) {
    throw ShapeError("evaluate_case '" + case_id + "': class counts differ (" + std::to_string(pred.class_count) +
                     " vs " + std::to_string(truth.class_count) + ")");
  }
  CaseMetrics out;
  out.case_id = case_id;
  for (int k = 1; k <= truth.class_count; ++k) {
    const MaskPlane p = pred.classes == k;
    const MaskPlane t = truth.classes == k;
    unsigned flag = kNoConvention;
    out.dice.push_back(dice(p, t));
    out.hd95.push_back(hd95(p, t, spacing, &flag));
    out.flags.push_back(flag);
  }
  return out;
}

MetricsTable aggregate(std::span<const CaseMetrics> cases) {
  if (cases.empty()) throw PreconditionError("aggregate needs at least one case");
  const std::size_t classes = cases.front().dice.size();
  MetricsTable table;
  table.n_cases = static_cast<int>(cases.size());
  table.convention_flag_counts = {{"both_empty", 0}, {"pred_empty", 0}, {"truth_empty", 0}};
  for (std::size_t k = 0; k < classes; ++k) {
    std::vector<double> d;
    std::vector<double> h;
    for (const auto& c : cases) {
      if (c.dice.size() != classes || c.hd95.size() != classes) {
        throw ShapeError("aggregate: case '" + c.case_id + "' has a different class count");
      }
      d.push_back(c.dice[k]);
      h.push_back(c.hd95[k]);
    }
    ClassSummary s;
    s.class_id = static_cast<int>(k) + 1;
    s.dice_mean = mean_of(d);
    s.dice_sd = population_sd(d, s.dice_mean);
    s.hd95_mean = mean_of(h);
    s.hd95_sd = population_sd(h, s.hd95_mean);
    table.per_class.push_back(s);
    table.mean_dice += s.dice_mean / double(classes);
    table.mean_hd95 += s.hd95_mean / double(classes);
  }
  for (const auto& c : cases) {
    for (const unsigned f : c.flags) {
      if (f & kBothEmpty) ++table.convention_flag_counts["both_empty"];
      if (f & kPredEmpty) ++table.convention_flag_counts["pred_empty"];
      if (f & kTruthEmpty) ++table.convention_flag_counts["truth_empty"];
    }
  }
  return table;
}

nlohmann::json to_json(const MetricsTable& table, const std::string& split, const std::string& method) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& s : table.per_class) {
    per_class.push_back({{"class", s.class_id},
                         {"dice_mean", s.dice_mean},
                         {"dice_sd", s.dice_sd},
                         {"hd95_mean", s.hd95_mean},
                         {"hd95_sd", s.hd95_sd}});
  }
  return {{"split", split},
          {"method", method},
          {"per_class", per_class},
          {"mean_dice", table.mean_dice},
          {"mean_hd95", table.mean_hd95},
          {"n_cases", table.n_cases},
          {"convention_flag_counts", table.convention_flag_counts}};
}

nlohmann::json to_json(const CaseMetrics& metrics) {
  return {{"case_id", metrics.case_id}, {"dice", metrics.dice}, {"hd95", metrics.hd95}, {"flags", metrics.flags}};
}

CaseMetrics case_metrics_from_json(const nlohmann::json& record) {
  try {
    CaseMetrics out;
    out.case_id = record.at("case_id").get<std::string>();
    out.dice = record.at("dice").get<std::vector<double>>();
    out.hd95 = record.at("hd95").get<std::vector<double>>();
    out.flags = record.value("flags", std::vector<unsigned>(out.dice.size(), 0u));
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed per-case metrics record: ") + e.what());
  }
}

double wilcoxon_signed_rank(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("wilcoxon: sample lengths differ");
  if (xs.size() < 2) throw PreconditionError("wilcoxon: at least two pairs required");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double d = xs[i] - ys[i];
    if (d != 0.0) diffs.push_back(d);
  }
  const auto n = diffs.size();
  if (n == 0) return 1.0;
  std::vector<double> magnitudes(n);
  for (std::size_t i = 0; i < n; ++i) magnitudes[i] = std::abs(diffs[i]);
  const std::vector<double> ranks = ranks_of(magnitudes);
  double w_plus = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (diffs[i] > 0) w_plus += ranks[i];
  }
  const double centre = double(n) * double(n + 1) / 4.0;
  const double observed = std::abs(w_plus - centre);

  if (n <= 12) {
    const std::uint32_t patterns = 1u << n;
    std::uint32_t extreme = 0;
    for (std::uint32_t mask = 0; mask < patterns; ++mask) {
      double w = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (mask & (1u << i)) w += ranks[i];
      }
      if (std::abs(w - centre) >= observed - 1e-9) ++extreme;
    }
    return double(extreme) / double(patterns);
  }

  double tie_term = 0.0;
  std::vector<double> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
    const double t = double(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  const double variance = double(n) * double(n + 1) * double(2 * n + 1) / 24.0 - tie_term / 48.0;
  if (variance <= 0.0) return 1.0;
  const double z = std::max(observed - 0.5, 0.0) / std::sqrt(variance);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

}  // namespace samatch
