#include "samatch/segmenter.hpp"

#include <algorithm>
#include <cmath>

#include "samatch/augment.hpp"

namespace samatch {

PlaneD PromptableSegmenter::segment(const ImageSample& image, const ClassPromptSet& prompts) const {
  check_prompt_supported(capabilities(), prompts, kind());
  PlaneD scores = segment_impl(image, prompts);
  if (scores.rows() != image.height() || scores.cols() != image.width()) {
    throw ShapeError(kind() + " segmenter returned a score map of the wrong shape");
  }
  return scores.cwiseMax(0.0).cwiseMin(1.0);
}

double PromptableSegmenter::finetune(const ImageSample&, const LabelMask&, const PromptBundle&, double) {
  throw PreconditionError(kind() + " segmenter is not trainable");
}

void PromptableSegmenter::load_state(const std::vector<double>& state) {
  if (!state.empty()) throw ShapeError(kind() + " segmenter has no trainable state to restore");
}

void check_prompt_supported(const SegmenterCapabilities& caps, const ClassPromptSet& prompts, const std::string& kind) {
  const bool usable_points = caps.accepts_points && !prompts.points.empty();
  const bool usable_box = caps.accepts_boxes && prompts.box.has_value();
  if (usable_points || usable_box) return;
  std::string offered = prompts.box ? (prompts.points.empty() ? "box" : "box and points")
                                    : (prompts.points.empty() ? "no prompts" : "points");
  throw UnsupportedPromptError(kind + " segmenter cannot consume " + offered + " for class " +
                               std::to_string(prompts.class_id));
}

// ---------------------------------------------------------------------------
// OracleSegmenter

namespace {

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

MaskPlane morph(const MaskPlane& in, int radius, bool dilate) {
  MaskPlane cur = in;
  for (int step = 0; step < radius; ++step) {
    MaskPlane next = cur;
    for (Eigen::Index r = 0; r < cur.rows(); ++r) {
      for (Eigen::Index c = 0; c < cur.cols(); ++c) {
        bool any = false;
        bool all = true;
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const Eigen::Index nr = r + dr;
            const Eigen::Index nc = c + dc;
            const bool v = nr >= 0 && nr < cur.rows() && nc >= 0 && nc < cur.cols() && cur(nr, nc);
            any = any || v;
            all = all && v;
          }
        }
        next(r, c) = dilate ? any : all;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace

OracleSegmenter::OracleSegmenter(OracleSegmenterSpec spec) : spec_(std::move(spec)) {
  if (spec_.boundary_noise < 0) throw ConfigError("oracle boundary_noise must be >= 0");
  if (spec_.failure_rate < 0.0 || spec_.failure_rate > 1.0) throw ConfigError("oracle failure_rate must lie in [0,1]");
}

PlaneD OracleSegmenter::segment_impl(const ImageSample& image, const ClassPromptSet& prompts) const {
  const auto it = spec_.truth.find(image.id);
  if (it == spec_.truth.end()) throw Error("oracle segmenter has no reference label for image '" + image.id + "'");
  LabelMask truth = image.view ? augment::transform_mask(it->second, *image.view) : it->second;
  if (truth.height() != image.height() || truth.width() != image.width()) {
    throw ShapeError("oracle reference for '" + image.id + "' does not match the image shape");
  }
  MaskPlane mask = truth.classes == prompts.class_id;

  std::uint64_t seed = mix(mix(spec_.seed, hash_string(image.id)), static_cast<std::uint64_t>(prompts.class_id));
  if (image.view) {
    const auto& v = *image.view;
    for (const int x : {v.quarter_turns, int(v.flip_horizontal), int(v.flip_vertical), v.crop.top, v.crop.left,
                        v.crop.height, v.crop.width, v.out_height, v.out_width}) {
      seed = mix(seed, static_cast<std::uint64_t>(x));
    }
  }
  Rng rng(seed);

  if (spec_.failure_rate > 0.0 && std::bernoulli_distribution(spec_.failure_rate)(rng)) {
    int anchor_row = -1;
    int anchor_col = -1;
    for (const auto& p : prompts.points) {
      if (p.polarity == Polarity::positive) {
        anchor_row = p.row;
        anchor_col = p.col;
        break;
      }
    }
    if (anchor_row < 0 && prompts.box) {
      anchor_row = (prompts.box->row_min + prompts.box->row_max) / 2;
      anchor_col = (prompts.box->col_min + prompts.box->col_max) / 2;
    }
    const auto map = prompting::connected_components(mask);
    const int label = anchor_row >= 0 ? map.labels(anchor_row, anchor_col) : 0;
    mask = label > 0 ? MaskPlane(map.labels == label) : MaskPlane::Constant(mask.rows(), mask.cols(), false);
  }
  if (spec_.boundary_noise > 0) {
    mask = morph(mask, spec_.boundary_noise, std::bernoulli_distribution(0.5)(rng));
  }
  return mask.cast<double>();
}

// ---------------------------------------------------------------------------
// LinearPromptSegmenter

namespace {

constexpr int kPromptMaps = 3;
constexpr int kImageFeatures = LinearPromptSegmenter::kFilters + 1;
// trainable_ layout
constexpr int kGainOffset = 0;
constexpr int kImageWeightOffset = kGainOffset + kPromptMaps;
constexpr int kPromptWeightOffset = kImageWeightOffset + kImageFeatures;
constexpr int kBiasOffset = kPromptWeightOffset + kPromptMaps;
constexpr int kTrainableSize = kBiasOffset + 1;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

struct LinearPromptSegmenter::Features {
  std::vector<PlaneD> image;   // kImageFeatures maps
  std::vector<PlaneD> prompt;  // kPromptMaps maps: box, positive, negative
};

LinearPromptSegmenter::LinearPromptSegmenter(std::uint64_t seed)
    : encoder_(kFilters * 10), trainable_(kTrainableSize) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / 3.0);
  for (Eigen::Index i = 0; i < encoder_.size(); ++i) encoder_(i) = normal(rng);
  trainable_.setZero();
  trainable_.segment(kGainOffset, kPromptMaps).setOnes();
  trainable_(kPromptWeightOffset + 0) = 3.0;
  trainable_(kPromptWeightOffset + 1) = 3.0;
  trainable_(kPromptWeightOffset + 2) = -3.0;
  trainable_(kBiasOffset) = -1.5;
}

LinearPromptSegmenter::Features LinearPromptSegmenter::features(const ImageSample& image,
                                                                const ClassPromptSet& prompts) const {
  const int h = image.height();
  const int w = image.width();
  Features f;
  f.image.push_back(image.pixels);
  for (int k = 0; k < kFilters; ++k) {
    PlaneD out(h, w);
    const double* weights = encoder_.data() + k * 10;
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        double acc = weights[9];
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int rr = r + dy;
            const int cc = c + dx;
            if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
            acc += weights[(dy + 1) * 3 + (dx + 1)] * image.pixels(rr, cc);
          }
        }
        out(r, c) = std::tanh(acc);
      }
    }
    f.image.push_back(std::move(out));
  }

  PlaneD box = PlaneD::Zero(h, w);
  if (prompts.box) {
    const auto& b = *prompts.box;
    box.block(b.row_min, b.col_min, b.row_max - b.row_min + 1, b.col_max - b.col_min + 1).setOnes();
  }
  const double sigma = std::max(h, w) / 8.0;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  PlaneD pos = PlaneD::Zero(h, w);
  PlaneD neg = PlaneD::Zero(h, w);
  for (const auto& p : prompts.points) {
    PlaneD& target = p.polarity == Polarity::positive ? pos : neg;
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        const double d2 = double(r - p.row) * (r - p.row) + double(c - p.col) * (c - p.col);
        target(r, c) = std::max(target(r, c), std::exp(-d2 * inv));
      }
    }
  }
  f.prompt = {std::move(box), std::move(pos), std::move(neg)};
  return f;
}

PlaneD LinearPromptSegmenter::segment_impl(const ImageSample& image, const ClassPromptSet& prompts) const {
  const Features f = features(image, prompts);
  PlaneD logit = PlaneD::Constant(image.height(), image.width(), trainable_(kBiasOffset));
  for (int i = 0; i < kImageFeatures; ++i) logit += trainable_(kImageWeightOffset + i) * f.image[static_cast<std::size_t>(i)];
  for (int j = 0; j < kPromptMaps; ++j) {
    logit += trainable_(kPromptWeightOffset + j) * trainable_(kGainOffset + j) * f.prompt[static_cast<std::size_t>(j)];
  }
  return logit.unaryExpr([](double x) { return sigmoid(x); });
}

double LinearPromptSegmenter::loss_and_gradient(const ImageSample& image, const LabelMask& truth,
                                                const PromptBundle& bundle, Eigen::VectorXd* grad) const {
  require_same_shape(image, truth);
  if (grad) *grad = Eigen::VectorXd::Zero(trainable_.size());
  double total = 0.0;
  for (const auto& entry : bundle.classes) {
    const Features f = features(image, entry);
    const PlaneD scores = segment(image, entry);
    PlaneD dscore;
    total += binary_segmentation_loss(scores, truth.classes == entry.class_id, grad ? &dscore : nullptr);
    if (!grad) continue;
    const PlaneD dlogit = dscore * scores * (1.0 - scores);
    for (int i = 0; i < kImageFeatures; ++i) {
      (*grad)(kImageWeightOffset + i) += (dlogit * f.image[static_cast<std::size_t>(i)]).sum();
    }
    for (int j = 0; j < kPromptMaps; ++j) {
      const double s = (dlogit * f.prompt[static_cast<std::size_t>(j)]).sum();
      (*grad)(kPromptWeightOffset + j) += s * trainable_(kGainOffset + j);
      (*grad)(kGainOffset + j) += s * trainable_(kPromptWeightOffset + j);
    }
    (*grad)(kBiasOffset) += dlogit.sum();
  }
  return total;
}

double LinearPromptSegmenter::finetune(const ImageSample& image, const LabelMask& truth, const PromptBundle& bundle,
                                       double lr) {
  Eigen::VectorXd grad;
  const double loss = loss_and_gradient(image, truth, bundle, &grad);
  trainable_ -= lr * grad;
  return loss;
}

std::vector<double> LinearPromptSegmenter::save_state() const {
  return {trainable_.data(), trainable_.data() + trainable_.size()};
}

void LinearPromptSegmenter::load_state(const std::vector<double>& state) {
  if (static_cast<Eigen::Index>(state.size()) != trainable_.size()) {
    throw ShapeError("linear segmenter state has " + std::to_string(state.size()) + " values, expected " +
                     std::to_string(trainable_.size()));
  }
  trainable_ = Eigen::Map<const Eigen::VectorXd>(state.data(), trainable_.size());
}

// ---------------------------------------------------------------------------

double binary_segmentation_loss(const PlaneD& scores, const MaskPlane& target, PlaneD* grad) {
  if (scores.rows() != target.rows() || scores.cols() != target.cols()) {
    throw ShapeError("score map and target shapes differ");
  }
  const double eps = 1e-5;
  const double floor = 1e-12;
  const PlaneD t = target.cast<double>();
  const double inter = (scores * t).sum();
  const double denom = scores.sum() + t.sum() + eps;
  const double numer = 2.0 * inter + eps;
  const double dice = 1.0 - numer / denom;
  const auto n = static_cast<double>(scores.size());
  double bce = 0.0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const double s = scores.data()[i];
    bce -= target.data()[i] ? std::log(std::max(s, floor)) : std::log(std::max(1.0 - s, floor));
  }
  bce /= n;
  if (grad) {
    grad->resize(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.size(); ++i) {
      const double s = scores.data()[i];
      const double ti = t.data()[i];
      const double ddice = -(2.0 * ti * denom - numer) / (denom * denom);
      double dbce = 0.0;
      if (target.data()[i]) {
        if (s > floor) dbce = -1.0 / (n * s);
      } else if (1.0 - s > floor) {
        dbce = 1.0 / (n * (1.0 - s));
      }
      grad->data()[i] = ddice + dbce;
    }
  }
  return dice + bce;
}

PseudoLabel refine_pseudo_label(const PromptableSegmenter& seg, const ImageSample& image, const PromptBundle& bundle,
                                const PseudoLabel& fallback, double threshold) {
  if (fallback.height() != image.height() || fallback.width() != image.width()) {
    throw ShapeError("refine: fallback pseudo label is not aligned with the image");
  }
  if (bundle.empty()) return fallback;

  const int h = image.height();
  const int w = image.width();
  PseudoLabel out;
  out.classes = ClassPlane::Zero(h, w);
  out.valid = MaskPlane::Constant(h, w, true);
  out.origin = LabelOrigin::segmenter;
  out.class_count = fallback.class_count;

  PlaneD best = PlaneD::Constant(h, w, -1.0);
  for (const auto& entry : bundle.classes) {
    if (entry.class_id < 1 || entry.class_id > fallback.class_count) {
      throw PreconditionError("refine: bundle class " + std::to_string(entry.class_id) + " outside the label range");
    }
    const PlaneD scores = seg.segment(image, entry);
    for (Eigen::Index i = 0; i < scores.size(); ++i) {
      const double s = scores.data()[i];
      if (s >= threshold && s > best.data()[i]) {
        best.data()[i] = s;
        out.classes.data()[i] = entry.class_id;
      }
    }
  }
  for (int k = 1; k <= fallback.class_count; ++k) {
    if (bundle.find(k)) continue;
    for (Eigen::Index i = 0; i < fallback.classes.size(); ++i) {
      if (fallback.classes.data()[i] != k) continue;
      out.classes.data()[i] = k;
      out.valid.data()[i] = fallback.valid.data()[i];
    }
  }
  return out;
}

double finetune_step(PromptableSegmenter& seg, const ImageSample& image, const LabelMask& truth,
                     const PromptBundle& bundle, double lr) {
  if (!seg.trainable()) throw PreconditionError(seg.kind() + " segmenter is not trainable");
  if (bundle.source != PromptSource::ground_truth) {
    throw PreconditionError("segmenter fine-tuning requires prompts derived from ground truth");
  }
  return seg.finetune(image, truth, bundle, lr);
}

}  // namespace samatch
