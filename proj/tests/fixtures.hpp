// Shared builders for random inputs and the finite-difference gradient check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "samatch/match_engine.hpp"

namespace fixtures {

using namespace samatch;

inline ImageSample random_image(Rng& rng, int h, int w, const std::string& id = "img") {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageSample s;
  s.id = id;
  s.pixels = PlaneD(h, w);
  for (Eigen::Index i = 0; i < s.pixels.size(); ++i) s.pixels.data()[i] = u(rng);
  return s;
}

inline LabelMask random_label(Rng& rng, int h, int w, int class_count) {
  std::uniform_int_distribution<int> cls(0, class_count);
  LabelMask m{ClassPlane(h, w), class_count};
  for (Eigen::Index i = 0; i < m.classes.size(); ++i) m.classes.data()[i] = cls(rng);
  return m;
}

/// Softmax of random logits, so every pixel sums to one.
template <typename Scalar = double>
SoftPrediction<Scalar> random_prediction(Rng& rng, int h, int w, int class_count, double spread = 4.0) {
  std::normal_distribution<double> n(0.0, spread);
  SoftPrediction<Scalar> p;
  p.height = h;
  p.width = w;
  p.probs = RowMatrix<Scalar>(class_count + 1, h * w);
  for (int j = 0; j < h * w; ++j) {
    double sum = 0.0;
    for (int c = 0; c <= class_count; ++c) {
      const double e = std::exp(n(rng));
      p.probs(c, j) = Scalar(e);
      sum += e;
    }
    for (int c = 0; c <= class_count; ++c) p.probs(c, j) = Scalar(double(p.probs(c, j)) / sum);
  }
  return p;
}

struct GradCheck {
  long checked = 0;
  long skipped = 0;
  double worst_component = 0.0;
  double norm_error = 0.0;
};

/// Central differences of `loss` against `analytic`, one parameter at a time.
/// Parameters whose +-h perturbation changes `signature` sit on a ReLU or
/// max-pool kink and are skipped. The component error is
/// |g - fd| / max(|g|, |fd|, 1e-6); the norm error covers checked entries.
inline GradCheck gradient_check(const UNet<double>& net, const Vector<double>& analytic,
                                const std::function<double(const UNet<double>&)>& loss,
                                const std::function<std::uint64_t(const UNet<double>&)>& signature,
                                double h = 1e-5) {
  GradCheck out;
  double diff2 = 0.0;
  double fd2 = 0.0;
  for (Eigen::Index k = 0; k < net.parameter_count(); ++k) {
    UNet<double> plus = net;
    UNet<double> minus = net;
    plus.parameters()(k) += h;
    minus.parameters()(k) -= h;
    if (signature(plus) != signature(minus)) {
      ++out.skipped;
      continue;
    }
    const double fd = (loss(plus) - loss(minus)) / (2.0 * h);
    const double g = analytic(k);
    out.worst_component = std::max(out.worst_component, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-6}));
    diff2 += (g - fd) * (g - fd);
    fd2 += fd * fd;
    ++out.checked;
  }
  out.norm_error = fd2 > 0.0 ? std::sqrt(diff2 / fd2) : std::sqrt(diff2);
  return out;
}

/// Combined activation signature of forwards over several image batches.
inline std::uint64_t batch_signature(const UNet<double>& net, const std::vector<ImageSample>& images,
                                     const FeatureDropout* dropout = nullptr) {
  UNet<double>::Cache cache;
  const int h = images.front().height();
  const int w = images.front().width();
  net.forward(stack_images<double>(images), static_cast<int>(images.size()), h, w, dropout, &cache);
  return net.activation_signature(cache);
}

/// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("samatch_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace fixtures
