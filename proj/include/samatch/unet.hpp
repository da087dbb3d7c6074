#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "samatch/core.hpp"

namespace samatch {

/// U-Net descriptor. `depth` counts resolution levels, so the encoder
/// downsamples `depth - 1` times and inputs must be divisible by 2^(depth-1).
struct UNetConfig {
  int depth = 3;
  int base_channels = 8;
  int class_count = 1;  ///< foreground classes; the head emits class_count + 1 channels

  int output_channels() const { return class_count + 1; }
  int size_multiple() const { return 1 << (depth - 1); }
  bool operator==(const UNetConfig&) const = default;
};

/// Channel dropout at the bottleneck (the feature-level perturbation).
/// The keep mask is a pure function of `seed`, so repeated forwards with the
/// same perturbation see the same mask.
struct FeatureDropout {
  double probability = 0.5;
  std::uint64_t seed = 0;
};

/// One named parameter tensor inside the flat parameter vector.
struct ParamBlock {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index size() const { return rows * cols; }
};

/// Encoder-decoder segmentation network with skip connections.
///
/// Activations are stored channel-major: a batch of B images of size H x W is
/// a (channels x B*H*W) matrix. All parameters live in one contiguous vector so
/// optimizer and EMA updates are single vector expressions.
template <typename Scalar>
class UNet {
 public:
  using Matrix = RowMatrix<Scalar>;
  using Params = Vector<Scalar>;

  /// Intermediate values recorded during a forward pass for `backward`.
  struct Cache {
    int batch = 0;
    int height = 0;
    int width = 0;
    std::vector<Matrix> columns;                ///< im2col input of each 3x3 conv
    std::vector<Matrix> activations;            ///< post-ReLU output of each 3x3 conv
    std::vector<std::vector<Eigen::Index>> pool_argmax;
    Matrix probs;
    std::optional<Eigen::Array<Scalar, Eigen::Dynamic, 1>> dropout_scale;  ///< per (sample, channel)
  };

  UNet() = default;
  UNet(const UNetConfig& config, std::uint64_t seed);

  const UNetConfig& config() const { return config_; }
  Params& parameters() { return params_; }
  const Params& parameters() const { return params_; }
  const std::vector<ParamBlock>& layout() const { return layout_; }
  Eigen::Index parameter_count() const { return params_.size(); }

  /// Softmax probabilities, (C+1) x (batch*height*width). `input` is
  /// 1 x (batch*height*width). Throws ShapeError on indivisible dims.
  Matrix forward(const Matrix& input, int batch, int height, int width,
                 const FeatureDropout* dropout = nullptr, Cache* cache = nullptr) const;

  /// Gradient of a scalar loss with respect to all parameters, given the
  /// loss gradient with respect to the softmax probabilities.
  Params backward(const Cache& cache, const Matrix& dprobs) const;

  /// Hash of every ReLU sign and max-pool winner in `cache`; two forwards with
  /// equal signatures lie on the same smooth piece of the network.
  std::uint64_t activation_signature(const Cache& cache) const;

  template <typename Other>
  UNet<Other> cast() const {
    UNet<Other> out;
    out.assign(config_, layout_, params_.template cast<Other>());
    return out;
  }

  void assign(const UNetConfig& config, std::vector<ParamBlock> layout, Params params);

 private:
  struct ConvSpec {
    ParamBlock weight;
    ParamBlock bias;
    int in_channels;
    int out_channels;
  };

  void add_conv(const std::string& name, int in_channels, int out_channels, int kernel);
  void build_layout();
  void initialize(std::uint64_t seed);

  UNetConfig config_;
  std::vector<ConvSpec> convs_;  ///< 3x3 convs in execution order, then the 1x1 head last
  std::vector<ParamBlock> layout_;
  Params params_;
};

extern template class UNet<float>;
extern template class UNet<double>;

}  // namespace samatch
