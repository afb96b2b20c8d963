#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <torch/torch.h>

#include "unihand/hand_model.hpp"
#include "unihand/rope.hpp"

namespace unihand::perceptron {

using Keypoints2D = Eigen::Matrix<double, hand::kNumJoints, 2, Eigen::RowMajor>;
using JointFlags = std::array<std::uint8_t, hand::kNumJoints>;

/// Dense per-frame vision tokens, row-major [frames, height, width, channels].
struct FeatureGrid {
  int64_t frames = 0;
  int64_t height = 0;
  int64_t width = 0;
  int64_t channels = 0;
  std::vector<float> values;

  FeatureGrid() = default;
  FeatureGrid(int64_t frames, int64_t height, int64_t width, int64_t channels);

  float& at(int64_t t, int64_t h, int64_t w, int64_t c) { return values[index(t, h, w, c)]; }
  float at(int64_t t, int64_t h, int64_t w, int64_t c) const { return values[index(t, h, w, c)]; }

  torch::Tensor to_tensor() const;  // [frames, height, width, channels] float32
  /// Frames [start, start + count).
  FeatureGrid slice(int64_t start, int64_t count) const;
  /// Repeats the final frame until `frames` is reached.
  FeatureGrid padded(int64_t frames) const;

  void save(const std::filesystem::path& path) const;
  static FeatureGrid load(const std::filesystem::path& path);

 private:
  std::size_t index(int64_t t, int64_t h, int64_t w, int64_t c) const {
    return static_cast<std::size_t>(((t * height + h) * width + w) * channels + c);
  }
};

struct FrameMeta {
  std::uint64_t seed = 0;
  std::vector<int64_t> frame_ids;
};

/// Source of dense vision tokens. A pretrained backbone can implement this
/// without touching the perceptron.
class FeatureProvider {
 public:
  virtual ~FeatureProvider() = default;
  virtual FeatureGrid features(const FrameMeta& meta, std::span<const Keypoints2D> keypoints,
                               std::span<const JointFlags> visibility) const = 0;
};

struct SyntheticFeatureOptions {
  int64_t height = 8;
  int64_t width = 8;
  int64_t channels = 64;
  double sigma_cells = 1.0;
  double distractor_scale = 0.1;
};

/// One Gaussian heatmap channel per visible joint plus seeded distractor
/// channels; occluded joints leave their channel at zero.
class SyntheticFeatureProvider final : public FeatureProvider {
 public:
  explicit SyntheticFeatureProvider(SyntheticFeatureOptions options = {});
  FeatureGrid features(const FrameMeta& meta, std::span<const Keypoints2D> keypoints,
                       std::span<const JointFlags> visibility) const override;
  const SyntheticFeatureOptions& options() const { return options_; }

 private:
  SyntheticFeatureOptions options_;
};

struct PerceptronConfig {
  int64_t hidden = 64;
  int64_t heads = 4;
  int64_t anchor_dim = 64;
  int64_t feature_dim = 64;
  int64_t max_frames = 64;
  bool use_rope = true;
  RopeSplit split() const { return RopeSplit::for_head_dim(hidden / heads); }
};

/// Rotates only the temporal channel segment of each head by `t`,
/// matching the temporal part of rope_3d.
torch::Tensor rope_temporal(const torch::Tensor& x, const torch::Tensor& t, const RopeSplit& split);

/// Cross-attention from per-frame trainable hand queries (biased by the
/// first-frame anchor) into dense vision tokens with 3D RoPE on keys.
class HandPerceptronImpl : public torch::nn::Module {
 public:
  explicit HandPerceptronImpl(const PerceptronConfig& config);

  /// anchor [B, anchor_dim]; grid [B, N, h, w, feature_dim]; optional
  /// frame_mask [B, N] drops the keys of unavailable frames. Returns [B, N, hidden].
  torch::Tensor forward(const torch::Tensor& anchor, const torch::Tensor& grid,
                        const torch::Tensor& frame_mask = {});

  /// Attention probabilities of the last forward, [B, heads, N, N*h*w].
  const torch::Tensor& last_attention() const { return last_attention_; }
  const PerceptronConfig& config() const { return config_; }

 private:
  PerceptronConfig config_;
  torch::nn::Linear w_q_{nullptr}, w_k_{nullptr}, w_v_{nullptr}, out_proj_{nullptr};
  torch::nn::LayerNorm norm_q_{nullptr}, norm_k_{nullptr}, norm_v_{nullptr};
  torch::Tensor hand_tokens_;  // [max_frames, hidden]
  torch::Tensor last_attention_;
};
TORCH_MODULE(HandPerceptron);

}  // namespace unihand::perceptron
