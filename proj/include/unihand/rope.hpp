#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace unihand::perceptron {

inline constexpr double kRopeBase = 10000.0;

/// Channel partition of one attention head across (time, height, width).
struct RopeSplit {
  int64_t temporal = 0;
  int64_t height = 0;
  int64_t width = 0;

  /// Half of the head to time, a quarter each to height and width.
  static RopeSplit for_head_dim(int64_t head_dim);
  int64_t total() const { return temporal + height + width; }
  /// Throws SplitMismatch unless every part is even, positive and the sum
  /// equals `head_dim`.
  void validate(int64_t head_dim) const;
};

/// Rotates consecutive channel pairs (2i, 2i+1) of `x` [..., K, d] by
/// position * base^(-2i/d). `positions` holds K values. Throws OddDimension
/// when d is odd.
torch::Tensor rope_1d(const torch::Tensor& x, const torch::Tensor& positions, double base = kRopeBase);

/// Applies rope_1d independently to the temporal, height and width channel
/// segments using `coords` [K, 3] = (t, h, w), then concatenates.
torch::Tensor rope_3d(const torch::Tensor& x, const torch::Tensor& coords, const RopeSplit& split,
                      double base = kRopeBase);

/// (t, h, w) coordinates of a row-major N x h x w grid, [N*h*w, 3].
torch::Tensor grid_coords(int64_t frames, int64_t height, int64_t width);

}  // namespace unihand::perceptron
