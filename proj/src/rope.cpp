#include "unihand/rope.hpp"

#include <string>

#include "unihand/error.hpp"

namespace unihand::perceptron {

RopeSplit RopeSplit::for_head_dim(int64_t head_dim) {
  const int64_t quarter = (head_dim / 4) / 2 * 2;
  return {head_dim - 2 * quarter, quarter, quarter};
}

void RopeSplit::validate(int64_t head_dim) const {
  for (int64_t part : {temporal, height, width}) {
    if (part <= 0 || part % 2 != 0) throw SplitMismatch("rope split parts must be even and positive");
  }
  if (total() != head_dim) {
    throw SplitMismatch("rope split sums to " + std::to_string(total()) + ", head dim is " +
                        std::to_string(head_dim));
  }
}

torch::Tensor rope_1d(const torch::Tensor& x, const torch::Tensor& positions, double base) {
  const int64_t d = x.size(-1);
  if (d % 2 != 0) throw OddDimension("rope_1d: channel dimension must be even");
  const int64_t k = x.size(-2);
  if (positions.numel() != k) throw ShapeMismatch("rope_1d: one position per token required");

  auto f64 = torch::TensorOptions().dtype(torch::kFloat64);
  auto inv_freq = torch::pow(torch::full({d / 2}, base, f64), -2.0 * torch::arange(d / 2, f64) / static_cast<double>(d));
  auto angles = positions.to(torch::kFloat64).reshape({k, 1}) * inv_freq.reshape({1, d / 2});
  auto cos = torch::cos(angles).to(x.scalar_type());
  auto sin = torch::sin(angles).to(x.scalar_type());

  auto shape = x.sizes().vec();
  auto pairs_shape = shape;
  pairs_shape.back() = d / 2;
  pairs_shape.push_back(2);
  auto pairs = x.reshape(pairs_shape);
  auto x0 = pairs.select(-1, 0);
  auto x1 = pairs.select(-1, 1);
  return torch::stack({x0 * cos - x1 * sin, x0 * sin + x1 * cos}, -1).reshape(shape);
}

torch::Tensor rope_3d(const torch::Tensor& x, const torch::Tensor& coords, const RopeSplit& split, double base) {
  split.validate(x.size(-1));
  if (coords.dim() != 2 || coords.size(1) != 3 || coords.size(0) != x.size(-2)) {
    throw ShapeMismatch("rope_3d: coords must be [K, 3] with one row per token");
  }
  auto t = x.narrow(-1, 0, split.temporal);
  auto h = x.narrow(-1, split.temporal, split.height);
  auto w = x.narrow(-1, split.temporal + split.height, split.width);
  return torch::cat({rope_1d(t, coords.select(1, 0), base), rope_1d(h, coords.select(1, 1), base),
                     rope_1d(w, coords.select(1, 2), base)},
                    -1);
}

torch::Tensor grid_coords(int64_t frames, int64_t height, int64_t width) {
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto t = torch::arange(frames, opts).reshape({frames, 1, 1}).expand({frames, height, width});
  auto h = torch::arange(height, opts).reshape({1, height, 1}).expand({frames, height, width});
  auto w = torch::arange(width, opts).reshape({1, 1, width}).expand({frames, height, width});
  return torch::stack({t, h, w}, -1).reshape({frames * height * width, 3});
}

}  // namespace unihand::perceptron
