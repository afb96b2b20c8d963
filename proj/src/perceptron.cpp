#include "unihand/perceptron.hpp"

#include <cmath>
#include <cstring>

#include "unihand/archive.hpp"
#include "unihand/error.hpp"
#include "unihand/random.hpp"
#include "unihand/transformer.hpp"

namespace unihand::perceptron {

FeatureGrid::FeatureGrid(int64_t frames, int64_t height, int64_t width, int64_t channels)
    : frames(frames), height(height), width(width), channels(channels) {
  if (frames < 1 || height < 1 || width < 1 || channels < 1) throw ShapeMismatch("feature grid dims must be >= 1");
  values.assign(static_cast<std::size_t>(frames * height * width * channels), 0.0f);
}

torch::Tensor FeatureGrid::to_tensor() const {
  auto t = torch::empty({frames, height, width, channels}, torch::kFloat32);
  std::memcpy(t.data_ptr<float>(), values.data(), values.size() * sizeof(float));
  return t;
}

FeatureGrid FeatureGrid::slice(int64_t start, int64_t count) const {
  if (start < 0 || count < 1 || start + count > frames) throw ShapeMismatch("feature grid slice out of range");
  FeatureGrid out(count, height, width, channels);
  const auto per_frame = static_cast<std::size_t>(height * width * channels);
  std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(start * per_frame), count * per_frame, out.values.begin());
  return out;
}

FeatureGrid FeatureGrid::padded(int64_t target) const {
  if (target < frames) throw ShapeMismatch("cannot pad a feature grid to fewer frames");
  FeatureGrid out(target, height, width, channels);
  const auto per_frame = static_cast<std::size_t>(height * width * channels);
  std::copy(values.begin(), values.end(), out.values.begin());
  for (int64_t t = frames; t < target; ++t) {
    std::copy_n(values.end() - static_cast<std::ptrdiff_t>(per_frame), per_frame,
                out.values.begin() + static_cast<std::ptrdiff_t>(t * per_frame));
  }
  return out;
}

void FeatureGrid::save(const std::filesystem::path& path) const {
  io::Archive archive;
  archive.kind = "features";
  archive.add("tokens", {frames, height, width, channels}, values);
  io::write_archive(path, archive);
}

FeatureGrid FeatureGrid::load(const std::filesystem::path& path) {
  const auto archive = io::read_archive(path);
  const auto& tokens = archive.get("tokens");
  if (tokens.shape.size() != 4) throw FormatError("feature grid must be 4-dimensional");
  FeatureGrid grid(tokens.shape[0], tokens.shape[1], tokens.shape[2], tokens.shape[3]);
  grid.values = tokens.data;
  return grid;
}

SyntheticFeatureProvider::SyntheticFeatureProvider(SyntheticFeatureOptions options) : options_(options) {
  if (options_.channels < hand::kNumJoints) throw ShapeMismatch("synthetic features need >= 21 channels");
}

FeatureGrid SyntheticFeatureProvider::features(const FrameMeta& meta, std::span<const Keypoints2D> keypoints,
                                               std::span<const JointFlags> visibility) const {
  const auto n = static_cast<int64_t>(keypoints.size());
  if (visibility.size() != keypoints.size() || meta.frame_ids.size() != keypoints.size()) {
    throw ShapeMismatch("feature provider inputs disagree on frame count");
  }
  const auto& o = options_;
  FeatureGrid grid(n, o.height, o.width, o.channels);
  const double inv_two_sigma2 = 1.0 / (2.0 * o.sigma_cells * o.sigma_cells);
  for (int64_t t = 0; t < n; ++t) {
    Rng rng(derive_seed(meta.seed, static_cast<std::uint64_t>(meta.frame_ids[static_cast<std::size_t>(t)])));
    for (int64_t h = 0; h < o.height; ++h) {
      for (int64_t w = 0; w < o.width; ++w) {
        for (int64_t c = hand::kNumJoints; c < o.channels; ++c) {
          grid.at(t, h, w, c) = static_cast<float>(o.distractor_scale * rng.normal());
        }
      }
    }
    const auto& kp = keypoints[static_cast<std::size_t>(t)];
    const auto& vis = visibility[static_cast<std::size_t>(t)];
    for (int j = 0; j < hand::kNumJoints; ++j) {
      if (!vis[static_cast<std::size_t>(j)] || !std::isfinite(kp(j, 0)) || !std::isfinite(kp(j, 1))) continue;
      const double px = kp(j, 0) * static_cast<double>(o.width);
      const double py = kp(j, 1) * static_cast<double>(o.height);
      for (int64_t h = 0; h < o.height; ++h) {
        for (int64_t w = 0; w < o.width; ++w) {
          const double dx = px - (static_cast<double>(w) + 0.5);
          const double dy = py - (static_cast<double>(h) + 0.5);
          grid.at(t, h, w, j) = static_cast<float>(std::exp(-(dx * dx + dy * dy) * inv_two_sigma2));
        }
      }
    }
  }
  return grid;
}

torch::Tensor rope_temporal(const torch::Tensor& x, const torch::Tensor& t, const RopeSplit& split) {
  split.validate(x.size(-1));
  auto temporal = x.narrow(-1, 0, split.temporal);
  auto rest = x.narrow(-1, split.temporal, split.height + split.width);
  return torch::cat({rope_1d(temporal, t), rest}, -1);
}

HandPerceptronImpl::HandPerceptronImpl(const PerceptronConfig& config) : config_(config) {
  if (config_.hidden % config_.heads != 0) throw ShapeMismatch("perceptron hidden must divide into heads");
  config_.split().validate(config_.hidden / config_.heads);
  const int64_t d = config_.hidden;
  w_q_ = register_module("w_q", torch::nn::Linear(config_.anchor_dim + d, d));
  w_k_ = register_module("w_k", torch::nn::Linear(config_.feature_dim, d));
  w_v_ = register_module("w_v", torch::nn::Linear(config_.feature_dim, d));
  norm_q_ = register_module("norm_q", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  norm_k_ = register_module("norm_k", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  norm_v_ = register_module("norm_v", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  out_proj_ = register_module("out_proj", torch::nn::Linear(d, d));
  hand_tokens_ = register_parameter("hand_tokens", torch::randn({config_.max_frames, d}) * 0.02);
}

torch::Tensor HandPerceptronImpl::forward(const torch::Tensor& anchor, const torch::Tensor& grid,
                                          const torch::Tensor& frame_mask) {
  if (grid.dim() != 5 || grid.size(4) != config_.feature_dim) {
    throw ShapeMismatch("hand_perceptron expects a grid of [B, N, h, w, feature_dim]");
  }
  const int64_t b = grid.size(0), n = grid.size(1), gh = grid.size(2), gw = grid.size(3);
  if (anchor.dim() != 2 || anchor.size(0) != b || anchor.size(1) != config_.anchor_dim) {
    throw ShapeMismatch("hand_perceptron: anchor must be [B, anchor_dim]");
  }
  if (n > config_.max_frames) throw ShapeMismatch("hand_perceptron: more frames than hand tokens");
  const int64_t d = config_.hidden;
  const auto split = config_.split();

  auto values = grid;
  torch::Tensor key_bias;
  if (frame_mask.defined()) {
    if (frame_mask.dim() != 2 || frame_mask.size(0) != b || frame_mask.size(1) != n) {
      throw ShapeMismatch("hand_perceptron: frame mask must be [B, N]");
    }
    auto available = frame_mask.to(torch::kFloat64) > 0.5;
    values = torch::where(available.reshape({b, n, 1, 1, 1}), grid, torch::zeros_like(grid));
    auto per_key = available.reshape({b, n, 1}).expand({b, n, gh * gw}).reshape({b, 1, 1, n * gh * gw});
    key_bias = torch::where(per_key, torch::zeros({}, grid.options()), torch::full({}, -1e4, grid.options()));
  }
  auto keys_in = values.reshape({b, n * gh * gw, config_.feature_dim});

  auto queries = torch::cat({anchor.unsqueeze(1).expand({b, n, config_.anchor_dim}),
                             hand_tokens_.narrow(0, 0, n).unsqueeze(0).expand({b, n, d})},
                            -1);
  auto q = nn::split_heads(norm_q_(w_q_(queries)), config_.heads);
  auto k = nn::split_heads(norm_k_(w_k_(keys_in)), config_.heads);
  auto v = nn::split_heads(norm_v_(w_v_(keys_in)), config_.heads);
  if (config_.use_rope) {
    q = rope_temporal(q, nn::positions(n), split);
    k = rope_3d(k, grid_coords(n, gh, gw), split);
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
  auto logits = torch::matmul(q, k.transpose(-2, -1)) * scale;
  if (key_bias.defined()) logits = logits + key_bias;
  auto weights = torch::softmax(logits, -1);
  last_attention_ = weights.detach();
  return out_proj_(nn::merge_heads(torch::matmul(weights, v)));
}

}  // namespace unihand::perceptron
