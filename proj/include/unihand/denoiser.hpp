#pragma once

#include <array>
#include <cstdint>
#include <optional>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "unihand/joint_vae.hpp"
#include "unihand/perceptron.hpp"
#include "unihand/transformer.hpp"

namespace unihand::diffusion {

/// Streams that carry a learnable unconditional token. `motion` pairs with
/// the MANO-parameter condition, whose latents live in motion-latent space.
enum class Modality { motion, keypoints2d, keypoints3d, vision };
inline constexpr int kNumModalities = 4;
Modality modality_for(vae::ConditionKind kind);

struct DenoiserConfig {
  nn::TransformerConfig transformer{2, 64, 4, 128, 0.1};
  int64_t latent_dim = 64;
  int64_t feature_dim = 64;
  int64_t max_frames = 64;

  void validate() const;
  static DenoiserConfig desk();
  /// 16 layers, hidden 512, 16 heads, FF 2048.
  static DenoiserConfig paper();
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

struct ConditionInput {
  torch::Tensor latent;  // [B, N, d]
  torch::Tensor mask;    // [B, N], 1 = available
};

struct DenoiserInputs {
  /// Indexed by vae::ConditionKind.
  std::array<std::optional<ConditionInput>, 3> structured;
  /// Per-frame hand features from the perceptron [B, N, hidden], or undefined.
  torch::Tensor hand_tokens;
  /// [B, N]; defaults to all-available when hand_tokens is defined.
  torch::Tensor vision_mask;

  /// Same inputs with every stream switched to its unconditional form.
  DenoiserInputs unconditional() const;
  /// Concatenates two input sets along the batch dimension.
  static DenoiserInputs concat(const DenoiserInputs& a, const DenoiserInputs& b, int64_t batch_a, int64_t batch_b,
                               int64_t frames, const torch::TensorOptions& options);
};

/// Sinusoidal embedding of integer steps, [B] -> [B, dim].
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

/// Transformer block with AdaLN scale/shift/gate from the timestep
/// embedding, temporal self-attention and cross-attention to hand tokens.
class DenoiserLayerImpl : public torch::nn::Module {
 public:
  explicit DenoiserLayerImpl(const nn::TransformerConfig& config);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond, const torch::Tensor& hand,
                        const torch::Tensor& positions, const torch::Tensor& hand_positions);

 private:
  torch::nn::LayerNorm norm1_{nullptr}, norm_cross_{nullptr}, norm2_{nullptr};
  nn::MultiHeadAttention self_attn_{nullptr}, cross_attn_{nullptr};
  nn::FeedForward ff_{nullptr};
  torch::nn::Linear modulation_{nullptr};
  torch::nn::Dropout drop_{nullptr};
};
TORCH_MODULE(DenoiserLayer);

/// Predicts the clean latent sequence (N frame tokens plus the global-token
/// slot) from a noisy one.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(const DenoiserConfig& config);

  /// z_t [B, N + 1, latent]; t [B] integer steps.
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const DenoiserInputs& inputs);

  /// Hand features from an anchor [B, latent] and grid [B, N, h, w, C].
  torch::Tensor perceive(const torch::Tensor& anchor, const torch::Tensor& grid, const torch::Tensor& frame_mask = {});

  /// Learnable unconditional token (latent width; hidden width for vision).
  torch::Tensor uncond_token(Modality m) const;
  /// Parameters of the timestep MLP (zeroing them removes t-dependence).
  std::vector<torch::Tensor> timestep_parameters() const;
  const DenoiserConfig& config() const { return config_; }

 private:
  DenoiserConfig config_;
  perceptron::HandPerceptron perceptron_{nullptr};
  torch::Tensor uncond_tokens_;  // [3, latent]: motion, keypoints2d, keypoints3d
  torch::Tensor vision_uncond_;  // [hidden]
  torch::nn::Linear in_proj_{nullptr}, out_proj_{nullptr}, time_fc1_{nullptr}, time_fc2_{nullptr},
      final_modulation_{nullptr};
  torch::nn::LayerNorm final_norm_{nullptr};
  torch::nn::ModuleList layers_;
};
TORCH_MODULE(Denoiser);

struct DiffLossWeights {
  double rec = 1.0;
};

struct DenoiserLossTerms {
  torch::Tensor total;
  torch::Tensor simple;
  torch::Tensor rec;
};

/// MSE(z0_hat, z0) + w_rec * L_rec(x_hat, x).
DenoiserLossTerms denoiser_loss(const torch::Tensor& z0, const torch::Tensor& z0_hat, const torch::Tensor& x,
                                const torch::Tensor& x_hat, const DiffLossWeights& weights,
                                const hand::KinematicModel& kinematics, double joint_weight = 0.5);

}  // namespace unihand::diffusion
