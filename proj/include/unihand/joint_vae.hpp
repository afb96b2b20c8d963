#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "unihand/hand_model.hpp"
#include "unihand/transformer.hpp"

namespace unihand::vae {

/// Structured condition streams encoded into the shared latent space.
enum class ConditionKind { keypoints2d, keypoints3d, mano };
inline constexpr std::array<ConditionKind, 3> kAllConditionKinds = {
    ConditionKind::keypoints2d, ConditionKind::keypoints3d, ConditionKind::mano};

/// Throws UnknownKind for unrecognized names.
ConditionKind parse_condition_kind(std::string_view name);
std::string_view to_string(ConditionKind kind);
/// Flattened per-frame feature width of a condition stream.
int64_t condition_feature_dim(ConditionKind kind);

struct VaeConfig {
  nn::TransformerConfig encoder;
  nn::TransformerConfig decoder;
  int64_t segment_length = 8;
  int64_t max_frames = 1024;

  int64_t latent_dim() const { return encoder.hidden; }
  void validate() const;

  /// 2-layer, 64-wide transformers for tests and CPU runs.
  static VaeConfig desk();
  /// 9 layers, hidden 512, 8 heads, FF 2048, dropout 0.1.
  static VaeConfig paper();
};

void to_json(nlohmann::json& j, const VaeConfig& c);
void from_json(const nlohmann::json& j, VaeConfig& c);

/// Sequence-level latent: g = mu + exp(log_sigma) * eps.
struct GlobalToken {
  torch::Tensor mu;         // [B, d]
  torch::Tensor log_sigma;  // [B, d]
  torch::Tensor sample;     // [B, d]
  torch::Tensor eps;        // [B, d]; undefined when sample == mu
};

struct MotionEncoding {
  torch::Tensor z;  // [B, N, d]
  GlobalToken g;
};

torch::Tensor reparameterize(const torch::Tensor& mu, const torch::Tensor& log_sigma, const torch::Tensor& eps);

/// Encodes poses with the learnable distribution tokens T_mu, T_sigma
/// prepended to the frame sequence.
class MotionEncoderImpl : public torch::nn::Module {
 public:
  explicit MotionEncoderImpl(const VaeConfig& config);

  /// x [B, N, 61]. With `eps` given, g is sampled from it; without, g = mu.
  MotionEncoding forward(const torch::Tensor& x, const std::optional<torch::Tensor>& eps = std::nullopt);

 private:
  VaeConfig config_;
  torch::nn::Linear embed_{nullptr}, mu_head_{nullptr}, sigma_head_{nullptr}, z_head_{nullptr};
  torch::Tensor dist_tokens_;  // [2, d]
  nn::TransformerEncoder encoder_{nullptr};
};
TORCH_MODULE(MotionEncoder);

/// Per-kind condition encoder. Masked frames are replaced by a learned
/// missing-frame embedding before the transformer, so their payload never
/// reaches the output.
class ConditionEncoderImpl : public torch::nn::Module {
 public:
  ConditionEncoderImpl(ConditionKind kind, const VaeConfig& config);

  /// data [B, N, F] (or [B, N, 21, C]); mask [B, N] with 1 = available.
  torch::Tensor forward(const torch::Tensor& data, const torch::Tensor& mask);
  ConditionKind kind() const { return kind_; }

 private:
  ConditionKind kind_;
  VaeConfig config_;
  torch::nn::Linear embed_{nullptr}, z_head_{nullptr};
  torch::Tensor missing_;  // [d]
  nn::TransformerEncoder encoder_{nullptr};
};
TORCH_MODULE(ConditionEncoder);

/// Segment-wise autoregressive decoder driven by anchor tokens.
class AutoregressiveDecoderImpl : public torch::nn::Module {
 public:
  explicit AutoregressiveDecoderImpl(const VaeConfig& config);

  /// Linear embedding of a pose [B, 61] -> [B, d].
  torch::Tensor anchor(const torch::Tensor& pose);
  /// One rollout: (anchor [B, d], z segment [B, n, d], g [B, d]) -> [B, n, 61].
  torch::Tensor segment(const torch::Tensor& anchor, const torch::Tensor& z_segment, const torch::Tensor& g);
  /// Full rollout over z [B, N, d]; N must be a multiple of the segment length.
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& g, const torch::Tensor& first_frame);

  /// Rollouts performed by the most recent forward().
  int64_t last_rollouts() const { return last_rollouts_; }

 private:
  VaeConfig config_;
  torch::nn::Linear anchor_proj_{nullptr}, out_head_{nullptr};
  nn::TransformerEncoder decoder_{nullptr};
  int64_t last_rollouts_ = 0;
};
TORCH_MODULE(AutoregressiveDecoder);

class JointVaeImpl : public torch::nn::Module {
 public:
  explicit JointVaeImpl(const VaeConfig& config);

  MotionEncoding encode_motion(const torch::Tensor& x, const std::optional<torch::Tensor>& eps = std::nullopt);
  torch::Tensor encode_condition(ConditionKind kind, const torch::Tensor& data, const torch::Tensor& mask);
  torch::Tensor decode(const torch::Tensor& z, const torch::Tensor& g, const torch::Tensor& first_frame);

  AutoregressiveDecoder& decoder() { return decoder_; }
  const VaeConfig& config() const { return config_; }

 private:
  VaeConfig config_;
  MotionEncoder motion_encoder_{nullptr};
  std::array<ConditionEncoder, 3> condition_encoders_{nullptr, nullptr, nullptr};
  AutoregressiveDecoder decoder_{nullptr};
};
TORCH_MODULE(JointVae);

struct VaeLossWeights {
  double kl = 1e-4;
  double joint_rec = 0.5;
  double latent = 0.1;
  double aux = 0.1;
};

void to_json(nlohmann::json& j, const VaeLossWeights& w);
void from_json(const nlohmann::json& j, VaeLossWeights& w);

struct VaeLossTerms {
  torch::Tensor total;
  torch::Tensor rec;
  torch::Tensor mano_rec;
  torch::Tensor joint_rec;
  torch::Tensor kl;
  torch::Tensor latent;
  torch::Tensor aux;
};

/// Smoothed L1 with transition at 1.0, averaged over all elements.
torch::Tensor smooth_l1(const torch::Tensor& a, const torch::Tensor& b);
/// Parameter loss plus weighted joint loss on forward kinematics.
torch::Tensor reconstruction_loss(const torch::Tensor& x_hat, const torch::Tensor& x, double joint_weight,
                                  const hand::KinematicModel& kinematics, torch::Tensor* mano_part = nullptr,
                                  torch::Tensor* joint_part = nullptr);
/// KL(N(mu, sigma) || N(0, I)) summed over latent dims, averaged over batch.
torch::Tensor gaussian_kl(const torch::Tensor& mu, const torch::Tensor& log_sigma);

/// Composed objective. `x_hat_conditions` and `z_conditions` are parallel
/// lists, one entry per condition stream.
VaeLossTerms vae_loss(const torch::Tensor& x, const torch::Tensor& x_hat,
                      const std::vector<torch::Tensor>& x_hat_conditions, const torch::Tensor& z,
                      const std::vector<torch::Tensor>& z_conditions, const torch::Tensor& mu,
                      const torch::Tensor& log_sigma, const VaeLossWeights& weights,
                      const hand::KinematicModel& kinematics);

/// Smallest multiple of `segment` that is >= `frames`.
int64_t padded_length(int64_t frames, int64_t segment);
/// Extends dim 1 of `t` to `length` by repeating its final entry.
torch::Tensor pad_repeat_last(const torch::Tensor& t, int64_t length);

}  // namespace unihand::vae
