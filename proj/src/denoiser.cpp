#include "unihand/denoiser.hpp"

#include <cmath>

#include "unihand/error.hpp"

namespace unihand::diffusion {
namespace {

torch::Tensor modulate(const torch::Tensor& x, const torch::Tensor& shift, const torch::Tensor& scale) {
  return x * (1.0 + scale) + shift;
}

torch::nn::LayerNormOptions plain_norm(int64_t d) {
  return torch::nn::LayerNormOptions({d}).elementwise_affine(false);
}

}  // namespace

Modality modality_for(vae::ConditionKind kind) {
  switch (kind) {
    case vae::ConditionKind::keypoints2d: return Modality::keypoints2d;
    case vae::ConditionKind::keypoints3d: return Modality::keypoints3d;
    case vae::ConditionKind::mano: return Modality::motion;
  }
  throw UnknownKind("unknown condition kind");
}

void DenoiserConfig::validate() const {
  transformer.validate();
  if (latent_dim < 1 || feature_dim < 1 || max_frames < 1) throw ShapeMismatch("denoiser dims must be positive");
}

DenoiserConfig DenoiserConfig::desk() { return {}; }

DenoiserConfig DenoiserConfig::paper() {
  DenoiserConfig c;
  c.transformer = {16, 512, 16, 2048, 0.1};
  c.latent_dim = 512;
  return c;
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = nlohmann::json{{"transformer", c.transformer},
                     {"latent_dim", c.latent_dim},
                     {"feature_dim", c.feature_dim},
                     {"max_frames", c.max_frames}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  if (j.contains("transformer")) c.transformer = j.at("transformer").get<nn::TransformerConfig>();
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.max_frames = j.value("max_frames", c.max_frames);
}

DenoiserInputs DenoiserInputs::unconditional() const {
  DenoiserInputs out = *this;
  for (auto& s : out.structured) {
    if (s) s->mask = torch::zeros_like(s->mask);
  }
  if (out.hand_tokens.defined()) {
    out.vision_mask = torch::zeros({hand_tokens.size(0), hand_tokens.size(1)}, hand_tokens.options());
  }
  return out;
}

DenoiserInputs DenoiserInputs::concat(const DenoiserInputs& a, const DenoiserInputs& b, int64_t batch_a,
                                      int64_t batch_b, int64_t frames, const torch::TensorOptions& options) {
  DenoiserInputs out;
  auto absent = [&](int64_t batch, int64_t width) {
    return ConditionInput{torch::zeros({batch, frames, width}, options), torch::zeros({batch, frames}, options)};
  };
  for (std::size_t k = 0; k < out.structured.size(); ++k) {
    const auto& sa = a.structured[k];
    const auto& sb = b.structured[k];
    if (!sa && !sb) continue;
    const int64_t width = sa ? sa->latent.size(2) : sb->latent.size(2);
    const auto ca = sa ? *sa : absent(batch_a, width);
    const auto cb = sb ? *sb : absent(batch_b, width);
    out.structured[k] = ConditionInput{torch::cat({ca.latent, cb.latent}, 0),
                                       torch::cat({ca.mask.to(options.dtype()), cb.mask.to(options.dtype())}, 0)};
  }
  if (a.hand_tokens.defined() || b.hand_tokens.defined()) {
    const int64_t width = a.hand_tokens.defined() ? a.hand_tokens.size(2) : b.hand_tokens.size(2);
    auto tokens = [&](const DenoiserInputs& in, int64_t batch) {
      if (!in.hand_tokens.defined()) return absent(batch, width);
      auto mask = in.vision_mask.defined() ? in.vision_mask.to(options.dtype()) : torch::ones({batch, frames}, options);
      return ConditionInput{in.hand_tokens, mask};
    };
    const auto ta = tokens(a, batch_a);
    const auto tb = tokens(b, batch_b);
    out.hand_tokens = torch::cat({ta.latent, tb.latent}, 0);
    out.vision_mask = torch::cat({ta.mask, tb.mask}, 0);
  }
  return out;
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  auto f64 = torch::TensorOptions().dtype(torch::kFloat64);
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, f64) / static_cast<double>(half));
  auto args = t.to(torch::kFloat64).reshape({-1, 1}) * freqs.reshape({1, half});
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, -1);
  if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({emb.size(0), 1}, f64)}, -1);
  return emb;
}

DenoiserLayerImpl::DenoiserLayerImpl(const nn::TransformerConfig& config) {
  const int64_t d = config.hidden;
  norm1_ = register_module("norm1", torch::nn::LayerNorm(plain_norm(d)));
  norm_cross_ = register_module("norm_cross", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(plain_norm(d)));
  self_attn_ = register_module("self_attn", nn::MultiHeadAttention(d, config.heads));
  cross_attn_ = register_module("cross_attn", nn::MultiHeadAttention(d, config.heads));
  ff_ = register_module("ff", nn::FeedForward(d, config.feedforward));
  modulation_ = register_module("modulation", torch::nn::Linear(d, 6 * d));
  drop_ = register_module("drop", torch::nn::Dropout(config.dropout));
}

torch::Tensor DenoiserLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& cond, const torch::Tensor& hand,
                                         const torch::Tensor& positions, const torch::Tensor& hand_positions) {
  auto mod = modulation_(torch::silu(cond)).unsqueeze(1).chunk(6, -1);
  auto h = modulate(norm1_(x), mod[0], mod[1]);
  auto y = x + mod[2] * drop_(self_attn_(h, h, positions, positions));
  y = y + drop_(cross_attn_(norm_cross_(y), hand, positions, hand_positions));
  return y + mod[5] * drop_(ff_(modulate(norm2_(y), mod[3], mod[4])));
}

DenoiserImpl::DenoiserImpl(const DenoiserConfig& config) : config_(config) {
  config_.validate();
  const int64_t d = config_.transformer.hidden;
  perceptron::PerceptronConfig pc;
  pc.hidden = d;
  pc.heads = config_.transformer.heads;
  pc.anchor_dim = config_.latent_dim;
  pc.feature_dim = config_.feature_dim;
  pc.max_frames = config_.max_frames;
  perceptron_ = register_module("perceptron", perceptron::HandPerceptron(pc));
  uncond_tokens_ = register_parameter("uncond_tokens", torch::randn({3, config_.latent_dim}) * 0.02);
  vision_uncond_ = register_parameter("vision_uncond", torch::randn({d}) * 0.02);
  in_proj_ = register_module("in_proj", torch::nn::Linear(config_.latent_dim, d));
  time_fc1_ = register_module("time_fc1", torch::nn::Linear(d, d));
  time_fc2_ = register_module("time_fc2", torch::nn::Linear(d, d));
  for (int64_t i = 0; i < config_.transformer.layers; ++i) layers_->push_back(DenoiserLayer(config_.transformer));
  register_module("layers", layers_);
  final_norm_ = register_module("final_norm", torch::nn::LayerNorm(plain_norm(d)));
  final_modulation_ = register_module("final_modulation", torch::nn::Linear(d, 2 * d));
  out_proj_ = register_module("out_proj", torch::nn::Linear(d, config_.latent_dim));
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const DenoiserInputs& inputs) {
  if (z_t.dim() != 3 || z_t.size(2) != config_.latent_dim || z_t.size(1) < 2) {
    throw ShapeMismatch("denoiser expects z_t of [B, N + 1, latent]");
  }
  const int64_t b = z_t.size(0), n = z_t.size(1) - 1, d = config_.transformer.hidden;
  if (t.dim() != 1 || t.size(0) != b) throw ShapeMismatch("denoiser expects one step per sample");

  auto fused = torch::zeros({b, n, config_.latent_dim}, z_t.options());
  for (auto kind : vae::kAllConditionKinds) {
    auto token = uncond_token(modality_for(kind)).expand({b, n, config_.latent_dim});
    const auto& input = inputs.structured[static_cast<std::size_t>(kind)];
    if (!input) {
      fused = fused + token;
      continue;
    }
    if (input->latent.dim() != 3 || input->latent.size(0) != b || input->latent.size(1) != n ||
        input->latent.size(2) != config_.latent_dim) {
      throw ShapeMismatch("condition latent must be [B, N, latent]");
    }
    if (input->mask.dim() != 2 || input->mask.size(0) != b || input->mask.size(1) != n) {
      throw ShapeMismatch("condition mask must be [B, N]");
    }
    auto available = (input->mask.to(torch::kFloat64) > 0.5).unsqueeze(-1);
    fused = fused + torch::where(available, input->latent, token);
  }
  auto stream = z_t + torch::cat({fused, torch::zeros({b, 1, config_.latent_dim}, z_t.options())}, 1);
  auto x = in_proj_(stream);

  torch::Tensor hand;
  if (inputs.hand_tokens.defined()) {
    if (inputs.hand_tokens.dim() != 3 || inputs.hand_tokens.size(0) != b || inputs.hand_tokens.size(1) != n ||
        inputs.hand_tokens.size(2) != d) {
      throw ShapeMismatch("hand tokens must be [B, N, hidden]");
    }
    hand = inputs.hand_tokens;
    if (inputs.vision_mask.defined()) {
      auto available = (inputs.vision_mask.to(torch::kFloat64) > 0.5).unsqueeze(-1);
      hand = torch::where(available, hand, vision_uncond_.expand({b, n, d}));
    }
  } else {
    hand = vision_uncond_.expand({b, n, d});
  }

  auto cond = time_fc2_(torch::silu(time_fc1_(timestep_embedding(t, d).to(z_t.scalar_type()))));
  auto positions = nn::positions(n + 1);
  auto hand_positions = nn::positions(n);
  for (const auto& layer : *layers_) {
    x = layer->as<DenoiserLayer>()->forward(x, cond, hand, positions, hand_positions);
  }
  auto fin = final_modulation_(torch::silu(cond)).unsqueeze(1).chunk(2, -1);
  return out_proj_(modulate(final_norm_(x), fin[0], fin[1]));
}

torch::Tensor DenoiserImpl::perceive(const torch::Tensor& anchor, const torch::Tensor& grid,
                                     const torch::Tensor& frame_mask) {
  return perceptron_(anchor, grid, frame_mask);
}

torch::Tensor DenoiserImpl::uncond_token(Modality m) const {
  if (m == Modality::vision) return vision_uncond_;
  return uncond_tokens_[static_cast<int64_t>(m)];
}

std::vector<torch::Tensor> DenoiserImpl::timestep_parameters() const {
  return {time_fc1_->weight, time_fc2_->weight};
}

DenoiserLossTerms denoiser_loss(const torch::Tensor& z0, const torch::Tensor& z0_hat, const torch::Tensor& x,
                                const torch::Tensor& x_hat, const DiffLossWeights& weights,
                                const hand::KinematicModel& kinematics, double joint_weight) {
  if (z0.sizes() != z0_hat.sizes()) throw ShapeMismatch("denoiser_loss: latent shapes differ");
  if (x.sizes() != x_hat.sizes()) throw ShapeMismatch("denoiser_loss: motion shapes differ");
  DenoiserLossTerms terms;
  terms.simple = torch::mse_loss(z0_hat, z0);
  terms.rec = vae::reconstruction_loss(x_hat, x, joint_weight, kinematics);
  terms.total = terms.simple + weights.rec * terms.rec;
  return terms;
}

}  // namespace unihand::diffusion
