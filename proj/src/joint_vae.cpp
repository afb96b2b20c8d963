#include "unihand/joint_vae.hpp"

#include <string>

#include "unihand/error.hpp"

namespace unihand::vae {

ConditionKind parse_condition_kind(std::string_view name) {
  if (name == "keypoints2d" || name == "2d") return ConditionKind::keypoints2d;
  if (name == "keypoints3d" || name == "3d") return ConditionKind::keypoints3d;
  if (name == "mano") return ConditionKind::mano;
  throw UnknownKind("unknown condition kind '" + std::string(name) + "'");
}

std::string_view to_string(ConditionKind kind) {
  switch (kind) {
    case ConditionKind::keypoints2d: return "keypoints2d";
    case ConditionKind::keypoints3d: return "keypoints3d";
    case ConditionKind::mano: return "mano";
  }
  throw UnknownKind("unknown condition kind");
}

int64_t condition_feature_dim(ConditionKind kind) {
  switch (kind) {
    case ConditionKind::keypoints2d: return hand::kNumJoints * 2;
    case ConditionKind::keypoints3d: return hand::kNumJoints * 3;
    case ConditionKind::mano: return hand::kPoseDim;
  }
  throw UnknownKind("unknown condition kind");
}

void VaeConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (encoder.hidden != decoder.hidden) throw ShapeMismatch("encoder and decoder widths must match");
  if (segment_length < 1) throw ShapeMismatch("segment length must be positive");
}

VaeConfig VaeConfig::desk() { return {}; }

VaeConfig VaeConfig::paper() {
  VaeConfig c;
  c.encoder = {9, 512, 8, 2048, 0.1};
  c.decoder = c.encoder;
  return c;
}

void to_json(nlohmann::json& j, const VaeConfig& c) {
  j = nlohmann::json{{"encoder", c.encoder},
                     {"decoder", c.decoder},
                     {"segment_length", c.segment_length},
                     {"max_frames", c.max_frames}};
}

void from_json(const nlohmann::json& j, VaeConfig& c) {
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<nn::TransformerConfig>();
  if (j.contains("decoder")) c.decoder = j.at("decoder").get<nn::TransformerConfig>();
  c.segment_length = j.value("segment_length", c.segment_length);
  c.max_frames = j.value("max_frames", c.max_frames);
}

torch::Tensor reparameterize(const torch::Tensor& mu, const torch::Tensor& log_sigma, const torch::Tensor& eps) {
  return mu + torch::exp(log_sigma) * eps;
}

MotionEncoderImpl::MotionEncoderImpl(const VaeConfig& config) : config_(config) {
  config_.validate();
  const int64_t d = config_.latent_dim();
  embed_ = register_module("embed", torch::nn::Linear(hand::kPoseDim, d));
  dist_tokens_ = register_parameter("dist_tokens", torch::randn({2, d}) * 0.02);
  encoder_ = register_module("encoder", nn::TransformerEncoder(config_.encoder));
  mu_head_ = register_module("mu_head", torch::nn::Linear(d, d));
  sigma_head_ = register_module("sigma_head", torch::nn::Linear(d, d));
  z_head_ = register_module("z_head", torch::nn::Linear(d, d));
}

MotionEncoding MotionEncoderImpl::forward(const torch::Tensor& x, const std::optional<torch::Tensor>& eps) {
  if (x.dim() != 3 || x.size(2) != hand::kPoseDim) throw ShapeMismatch("encode_motion expects [B, N, 61]");
  const int64_t b = x.size(0), n = x.size(1), d = config_.latent_dim();
  if (n < 1 || n > config_.max_frames) throw ShapeMismatch("encode_motion: sequence length out of range");

  auto tokens = torch::cat({dist_tokens_.unsqueeze(0).expand({b, 2, d}), embed_(x)}, 1);
  auto out = encoder_(tokens, nn::positions(n + 2));

  MotionEncoding enc;
  enc.g.mu = mu_head_(out.select(1, 0));
  enc.g.log_sigma = sigma_head_(out.select(1, 1));
  enc.z = z_head_(out.narrow(1, 2, n));
  if (eps) {
    if (eps->sizes() != enc.g.mu.sizes()) throw ShapeMismatch("encode_motion: eps must be [B, d]");
    enc.g.eps = *eps;
    enc.g.sample = reparameterize(enc.g.mu, enc.g.log_sigma, *eps);
  } else {
    enc.g.sample = enc.g.mu;
  }
  return enc;
}

ConditionEncoderImpl::ConditionEncoderImpl(ConditionKind kind, const VaeConfig& config)
    : kind_(kind), config_(config) {
  config_.validate();
  const int64_t d = config_.latent_dim();
  embed_ = register_module("embed", torch::nn::Linear(condition_feature_dim(kind), d));
  missing_ = register_parameter("missing", torch::randn({d}) * 0.02);
  encoder_ = register_module("encoder", nn::TransformerEncoder(config_.encoder));
  z_head_ = register_module("z_head", torch::nn::Linear(d, d));
}

torch::Tensor ConditionEncoderImpl::forward(const torch::Tensor& data, const torch::Tensor& mask) {
  if (data.dim() < 3) throw ShapeMismatch("encode_condition expects [B, N, ...]");
  const int64_t b = data.size(0), n = data.size(1), d = config_.latent_dim();
  auto flat = data.reshape({b, n, -1});
  if (flat.size(2) != condition_feature_dim(kind_)) throw ShapeMismatch("encode_condition: wrong feature width");
  if (mask.dim() != 2 || mask.size(0) != b || mask.size(1) != n) throw ShapeMismatch("condition mask must be [B, N]");
  if (n < 1 || n > config_.max_frames) throw ShapeMismatch("encode_condition: sequence length out of range");

  auto available = (mask.to(torch::kFloat64) > 0.5).unsqueeze(-1);
  auto clean = torch::where(available, flat, torch::zeros_like(flat));
  auto tokens = torch::where(available, embed_(clean), missing_.expand({b, n, d}));
  return z_head_(encoder_(tokens, nn::positions(n)));
}

AutoregressiveDecoderImpl::AutoregressiveDecoderImpl(const VaeConfig& config) : config_(config) {
  config_.validate();
  const int64_t d = config_.latent_dim();
  anchor_proj_ = register_module("anchor_proj", torch::nn::Linear(hand::kPoseDim, d));
  decoder_ = register_module("decoder", nn::TransformerEncoder(config_.decoder));
  out_head_ = register_module("out_head", torch::nn::Linear(d, hand::kPoseDim));
}

torch::Tensor AutoregressiveDecoderImpl::anchor(const torch::Tensor& pose) { return anchor_proj_(pose); }

torch::Tensor AutoregressiveDecoderImpl::segment(const torch::Tensor& anchor, const torch::Tensor& z_segment,
                                                 const torch::Tensor& g) {
  const int64_t n = z_segment.size(1);
  auto tokens = torch::cat({anchor.unsqueeze(1), g.unsqueeze(1), z_segment}, 1);
  auto out = decoder_(tokens, nn::positions(n + 2));
  return out_head_(out.narrow(1, 2, n));
}

torch::Tensor AutoregressiveDecoderImpl::forward(const torch::Tensor& z, const torch::Tensor& g,
                                                 const torch::Tensor& first_frame) {
  if (z.dim() != 3 || z.size(2) != config_.latent_dim()) throw ShapeMismatch("decode expects z of [B, N, d]");
  if (g.dim() != 2 || g.size(0) != z.size(0)) throw ShapeMismatch("decode expects g of [B, d]");
  if (first_frame.dim() != 2 || first_frame.size(1) != hand::kPoseDim) {
    throw ShapeMismatch("decode expects a first frame of [B, 61]");
  }
  const int64_t n = z.size(1), seg = config_.segment_length;
  if (n == 0 || n % seg != 0) {
    throw LengthNotMultiple("decode: length " + std::to_string(n) + " is not a multiple of " + std::to_string(seg));
  }
  auto a = anchor(first_frame);
  std::vector<torch::Tensor> segments;
  segments.reserve(static_cast<std::size_t>(n / seg));
  for (int64_t i = 0; i < n; i += seg) {
    auto x_seg = segment(a, z.narrow(1, i, seg), g);
    a = anchor(x_seg.select(1, seg - 1));
    segments.push_back(std::move(x_seg));
  }
  last_rollouts_ = static_cast<int64_t>(segments.size());
  return torch::cat(segments, 1);
}

JointVaeImpl::JointVaeImpl(const VaeConfig& config) : config_(config) {
  config_.validate();
  motion_encoder_ = register_module("motion_encoder", MotionEncoder(config_));
  for (auto kind : kAllConditionKinds) {
    const auto idx = static_cast<std::size_t>(kind);
    condition_encoders_[idx] = register_module("cond_" + std::string(to_string(kind)), ConditionEncoder(kind, config_));
  }
  decoder_ = register_module("decoder", AutoregressiveDecoder(config_));
}

MotionEncoding JointVaeImpl::encode_motion(const torch::Tensor& x, const std::optional<torch::Tensor>& eps) {
  return motion_encoder_(x, eps);
}

torch::Tensor JointVaeImpl::encode_condition(ConditionKind kind, const torch::Tensor& data, const torch::Tensor& mask) {
  const auto idx = static_cast<std::size_t>(kind);
  if (idx >= condition_encoders_.size()) throw UnknownKind("encode_condition: unknown condition kind");
  return condition_encoders_[idx]->forward(data, mask);
}

torch::Tensor JointVaeImpl::decode(const torch::Tensor& z, const torch::Tensor& g, const torch::Tensor& first_frame) {
  return decoder_(z, g, first_frame);
}

void to_json(nlohmann::json& j, const VaeLossWeights& w) {
  j = nlohmann::json{{"kl", w.kl}, {"joint_rec", w.joint_rec}, {"latent", w.latent}, {"aux", w.aux}};
}

void from_json(const nlohmann::json& j, VaeLossWeights& w) {
  w.kl = j.value("kl", w.kl);
  w.joint_rec = j.value("joint_rec", w.joint_rec);
  w.latent = j.value("latent", w.latent);
  w.aux = j.value("aux", w.aux);
}

torch::Tensor smooth_l1(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw ShapeMismatch("smooth_l1: shapes differ");
  auto diff = a - b;
  auto ad = diff.abs();
  return torch::where(ad < 1.0, 0.5 * diff * diff, ad - 0.5).mean();
}

torch::Tensor reconstruction_loss(const torch::Tensor& x_hat, const torch::Tensor& x, double joint_weight,
                                  const hand::KinematicModel& kinematics, torch::Tensor* mano_part,
                                  torch::Tensor* joint_part) {
  auto mano = smooth_l1(x_hat, x);
  auto joints = smooth_l1(kinematics.forward(x_hat), kinematics.forward(x));
  if (mano_part) *mano_part = mano;
  if (joint_part) *joint_part = joints;
  return mano + joint_weight * joints;
}

torch::Tensor gaussian_kl(const torch::Tensor& mu, const torch::Tensor& log_sigma) {
  auto per_dim = 0.5 * (mu * mu + torch::exp(2.0 * log_sigma) - 1.0 - 2.0 * log_sigma);
  return per_dim.sum(-1).mean();
}

VaeLossTerms vae_loss(const torch::Tensor& x, const torch::Tensor& x_hat,
                      const std::vector<torch::Tensor>& x_hat_conditions, const torch::Tensor& z,
                      const std::vector<torch::Tensor>& z_conditions, const torch::Tensor& mu,
                      const torch::Tensor& log_sigma, const VaeLossWeights& weights,
                      const hand::KinematicModel& kinematics) {
  if (x.sizes() != x_hat.sizes()) throw ShapeMismatch("vae_loss: reconstruction shape differs from target");
  if (x_hat_conditions.size() != z_conditions.size()) throw ShapeMismatch("vae_loss: condition lists differ");
  if (mu.sizes() != log_sigma.sizes()) throw ShapeMismatch("vae_loss: mu/log_sigma shapes differ");

  VaeLossTerms t;
  t.rec = reconstruction_loss(x_hat, x, weights.joint_rec, kinematics, &t.mano_rec, &t.joint_rec);
  t.kl = gaussian_kl(mu, log_sigma);
  t.latent = torch::zeros({}, x.options());
  t.aux = torch::zeros({}, x.options());
  for (std::size_t c = 0; c < z_conditions.size(); ++c) {
    if (z_conditions[c].sizes() != z.sizes()) throw ShapeMismatch("vae_loss: condition latent shape differs");
    t.latent = t.latent + torch::mse_loss(z_conditions[c], z);
    t.aux = t.aux + smooth_l1(x_hat_conditions[c], x);
  }
  t.total = t.rec + weights.kl * t.kl + weights.latent * t.latent + weights.aux * t.aux;
  return t;
}

int64_t padded_length(int64_t frames, int64_t segment) {
  if (frames < 1 || segment < 1) throw ShapeMismatch("padded_length: positive sizes required");
  return (frames + segment - 1) / segment * segment;
}

torch::Tensor pad_repeat_last(const torch::Tensor& t, int64_t length) {
  const int64_t n = t.size(1);
  if (length < n) throw ShapeMismatch("pad_repeat_last: target shorter than input");
  if (length == n) return t;
  auto sizes = t.sizes().vec();
  sizes[1] = length - n;
  return torch::cat({t, t.narrow(1, n - 1, 1).expand(sizes)}, 1);
}

}  // namespace unihand::vae
