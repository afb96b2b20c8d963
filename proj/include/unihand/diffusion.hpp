#pragma once

#include <cstdint>
#include <functional>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "unihand/random.hpp"

namespace unihand::diffusion {

/// Discrete noise schedule indexed by t = 1..T. alpha_bar(0) is 1 by
/// convention.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  int64_t steps() const { return static_cast<int64_t>(betas.size()); }
  double beta(int64_t t) const;
  double alpha(int64_t t) const;
  double alpha_bar(int64_t t) const;
  /// beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t).
  double posterior_variance(int64_t t) const;
};

/// alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) pi/2), with
/// betas clipped to `max_beta` and alpha_bar rebuilt as their running product.
NoiseSchedule cosine_schedule(int64_t steps, double offset = 0.008, double max_beta = 0.999);

/// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. Throws StepOutOfRange unless
/// 0 <= t <= T.
torch::Tensor forward_diffuse(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule);
/// Batched variant with one step per sample, t [B].
torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule);

/// Mean of q(z_{t-1} | z_t, z0) evaluated at the predicted clean latent.
/// Throws StepOutOfRange unless 1 <= t <= T.
torch::Tensor posterior_mean(const torch::Tensor& z0_hat, const torch::Tensor& z_t, int64_t t,
                             const NoiseSchedule& schedule);

/// uncond + w (cond - uncond).
torch::Tensor cfg_combine(const torch::Tensor& uncond, const torch::Tensor& cond, double scale);

enum class SamplerMethod { ddpm, ddim };
SamplerMethod parse_sampler_method(std::string_view name);
std::string_view to_string(SamplerMethod method);

struct SamplerConfig {
  SamplerMethod method = SamplerMethod::ddim;
  int64_t steps = 10;
  double cfg_scale = 2.0;
  double eta = 0.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SamplerConfig& c);
void from_json(const nlohmann::json& j, SamplerConfig& c);

/// Evenly spaced descending subsequence of 1..T that starts at T.
std::vector<int64_t> ddim_timesteps(int64_t total_steps, int64_t sample_steps);

struct DdimStep {
  torch::Tensor mean;
  double sigma = 0.0;
};

/// Deterministic part and noise scale of one DDIM update from t to t_prev
/// (t_prev = 0 ends the chain).
DdimStep ddim_step(const torch::Tensor& z0_hat, const torch::Tensor& z_t, int64_t t, int64_t t_prev, double eta,
                   const NoiseSchedule& schedule);

/// Returns (unconditional, conditional) clean-latent predictions at step t.
using GuidedDenoiser = std::function<std::pair<torch::Tensor, torch::Tensor>(const torch::Tensor& z_t, int64_t t)>;

/// Ancestral sampling over every step; no noise is added on the final step.
torch::Tensor sample_ddpm(const GuidedDenoiser& denoiser, torch::Tensor z_T, const NoiseSchedule& schedule,
                          double cfg_scale, torch::Generator& generator);

/// DDIM over `config.steps` evenly spaced steps. The generator is only
/// consumed when eta > 0.
torch::Tensor sample_ddim(const GuidedDenoiser& denoiser, torch::Tensor z_T, const NoiseSchedule& schedule,
                          const SamplerConfig& config, torch::Generator& generator);

/// Replaces every frame of a sample's condition with `uncond` with
/// probability p, independently per sample. z_c [B, N, d]; uncond [d].
/// Returns the new latents and the per-sample keep flags [B].
std::pair<torch::Tensor, torch::Tensor> condition_dropout(const torch::Tensor& z_c, const torch::Tensor& uncond,
                                                          double p, Rng& rng);

torch::Generator make_generator(std::uint64_t seed);

}  // namespace unihand::diffusion
