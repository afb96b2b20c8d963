#include "unihand/diffusion.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <numbers>
#include <string>

#include "unihand/error.hpp"

namespace unihand::diffusion {
namespace {

void check_step(const NoiseSchedule& s, int64_t t, int64_t lo) {
  if (t < lo || t > s.steps()) {
    throw StepOutOfRange("diffusion step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                         std::to_string(s.steps()) + "]");
  }
}

}  // namespace

double NoiseSchedule::beta(int64_t t) const {
  check_step(*this, t, 1);
  return betas[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha(int64_t t) const {
  check_step(*this, t, 1);
  return alphas[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int64_t t) const {
  check_step(*this, t, 0);
  return t == 0 ? 1.0 : alpha_bars[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::posterior_variance(int64_t t) const {
  return beta(t) * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t));
}

NoiseSchedule cosine_schedule(int64_t steps, double offset, double max_beta) {
  if (steps < 1) throw StepOutOfRange("cosine_schedule needs at least one step");
  auto f = [&](double t) {
    const double c = std::cos((t / static_cast<double>(steps) + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
    return c * c;
  };
  NoiseSchedule s;
  const double f0 = f(0.0);
  double prev_bar = 1.0;
  double running = 1.0;
  for (int64_t t = 1; t <= steps; ++t) {
    const double bar = f(static_cast<double>(t)) / f0;
    const double beta = std::min(1.0 - bar / prev_bar, max_beta);
    prev_bar = bar;
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    running *= 1.0 - beta;
    s.alpha_bars.push_back(running);
  }
  return s;
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule) {
  check_step(schedule, t, 0);
  if (z0.sizes() != eps.sizes()) throw ShapeMismatch("forward_diffuse: eps must match z0");
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule) {
  if (z0.sizes() != eps.sizes()) throw ShapeMismatch("forward_diffuse: eps must match z0");
  if (t.dim() != 1 || t.size(0) != z0.size(0)) throw ShapeMismatch("forward_diffuse: one step per sample");
  auto steps = t.to(torch::kInt64).contiguous();
  std::vector<double> ab(static_cast<std::size_t>(steps.size(0)));
  for (int64_t b = 0; b < steps.size(0); ++b) ab[static_cast<std::size_t>(b)] = schedule.alpha_bar(steps[b].item<int64_t>());
  std::vector<int64_t> shape(static_cast<std::size_t>(z0.dim()), 1);
  shape[0] = z0.size(0);
  auto abt = torch::tensor(ab, torch::kFloat64).reshape(shape).to(z0.scalar_type());
  return torch::sqrt(abt) * z0 + torch::sqrt(1.0 - abt) * eps;
}

torch::Tensor posterior_mean(const torch::Tensor& z0_hat, const torch::Tensor& z_t, int64_t t,
                             const NoiseSchedule& schedule) {
  check_step(schedule, t, 1);
  if (z0_hat.sizes() != z_t.sizes()) throw ShapeMismatch("posterior_mean: shapes differ");
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t - 1);
  const double c0 = std::sqrt(ab_prev) * schedule.beta(t) / (1.0 - ab);
  const double ct = std::sqrt(schedule.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
  return c0 * z0_hat + ct * z_t;
}

torch::Tensor cfg_combine(const torch::Tensor& uncond, const torch::Tensor& cond, double scale) {
  if (uncond.sizes() != cond.sizes()) throw ShapeMismatch("cfg_combine: shapes differ");
  return uncond + scale * (cond - uncond);
}

SamplerMethod parse_sampler_method(std::string_view name) {
  if (name == "ddpm") return SamplerMethod::ddpm;
  if (name == "ddim") return SamplerMethod::ddim;
  throw UnknownKind("unknown sampler '" + std::string(name) + "'");
}

std::string_view to_string(SamplerMethod method) { return method == SamplerMethod::ddpm ? "ddpm" : "ddim"; }

void SamplerConfig::validate() const {
  if (steps < 1) throw StepOutOfRange("sampler needs at least one step");
  if (cfg_scale < 0.0) throw ShapeMismatch("cfg scale must be non-negative");
  if (eta < 0.0) throw ShapeMismatch("eta must be non-negative");
}

void to_json(nlohmann::json& j, const SamplerConfig& c) {
  j = nlohmann::json{{"method", std::string(to_string(c.method))},
                     {"steps", c.steps},
                     {"cfg_scale", c.cfg_scale},
                     {"eta", c.eta}};
}

void from_json(const nlohmann::json& j, SamplerConfig& c) {
  if (j.contains("method")) c.method = parse_sampler_method(j.at("method").get<std::string>());
  c.steps = j.value("steps", c.steps);
  c.cfg_scale = j.value("cfg_scale", c.cfg_scale);
  c.eta = j.value("eta", c.eta);
}

std::vector<int64_t> ddim_timesteps(int64_t total_steps, int64_t sample_steps) {
  if (sample_steps < 1 || sample_steps > total_steps) {
    throw StepOutOfRange("DDIM step count must lie in [1, T]");
  }
  std::vector<int64_t> ts;
  ts.reserve(static_cast<std::size_t>(sample_steps));
  for (int64_t k = 0; k < sample_steps; ++k) ts.push_back(total_steps - (k * total_steps) / sample_steps);
  return ts;
}

DdimStep ddim_step(const torch::Tensor& z0_hat, const torch::Tensor& z_t, int64_t t, int64_t t_prev, double eta,
                   const NoiseSchedule& schedule) {
  check_step(schedule, t, 1);
  check_step(schedule, t_prev, 0);
  if (t_prev >= t) throw StepOutOfRange("ddim_step must move to an earlier step");
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t_prev);
  auto eps_hat = (z_t - std::sqrt(ab) * z0_hat) / std::sqrt(1.0 - ab);
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  return {std::sqrt(ab_prev) * z0_hat + dir * eps_hat, sigma};
}

torch::Tensor sample_ddpm(const GuidedDenoiser& denoiser, torch::Tensor z_T, const NoiseSchedule& schedule,
                          double cfg_scale, torch::Generator& generator) {
  auto z = std::move(z_T);
  for (int64_t t = schedule.steps(); t >= 1; --t) {
    auto [uncond, cond] = denoiser(z, t);
    auto z0_hat = cfg_combine(uncond, cond, cfg_scale);
    auto mean = posterior_mean(z0_hat, z, t, schedule);
    if (t > 1) {
      auto noise = torch::randn(z.sizes(), generator, z.options());
      z = mean + std::sqrt(schedule.posterior_variance(t)) * noise;
    } else {
      z = mean;
    }
  }
  return z;
}

torch::Tensor sample_ddim(const GuidedDenoiser& denoiser, torch::Tensor z_T, const NoiseSchedule& schedule,
                          const SamplerConfig& config, torch::Generator& generator) {
  config.validate();
  const auto ts = ddim_timesteps(schedule.steps(), config.steps);
  auto z = std::move(z_T);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int64_t t = ts[k];
    const int64_t t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
    auto [uncond, cond] = denoiser(z, t);
    auto z0_hat = cfg_combine(uncond, cond, config.cfg_scale);
    auto step = ddim_step(z0_hat, z, t, t_prev, config.eta, schedule);
    z = step.mean;
    if (step.sigma > 0.0) z = z + step.sigma * torch::randn(z.sizes(), generator, z.options());
  }
  return z;
}

std::pair<torch::Tensor, torch::Tensor> condition_dropout(const torch::Tensor& z_c, const torch::Tensor& uncond,
                                                          double p, Rng& rng) {
  if (p < 0.0 || p > 1.0) throw ShapeMismatch("condition_dropout: p must lie in [0, 1]");
  if (z_c.dim() != 3 || uncond.dim() != 1 || uncond.size(0) != z_c.size(2)) {
    throw ShapeMismatch("condition_dropout: expects z_c [B, N, d] and uncond [d]");
  }
  const int64_t b = z_c.size(0);
  std::vector<double> keep(static_cast<std::size_t>(b));
  for (auto& k : keep) k = rng.bernoulli(p) ? 0.0 : 1.0;
  auto keep_t = torch::tensor(keep, torch::kFloat64);
  auto out = torch::where((keep_t > 0.5).reshape({b, 1, 1}), z_c, uncond.to(z_c.scalar_type()).expand(z_c.sizes()));
  return {out, keep_t.to(z_c.scalar_type())};
}

torch::Generator make_generator(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

}  // namespace unihand::diffusion
