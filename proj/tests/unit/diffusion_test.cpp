#include <doctest.h>

#include "support.hpp"
#include "unihand/denoiser.hpp"
#include "unihand/diffusion.hpp"
#include "unihand/error.hpp"

using namespace unihand;
using namespace unihand::diffusion;

namespace {

DenoiserInputs random_inputs(int64_t b, int64_t n, bool with_hand) {
  DenoiserInputs in;
  for (std::size_t k = 0; k < 3; ++k) {
    in.structured[k] = ConditionInput{torch::randn({b, n, 64}), torch::ones({b, n})};
  }
  if (with_hand) in.hand_tokens = torch::randn({b, n, 64});
  return in;
}

Denoiser make_denoiser(uint64_t seed) {
  torch::manual_seed(seed);
  Denoiser d(DenoiserConfig::desk());
  d->eval();
  return d;
}

}  // namespace

TEST_SUITE("diffusion") {
  TEST_CASE("cosine schedule") {
    const auto s = cosine_schedule(50);
    CHECK(s.steps() == 50);
    double running = 1.0;
    for (int64_t t = 1; t <= 50; ++t) {
      CHECK(s.beta(t) > 0.0);
      CHECK(s.beta(t) <= 0.999);
      running *= 1.0 - s.beta(t);
      CHECK(std::abs(running - s.alpha_bar(t)) < 1e-9);
      CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
      // Closed form, away from the clipped tail.
      const auto f = [](double x) {
        const double c = std::cos((x / 50.0 + 0.008) / 1.008 * std::numbers::pi / 2);
        return c * c;
      };
      if (t < 50) CHECK(std::abs(s.alpha_bar(t) - f(static_cast<double>(t)) / f(0.0)) < 1e-9);
    }
    CHECK(s.alpha_bar(50) < 0.01);
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK_THROWS_AS(s.beta(0), StepOutOfRange);
    CHECK_THROWS_AS(cosine_schedule(0), StepOutOfRange);
  }

  TEST_CASE("forward diffusion limits and variance") {
    const auto s = cosine_schedule(50);
    const auto z0 = torch::randn({4, 8}, torch::kFloat64);
    const auto eps = torch::randn({4, 8}, torch::kFloat64);
    CHECK(torch::equal(forward_diffuse(z0, 0, eps, s), z0));

    NoiseSchedule all_noise;
    all_noise.betas = {1.0};
    all_noise.alphas = {0.0};
    all_noise.alpha_bars = {0.0};
    CHECK(torch::equal(forward_diffuse(z0, 1, eps, all_noise), eps));

    auto gen = make_generator(10);
    const auto draws = torch::randn({100000}, gen, torch::kFloat64);
    const auto zt = forward_diffuse(torch::zeros_like(draws), 20, draws, s);
    const double expected = 1.0 - s.alpha_bar(20);
    CHECK(std::abs(zt.var().item<double>() / expected - 1.0) < 0.02);
    CHECK_THROWS_AS(forward_diffuse(z0, 51, eps, s), StepOutOfRange);
  }

  TEST_CASE("posterior mean") {
    const auto s = cosine_schedule(50);
    torch::manual_seed(8);
    const auto z0 = torch::randn({3, 5}, torch::kFloat64);
    const auto zt = torch::randn({3, 5}, torch::kFloat64);
    CHECK(testing::max_abs(posterior_mean(z0, zt, 1, s) - z0) < 1e-9);
    CHECK(torch::equal(posterior_mean(torch::zeros_like(z0), torch::zeros_like(z0), 7, s), torch::zeros_like(z0)));

    // Product of Gaussians: q(z_{t-1}|z0) q(z_t|z_{t-1}) normalized in z_{t-1}.
    for (int64_t t = 2; t <= 50; t += 7) {
      const double ab_prev = s.alpha_bar(t - 1), a = s.alpha(t), b = s.beta(t);
      const double prec = 1.0 / (1.0 - ab_prev) + a / b;
      const auto oracle = (std::sqrt(ab_prev) / (1.0 - ab_prev) * z0 + std::sqrt(a) / b * zt) / prec;
      CHECK(testing::max_abs(posterior_mean(z0, zt, t, s) - oracle) < 1e-9);
      CHECK(std::abs(s.posterior_variance(t) - 1.0 / prec) < 1e-12);
    }
    CHECK_THROWS_AS(posterior_mean(z0, zt, 0, s), StepOutOfRange);
  }

  TEST_CASE("cfg combine") {
    const auto u = torch::randn({4, 6}, torch::kFloat64), c = torch::randn({4, 6}, torch::kFloat64);
    CHECK(testing::max_abs(cfg_combine(u, c, 1.0) - c) < 1e-12);
    CHECK(torch::equal(cfg_combine(u, c, 0.0), u));
    CHECK(torch::equal(cfg_combine(torch::zeros_like(c), c, 2.0), 2 * c));
  }

  TEST_CASE("condition dropout") {
    const auto z = torch::randn({6, 4, 8});
    const auto uncond = torch::randn({8});
    Rng rng(1);
    CHECK(torch::equal(condition_dropout(z, uncond, 0.0, rng).first, z));
    const auto all = condition_dropout(z, uncond, 1.0, rng).first;
    CHECK(torch::equal(all, uncond.expand({6, 4, 8})));

    Rng mc(99);
    const auto big = torch::zeros({10000, 1, 2});
    const auto keep = condition_dropout(big, torch::ones({2}), 0.1, mc).second;
    const double rate = 1.0 - keep.mean().item<double>();
    CHECK(std::abs(rate - 0.1) < 0.02);
    CHECK_THROWS_AS(condition_dropout(z, uncond, 1.5, rng), ShapeMismatch);
  }

  TEST_CASE("ddim timesteps") {
    const auto ts = ddim_timesteps(50, 10);
    CHECK(ts.size() == 10);
    CHECK(ts.front() == 50);
    for (std::size_t k = 1; k < ts.size(); ++k) CHECK(ts[k - 1] - ts[k] == 5);
    CHECK(ddim_timesteps(50, 50).back() == 1);
  }

  TEST_CASE("ddim with eta 1 over every step matches the ddpm posterior") {
    const auto s = cosine_schedule(50);
    const auto z0 = torch::randn({2, 5}, torch::kFloat64), zt = torch::randn({2, 5}, torch::kFloat64);
    for (int64_t t = 1; t <= 50; ++t) {
      const auto step = ddim_step(z0, zt, t, t - 1, 1.0, s);
      CHECK(testing::max_abs(step.mean - posterior_mean(z0, zt, t, s)) < 1e-9);
      CHECK(std::abs(step.sigma * step.sigma - s.posterior_variance(t)) < 1e-12);
    }
    CHECK(ddim_step(z0, zt, 1, 0, 1.0, s).sigma == 0.0);
  }

  TEST_CASE("samplers") {
    const auto s = cosine_schedule(50);
    const auto target = torch::randn({1, 3, 4}, torch::kFloat64);
    GuidedDenoiser oracle = [&](const torch::Tensor& z, int64_t) {
      return std::make_pair(torch::zeros_like(z), target.expand(z.sizes()).clone());
    };
    const auto start = torch::randn({1, 3, 4}, torch::kFloat64);
    SamplerConfig cfg;
    cfg.cfg_scale = 1.0;
    auto g1 = make_generator(1), g2 = make_generator(2);
    const auto a = sample_ddim(oracle, start, s, cfg, g1);
    const auto b = sample_ddim(oracle, start, s, cfg, g2);
    CHECK(torch::equal(a, b));
    CHECK(testing::max_abs(a - target) < 1e-9);

    // The last DDPM step is noise-free: a constant predictor lands on it exactly.
    auto g3 = make_generator(3);
    CHECK(testing::max_abs(sample_ddpm(oracle, start, s, 1.0, g3) - target) < 1e-9);
    auto g4 = make_generator(4), g5 = make_generator(4);
    const auto d1 = sample_ddpm(oracle, start, s, 2.0, g4);
    const auto d2 = sample_ddpm(oracle, start, s, 2.0, g5);
    CHECK(torch::equal(d1, d2));
  }

  TEST_CASE("denoiser shape") {
    auto d = make_denoiser(1);
    torch::NoGradGuard ng;
    const auto out = d->forward(torch::randn({2, 49, 64}), torch::tensor({3, 17}), random_inputs(2, 48, true));
    CHECK(out.sizes() == torch::IntArrayRef({2, 49, 64}));
    CHECK_THROWS_AS(d->forward(torch::randn({2, 49, 32}), torch::tensor({3, 17}), {}), ShapeMismatch);
  }

  TEST_CASE("masked conditions never reach the output") {
    auto d = make_denoiser(2);
    torch::NoGradGuard ng;
    const auto z = torch::randn({1, 9, 64});
    const auto t = torch::tensor({5});
    auto a = random_inputs(1, 8, true);
    auto b = random_inputs(1, 8, true);
    const auto ua = d->forward(z, t, a.unconditional());
    const auto ub = d->forward(z, t, b.unconditional());
    CHECK(torch::equal(ua, ub));
    // An absent stream is the same as a fully masked one.
    CHECK(torch::equal(ua, d->forward(z, t, DenoiserInputs{})));

    // Partial masks: poke only the masked frames.
    auto c = random_inputs(1, 8, true);
    c.vision_mask = torch::ones({1, 8});
    for (auto& s : c.structured) s->mask[0][3] = 0;
    c.vision_mask[0][3] = 0;
    const auto before = d->forward(z, t, c);
    for (auto& s : c.structured) s->latent[0][3].fill_(5.0);
    c.hand_tokens[0][3].fill_(-5.0);
    CHECK(torch::equal(before, d->forward(z, t, c)));
  }

  TEST_CASE("zero timestep weights remove the dependence on t") {
    auto d = make_denoiser(3);
    torch::NoGradGuard ng;
    for (auto p : d->timestep_parameters()) p.zero_();
    const auto z = torch::randn({1, 9, 64});
    const auto in = random_inputs(1, 8, false);
    CHECK(torch::equal(d->forward(z, torch::tensor({1}), in), d->forward(z, torch::tensor({40}), in)));
  }

  TEST_CASE("denoiser loss") {
    hand::KinematicModel kin;
    const auto z0 = torch::randn({2, 9, 64}, torch::kFloat64);
    const auto x = torch::randn({2, 8, hand::kPoseDim}, torch::kFloat64) * 0.3;
    CHECK(denoiser_loss(z0, z0, x, x, {}, kin).total.item<double>() == 0.0);
    const auto z0_hat = z0 + 0.1;
    const auto pure = denoiser_loss(z0, z0_hat, x, x + 0.5, DiffLossWeights{0.0}, kin);
    CHECK(pure.total.item<double>() == doctest::Approx(torch::mse_loss(z0_hat, z0).item<double>()));
    CHECK_THROWS_AS(denoiser_loss(z0, z0.narrow(1, 0, 3), x, x, {}, kin), ShapeMismatch);
  }

  TEST_CASE("gradient through a frozen decoder matches finite differences") {
    torch::manual_seed(11);
    vae::JointVae vae(vae::VaeConfig::desk());
    vae->to(torch::kFloat64);
    vae->eval();
    for (auto& p : vae->parameters()) p.set_requires_grad(false);
    hand::KinematicModel kin;
    const auto x = torch::randn({1, 8, hand::kPoseDim}, torch::kFloat64) * 0.2;
    const auto z0 = torch::randn({1, 9, 64}, torch::kFloat64);
    auto z0_hat = (z0 + 0.3 * torch::randn_like(z0)).requires_grad_(true);
    auto loss = [&] {
      const auto x_hat = vae->decode(z0_hat.narrow(1, 0, 8), z0_hat.select(1, 8), x.select(1, 0));
      return denoiser_loss(z0, z0_hat, x, x_hat, {}, kin).total;
    };
    loss().backward();
    const auto dir = torch::randn_like(z0_hat);
    const double analytic = (z0_hat.grad() * dir).sum().item<double>();
    const auto saved = z0_hat.detach().clone();
    torch::NoGradGuard ng;
    const double h = 1e-6;
    z0_hat.copy_(saved + h * dir);
    const double up = loss().item<double>();
    z0_hat.copy_(saved - h * dir);
    const double down = loss().item<double>();
    CHECK(std::abs((up - down) / (2 * h) - analytic) < 1e-4 * std::abs(analytic));
    for (const auto& p : vae->parameters()) CHECK_FALSE(p.grad().defined());
  }
}
