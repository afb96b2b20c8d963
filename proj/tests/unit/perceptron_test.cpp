#include <doctest.h>

#include "support.hpp"
#include "unihand/error.hpp"
#include "unihand/perceptron.hpp"
#include "unihand/rope.hpp"
#include "unihand/transformer.hpp"

using namespace unihand;
using namespace unihand::perceptron;

namespace {

torch::Tensor f64_randn(std::vector<int64_t> shape) { return torch::randn(shape, torch::kFloat64); }

double dot_sum(const torch::Tensor& a, const torch::Tensor& b) { return (a * b).sum().item<double>(); }

/// Explicit pairwise rotation, one token at a time.
torch::Tensor rotate_pairs(const torch::Tensor& x, double pos) {
  const int64_t d = x.size(-1);
  auto out = x.clone();
  for (int64_t i = 0; i < d / 2; ++i) {
    const double theta = pos * std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const auto a = x.select(-1, 2 * i), b = x.select(-1, 2 * i + 1);
    out.select(-1, 2 * i).copy_(a * std::cos(theta) - b * std::sin(theta));
    out.select(-1, 2 * i + 1).copy_(a * std::sin(theta) + b * std::cos(theta));
  }
  return out;
}

torch::Tensor layer_norm(const torch::Tensor& x, const torch::Tensor& gamma, const torch::Tensor& beta) {
  const auto mean = x.mean(-1, true);
  const auto var = (x - mean).pow(2).mean(-1, true);
  return (x - mean) / torch::sqrt(var + 1e-5) * gamma + beta;
}

std::map<std::string, torch::Tensor> params_of(torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : m.named_parameters()) out[p.key()] = p.value().detach();
  return out;
}

JointFlags all_flags(std::uint8_t v) {
  JointFlags f;
  f.fill(v);
  return f;
}

}  // namespace

TEST_SUITE("perceptron") {
  TEST_CASE("rope_1d basics") {
    torch::manual_seed(6);
    const auto x = f64_randn({5, 16});
    CHECK(torch::equal(rope_1d(x, torch::zeros({5}, torch::kFloat64)), x));
    const auto pos = torch::arange(5, torch::kFloat64) * 13.7;
    const auto r = rope_1d(x, pos);
    CHECK(torch::allclose(r.norm(2, -1), x.norm(2, -1), 0, 1e-9));
    for (int k = 0; k < 5; ++k) {
      CHECK(testing::max_abs(r[k] - rotate_pairs(x[k], pos[k].item<double>())) < 1e-12);
    }
    CHECK_THROWS_AS(rope_1d(f64_randn({2, 7}), torch::zeros({2})), OddDimension);
  }

  TEST_CASE("rope_1d relative shift (seed 6)") {
    Rng rng(6);
    torch::manual_seed(6);
    for (int i = 0; i < 100; ++i) {
      const auto q = f64_randn({1, 32}), k = f64_randn({1, 32});
      const double m = rng.uniform(-50, 50), n = rng.uniform(-50, 50);
      auto at = [](double v) { return torch::full({1}, v, torch::kFloat64); };
      const double base = dot_sum(rope_1d(q, at(m)), rope_1d(k, at(n)));
      const double shifted = dot_sum(rope_1d(q, at(m + 17)), rope_1d(k, at(n + 17)));
      CHECK(std::abs(base - shifted) < 1e-9);
    }
  }

  TEST_CASE("rope_3d") {
    torch::manual_seed(7);
    const RopeSplit split{8, 4, 4};
    const auto x = f64_randn({6, 16});
    CHECK(torch::equal(rope_3d(x, torch::zeros({6, 3}, torch::kFloat64), split), x));

    // h = w = 1: temporal rope only.
    const auto coords = grid_coords(6, 1, 1);
    const auto r = rope_3d(x, coords, split);
    CHECK(torch::allclose(r.narrow(-1, 0, 8), rope_1d(x.narrow(-1, 0, 8), torch::arange(6, torch::kFloat64)), 0,
                          1e-12));
    CHECK(torch::equal(r.narrow(-1, 8, 8), x.narrow(-1, 8, 8)));

    // Per-axis shifts.
    Rng rng(17);
    for (int axis = 0; axis < 3; ++axis) {
      for (int i = 0; i < 30; ++i) {
        const auto q = f64_randn({1, 16}), k = f64_randn({1, 16});
        auto cq = torch::zeros({1, 3}, torch::kFloat64), ck = torch::zeros({1, 3}, torch::kFloat64);
        for (int a = 0; a < 3; ++a) {
          cq[0][a] = rng.uniform(-10, 10);
          ck[0][a] = rng.uniform(-10, 10);
        }
        const double s = rng.uniform(-20, 20);
        const double base = dot_sum(rope_3d(q, cq, split), rope_3d(k, ck, split));
        cq[0][axis] += s;
        ck[0][axis] += s;
        CHECK(std::abs(base - dot_sum(rope_3d(q, cq, split), rope_3d(k, ck, split))) < 1e-9);
      }
    }
    CHECK_THROWS_AS(rope_3d(x, coords, RopeSplit{8, 4, 2}), SplitMismatch);
    CHECK_THROWS_AS(RopeSplit({6, 5, 5}).validate(16), SplitMismatch);
    const auto def = RopeSplit::for_head_dim(16);
    CHECK(def.temporal == 8);
    CHECK(def.height == 4);
    CHECK(def.width == 4);
  }

  TEST_CASE("attention rows sum to one and are linear in V") {
    torch::manual_seed(3);
    const auto q = f64_randn({2, 4, 5, 8}), k = f64_randn({2, 4, 9, 8}), v = f64_randn({2, 4, 9, 8});
    const auto w = nn::attention_weights(q, k);
    CHECK(testing::max_abs(w.sum(-1) - 1.0) < 1e-9);
    CHECK(testing::max_abs(nn::scaled_dot_attention(q, k, 2 * v) - 2 * nn::scaled_dot_attention(q, k, v)) < 1e-12);
  }

  TEST_CASE("hand perceptron shape") {
    torch::manual_seed(1);
    HandPerceptron p(PerceptronConfig{});
    p->eval();
    torch::NoGradGuard ng;
    const auto out = p->forward(torch::randn({1, 64}), torch::randn({1, 48, 4, 4, 64}));
    CHECK(out.sizes() == torch::IntArrayRef({1, 48, 64}));
    CHECK(testing::max_abs(p->last_attention().sum(-1) - 1.0) < 1e-5);
    CHECK_THROWS_AS(p->forward(torch::randn({1, 64}), torch::randn({1, 48, 4, 4, 32})), ShapeMismatch);
  }

  TEST_CASE("hand perceptron dense oracle, N=2, h=w=1") {
    torch::manual_seed(2);
    PerceptronConfig cfg;
    cfg.hidden = 32;
    cfg.heads = 2;
    cfg.anchor_dim = 8;
    cfg.feature_dim = 24;
    HandPerceptron p(cfg);
    p->to(torch::kFloat64);
    p->eval();
    torch::NoGradGuard ng;
    const auto anchor = f64_randn({1, 8});
    const auto grid = f64_randn({1, 2, 1, 1, 24});
    const auto out = p->forward(anchor, grid)[0];

    auto P = params_of(*p);
    const auto feats = grid.reshape({2, 24});
    const auto query_in = torch::cat({anchor.expand({2, 8}), P["hand_tokens"].narrow(0, 0, 2)}, -1);
    auto lin = [&](const std::string& n, const torch::Tensor& x) {
      return torch::matmul(x, P[n + ".weight"].t()) + P[n + ".bias"];
    };
    const auto Q = layer_norm(lin("w_q", query_in), P["norm_q.weight"], P["norm_q.bias"]);
    const auto K = layer_norm(lin("w_k", feats), P["norm_k.weight"], P["norm_k.bias"]);
    const auto V = layer_norm(lin("w_v", feats), P["norm_v.weight"], P["norm_v.bias"]);
    const int64_t hd = 16;
    std::vector<torch::Tensor> heads;
    for (int64_t h = 0; h < 2; ++h) {
      auto qh = Q.narrow(1, h * hd, hd).clone(), kh = K.narrow(1, h * hd, hd).clone();
      const auto vh = V.narrow(1, h * hd, hd);
      for (int64_t t = 0; t < 2; ++t) {
        // Temporal segment is the first half of the head; spatial coords are 0.
        qh[t].narrow(0, 0, 8).copy_(rotate_pairs(qh[t].narrow(0, 0, 8), static_cast<double>(t)));
        kh[t].narrow(0, 0, 8).copy_(rotate_pairs(kh[t].narrow(0, 0, 8), static_cast<double>(t)));
      }
      auto mixed = torch::zeros({2, hd}, torch::kFloat64);
      for (int64_t i = 0; i < 2; ++i) {
        const double s0 = dot_sum(qh[i], kh[0]) / 4.0, s1 = dot_sum(qh[i], kh[1]) / 4.0;
        const double m = std::max(s0, s1);
        const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
        mixed[i] = (e0 * vh[0] + e1 * vh[1]) / (e0 + e1);
      }
      heads.push_back(mixed);
    }
    const auto oracle = lin("out_proj", torch::cat(heads, 1));
    CHECK(testing::max_abs(out - oracle) < 1e-10);
  }

  TEST_CASE("without rope, spatial key order does not matter") {
    torch::manual_seed(4);
    PerceptronConfig cfg;
    cfg.use_rope = false;
    HandPerceptron p(cfg);
    p->to(torch::kFloat64);
    p->eval();
    torch::NoGradGuard ng;
    const auto anchor = f64_randn({1, 64});
    const auto grid = f64_randn({1, 3, 2, 3, 64});
    const auto perm = torch::randperm(6);
    const auto shuffled = grid.reshape({1, 3, 6, 64}).index_select(2, perm).reshape({1, 3, 2, 3, 64});
    CHECK(testing::max_abs(p->forward(anchor, grid) - p->forward(anchor, shuffled)) < 1e-9);
  }

  TEST_CASE("masked frames are ignored") {
    torch::manual_seed(5);
    HandPerceptron p(PerceptronConfig{});
    p->eval();
    torch::NoGradGuard ng;
    const auto anchor = torch::randn({1, 64});
    auto grid = torch::randn({1, 4, 2, 2, 64});
    auto mask = torch::ones({1, 4});
    mask[0][2] = 0;
    const auto a = p->forward(anchor, grid, mask);
    grid[0][2].fill_(9.0);
    CHECK(torch::equal(a, p->forward(anchor, grid, mask)));
  }

  TEST_CASE("synthetic feature provider") {
    SyntheticFeatureProvider provider;
    FrameMeta meta{42, {0, 1}};
    std::vector<Keypoints2D> kp(2, Keypoints2D::Constant(0.3));
    kp[0].row(4) << 0.5, 0.5;
    std::vector<JointFlags> none(2, all_flags(0));
    std::vector<JointFlags> some(2, all_flags(0));
    some[0][4] = 1;

    const auto blank = provider.features(meta, kp, none);
    const auto lit = provider.features(meta, kp, some);
    CHECK(blank.values == provider.features(meta, kp, none).values);
    for (int64_t h = 0; h < 8; ++h) {
      for (int64_t w = 0; w < 8; ++w) {
        for (int64_t c = 0; c < 21; ++c) CHECK(blank.at(0, h, w, c) == 0.0f);
        for (int64_t c = 21; c < 64; ++c) CHECK(blank.at(0, h, w, c) == lit.at(0, h, w, c));
      }
    }
    // Peak of the lit channel sits on the central cells.
    float best = -1;
    int64_t bh = -1, bw = -1;
    for (int64_t h = 0; h < 8; ++h) {
      for (int64_t w = 0; w < 8; ++w) {
        if (lit.at(0, h, w, 4) > best) {
          best = lit.at(0, h, w, 4);
          bh = h;
          bw = w;
        }
      }
    }
    CHECK((bh == 3 || bh == 4));
    CHECK((bw == 3 || bw == 4));
    // Distractors are keyed by frame id.
    CHECK(lit.at(0, 0, 0, 30) != lit.at(1, 0, 0, 30));
  }

  TEST_CASE("feature grid serialization") {
    FeatureGrid g(2, 3, 4, 5);
    for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = static_cast<float>(i) * 0.25f;
    const auto dir = testing::scratch_dir("grid");
    g.save(dir / "g.uhnd");
    const auto back = FeatureGrid::load(dir / "g.uhnd");
    CHECK(back.frames == 2);
    CHECK(back.channels == 5);
    CHECK(back.values == g.values);
    CHECK(g.padded(4).at(3, 2, 3, 4) == g.at(1, 2, 3, 4));
    CHECK(g.slice(1, 1).at(0, 0, 0, 0) == g.at(1, 0, 0, 0));
  }
}
