#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "maskprune/objective.hpp"

namespace mp = maskprune;

namespace {

mp::ModelConfig toy() {
  mp::ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.head_dim = 4;
  c.hidden = 8;
  c.ffn = 6;
  c.vocab = 12;
  c.seq_len = 6;
  return c;
}

std::vector<mp::Tensor> random_hiddens(std::size_t layers, std::mt19937_64& rng) {
  std::vector<mp::Tensor> out;
  for (std::size_t l = 0; l < layers; ++l) out.push_back(mp::Tensor::randn(3, 5, 1.0, rng));
  return out;
}

}  // namespace

TEST(KlLoss, IdenticalIsZero) {
  std::mt19937_64 rng(1);
  const mp::Tensor a = mp::Tensor::randn(4, 7, 2.0, rng);
  EXPECT_NEAR(mp::kl_loss(a, a), 0.0, 1e-15);
}

TEST(KlLoss, HandValue) {
  // logits giving p_s = [0.5, 0.5] and p_t = [0.25, 0.75]
  const mp::Tensor s = mp::Tensor::matrix({{0.0, 0.0}});
  const mp::Tensor t = mp::Tensor::matrix({{std::log(0.25), std::log(0.75)}});
  const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  EXPECT_NEAR(expected, 0.14384, 1e-5);
  EXPECT_NEAR(mp::kl_loss(s, t), expected, 1e-14);
}

TEST(KlLoss, DirectionIsStudentRelativeToTeacher) {
  const mp::Tensor s = mp::Tensor::matrix({{0.0, 0.0}});
  const mp::Tensor t = mp::Tensor::matrix({{std::log(0.25), std::log(0.75)}});
  const double reverse = 0.25 * std::log(0.5) + 0.75 * std::log(1.5);
  EXPECT_GT(std::abs(mp::kl_loss(s, t) - reverse), 1e-3);
  EXPECT_NEAR(mp::kl_loss(t, s), reverse, 1e-14);
}

TEST(KlLoss, NonNegativeOnRandomPairs) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    const mp::Tensor a = mp::Tensor::randn(2, 5, 3.0, rng);
    const mp::Tensor b = mp::Tensor::randn(2, 5, 3.0, rng);
    EXPECT_GE(mp::kl_loss(a, b), -1e-15);
  }
}

TEST(KlLoss, ShapeMismatch) {
  EXPECT_THROW(mp::kl_loss(mp::Tensor::zeros(2, 3), mp::Tensor::zeros(3, 2)), mp::ShapeError);
}

TEST(LayerLoss, ZeroOffsetAndBruteForce) {
  std::mt19937_64 rng(3);
  const auto t = random_hiddens(3, rng);
  EXPECT_EQ(mp::layer_loss(t, t), 0.0);
  auto s = t;
  for (auto& h : s)
    for (double& v : h.data()) v += 1.0;
  EXPECT_NEAR(mp::layer_loss(s, t), 3.0, 1e-12);

  const auto r = random_hiddens(3, rng);
  double brute = 0.0;
  for (std::size_t l = 0; l < 3; ++l) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) acc += std::pow(r[l](i, j) - t[l](i, j), 2);
    brute += acc / 15.0;
  }
  EXPECT_NEAR(mp::layer_loss(r, t), brute, 1e-12);
}

TEST(LayerLoss, LayerCountMismatch) {
  std::mt19937_64 rng(4);
  const auto a = random_hiddens(2, rng);
  const auto b = random_hiddens(3, rng);
  EXPECT_THROW(mp::layer_loss(a, b), mp::ShapeError);
}

TEST(DistillLoss, Composition) {
  std::mt19937_64 rng(5);
  mp::LmOutput s{mp::Tensor::randn(3, 6, 1.0, rng), random_hiddens(2, rng)};
  mp::LmOutput t{mp::Tensor::randn(3, 6, 1.0, rng), random_hiddens(2, rng)};
  mp::DistillConfig c;
  c.alpha = 0.0;
  EXPECT_EQ(mp::distill_loss(s, t, c).total, mp::kl_loss(s.logits, t.logits));
  c.alpha = 2.0;
  const double expected =
      mp::kl_loss(s.logits, t.logits) + 2.0 * mp::layer_loss(s.hiddens, t.hiddens);
  EXPECT_NEAR(mp::distill_loss(s, t, c).total, expected, 1e-12);
  EXPECT_NEAR(mp::distill_loss(t, t, c).total, 0.0, 1e-15);
  c.alpha = -1.0;
  EXPECT_THROW(mp::distill_loss(s, t, c), mp::ConfigError);
}

TEST(DistillLoss, LmTermIsMeanNll) {
  const mp::LmOutput s{mp::Tensor::matrix({{0.0, 0.0}, {std::log(3.0), 0.0}}), {}};
  const mp::LmOutput t = s;
  mp::DistillConfig c;
  c.include_lm_loss = true;
  c.lm_loss_weight = 0.5;
  const std::vector<int> targets = {1, 0};
  const mp::LossTerms terms = mp::distill_loss(s, t, c, targets);
  const double nll = (std::log(2.0) + std::log(4.0 / 3.0)) / 2.0;
  EXPECT_NEAR(terms.lm, nll, 1e-14);
  EXPECT_NEAR(terms.total, 0.5 * nll, 1e-14);
  EXPECT_THROW(mp::distill_loss(s, t, c, std::vector<int>{1}), mp::ShapeError);
}

class DistillGraphTest : public ::testing::Test {
 protected:
  mp::ModelConfig cfg = toy();
  mp::ModelParams params = mp::ModelParams::init(cfg, 7);
  std::vector<int> tokens = {1, 4, 9, 2, 11, 3};
  std::vector<int> targets = {4, 9, 2, 11, 3, 0};
  mp::LmOutput teacher = mp::forward_lm(params, nullptr, nullptr, tokens);

  mp::MaskSet random_masks(unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.2, 1.0);
    mp::MaskSet m = mp::MaskSet::ones(cfg);
    for (auto* g : {&m.head, &m.inter})
      for (auto& t : *g)
        for (double& v : t.data()) v = u(rng);
    return m;
  }
};

TEST_F(DistillGraphTest, GraphMatchesEagerLoss) {
  mp::DistillConfig dc;
  dc.alpha = 0.3;
  dc.include_lm_loss = true;
  const mp::MaskSet m = random_masks(1);
  mp::LoraSet lora = mp::LoraSet::init(params, 2, 0.1, 3);
  mp::DistillEvaluator ev(dc, mp::BuildOptions{});
  const mp::LossAndGrads r = ev.evaluate(params, &m, &lora, teacher, tokens, targets);
  const mp::LmOutput s = mp::forward_lm(params, &m, &lora, tokens);
  const mp::LossTerms e = mp::distill_loss(s, teacher, dc, targets);
  EXPECT_NEAR(r.terms.kl, e.kl, 1e-12);
  EXPECT_NEAR(r.terms.layer, e.layer, 1e-12);
  EXPECT_NEAR(r.terms.lm, e.lm, 1e-12);
  EXPECT_NEAR(r.terms.total, e.total, 1e-12);
}

TEST_F(DistillGraphTest, MaskGradientsMatchFiniteDifferences) {
  mp::DistillConfig dc;
  dc.alpha = 0.5;
  const mp::MaskSet m = random_masks(2);
  mp::DistillEvaluator ev(dc, mp::BuildOptions{.lora = false});
  const mp::LossAndGrads r = ev.evaluate(params, &m, nullptr, teacher, tokens);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    for (bool head : {true, false}) {
      const std::string key = head ? mp::mask_head_key(l) : mp::mask_inter_key(l);
      auto f = [&](const mp::Tensor& v) {
        mp::MaskSet mm = m;
        (head ? mm.head[l] : mm.inter[l]) = v;
        return mp::distill_loss(mp::forward_lm(params, &mm, nullptr, tokens), teacher, dc).total;
      };
      const mp::Tensor fd = mp::ad::finite_diff(f, head ? m.head[l] : m.inter[l], 1e-5);
      EXPECT_LT(mp::ad::relative_error(r.grads.at(key), fd), 1e-4) << key;
    }
  }
}

TEST_F(DistillGraphTest, LoraGradientsMatchFiniteDifferences) {
  mp::DistillConfig dc;
  const mp::MaskSet m = random_masks(3);
  mp::LoraSet lora = mp::LoraSet::init(params, 2, 0.3, 4);
  // Move B off zero so the A gradient is non-trivial.
  std::mt19937_64 rng(5);
  for (auto& layer : lora.layers)
    for (auto& pair : layer) pair.b = mp::Tensor::randn(pair.b.rows(), pair.b.cols(), 0.1, rng);
  mp::DistillEvaluator ev(dc, mp::BuildOptions{});
  const mp::LossAndGrads r = ev.evaluate(params, &m, &lora, teacher, tokens);
  for (mp::Proj p : {mp::Proj::V, mp::Proj::Down}) {
    for (const char* which : {"A", "B"}) {
      mp::LoraPair& pair = lora.layers[1][static_cast<std::size_t>(p)];
      mp::Tensor& target = which[0] == 'A' ? pair.a : pair.b;
      const mp::Tensor base = target;
      auto f = [&](const mp::Tensor& v) {
        target = v;
        const double loss =
            mp::distill_loss(mp::forward_lm(params, &m, &lora, tokens), teacher, dc).total;
        target = base;
        return loss;
      };
      const mp::Tensor fd = mp::ad::finite_diff(f, base, 1e-5);
      const std::string key = mp::lora_key(1, p, which);
      EXPECT_LT(mp::ad::relative_error(r.grads.at(key), fd), 1e-4) << key;
    }
  }
}

TEST_F(DistillGraphTest, TeacherConfigurationGivesZeroLossAndFiniteGrad) {
  const mp::MaskSet ones = mp::MaskSet::ones(cfg);
  const mp::LoraSet lora = mp::LoraSet::init(params, 2, 0.1, 1);
  mp::DistillEvaluator ev(mp::DistillConfig{}, mp::BuildOptions{});
  const mp::LossAndGrads r = ev.evaluate(params, &ones, &lora, teacher, tokens);
  EXPECT_NEAR(r.terms.total, 0.0, 1e-15);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    EXPECT_TRUE(r.grads.at(mp::mask_head_key(l)).all_finite());
    EXPECT_TRUE(r.grads.at(mp::mask_inter_key(l)).all_finite());
  }
}

TEST_F(DistillGraphTest, MissingInputsAreRejected) {
  mp::DistillEvaluator ev(mp::DistillConfig{}, mp::BuildOptions{});
  EXPECT_THROW(ev.evaluate(params, nullptr, nullptr, teacher, tokens), mp::GraphError);
  mp::LmOutput bad = teacher;
  bad.hiddens.pop_back();
  const mp::MaskSet ones = mp::MaskSet::ones(cfg);
  const mp::LoraSet lora = mp::LoraSet::init(params, 2, 0.1, 1);
  EXPECT_THROW(ev.evaluate(params, &ones, &lora, bad, tokens), mp::ShapeError);
}
