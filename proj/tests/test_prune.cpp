#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "maskprune/prune.hpp"

namespace mp = maskprune;

namespace {

mp::ModelConfig toy() {
  mp::ModelConfig c;
  c.layers = 3;
  c.heads = 4;
  c.head_dim = 4;
  c.hidden = 16;
  c.ffn = 10;
  c.vocab = 20;
  c.seq_len = 10;
  return c;
}

class PruneTest : public ::testing::Test {
 protected:
  mp::ModelConfig cfg = toy();
  mp::ModelParams params = mp::ModelParams::init(cfg, 21);
  std::mt19937_64 rng{77};

  std::vector<std::vector<int>> sequences(std::size_t n) {
    std::uniform_int_distribution<int> tok(0, int(cfg.vocab) - 1);
    std::vector<std::vector<int>> out(n, std::vector<int>(cfg.seq_len));
    for (auto& s : out)
      for (int& t : s) t = tok(rng);
    return out;
  }

  mp::MaskSet random_masks() {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    mp::MaskSet m = mp::MaskSet::ones(cfg);
    for (auto* g : {&m.head, &m.inter})
      for (auto& t : *g)
        for (double& v : t.data()) v = u(rng);
    return m;
  }

  mp::LoraSet random_lora() {
    mp::LoraSet lora = mp::LoraSet::init(params, 2, 0.2, 8);
    for (auto& layer : lora.layers)
      for (auto& pair : layer) pair.b = mp::Tensor::randn(pair.b.rows(), pair.b.cols(), 0.2, rng);
    return lora;
  }

  double fused_gap(const mp::MaskSet& m, const mp::LoraSet* lora) {
    const mp::ModelParams fused = mp::fuse_masks(params, m, lora);
    double worst = 0.0;
    for (const auto& s : sequences(3)) {
      const mp::Tensor a = mp::forward_lm(params, &m, lora, s).logits;
      const mp::Tensor b = mp::forward_lm(fused, nullptr, nullptr, s).logits;
      worst = std::max(worst, mp::max_abs_diff(a, b));
    }
    return worst;
  }
};

}  // namespace

TEST_F(PruneTest, SelectExamples) {
  mp::MaskSet m = random_masks();
  const mp::PrunePlan none = mp::select_pruned(m, {0.0, 0.0, 0.0, 0.0});
  EXPECT_TRUE(none.empty());
  EXPECT_EQ(none.layers(), cfg.layers);

  m.head[1] = mp::Tensor::row({0.0, 0.8, 0.0, 0.9});
  const mp::PrunePlan p = mp::select_pruned(m, {1.4, 3.0, 0.0, 0.0});
  EXPECT_EQ(p.heads[1], (std::vector<std::size_t>{0, 2}));
  EXPECT_TRUE(p.uniform());
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    EXPECT_EQ(p.heads[l].size(), 2u);
    EXPECT_EQ(p.channels[l].size(), 3u);
  }
  EXPECT_THROW(mp::select_pruned(m, {5.0, 0.0, 0.0, 0.0}), mp::RangeError);
}

TEST_F(PruneTest, PlanCheck) {
  mp::PrunePlan p = mp::select_pruned(mp::MaskSet::ones(cfg), {1.0, 2.0, 0.0, 0.0});
  EXPECT_NO_THROW(p.check(cfg));
  mp::PrunePlan uneven = p;
  uneven.heads[2].push_back(3);
  EXPECT_FALSE(uneven.uniform());
  EXPECT_THROW(uneven.check(cfg), mp::RangeError);
  mp::PrunePlan bad = p;
  for (auto& h : bad.heads) h = {7};
  EXPECT_THROW(bad.check(cfg), mp::RangeError);
  mp::PrunePlan all = mp::select_pruned(mp::MaskSet::ones(cfg), {4.0, 0.0, 0.0, 0.0});
  EXPECT_THROW(all.check(cfg), mp::RangeError);
  EXPECT_THROW(mp::materialize(params, all), mp::RangeError);
}

TEST_F(PruneTest, FuseAllOnesIsIdentity) {
  const mp::ModelParams fused = mp::fuse_masks(params, mp::MaskSet::ones(cfg));
  params.for_each([&](const std::string& name, const mp::Tensor& t) {
    bool seen = false;
    fused.for_each([&](const std::string& n2, const mp::Tensor& t2) {
      if (n2 == name) {
        EXPECT_EQ(t, t2) << name;
        seen = true;
      }
    });
    EXPECT_TRUE(seen) << name;
  });
}

TEST_F(PruneTest, FuseOneHeadAtPointSeven) {
  mp::MaskSet m = mp::MaskSet::ones(cfg);
  m.head[1][2] = 0.7;
  EXPECT_LT(fused_gap(m, nullptr), 1e-10);
}

TEST_F(PruneTest, FuseZeroChannelZeroesItsColumns) {
  mp::MaskSet m = mp::MaskSet::ones(cfg);
  m.inter[0][4] = 0.0;
  const mp::ModelParams fused = mp::fuse_masks(params, m);
  for (std::size_t r = 0; r < cfg.hidden; ++r) {
    EXPECT_EQ(fused.layers[0].w_up(r, 4), 0.0);
    EXPECT_EQ(fused.layers[0].w_gate(r, 4), 0.0);
    EXPECT_EQ(fused.layers[0].w_up(r, 3), params.layers[0].w_up(r, 3));
  }
}

TEST_F(PruneTest, FusionIsExactForRandomMasksAndLora) {
  for (int trial = 0; trial < 4; ++trial) {
    mp::MaskSet m = random_masks();
    m.head[trial % 3][1] = 0.0;
    m.inter[(trial + 1) % 3][trial] = 0.0;
    const mp::LoraSet lora = random_lora();
    EXPECT_LT(fused_gap(m, trial % 2 ? &lora : nullptr), 1e-10);
  }
}

TEST_F(PruneTest, MergeLoraMatchesAdaptedForward) {
  const mp::LoraSet lora = random_lora();
  const mp::ModelParams merged = mp::merge_lora(params, lora);
  const auto s = sequences(1).front();
  EXPECT_LT(mp::max_abs_diff(mp::forward_lm(params, nullptr, &lora, s).logits,
                             mp::forward_lm(merged, nullptr, nullptr, s).logits),
            1e-10);
}

TEST_F(PruneTest, MaterializeEmptyPlanIsIdentity) {
  const mp::PrunePlan p = mp::select_pruned(mp::MaskSet::ones(cfg), {0.0, 0.0, 0.0, 0.0});
  const mp::ModelParams small = mp::materialize(params, p);
  EXPECT_EQ(small.config, cfg);
  EXPECT_EQ(small.count(), params.count());
  const auto s = sequences(1).front();
  EXPECT_EQ(mp::forward_lm(small, nullptr, nullptr, s).logits,
            mp::forward_lm(params, nullptr, nullptr, s).logits);
}

TEST_F(PruneTest, ExcisionIsExactAndUniform) {
  for (int trial = 0; trial < 4; ++trial) {
    mp::MaskSet m = random_masks();
    const mp::SparsityState s{double(trial % 3) + 0.3, double(trial * 2) + 0.5, 0.0, 0.0};
    const mp::PrunePlan plan = mp::select_pruned(m, s);
    const mp::LoraSet lora = random_lora();
    const mp::MaskSet zeroed = mp::hard_zero(m, plan);
    EXPECT_EQ(mp::stray_zero_units(zeroed, plan), 0u);
    const mp::ModelParams small = mp::materialize(mp::fuse_masks(params, zeroed, &lora), plan);
    EXPECT_EQ(small.config.heads, cfg.heads - plan.heads_removed());
    EXPECT_EQ(small.config.ffn, cfg.ffn - plan.channels_removed());
    const auto [hv, wv] = mp::structure_variance(small);
    EXPECT_EQ(hv, 0.0);
    EXPECT_EQ(wv, 0.0);
    EXPECT_LT(mp::verify_equivalence(params, m, &lora, plan, small, sequences(3)), 1e-8);
  }
}

TEST_F(PruneTest, SmallModelCountMatchesResourceModel) {
  const double M = double(params.count());
  const auto rm = mp::ResourceModel::from(cfg, M, M / 2);
  for (std::size_t kh = 0; kh < cfg.heads; ++kh) {
    for (std::size_t kc : {0u, 1u, 5u, 9u}) {
      const mp::PrunePlan plan = mp::magnitude_plan(params, kh, kc);
      const mp::ModelParams small = mp::materialize(params, plan);
      EXPECT_EQ(double(small.count()), mp::resource(rm, double(kh), double(kc)));
    }
  }
}

TEST_F(PruneTest, WrongPlanFailsEquivalence) {
  mp::MaskSet m = random_masks();
  const mp::PrunePlan plan = mp::select_pruned(m, {1.0, 2.0, 0.0, 0.0});
  const mp::ModelParams small = mp::materialize(mp::fuse_masks(params, mp::hard_zero(m, plan)), plan);
  mp::PrunePlan wrong = plan;
  for (auto& h : wrong.heads) h = {(h.front() + 1) % cfg.heads};
  EXPECT_GT(mp::verify_equivalence(params, m, nullptr, wrong, small, sequences(2)), 1e-3);
  EXPECT_LT(mp::verify_equivalence(params, m, nullptr, plan, small, sequences(2)), 1e-8);
}

TEST_F(PruneTest, EquivalenceStructuralMismatch) {
  const mp::PrunePlan plan = mp::magnitude_plan(params, 1, 1);
  const mp::ModelParams small = mp::materialize(params, plan);
  const mp::PrunePlan other = mp::magnitude_plan(params, 2, 1);
  EXPECT_THROW(mp::verify_equivalence(params, mp::MaskSet::ones(cfg), nullptr, other, small,
                                      sequences(1)),
               mp::ShapeError);
}

TEST_F(PruneTest, StrayZerosAreCounted) {
  mp::MaskSet m = mp::MaskSet::ones(cfg);
  m.head[0][0] = 0.0;
  m.head[0][3] = 0.0;
  const mp::PrunePlan plan = mp::select_pruned(m, {1.0, 0.0, 0.0, 0.0});
  EXPECT_EQ(plan.heads[0], (std::vector<std::size_t>{0}));
  EXPECT_EQ(mp::stray_zero_units(m, plan), 1u);
}

TEST_F(PruneTest, MagnitudePlanPicksSmallestNorms) {
  mp::ModelParams p = params;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    for (std::size_t r = 0; r < cfg.hidden; ++r) {
      for (std::size_t c = 2 * cfg.head_dim; c < 3 * cfg.head_dim; ++c) {
        p.layers[l].wq(r, c) *= 1e-3;
        p.layers[l].wk(r, c) *= 1e-3;
        p.layers[l].wv(r, c) *= 1e-3;
        p.layers[l].wo(c, r) *= 1e-3;
      }
    }
  }
  const mp::PrunePlan plan = mp::magnitude_plan(p, 1, 0);
  for (const auto& h : plan.heads) EXPECT_EQ(h, (std::vector<std::size_t>{2}));
  EXPECT_THROW(mp::magnitude_plan(p, cfg.heads, 0), mp::RangeError);
}
