#include "doctest.h"
#include "mpdt/prompts.hpp"

using namespace mpdt;

namespace {

ModelConfig config_for(const PromptVariant& v, std::size_t d_c) {
  ModelConfig c;
  c.context_len = 4;
  c.n_layers = 1;
  c.embed_dim = 8;
  c.state_dim = 2;
  c.action_dim = 2;
  c.param_dim = v.uses_task_param() ? d_c : 0;
  c.prompt_capacity = v.prompt_length();
  return c;
}

const InputNormalizer kIdentity{{0, 0}, {1, 1}, 1.0};

std::vector<Trajectory> reach_pool(std::size_t n, std::uint64_t seed) {
  auto spec = make_task(Problem::point_reach, 0, {0.5, 0.5});
  std::vector<Trajectory> pool;
  for (std::size_t i = 0; i < n; ++i) pool.push_back(rollout(spec, tier_policy(spec, Quality::expert), seed + i));
  return pool;
}

}  // namespace

TEST_CASE("prompt length formula") {
  for (std::size_t n : {0u, 1u, 3u, 15u, 30u}) {
    CHECK(PromptVariant{PromptTag::task_learned, n, 1, 2}.prompt_length() == 3 * (n + 1));
    CHECK(PromptVariant{PromptTag::task, 0, 1, 2}.prompt_length() == 3);
    if (n > 0) CHECK(PromptVariant{PromptTag::pure_learned, n, 1, 2}.prompt_length() == 3 * n);
    CHECK(PromptVariant{PromptTag::none, 0, 1, 2}.prompt_length() == 0);
  }
  CHECK(PromptVariant{PromptTag::trajectory, 0, 1, 2}.prompt_length() == 6);
  CHECK(PromptVariant{PromptTag::trajectory, 0, 1, 5}.prompt_length() == 15);
  CHECK(PromptVariant{PromptTag::trajectory, 0, 2, 5}.prompt_length() == 30);
  CHECK_THROWS_AS(PromptVariant({PromptTag::pure_learned, 0, 1, 2}).validate(), ConfigError);
  CHECK(parse_prompt_tag("pure_learned") == PromptTag::pure_learned);
  CHECK_THROWS_AS(parse_prompt_tag("prompt"), ConfigError);
}

TEST_CASE("init_learned_prompt") {
  ParamStore<float> a, b, empty;
  init_learned_prompt(15, 128, 4, a);
  init_learned_prompt(15, 128, 4, b);
  CHECK(a.size() == 3);
  CHECK(a.total_elements() == 5760);
  CHECK(a.checksum() == b.checksum());
  init_learned_prompt(0, 128, 4, empty);
  CHECK(empty.size() == 0);
  CHECK(learned_blocks(empty).empty());

  ParamStore<double> big;
  init_learned_prompt(200, 100, 1, big);
  double sum = 0, sq = 0;
  for (const auto& [_, t] : big.entries()) {
    for (double v : t.values()) {
      sum += v;
      sq += v * v;
    }
  }
  const double n = 3 * 200 * 100;
  CHECK(std::abs(sum / n) < 1e-3);
  CHECK(std::sqrt(sq / n) == doctest::Approx(0.02).epsilon(0.02));
}

TEST_CASE("task prompt") {
  PromptVariant v{PromptTag::task, 0, 1, 2};
  ModelConfig cfg = config_for(v, 1);
  ParamStore<float> p;
  init_model_parameters(cfg, p, 2);
  DecisionTransformer<float> m(cfg, p);
  const std::vector<double> c{0.08};
  auto tok = make_task_prompt(m, c);
  REQUIRE(tok.shape() == Shape{3, 8});
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(tok.values()[j] == tok.values()[8 + j]);
    CHECK(tok.values()[j] == tok.values()[16 + j]);
  }
  auto w = p.get("embed_param.weight");
  std::fill(w.values_mut().begin(), w.values_mut().end(), 0.0f);
  auto bias = p.get("embed_param.bias");
  for (std::size_t j = 0; j < 8; ++j) bias.values_mut()[j] = static_cast<float>(j);
  auto flat = make_task_prompt(m, c);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 8; ++j) CHECK(flat.values()[r * 8 + j] == static_cast<float>(j));
  }
  const std::vector<double> wrong{1.0, 1.0};
  CHECK_THROWS_AS(make_task_prompt(m, wrong), ContractError);
}

TEST_CASE("trajectory prompt") {
  PromptVariant v{PromptTag::trajectory, 0, 1, 2};
  ModelConfig cfg = config_for(v, 2);
  ParamStore<float> p;
  init_model_parameters(cfg, p, 2);
  DecisionTransformer<float> m(cfg, p);
  auto pool = reach_pool(3, 10);
  Rng rng(1);
  CHECK(sample_trajectory_prompt(m, pool, 1, 2, rng, kIdentity).shape() == Shape{6, 8});
  CHECK(sample_trajectory_prompt(m, pool, 1, 5, rng, kIdentity).shape() == Shape{15, 8});

  std::vector<Trajectory> one(pool.begin(), pool.begin() + 1);
  Rng r1(3), r2(99);
  auto x = sample_trajectory_prompt(m, one, 1, 2, r1, kIdentity);
  auto y = sample_trajectory_prompt(m, one, 1, 2, r2, kIdentity);
  CHECK(std::equal(x.values().begin(), x.values().end(), y.values().begin()));

  // Too-short episodes are skipped.
  Trajectory shorty = pool[1];
  shorty.states.resize(1);
  shorty.actions.resize(1);
  shorty.rewards.resize(1);
  shorty.rtg.resize(1);
  std::vector<Trajectory> mixed{shorty, pool[0]};
  for (int i = 0; i < 20; ++i) {
    auto z = sample_trajectory_prompt(m, mixed, 1, 2, rng, kIdentity);
    CHECK(std::equal(x.values().begin(), x.values().end(), z.values().begin()));
  }
  std::vector<Trajectory> none;
  CHECK_THROWS_AS(sample_trajectory_prompt(m, none, 1, 2, rng, kIdentity), ContractError);
}

TEST_CASE("assemble per variant") {
  const TaskSpec task = make_task(Problem::point_reach, 0, {0.3, 0.4});
  auto pool = reach_pool(2, 20);
  struct Case {
    PromptVariant v;
    std::size_t d_c;
    std::size_t length;
  };
  const std::vector<Case> cases{{{PromptTag::none, 0, 1, 2}, 2, 0},
                                {{PromptTag::task, 0, 1, 2}, 2, 3},
                                {{PromptTag::pure_learned, 15, 1, 2}, 2, 45},
                                {{PromptTag::task_learned, 3, 1, 2}, 3, 12},
                                {{PromptTag::trajectory, 0, 1, 2}, 2, 6}};
  for (const Case& c : cases) {
    CAPTURE(prompt_tag_name(c.v.tag));
    ModelConfig cfg = config_for(c.v, c.d_c);
    ParamStore<float> p;
    init_model_parameters(cfg, p, 2);
    init_learned_prompt(c.v.uses_learned() ? c.v.learned_len : 0, cfg.embed_dim, 3, p);
    DecisionTransformer<float> m(cfg, p);
    TaskSpec t = task;
    t.c.resize(c.d_c, 0.1);
    Rng rng(4);
    auto a = assemble(c.v, m, p, t, pool, rng, kIdentity);
    CHECK(a.length() == c.length);
    CHECK(a.length() == c.v.prompt_length());
    CHECK(a.c_tokens.defined() == c.v.uses_task_param());
    CHECK(a.traj_tokens.defined() == (c.v.tag == PromptTag::trajectory));
    CHECK(!a.z_blocks.empty() == c.v.uses_learned());
    if (c.v.uses_learned()) {
      // Blocks are the stored parameters themselves, not copies.
      CHECK(a.z_blocks[0].node() == p.get("prompt_z1").node());
    }
  }
  PromptVariant traj{PromptTag::trajectory, 0, 1, 2};
  ModelConfig cfg = config_for(traj, 2);
  ParamStore<float> p;
  init_model_parameters(cfg, p, 2);
  DecisionTransformer<float> m(cfg, p);
  Rng rng(0);
  CHECK_THROWS_AS(assemble(traj, m, p, task, {}, rng, kIdentity), ConfigError);
}
