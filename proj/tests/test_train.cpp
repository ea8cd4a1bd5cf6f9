#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "mpdt/train.hpp"

using namespace mpdt;
namespace fs = std::filesystem;

namespace {

std::vector<TaskDataset> reach_datasets(std::size_t n_tasks, std::size_t n_traj) {
  auto split = make_split(Problem::point_reach, 12, 4, 1);
  std::vector<TaskDataset> out;
  for (std::size_t i = 0; i < n_tasks; ++i) {
    TaskSpec t = split.train[i];
    t.target_return = -10.0;
    out.push_back(generate_dataset(t, Quality::expert, n_traj, 2, 50 + i));
  }
  return out;
}

TrainConfig tiny_config(PromptVariant v) {
  TrainConfig c;
  c.variant = v;
  c.model.context_len = 4;
  c.model.n_layers = 1;
  c.model.embed_dim = 16;
  c.model.n_heads = 2;
  c.batch_per_task = 3;
  c.grad_steps_per_iter = 2;
  c.max_iters = 5;
  c.eval_every = 0;
  c.optim.base_lr = 1e-3;
  c.optim.warmup_steps = 10;
  return c;
}

const InputLayout kReach = InputLayout::for_problem(Problem::point_reach);

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_THROWS_AS(tiny_config({PromptTag::task, 3, 1, 2}).validate(), ConfigError);
  CHECK_THROWS_AS(tiny_config({PromptTag::pure_learned, 0, 1, 2}).validate(), ConfigError);
  TrainConfig c = tiny_config({PromptTag::task, 0, 1, 2});
  c.batch_per_task = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config({PromptTag::task, 0, 1, 2});
  c.grad_steps_per_iter = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("train_step") {
  auto ds = reach_datasets(3, 4);
  for (PromptTag tag : all_prompt_tags()) {
    CAPTURE(prompt_tag_name(tag));
    PromptVariant v{tag, tag == PromptTag::task_learned || tag == PromptTag::pure_learned ? 2u : 0u, 1, 2};
    TrainConfig cfg = tiny_config(v);
    const ModelConfig mc = resolve_model_config(cfg, kReach);
    ParamStore<float> params = init_run_parameters(cfg, mc);
    DecisionTransformer<float> model(mc, params);
    const InputNormalizer norm = InputNormalizer::pooled(ds, 10.0);
    AdamState<float> opt(cfg.optim);
    Rng rng(3);

    auto batch = sample_batch(model, params, v, ds, norm, 3, rng);
    REQUIRE(batch.segments.size() == 9);
    for (std::size_t task = 0; task < 3; ++task) {
      CHECK(std::count(batch.task_index.begin(), batch.task_index.end(), task) == 3);
    }

    const auto before = params.checksum();
    const StepStats st = train_step(ds, model, params, v, opt, norm, 3, rng);
    CHECK(std::isfinite(st.loss));
    CHECK(st.loss >= 0.0);
    CHECK(st.batch_size == 9);
    CHECK(params.checksum() != before);
    if (v.uses_learned()) CHECK(st.prompt_grad_norm > 0.0);
    else CHECK(st.prompt_grad_norm == 0.0);
  }
  TrainConfig cfg = tiny_config({PromptTag::none, 0, 1, 2});
  const ModelConfig mc = resolve_model_config(cfg, kReach);
  ParamStore<float> params = init_run_parameters(cfg, mc);
  DecisionTransformer<float> model(mc, params);
  Rng rng(1);
  CHECK_THROWS_AS(sample_batch(model, params, cfg.variant, std::span<const TaskDataset>(),
                               InputNormalizer{}, 1, rng),
                  ContractError);
}

TEST_CASE("padded targets do not affect loss or gradients") {
  auto ds = reach_datasets(2, 3);
  PromptVariant v{PromptTag::task_learned, 2, 1, 2};
  TrainConfig cfg = tiny_config(v);
  const ModelConfig mc = resolve_model_config(cfg, kReach);
  ParamStore<double> params = init_run_parameters(cfg, mc).cast<double>();
  DecisionTransformer<double> model(mc, params);
  const InputNormalizer norm = InputNormalizer::pooled(ds, 10.0);
  Rng rng(4);
  auto batch = sample_batch(model, params, v, ds, norm, 4, rng);
  // Force at least one padded step.
  batch.segments[0] = make_segment(ds[0].trajectories[0], 1, 4, norm);

  auto run = [&](const std::vector<Segment>& targets) {
    params.zero_grad();
    // Prompt tensors belong to one graph; rebuild them for every pass.
    std::vector<AssembledPrompt<double>> prompts;
    for (std::size_t i : batch.task_index) {
      Rng unused(0);
      prompts.push_back(assemble(v, model, params, ds[i].spec, {}, unused, norm));
    }
    const auto pred = model.forward(model.embed(batch.segments, prompts), false, nullptr);
    const auto loss = bc_loss(pred, target_actions<double>(targets), stacked_loss_mask(targets));
    const double value = loss.item();
    backward(loss, params);
    std::vector<double> grads;
    for (const auto& [_, t] : params.entries()) grads.insert(grads.end(), t.grad().begin(), t.grad().end());
    return std::make_pair(value, grads);
  };
  const auto a = run(batch.segments);
  const auto repeat = run(batch.segments);
  CHECK(a.second == repeat.second);
  std::vector<Segment> noisy = batch.segments;
  std::size_t changed = 0;
  for (Segment& s : noisy) {
    for (std::size_t k = 0; k < s.context_len; ++k) {
      if (s.loss_mask[k]) continue;
      for (std::size_t i = 0; i < s.action_dim; ++i) s.actions[k * s.action_dim + i] = 123.0 + i;
      ++changed;
    }
  }
  REQUIRE(changed > 0);
  const auto b = run(noisy);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("memorizes a single trajectory") {
  auto ds = reach_datasets(1, 1);
  TrainConfig cfg;
  cfg.variant = {PromptTag::task, 0, 1, 2};
  cfg.model.context_len = 20;
  cfg.model.n_layers = 2;
  cfg.model.embed_dim = 32;
  cfg.model.dropout = 0.0;
  cfg.batch_per_task = 16;
  cfg.grad_steps_per_iter = 1;
  cfg.max_iters = 500;
  cfg.eval_every = 0;
  cfg.optim.base_lr = 1e-3;
  cfg.optim.warmup_steps = 50;
  auto result = train_run(cfg, ds, kReach, {}, {});
  CHECK(result.metrics.back().value < 1e-3);
}

TEST_CASE("train_run: determinism and artifacts") {
  auto ds = reach_datasets(2, 3);
  const fs::path root = fs::temp_directory_path() / "mpdt_test_train";
  fs::remove_all(root);
  TrainConfig cfg = tiny_config({PromptTag::task_learned, 2, 1, 2});
  cfg.eval_every = 2;
  std::size_t hook_calls = 0;
  EvalHook hook = [&](std::size_t it, const ParamStore<float>&, const InputNormalizer&) {
    ++hook_calls;
    return std::vector<MetricRow>{{it, "eval", "task_learned", "seen", "0", "normalized_score", 1.5}};
  };
  auto a = train_run(cfg, ds, kReach, hook, root / "a");
  CHECK(hook_calls == 3);  // after iterations 1, 3 and the final one
  auto b = train_run(cfg, ds, kReach, hook, root / "b");
  CHECK(slurp(root / "a" / "metrics.csv") == slurp(root / "b" / "metrics.csv"));
  CHECK(slurp(root / "a" / "model.bin") == slurp(root / "b" / "model.bin"));
  CHECK(a.params.checksum() == b.params.checksum());
  const std::string csv = slurp(root / "a" / "metrics.csv");
  CHECK(csv.rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
  CHECK(csv.find("\n0,train,task_learned,train,all,loss,") != std::string::npos);
  CHECK(fs::exists(root / "a" / "model.json"));
  auto norm = read_normalizer(root / "a" / "normalizer.json");
  CHECK(norm.state_mean == a.normalizer.state_mean);
  CHECK(norm.rtg_scale == 10.0);

  TrainConfig other = cfg;
  other.seed = 2;
  auto c = train_run(other, ds, kReach, {}, {});
  CHECK(c.params.checksum() != a.params.checksum());
  fs::remove_all(root);
}

TEST_CASE("train_run errors") {
  auto ds = reach_datasets(2, 3);
  SUBCASE("trajectory variant without prompt pool") {
    auto bare = ds;
    bare[1].prompt_pool.clear();
    CHECK_THROWS_AS(train_run(tiny_config({PromptTag::trajectory, 0, 1, 2}), bare, kReach, {}, {}),
                    ConfigError);
  }
  SUBCASE("non-finite loss names the iteration") {
    auto bad = ds;
    for (auto& t : bad[0].trajectories) {
      for (auto& a : t.actions) a[0] = std::numeric_limits<double>::quiet_NaN();
    }
    try {
      train_run(tiny_config({PromptTag::task, 0, 1, 2}), bad, kReach, {}, {});
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("iteration 0") != std::string::npos);
    }
  }
  SUBCASE("layout mismatch") {
    CHECK_THROWS_AS(train_run(tiny_config({PromptTag::task, 0, 1, 2}), ds,
                              InputLayout::for_problem(Problem::grid_maze), {}, {}),
                    ConfigError);
  }
}

TEST_CASE("task and task_learned(n=0) train identically") {
  auto ds = reach_datasets(2, 3);
  auto a = train_run(tiny_config({PromptTag::task, 0, 1, 2}), ds, kReach, {}, {});
  auto b = train_run(tiny_config({PromptTag::task_learned, 0, 1, 2}), ds, kReach, {}, {});
  CHECK(a.params.checksum() == b.params.checksum());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) CHECK(a.metrics[i].value == b.metrics[i].value);
}

TEST_CASE("mixed layout pads every problem") {
  const InputLayout all = InputLayout::all_problems();
  CHECK(all.state_dim == 4);
  CHECK(all.action_dim == 2);
  CHECK(all.param_dim == 6);
  auto vel = make_task(Problem::point_velocity, 3, {0.4});
  CHECK(all.task_param(vel) == std::vector<double>{0.4, 0, 1, 0, 0, 0});
  auto ds = generate_dataset(vel, Quality::expert, 2, 1, 1);
  auto padded = pad_dataset(ds, all);
  CHECK(padded.trajectories[0].states[5].size() == 4);
  CHECK(padded.trajectories[0].actions[5].size() == 2);
  CHECK(padded.prompt_pool[0].states[0].size() == 4);
  CHECK(padded.spec.c.size() == 6);
}
