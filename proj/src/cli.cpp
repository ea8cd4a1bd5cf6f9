#include "mpdt/cli.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "mpdt/checkpoint.hpp"

namespace mpdt {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

int verbosity() {
  const char* v = std::getenv("MPDT_VERBOSITY");
  return v ? std::atoi(v) : 1;
}

template <typename... Args>
void log(int level, const char* fmt, Args... args) {
  if (verbosity() < level) return;
  std::fprintf(stderr, fmt, args...);
  std::fflush(stderr);
}

void reject_unknown(const json& obj, std::initializer_list<const char*> known,
                    const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected a JSON object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_key(const json& obj, const char* key, T& dst, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

std::string_view order_name(PromptOrder order) {
  return order == PromptOrder::interleaved ? "interleaved" : "grouped";
}

PromptOrder parse_order(const std::string& name) {
  if (name == "interleaved") return PromptOrder::interleaved;
  if (name == "grouped") return PromptOrder::grouped;
  throw ConfigError("unknown prompt order '" + name + "'");
}

bool is_mixed(const std::string& problem) { return problem == "all"; }

std::vector<Problem> problems_of(const std::string& problem) {
  if (is_mixed(problem)) return {all_problems().begin(), all_problems().end()};
  return {parse_problem(problem)};
}

int default_prompt_len(const std::string& problem) {
  if (is_mixed(problem)) return 30;
  const Problem p = parse_problem(problem);
  return p == Problem::point_velocity || p == Problem::point_direction ? 15 : 30;
}

std::size_t default_traj_seg_len(const std::string& problem) {
  if (is_mixed(problem)) return 2;
  const Problem p = parse_problem(problem);
  return p == Problem::point_velocity || p == Problem::point_direction ? 5 : 2;
}

std::pair<int, int> default_split_sizes(Problem p) {
  return p == Problem::grid_maze ? std::pair{21, 5} : std::pair{12, 4};
}

std::string task_label(const TaskSpec& spec, bool mixed) {
  const std::string id = std::to_string(spec.task_id);
  return mixed ? std::string(problem_name(spec.problem)) + ":" + id : id;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.filename().string() + ": " + e.what());
  }
}

}  // namespace

PromptTag parse_variant(std::string_view name) {
  std::string s(name);
  for (char& ch : s) {
    if (ch == '-') ch = '_';
  }
  return parse_prompt_tag(s);
}

std::string variant_flag_name(PromptTag tag) {
  std::string s(prompt_tag_name(tag));
  for (char& ch : s) {
    if (ch == '_') ch = '-';
  }
  return s;
}

RunConfig RunConfig::from_json(const json& doc) {
  reject_unknown(doc,
                 {"problem", "data_dir", "variant", "prompt_len", "traj_episodes", "traj_seg_len",
                  "model", "batch_per_task", "grad_steps_per_iter", "max_iters", "eval_every",
                  "seed", "optimizer", "rtg_scale", "sparse_reward", "eval_episodes"},
                 "config");
  RunConfig c;
  std::string data_dir;
  read_key(doc, "problem", c.problem, "config");
  read_key(doc, "data_dir", data_dir, "config");
  c.data_dir = data_dir;
  read_key(doc, "variant", c.variant, "config");
  read_key(doc, "prompt_len", c.prompt_len, "config");
  read_key(doc, "traj_episodes", c.traj_episodes, "config");
  read_key(doc, "traj_seg_len", c.traj_seg_len, "config");
  if (doc.contains("model")) {
    const json& m = doc["model"];
    reject_unknown(m,
                   {"context_len", "n_layers", "n_heads", "embed_dim", "dropout", "max_timestep",
                    "prompt_position_embedding", "prompt_order"},
                   "config.model");
    read_key(m, "context_len", c.model.context_len, "config.model");
    read_key(m, "n_layers", c.model.n_layers, "config.model");
    read_key(m, "n_heads", c.model.n_heads, "config.model");
    read_key(m, "embed_dim", c.model.embed_dim, "config.model");
    read_key(m, "dropout", c.model.dropout, "config.model");
    read_key(m, "max_timestep", c.model.max_timestep, "config.model");
    read_key(m, "prompt_position_embedding", c.model.prompt_position_embedding, "config.model");
    std::string order(order_name(c.model.prompt_order));
    read_key(m, "prompt_order", order, "config.model");
    c.model.prompt_order = parse_order(order);
  }
  read_key(doc, "batch_per_task", c.batch_per_task, "config");
  read_key(doc, "grad_steps_per_iter", c.grad_steps_per_iter, "config");
  read_key(doc, "max_iters", c.max_iters, "config");
  read_key(doc, "eval_every", c.eval_every, "config");
  read_key(doc, "seed", c.seed, "config");
  if (doc.contains("optimizer")) {
    const json& o = doc["optimizer"];
    reject_unknown(o, {"base_lr", "warmup", "weight_decay"}, "config.optimizer");
    read_key(o, "base_lr", c.base_lr, "config.optimizer");
    read_key(o, "warmup", c.warmup, "config.optimizer");
    read_key(o, "weight_decay", c.weight_decay, "config.optimizer");
  }
  read_key(doc, "rtg_scale", c.rtg_scale, "config");
  read_key(doc, "sparse_reward", c.sparse_reward, "config");
  read_key(doc, "eval_episodes", c.eval_episodes, "config");
  return c;
}

ojson RunConfig::to_json() const {
  return {{"problem", problem},
          {"data_dir", data_dir.string()},
          {"variant", variant},
          {"prompt_len", prompt_len},
          {"traj_episodes", traj_episodes},
          {"traj_seg_len", traj_seg_len},
          {"model",
           {{"context_len", model.context_len},
            {"n_layers", model.n_layers},
            {"n_heads", model.n_heads},
            {"embed_dim", model.embed_dim},
            {"dropout", model.dropout},
            {"max_timestep", model.max_timestep},
            {"prompt_position_embedding", model.prompt_position_embedding},
            {"prompt_order", order_name(model.prompt_order)}}},
          {"batch_per_task", batch_per_task},
          {"grad_steps_per_iter", grad_steps_per_iter},
          {"max_iters", max_iters},
          {"eval_every", eval_every},
          {"seed", seed},
          {"optimizer", {{"base_lr", base_lr}, {"warmup", warmup}, {"weight_decay", weight_decay}}},
          {"rtg_scale", rtg_scale},
          {"sparse_reward", sparse_reward},
          {"eval_episodes", eval_episodes}};
}

RunConfig RunConfig::resolved() const {
  RunConfig c = *this;
  if (!is_mixed(c.problem)) parse_problem(c.problem);
  const PromptTag tag = parse_variant(c.variant);
  c.variant = variant_flag_name(tag);
  const bool learned = tag == PromptTag::task_learned || tag == PromptTag::pure_learned;
  if (c.prompt_len < 0) c.prompt_len = learned ? default_prompt_len(c.problem) : 0;
  if (c.traj_seg_len == 0) c.traj_seg_len = default_traj_seg_len(c.problem);
  if (c.base_lr <= 0.0) c.base_lr = c.prompt_len == 30 ? 1e-3 : 1e-4;
  if (c.data_dir.empty()) throw ConfigError("config: data_dir is required");
  if (c.eval_episodes < 1) throw ConfigError("config: eval_episodes must be >= 1");
  for (Problem p : problems_of(c.problem)) {
    if (c.model.max_timestep < static_cast<std::size_t>(problem_info(p).horizon)) {
      throw ConfigError("config: model.max_timestep is below the " +
                        std::string(problem_name(p)) + " horizon");
    }
  }
  c.train_config().validate();
  return c;
}

TrainConfig RunConfig::train_config() const {
  if (prompt_len < 0) throw ConfigError("config: prompt_len must be resolved");
  TrainConfig t;
  t.variant = {parse_variant(variant), static_cast<std::size_t>(prompt_len), traj_episodes,
               traj_seg_len};
  t.model = model;
  t.batch_per_task = batch_per_task;
  t.grad_steps_per_iter = grad_steps_per_iter;
  t.max_iters = max_iters;
  t.eval_every = eval_every;
  t.seed = seed;
  t.optim.base_lr = base_lr;
  t.optim.warmup_steps = warmup;
  t.optim.weight_decay = weight_decay;
  t.rtg_scale = rtg_scale;
  t.sparse_reward = sparse_reward;
  return t;
}

InputLayout RunConfig::layout() const {
  return is_mixed(problem) ? InputLayout::all_problems()
                           : InputLayout::for_problem(parse_problem(problem));
}

RunConfig read_run_config(const fs::path& path) { return RunConfig::from_json(read_json_file(path)); }

SplitFile read_split_file(const fs::path& path) {
  const json doc = read_json_file(path);
  SplitFile s;
  const std::string where = path.filename().string();
  try {
    s.quality = doc.at("quality").get<std::string>();
    s.reward_mode = doc.at("reward_mode").get<std::string>();
    s.seed = doc.at("seed").get<std::uint64_t>();
    for (const json& t : doc.at("tasks")) {
      SplitTask task;
      task.spec = make_task(parse_problem(t.at("problem").get<std::string>()),
                            t.at("task_id").get<int>(), t.at("parameter").get<std::vector<double>>());
      task.spec.horizon = t.at("horizon").get<int>();
      task.spec.target_return = t.at("target_return").get<double>();
      task.spec.reward_mode = s.reward_mode == "delayed" ? RewardMode::delayed : RewardMode::dense;
      task.split = t.at("split").get<std::string>();
      task.expert_return = t.at("expert_return").get<double>();
      task.expert_max = t.at("expert_max").get<double>();
      task.random_return = t.at("random_return").get<double>();
      task.random_std = t.at("random_std").get<double>();
      task.dataset = t.at("dataset").get<std::string>();
      if (task.split != "train" && task.split != "test") {
        throw ParseError(where + ": split must be train or test");
      }
      s.tasks.push_back(std::move(task));
    }
  } catch (const json::exception& e) {
    throw ParseError(where + ": " + e.what());
  }
  return s;
}

SplitFile generate_data(const GenDataOptions& o) {
  if (o.out.empty()) throw ConfigError("gen-data: --out is required");
  const Quality quality = parse_quality(o.quality);
  if (o.trajectories < 1) throw ConfigError("gen-data: --trajectories must be >= 1");
  const fs::path split_path = o.out / "split.json";
  if (fs::exists(split_path) && !o.force) {
    throw ConfigError("gen-data: " + split_path.string() + " exists; pass --force to overwrite");
  }
  fs::create_directories(o.out);

  SplitFile split;
  split.quality = std::string(quality_name(quality));
  split.reward_mode = o.sparse ? "delayed" : "dense";
  split.seed = o.seed;
  ojson tasks = ojson::array();
  for (Problem p : problems_of(o.problem)) {
    auto [n_train, n_test] = default_split_sizes(p);
    if (o.n_train > 0) n_train = o.n_train;
    if (o.n_test > 0) n_test = o.n_test;
    const TaskSplit ts = make_split(p, n_train, n_test, o.seed);
    const std::uint64_t problem_seed = derive_seed(o.seed, static_cast<std::uint64_t>(p));
    for (const auto* group : {&ts.train, &ts.test}) {
      const std::string which = group == &ts.train ? "train" : "test";
      for (TaskSpec spec : *group) {
        spec.reward_mode = o.sparse ? RewardMode::delayed : RewardMode::dense;
        const auto id = static_cast<std::uint64_t>(spec.task_id);
        const Baselines b =
            estimate_baselines(spec, o.baseline_episodes, derive_seed(problem_seed, id, 1));
        spec.target_return = b.expert_max;
        const TaskDataset ds = generate_dataset(spec, quality, o.trajectories,
                                                o.prompt_trajectories, derive_seed(problem_seed, id, 2));
        const std::string file = dataset_file_name(spec, quality);
        write_dataset(ds, o.out / file);
        log(1, "%s task %d (%s): expert %.3f random %.3f\n", std::string(problem_name(p)).c_str(),
            spec.task_id, which.c_str(), b.expert_mean, b.random_mean);
        tasks.push_back({{"problem", problem_name(p)},
                         {"task_id", spec.task_id},
                         {"split", which},
                         {"parameter", spec.c},
                         {"horizon", spec.horizon},
                         {"target_return", spec.target_return},
                         {"expert_return", b.expert_mean},
                         {"expert_max", b.expert_max},
                         {"random_return", b.random_mean},
                         {"random_std", b.random_std},
                         {"dataset", file}});
        split.tasks.push_back({spec, which, b.expert_mean, b.expert_max, b.random_mean,
                               b.random_std, file});
      }
    }
  }
  const ojson doc{{"quality", split.quality},
                  {"reward_mode", split.reward_mode},
                  {"seed", split.seed},
                  {"tasks", std::move(tasks)}};
  write_text(split_path, doc.dump(2) + "\n");
  return split;
}

RunData load_run_data(const RunConfig& config) {
  const SplitFile split = read_split_file(config.data_dir / "split.json");
  const std::vector<Problem> wanted = problems_of(config.problem);
  RunData data;
  data.layout = config.layout();
  for (const SplitTask& task : split.tasks) {
    if (std::find(wanted.begin(), wanted.end(), task.spec.problem) == wanted.end()) continue;
    TaskDataset ds = read_dataset(config.data_dir / task.dataset);
    if (ds.spec.problem != task.spec.problem || ds.spec.task_id != task.spec.task_id) {
      throw ConfigError(task.dataset + ": does not match its split entry");
    }
    if (config.sparse_reward) {
      ds = with_delayed_rewards(ds);
    } else if (ds.spec.reward_mode == RewardMode::delayed) {
      throw ConfigError(task.dataset + ": delayed-reward data needs sparse_reward");
    }
    ds.spec.target_return = task.spec.target_return;
    EvalTask et;
    et.spec = task.spec;
    et.spec.reward_mode = ds.spec.reward_mode;
    et.expert_return = task.expert_return;
    et.random_return = task.random_return;
    et.prompt_pool = ds.prompt_pool;
    if (task.split == "train") {
      data.train.push_back(pad_dataset(ds, data.layout));
      data.seen.push_back(std::move(et));
    } else {
      data.unseen.push_back(std::move(et));
    }
  }
  if (data.train.empty()) {
    throw ConfigError("no training tasks for problem '" + config.problem + "' in " +
                      config.data_dir.string());
  }
  return data;
}

EvalSettings eval_settings(const RunConfig& config, std::size_t episodes) {
  return {episodes, derive_seed(config.seed, 5)};
}

std::vector<MetricRow> eval_metric_rows(std::size_t iteration, const std::string& variant,
                                        const EvalReport& report, bool mixed) {
  std::vector<MetricRow> rows;
  for (const TaskResult& r : report.per_task) {
    TaskSpec spec;
    spec.problem = parse_problem(r.problem);
    spec.task_id = r.task_id;
    const std::string id = task_label(spec, mixed);
    rows.push_back({iteration, "eval", variant, r.split, id, "mean_return", r.mean_return});
    rows.push_back({iteration, "eval", variant, r.split, id, "normalized_score", r.normalized_score});
  }
  for (const auto& [split, agg] : report.aggregate) {
    rows.push_back({iteration, "eval", variant, split, "all", "normalized_score", agg.mean});
  }
  return rows;
}

namespace {

EvalReport evaluate_both(const DecisionTransformer<float>& model, const ParamStore<float>& params,
                         const PromptVariant& variant, const RunData& data,
                         const InputNormalizer& norm, const EvalSettings& settings,
                         const std::string& which) {
  EvalReport report;
  for (const std::string split : {"seen", "unseen"}) {
    if (which != "both" && which != split) continue;
    const auto& tasks = split == "seen" ? data.seen : data.unseen;
    if (tasks.empty()) continue;
    const EvalReport part =
        evaluate_split(model, params, variant, tasks, split, data.layout, norm, settings);
    report.per_task.insert(report.per_task.end(), part.per_task.begin(), part.per_task.end());
  }
  report.finalize();
  return report;
}

}  // namespace

TrainResult run_training(const RunConfig& raw, const fs::path& out) {
  const RunConfig config = raw.resolved();
  const TrainConfig tc = config.train_config();
  const RunData data = load_run_data(config);
  if (tc.variant.tag == PromptTag::trajectory) {
    for (const EvalTask& t : data.unseen) {
      if (t.prompt_pool.empty()) {
        throw ConfigError("trajectory variant: unseen task " + std::to_string(t.spec.task_id) +
                          " has no prompt trajectories");
      }
    }
  }
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(out / "config.json", config.to_json().dump(2) + "\n");
  }
  const ModelConfig mc = resolve_model_config(tc, data.layout);
  const std::string variant(prompt_tag_name(tc.variant.tag));
  const EvalSettings settings = eval_settings(config, config.eval_episodes);
  log(1, "training %s (n=%d) on %zu tasks, seed %llu\n", config.variant.c_str(), config.prompt_len,
      data.train.size(), static_cast<unsigned long long>(config.seed));
  EvalHook hook = [&](std::size_t it, const ParamStore<float>& params, const InputNormalizer& norm) {
    const DecisionTransformer<float> model(mc, params);
    const EvalReport report = evaluate_both(model, params, tc.variant, data, norm, settings, "both");
    for (const auto& [split, agg] : report.aggregate) {
      log(1, "  iter %zu %s: %.2f +- %.2f\n", it + 1, split.c_str(), agg.mean, agg.std);
    }
    return eval_metric_rows(it, variant, report, data.layout.mixed);
  };
  return train_run(tc, data.train, data.layout, hook, out);
}

EvalReport run_evaluation(const fs::path& run_dir, const std::string& split, std::size_t episodes) {
  if (split != "seen" && split != "unseen" && split != "both") {
    throw ConfigError("--split must be seen, unseen or both");
  }
  if (episodes < 1) throw ConfigError("--episodes must be >= 1");
  const RunConfig config = read_run_config(run_dir / "config.json").resolved();
  const TrainConfig tc = config.train_config();
  const RunData data = load_run_data(config);
  const ModelConfig mc = resolve_model_config(tc, data.layout);
  ParamStore<float> params = init_run_parameters(tc, mc);
  load_checkpoint_into(params, run_dir / "model.json", run_dir / "model.bin");
  const InputNormalizer norm = read_normalizer(run_dir / "normalizer.json");
  if (norm.state_mean.size() != data.layout.state_dim) {
    throw CheckpointError("normalizer does not match the run's state layout");
  }
  const DecisionTransformer<float> model(mc, params);
  return evaluate_both(model, params, tc.variant, data, norm, eval_settings(config, episodes), split);
}

namespace {

double final_unseen_score(const TrainResult& result) {
  for (auto it = result.metrics.rbegin(); it != result.metrics.rend(); ++it) {
    if (it->phase == "eval" && it->split == "unseen" && it->task_id == "all") return it->value;
  }
  throw ConfigError("run has no unseen evaluation");
}

}  // namespace

std::vector<AblationRow> run_ablation(const AblateOptions& o) {
  if (o.out.empty()) throw ConfigError("ablate: --out is required");
  if (o.seeds.empty()) throw ConfigError("ablate: at least one seed is required");
  RunConfig base = o.config.empty() ? RunConfig{} : read_run_config(o.config);
  if (!o.data_dir.empty()) base.data_dir = o.data_dir;
  base.problem = o.problem;

  std::vector<std::pair<std::string, int>> cells;
  if (o.prompt_lens.empty()) {
    for (PromptTag tag : {PromptTag::task_learned, PromptTag::task, PromptTag::trajectory,
                          PromptTag::pure_learned, PromptTag::none}) {
      cells.emplace_back(variant_flag_name(tag), -1);
    }
  } else {
    for (int n : o.prompt_lens) {
      if (n < 0) throw ConfigError("ablate: prompt lengths must be >= 0");
      cells.emplace_back("task-learned", n);
    }
  }
  // Validate every cell before any training starts.
  std::vector<RunConfig> configs;
  for (const auto& [variant, n] : cells) {
    RunConfig c = base;
    c.variant = variant;
    c.prompt_len = n;
    configs.push_back(c.resolved());
  }
  fs::create_directories(o.out);

  std::vector<AblationRow> rows;
  for (const RunConfig& cell : configs) {
    AblationRow row;
    row.variant = cell.variant;
    row.prompt_len = cell.prompt_len;
    for (std::uint64_t seed : o.seeds) {
      RunConfig c = cell;
      c.seed = seed;
      const fs::path dir = o.out / (cell.variant + "-n" + std::to_string(cell.prompt_len)) /
                           ("seed" + std::to_string(seed));
      const fs::path summary = dir / "summary.json";
      double score = 0.0;
      if (o.resume && fs::exists(summary)) {
        score = read_json_file(summary).at("unseen_normalized_score").get<double>();
      } else {
        score = final_unseen_score(run_training(c, dir));
        write_text(summary, ojson{{"unseen_normalized_score", score}}.dump(2) + "\n");
      }
      log(1, "%s n=%d seed %llu: %.2f\n", cell.variant.c_str(), cell.prompt_len,
          static_cast<unsigned long long>(seed), score);
      row.scores.push_back(score);
    }
    for (double s : row.scores) row.mean += s;
    row.mean /= static_cast<double>(row.scores.size());
    for (double s : row.scores) row.std += (s - row.mean) * (s - row.mean);
    row.std = std::sqrt(row.std / static_cast<double>(row.scores.size()));
    rows.push_back(row);
  }
  write_ablation_csv(rows, o.out / "ablation.csv");
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const fs::path& path) {
  std::ostringstream out;
  out << "variant,prompt_len,n_seeds,mean,std,scores\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const AblationRow& r : rows) {
    out << r.variant << ',' << r.prompt_len << ',' << r.scores.size() << ',' << num(r.mean) << ','
        << num(r.std) << ',';
    for (std::size_t i = 0; i < r.scores.size(); ++i) out << (i ? ";" : "") << num(r.scores[i]);
    out << '\n';
  }
  write_text(path, out.str());
}

GradCheckReport run_grad_check(const GradCheckOptions& o) {
  if (o.probes < 1) throw ConfigError("grad-check: --probes must be >= 1");
  if (!(o.step > 0.0)) throw ConfigError("grad-check: --step must be positive");
  TrainConfig tc;
  tc.variant = {PromptTag::task_learned, 3, 1, 2};
  tc.model.n_layers = 2;
  tc.model.embed_dim = 16;
  tc.model.context_len = 4;
  tc.model.n_heads = 2;
  tc.model.dropout = 0.0;
  tc.seed = o.seed;
  const InputLayout layout = InputLayout::for_problem(Problem::point_reach);
  const ModelConfig mc = resolve_model_config(tc, layout);
  ParamStore<double> params = init_run_parameters(tc, mc).cast<double>();
  const DecisionTransformer<double> model(mc, params);

  const TaskSplit split = make_split(Problem::point_reach, 2, 1, o.seed);
  std::vector<TaskDataset> datasets;
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    TaskSpec spec = split.train[i];
    spec.target_return = -10.0;
    datasets.push_back(generate_dataset(spec, Quality::medium, 3, 1, derive_seed(o.seed, 10 + i)));
  }
  const InputNormalizer norm = InputNormalizer::pooled(datasets, 10.0);
  const std::uint64_t batch_seed = derive_seed(o.seed, 20);
  std::function<Tensor<double>()> loss_fn = [&] {
    Rng rng(batch_seed);
    return batch_loss(model, params, tc.variant, datasets, norm, 2, rng, false);
  };
  Rng probe_rng(derive_seed(o.seed, 21));
  GradCheckReport report;
  report.result = finite_difference_check(loss_fn, params, o.probes, o.step, probe_rng);
  for (const GradProbe& p : report.result.probes) {
    if (p.name.rfind("prompt_z", 0) == 0) ++report.prompt_probes;
  }
  report.passed = report.result.max_relative_error < 1e-4;
  return report;
}

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void print_report(const EvalReport& report) {
  std::printf("%-16s %-8s %-7s %14s %12s %4s\n", "problem", "task", "split", "mean_return",
              "score", "eps");
  for (const TaskResult& r : report.per_task) {
    std::printf("%-16s %-8d %-7s %14.4f %12.2f %4zu\n", r.problem.c_str(), r.task_id,
                r.split.c_str(), r.mean_return, r.normalized_score, r.n_episodes);
  }
  for (const auto& [split, agg] : report.aggregate) {
    std::printf("%s: %.2f +- %.2f over %zu tasks\n", split.c_str(), agg.mean, agg.std, agg.n_tasks);
  }
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Minimalist-prompting decision transformer experiments"};
  app.require_subcommand(1);

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate task datasets and the split file");
  gen_cmd->add_option("--problem", gen.problem, "Problem name or 'all'");
  std::string gen_out;
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();
  gen_cmd->add_option("--trajectories", gen.trajectories, "Training trajectories per task");
  gen_cmd->add_option("--prompt-trajectories", gen.prompt_trajectories,
                      "Held-out expert trajectories per task");
  gen_cmd->add_option("--quality", gen.quality, "expert | medium | random");
  gen_cmd->add_option("--n-train", gen.n_train, "Training tasks (problem default if omitted)");
  gen_cmd->add_option("--n-test", gen.n_test, "Test tasks (problem default if omitted)");
  gen_cmd->add_option("--seed", gen.seed, "Seed");
  gen_cmd->add_flag("--sparse", gen.sparse, "Withhold rewards until the final step");
  gen_cmd->add_flag("--force", gen.force, "Overwrite existing output");

  std::string train_config, train_data, train_problem, train_variant, train_out;
  int train_prompt_len = -1;
  std::uint64_t train_seed = 0;
  bool train_sparse = false;
  std::size_t train_iters = 0;
  auto* train_cmd = app.add_subcommand("train", "Train one variant");
  train_cmd->add_option("--config", train_config, "RunConfig JSON");
  train_cmd->add_option("--data", train_data, "Data directory (overrides the config)");
  train_cmd->add_option("--problem", train_problem, "Problem name or 'all'");
  train_cmd->add_option("--variant", train_variant,
                        "task-learned | task | pure-learned | trajectory | none");
  train_cmd->add_option("--prompt-len", train_prompt_len, "Learned prompt tokens per block");
  train_cmd->add_option("--seed", train_seed, "Seed");
  train_cmd->add_option("--max-iters", train_iters, "Training iterations");
  train_cmd->add_flag("--sparse", train_sparse, "Train and evaluate with delayed rewards");
  train_cmd->add_option("--out", train_out, "Run directory")->required();

  std::string eval_run, eval_split = "unseen", eval_out;
  std::size_t eval_episodes = 20;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained run");
  eval_cmd->add_option("--run", eval_run, "Run directory")->required();
  eval_cmd->add_option("--split", eval_split, "seen | unseen | both");
  eval_cmd->add_option("--episodes", eval_episodes, "Episodes per task");
  eval_cmd->add_option("--out", eval_out, "Report path (default <run>/eval_<split>.json)");

  AblateOptions ablate;
  std::string ablate_config, ablate_data, ablate_out, ablate_seeds = "1,6,8", ablate_lens;
  auto* ablate_cmd = app.add_subcommand("ablate", "Compare variants or prompt lengths over seeds");
  ablate_cmd->add_option("--config", ablate_config, "Base RunConfig JSON");
  ablate_cmd->add_option("--data", ablate_data, "Data directory");
  ablate_cmd->add_option("--problem", ablate.problem, "Problem name or 'all'");
  ablate_cmd->add_option("--seeds", ablate_seeds, "Comma-separated seeds");
  ablate_cmd->add_option("--prompt-lens", ablate_lens,
                         "Comma-separated learned prompt lengths (task-learned sweep)");
  ablate_cmd->add_option("--out", ablate_out, "Output directory")->required();
  ablate_cmd->add_flag("--resume", ablate.resume, "Reuse finished cells");

  GradCheckOptions gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "Finite-difference check of the full model");
  gc_cmd->add_option("--probes", gc.probes, "Probed parameter entries");
  gc_cmd->add_option("--step", gc.step, "Central-difference step");
  gc_cmd->add_option("--seed", gc.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen_cmd) {
      gen.out = gen_out;
      const SplitFile s = generate_data(gen);
      std::printf("wrote %zu task datasets to %s\n", s.tasks.size(), gen_out.c_str());
    } else if (*train_cmd) {
      RunConfig c = train_config.empty() ? RunConfig{} : read_run_config(train_config);
      if (!train_data.empty()) c.data_dir = train_data;
      if (!train_problem.empty()) c.problem = train_problem;
      if (!train_variant.empty()) c.variant = train_variant;
      if (train_cmd->count("--prompt-len")) c.prompt_len = train_prompt_len;
      if (train_cmd->count("--seed")) c.seed = train_seed;
      if (train_cmd->count("--max-iters")) c.max_iters = train_iters;
      if (train_sparse) c.sparse_reward = true;
      const TrainResult r = run_training(c, train_out);
      std::printf("finished %zu iterations; run directory %s\n", c.max_iters, train_out.c_str());
      for (auto it = r.metrics.rbegin(); it != r.metrics.rend(); ++it) {
        if (it->phase == "eval" && it->task_id == "all") {
          std::printf("final %s normalized score: %.2f\n", it->split.c_str(), it->value);
        }
        if (it->phase == "train") break;
      }
    } else if (*eval_cmd) {
      const EvalReport report = run_evaluation(eval_run, eval_split, eval_episodes);
      print_report(report);
      const fs::path out =
          eval_out.empty() ? fs::path(eval_run) / ("eval_" + eval_split + ".json") : fs::path(eval_out);
      write_text(out, report.to_json().dump(2) + "\n");
    } else if (*ablate_cmd) {
      ablate.config = ablate_config;
      ablate.data_dir = ablate_data;
      ablate.out = ablate_out;
      ablate.seeds.clear();
      for (const std::string& s : split_list(ablate_seeds)) ablate.seeds.push_back(std::stoull(s));
      for (const std::string& s : split_list(ablate_lens)) ablate.prompt_lens.push_back(std::stoi(s));
      const auto rows = run_ablation(ablate);
      std::printf("%-14s %6s %10s %10s\n", "variant", "n", "mean", "std");
      for (const AblationRow& r : rows) {
        std::printf("%-14s %6d %10.2f %10.2f\n", r.variant.c_str(), r.prompt_len, r.mean, r.std);
      }
    } else if (*gc_cmd) {
      const GradCheckReport r = run_grad_check(gc);
      std::printf("probes: %zu (%zu in prompt blocks)\n", r.result.probes.size(), r.prompt_probes);
      std::printf("max relative error: %.3e\n", r.result.max_relative_error);
      std::printf("%s\n", r.passed ? "PASS" : "FAIL");
      return r.passed ? 0 : 2;
    }
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}

}  // namespace mpdt
