#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include "doctest.h"
#include "mpdt/cli.hpp"

using namespace mpdt;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mpdt_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

int cli(std::vector<std::string> args) {
  setenv("MPDT_VERBOSITY", "0", 1);
  args.insert(args.begin(), "mpdt");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::fflush(stdout);
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kTinyConfig = R"({
  "model": {"context_len": 4, "n_layers": 1, "embed_dim": 16, "n_heads": 2},
  "batch_per_task": 2, "grad_steps_per_iter": 1, "max_iters": 4, "eval_every": 2,
  "eval_episodes": 2, "optimizer": {"base_lr": 1e-3, "warmup": 5}
})";

// Small point_reach data shared by several cases.
const fs::path& reach_data() {
  static const fs::path dir = [] {
    fs::path d = temp_dir("reach") / "data";
    REQUIRE(cli({"gen-data", "--problem", "point_reach", "--out", d.string(), "--trajectories",
                 "4", "--prompt-trajectories", "2", "--n-train", "3", "--n-test", "2"}) == 0);
    return d;
  }();
  return dir;
}

std::map<std::string, std::string> final_eval_rows(const fs::path& metrics) {
  std::ifstream in(metrics);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  const std::string last_iter = rows.back().substr(0, rows.back().find(','));
  std::map<std::string, std::string> out;
  for (const std::string& r : rows) {
    if (r.rfind(last_iter + ",eval,", 0) != 0) continue;
    if (r.find(",normalized_score,") == std::string::npos) continue;
    const auto cut = r.rfind(',');
    std::string key = r.substr(0, cut);
    key = key.substr(key.find(",eval,") + 6);
    key = key.substr(key.find(',') + 1);  // drop the variant
    out[key] = r.substr(cut + 1);
  }
  return out;
}

}  // namespace

TEST_CASE("variant names") {
  CHECK(parse_variant("task-learned") == PromptTag::task_learned);
  CHECK(parse_variant("pure_learned") == PromptTag::pure_learned);
  CHECK(parse_variant("none") == PromptTag::none);
  CHECK(variant_flag_name(PromptTag::task_learned) == "task-learned");
  CHECK_THROWS_AS(parse_variant("prompt"), ConfigError);
}

TEST_CASE("run config") {
  RunConfig c;
  c.data_dir = "somewhere";
  c.seed = 6;
  c.model.embed_dim = 32;
  const RunConfig back = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  CHECK(back.to_json() == c.to_json());

  SUBCASE("unknown keys are rejected at every level") {
    CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json::parse(R"({"max_iter": 3})")), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json::parse(R"({"model": {"layers": 3}})")),
                    ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json::parse(R"({"optimizer": {"lr": 1}})")),
                    ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json::parse(R"({"seed": "one"})")), ConfigError);
  }

  SUBCASE("problem defaults") {
    RunConfig r = c;
    r.problem = "point_reach";
    r.variant = "task_learned";
    RunConfig x = r.resolved();
    CHECK(x.variant == "task-learned");
    CHECK(x.prompt_len == 30);
    CHECK(x.base_lr == 1e-3);
    CHECK(x.traj_seg_len == 2);
    r.problem = "point_velocity";
    x = r.resolved();
    CHECK(x.prompt_len == 15);
    CHECK(x.base_lr == 1e-4);
    CHECK(x.traj_seg_len == 5);
    r.variant = "task";
    CHECK(r.resolved().prompt_len == 0);
    r.prompt_len = 3;
    CHECK_THROWS_AS(r.resolved(), ConfigError);
    r.variant = "pure-learned";
    r.prompt_len = 0;
    CHECK_THROWS_AS(r.resolved(), ConfigError);
    r.variant = "task";
    r.data_dir.clear();
    CHECK_THROWS_AS(r.resolved(), ConfigError);
  }
}

TEST_CASE("gen-data") {
  const fs::path root = temp_dir("gen");
  SUBCASE("maze split writes 26 task files") {
    const fs::path out = root / "maze";
    REQUIRE(cli({"gen-data", "--problem", "grid_maze", "--out", out.string(), "--n-train", "21",
                 "--n-test", "5", "--trajectories", "2", "--prompt-trajectories", "1"}) == 0);
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(out)) n += e.path().filename() != "split.json";
    CHECK(n == 26);
    const SplitFile s = read_split_file(out / "split.json");
    CHECK(s.tasks.size() == 26);
    std::size_t train = 0;
    for (const SplitTask& t : s.tasks) {
      train += t.split == "train";
      CHECK(t.spec.target_return == t.expert_max);
      CHECK(t.expert_return > t.random_return);
    }
    CHECK(train == 21);
  }
  SUBCASE("refuses to overwrite without --force; same seed gives identical bytes") {
    const std::vector<std::string> base{"--problem", "point_velocity", "--trajectories", "3",
                                        "--n-train", "2", "--n-test", "1", "--seed", "4"};
    auto args = [&](const fs::path& out) {
      std::vector<std::string> a{"gen-data", "--out", out.string()};
      a.insert(a.end(), base.begin(), base.end());
      return a;
    };
    REQUIRE(cli(args(root / "a")) == 0);
    CHECK(cli(args(root / "a")) == 1);
    auto forced = args(root / "a");
    forced.push_back("--force");
    CHECK(cli(forced) == 0);
    REQUIRE(cli(args(root / "b")) == 0);
    for (const auto& e : fs::directory_iterator(root / "a")) {
      CAPTURE(e.path().filename());
      CHECK(slurp(e.path()) == slurp(root / "b" / e.path().filename()));
    }
  }
  SUBCASE("random quality matches the random baseline") {
    const fs::path out = root / "random";
    REQUIRE(cli({"gen-data", "--problem", "point_reach", "--out", out.string(), "--quality",
                 "random", "--trajectories", "100", "--n-train", "2", "--n-test", "1"}) == 0);
    for (const SplitTask& t : read_split_file(out / "split.json").tasks) {
      const TaskDataset ds = read_dataset(out / t.dataset);
      CHECK(ds.quality == Quality::random);
      double mean = 0.0;
      for (const Trajectory& tr : ds.trajectories) mean += tr.total_return;
      mean /= static_cast<double>(ds.trajectories.size());
      // Two independent 100-episode means.
      CHECK(std::abs(mean - t.random_return) < 4.0 * t.random_std * std::sqrt(2.0 / 100.0));
    }
  }
  SUBCASE("sparse data withholds rewards") {
    const fs::path out = root / "sparse";
    REQUIRE(cli({"gen-data", "--problem", "point_reach", "--out", out.string(), "--sparse",
                 "--trajectories", "2", "--n-train", "2", "--n-test", "1"}) == 0);
    const SplitFile s = read_split_file(out / "split.json");
    CHECK(s.reward_mode == "delayed");
    const TaskDataset ds = read_dataset(out / s.tasks[0].dataset);
    CHECK(ds.spec.reward_mode == RewardMode::delayed);
    const auto& r = ds.trajectories[0].rewards;
    for (std::size_t i = 0; i + 1 < r.size(); ++i) CHECK(r[i] == 0.0);
  }
  SUBCASE("bad flags are validation errors") {
    CHECK(cli({"gen-data", "--out", (root / "x").string(), "--quality", "great"}) == 1);
    CHECK(cli({"gen-data", "--out", (root / "y").string(), "--problem", "cheetah"}) == 1);
    CHECK(cli({"gen-data"}) == 1);
    CHECK(cli({"frobnicate"}) == 1);
  }
}

TEST_CASE("train and eval") {
  const fs::path root = temp_dir("train");
  write(root / "cfg.json", kTinyConfig);
  const std::string data = reach_data().string();
  auto train = [&](const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> a{"train", "--config", (root / "cfg.json").string(), "--data", data,
                               "--out", (root / out).string()};
    a.insert(a.end(), extra.begin(), extra.end());
    return cli(a);
  };

  REQUIRE(train("tl", {"--variant", "task-learned", "--prompt-len", "3"}) == 0);
  for (const char* f : {"config.json", "metrics.csv", "model.json", "model.bin", "normalizer.json"}) {
    CHECK(fs::exists(root / "tl" / f));
  }
  const RunConfig snap = read_run_config(root / "tl" / "config.json");
  CHECK(snap.prompt_len == 3);
  CHECK(snap.variant == "task-learned");
  CHECK(snap.data_dir == data);

  SUBCASE("eval reproduces the recorded final scores bit-for-bit") {
    const EvalReport rep = run_evaluation(root / "tl", "both", 2);
    const auto rows = final_eval_rows(root / "tl" / "metrics.csv");
    char buf[64];
    for (const TaskResult& r : rep.per_task) {
      std::snprintf(buf, sizeof buf, "%.17g", r.normalized_score);
      CHECK(rows.at(r.split + "," + std::to_string(r.task_id) + ",normalized_score") == buf);
    }
    for (const auto& [split, agg] : rep.aggregate) {
      std::snprintf(buf, sizeof buf, "%.17g", agg.mean);
      CHECK(rows.at(split + ",all,normalized_score") == buf);
    }
    CHECK(cli({"eval", "--run", (root / "tl").string(), "--split", "unseen", "--episodes", "2"}) == 0);
    const auto j = nlohmann::json::parse(slurp(root / "tl" / "eval_unseen.json"));
    CHECK(j["per_task"].size() == 2);
    for (const auto& t : j["per_task"]) CHECK(t["split"] == "unseen");
    double mean = 0.0;
    for (const auto& t : j["per_task"]) mean += t["normalized_score"].get<double>();
    CHECK(j["aggregate"]["unseen"]["mean"].get<double>() == doctest::Approx(mean / 2.0));
  }
  SUBCASE("task equals task-learned with zero prompt length") {
    REQUIRE(train("t", {"--variant", "task", "--prompt-len", "0"}) == 0);
    REQUIRE(train("tl0", {"--variant", "task-learned", "--prompt-len", "0"}) == 0);
    CHECK(slurp(root / "t" / "model.bin") == slurp(root / "tl0" / "model.bin"));
    std::string a = slurp(root / "t" / "metrics.csv"), b = slurp(root / "tl0" / "metrics.csv");
    for (std::string* s : {&a, &b}) {
      for (auto p = s->find("task_learned"); p != std::string::npos; p = s->find("task_learned")) {
        s->replace(p, 12, "task");
      }
    }
    CHECK(a == b);
  }
  SUBCASE("every variant and the ablation lengths train") {
    for (const char* v : {"pure-learned", "trajectory", "none"}) {
      CAPTURE(v);
      CHECK(train(std::string("v_") + v, {"--variant", v}) == 0);
    }
    for (const char* n : {"0", "3", "15", "30"}) CHECK(train(std::string("n") + n, {"--prompt-len", n}) == 0);
  }
  SUBCASE("validation and runtime errors map to exit codes") {
    CHECK(train("bad1", {"--variant", "task", "--prompt-len", "4"}) == 1);
    CHECK(train("bad2", {"--variant", "everything"}) == 1);
    CHECK(cli({"train", "--out", (root / "bad3").string()}) == 1);  // no data directory
    write(root / "typo.json", R"({"max_iter": 3})");
    CHECK(cli({"train", "--config", (root / "typo.json").string(), "--data", data, "--out",
               (root / "bad4").string()}) == 1);
    CHECK(cli({"eval", "--run", (root / "tl").string(), "--split", "all"}) == 1);
    // Checkpoint does not fit an edited config.
    fs::copy(root / "tl", root / "edited");
    auto cfg = nlohmann::json::parse(slurp(root / "edited" / "config.json"));
    cfg["model"]["embed_dim"] = 32;
    write(root / "edited" / "config.json", cfg.dump());
    CHECK(cli({"eval", "--run", (root / "edited").string()}) == 2);
  }
}

TEST_CASE("sparse training needs or converts delayed data") {
  const fs::path root = temp_dir("sparse");
  write(root / "cfg.json", kTinyConfig);
  const fs::path sparse_data = root / "data";
  REQUIRE(cli({"gen-data", "--problem", "point_reach", "--out", sparse_data.string(), "--sparse",
               "--trajectories", "3", "--n-train", "2", "--n-test", "1"}) == 0);
  const std::string cfg = (root / "cfg.json").string();
  CHECK(cli({"train", "--config", cfg, "--data", sparse_data.string(), "--out",
             (root / "a").string()}) == 1);
  CHECK(cli({"train", "--config", cfg, "--data", sparse_data.string(), "--sparse", "--out",
             (root / "b").string()}) == 0);
  CHECK(cli({"train", "--config", cfg, "--data", reach_data().string(), "--sparse", "--out",
             (root / "c").string()}) == 0);
}

TEST_CASE("mixed-problem mode") {
  const fs::path root = temp_dir("mixed");
  write(root / "cfg.json", kTinyConfig);
  REQUIRE(cli({"gen-data", "--problem", "all", "--out", (root / "data").string(), "--trajectories",
               "2", "--prompt-trajectories", "1", "--n-train", "2", "--n-test", "1"}) == 0);
  REQUIRE(cli({"train", "--config", (root / "cfg.json").string(), "--data",
               (root / "data").string(), "--problem", "all", "--variant", "task", "--out",
               (root / "run").string()}) == 0);
  const std::string metrics = slurp(root / "run" / "metrics.csv");
  CHECK(metrics.find(",grid_maze:") != std::string::npos);
  CHECK(metrics.find(",point_velocity:") != std::string::npos);
  const EvalReport rep = run_evaluation(root / "run", "unseen", 1);
  CHECK(rep.per_task.size() == 4);
}

TEST_CASE("ablate") {
  const fs::path root = temp_dir("ablate");
  write(root / "cfg.json", kTinyConfig);
  const std::vector<std::string> common{"--config", (root / "cfg.json").string(), "--data",
                                        reach_data().string(), "--seeds", "1,6"};
  auto run = [&](const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> a{"ablate", "--out", (root / out).string()};
    a.insert(a.end(), common.begin(), common.end());
    a.insert(a.end(), extra.begin(), extra.end());
    return cli(a);
  };
  REQUIRE(run("five", {}) == 0);
  std::ifstream five(root / "five" / "ablation.csv");
  std::string line;
  std::getline(five, line);
  CHECK(line == "variant,prompt_len,n_seeds,mean,std,scores");
  std::vector<std::string> variants;
  while (std::getline(five, line)) variants.push_back(line.substr(0, line.find(',')));
  CHECK(variants == std::vector<std::string>{"task-learned", "task", "trajectory", "pure-learned",
                                             "none"});

  REQUIRE(run("lens", {"--prompt-lens", "0,3,15,30"}) == 0);
  const std::string csv = slurp(root / "lens" / "ablation.csv");
  for (const char* n : {",0,2,", ",3,2,", ",15,2,", ",30,2,"}) CHECK(csv.find(n) != std::string::npos);

  // Finished cells are reused.
  const auto stamp = fs::last_write_time(root / "lens" / "task-learned-n3" / "seed1" / "model.bin");
  REQUIRE(run("lens", {"--prompt-lens", "0,3,15,30", "--resume"}) == 0);
  CHECK(fs::last_write_time(root / "lens" / "task-learned-n3" / "seed1" / "model.bin") == stamp);
  CHECK(slurp(root / "lens" / "ablation.csv") == csv);
}

TEST_CASE("ablation statistics are over seeds") {
  const fs::path p = temp_dir("stats") / "a.csv";
  write_ablation_csv({{"task", 0, {70.0, 80.0, 90.0}, 80.0, std::sqrt(200.0 / 3.0)}}, p);
  const std::string s = slurp(p);
  CHECK(s.find("task,0,3,80,") != std::string::npos);
  CHECK(s.find(",70;80;90") != std::string::npos);
}

TEST_CASE("grad-check command") {
  CHECK(cli({"grad-check"}) == 0);
  const GradCheckReport r = run_grad_check({});
  CHECK(r.passed);
  CHECK(r.result.probes.size() >= 200);
  CHECK(r.prompt_probes > 0);
  CHECK(run_grad_check({256, 1e-2, 1}).result.max_relative_error > r.result.max_relative_error);
  CHECK(cli({"grad-check", "--probes", "0"}) == 1);
}
