#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "bilalora/errors.hpp"
#include "bilalora/experiment.hpp"

namespace bilalora {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// Small task and short schedule; every command finishes in well under a second.
json small_doc(const fs::path& out) {
  return {
      {"seed", 3},
      {"task",
       {{"layer_count", 4},
        {"width", 12},
        {"input_dim", 4},
        {"embed_dim", 6},
        {"planted", {1, 2}},
        {"source_samples", 128},
        {"target_samples", 32},
        {"pretrain_steps", 150},
        {"pretrain_batch", 32},
        {"pretrain_threshold", "inf"}}},
      {"adapter", {{"rank", 2}}},
      {"optimizer", {{"eta_w", 0.05}, {"epochs", 12}, {"switch_epoch", 6}, {"k", 2}, {"batch_size", 8}}},
      {"oracle", {{"budget", 5}}},
      {"sweep", {{"k_values", {1, 2, 3, 4}}}},
      {"paths", {{"out_dir", out.string()}}},
  };
}

class Commands : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("bilalora_experiment_test_" + std::to_string(getpid()));
    fs::remove_all(root_);
    config_ = new ExperimentConfig(config_from_json(small_doc(root_ / "base")));
    cmd_pretrain(*config_);
  }
  static void TearDownTestSuite() {
    delete config_;
    fs::remove_all(root_);
  }

  // Shares the pretrained task but writes into its own directory.
  static ExperimentConfig derived(const std::string& name) {
    ExperimentConfig c = *config_;
    c.task_dir = config_->resolved_task_dir();
    c.out_dir = (root_ / name).string();
    return c;
  }

  static inline fs::path root_;
  static inline ExperimentConfig* config_ = nullptr;
};

TEST(Config, DefaultsRoundTripThroughJson) {
  const ExperimentConfig c = config_from_json(json::object());
  EXPECT_EQ(c.task.layer_count, 6u);
  EXPECT_EQ(c.task.rank, 8u);
  EXPECT_EQ(c.task.gamma, 2.0);
  EXPECT_EQ(c.optimizer.k, 3u);
  EXPECT_LT(c.optimizer.switch_epoch, c.optimizer.epochs);
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
}

#ifdef BILALORA_SOURCE_DIR
TEST(Config, ShippedDefaultConfigMatchesBuiltInDefaults) {
  const ExperimentConfig shipped = load_config(std::string(BILALORA_SOURCE_DIR) + "/configs/default.json");
  EXPECT_EQ(config_to_json(shipped), config_to_json(config_from_json(json::object())));
}
#endif

TEST(Config, InfinityIsWrittenAsString) {
  const ExperimentConfig c = config_from_json(small_doc("x"));
  EXPECT_TRUE(std::isinf(c.task.pretrain_threshold));
  EXPECT_EQ(config_to_json(c)["task"]["pretrain_threshold"], "inf");
}

TEST(Config, SeedReachesEverySection) {
  const ExperimentConfig c = config_from_json(small_doc("x"));
  EXPECT_EQ(c.task.seed, 3u);
  EXPECT_EQ(c.optimizer.seed, 3u);
}

TEST(Config, StrictParsingRejectsUnknownKeysAndTypes) {
  json doc = small_doc("x");
  doc["task"]["widht"] = 3;
  EXPECT_THROW(config_from_json(doc), ConfigError);
  doc = small_doc("x");
  doc["extra"] = true;
  EXPECT_THROW(config_from_json(doc), ConfigError);
  doc = small_doc("x");
  doc["optimizer"]["k"] = -1;
  EXPECT_THROW(config_from_json(doc), ConfigError);
  doc = small_doc("x");
  doc["optimizer"]["eta_w"] = "fast";
  EXPECT_THROW(config_from_json(doc), ConfigError);
  doc = small_doc("x");
  doc["optimizer"]["method"] = "greedy";
  EXPECT_THROW(config_from_json(doc), ConfigError);
  doc = small_doc("x");
  doc["task"] = 4;
  EXPECT_THROW(config_from_json(doc), ConfigError);
}

TEST(Config, InvariantViolationsAreConfigErrors) {
  json doc = small_doc("x");
  doc["optimizer"]["switch_epoch"] = 12;
  EXPECT_THROW(config_from_json(doc), ConfigError);
  doc = small_doc("x");
  doc["optimizer"]["k"] = 5;
  EXPECT_THROW(config_from_json(doc), ConfigError);
  doc = small_doc("x");
  doc["sweep"]["k_values"] = {0};
  EXPECT_THROW(config_from_json(doc), ConfigError);
  doc = small_doc("x");
  doc["flags"]["binarize_gates"] = false;
  EXPECT_THROW(config_from_json(doc), ConfigError);
}

TEST(Config, LoadConfigReportsMissingAndMalformedFiles) {
  EXPECT_THROW(load_config("/nonexistent/config.json"), IoError);
  const fs::path p = fs::temp_directory_path() / ("bilalora_bad_config_" + std::to_string(getpid()) + ".json");
  std::ofstream(p) << "{ not json";
  EXPECT_THROW(load_config(p.string()), ConfigError);
  fs::remove(p);
}

TEST_F(Commands, PretrainWritesTaskCheckpointAndResolvedConfig) {
  const fs::path base = config_->out_dir;
  EXPECT_TRUE(fs::exists(base / "pretrained.json"));
  EXPECT_TRUE(fs::exists(base / "pretrain_summary.json"));
  EXPECT_TRUE(fs::exists(base / "task" / "task.json"));
  EXPECT_EQ(config_to_json(load_config((base / resolved_config_name("pretrain")).string())), config_to_json(*config_));
}

TEST_F(Commands, PretrainIsBitIdenticalOnRerun) {
  const ExperimentConfig c = derived("pretrain_again");
  ExperimentConfig own = c;
  own.task_dir.clear();
  cmd_pretrain(own);
  EXPECT_EQ(slurp(fs::path(own.out_dir) / "pretrained.json"), slurp(fs::path(config_->out_dir) / "pretrained.json"));
}

TEST_F(Commands, AdaptWritesOneCsvRowPerEpochAndKIndices) {
  const ExperimentConfig c = derived("adapt");
  const AdaptReport r = cmd_adapt(c);
  const fs::path out = c.out_dir;
  EXPECT_EQ(line_count(out / "metrics.csv"), 1 + c.optimizer.epochs);
  const json sel = json::parse(slurp(out / "selection.json"));
  EXPECT_EQ(sel["selection"].size(), c.optimizer.k);
  EXPECT_EQ(sel["selection"].get<std::vector<std::size_t>>(), r.run.selection);
  EXPECT_TRUE(fs::exists(out / "adapted.json"));
  EXPECT_TRUE(fs::exists(out / "summary.json"));
  EXPECT_TRUE(fs::exists(out / resolved_config_name("adapt")));
}

TEST_F(Commands, ResolvedConfigReproducesTheRun) {
  const ExperimentConfig c = derived("first");
  cmd_adapt(c);
  ExperimentConfig again = load_config((fs::path(c.out_dir) / resolved_config_name("adapt")).string());
  again.out_dir = (root_ / "second").string();
  cmd_adapt(again);
  for (const char* f : {"adapted.json", "summary.json", "selection.json"})
    EXPECT_EQ(slurp(fs::path(c.out_dir) / f), slurp(fs::path(again.out_dir) / f)) << f;
}

TEST_F(Commands, AdaptRequiresAPretrainedTask) {
  ExperimentConfig c = derived("missing");
  c.task_dir = (root_ / "nowhere").string();
  EXPECT_THROW(cmd_adapt(c), IoError);
}

TEST_F(Commands, OracleReportsEverySubset) {
  const ExperimentConfig c = derived("oracle");
  const OracleResult o = cmd_oracle(c);
  EXPECT_EQ(o.subsets.size(), 6u);
  EXPECT_EQ(line_count(fs::path(c.out_dir) / "oracle.csv"), 7u);
  const json doc = json::parse(slurp(fs::path(c.out_dir) / "oracle.json"));
  EXPECT_EQ(doc["subsets"].size(), 6u);
  EXPECT_TRUE(doc.contains("planted_rank"));
}

TEST_F(Commands, BaselinesReportFiveMethods) {
  const ExperimentConfig c = derived("baselines");
  EXPECT_EQ(cmd_baselines(c).size(), 5u);
  EXPECT_EQ(line_count(fs::path(c.out_dir) / "baselines.csv"), 6u);
}

TEST_F(Commands, SweepCountsGrowWithK) {
  const ExperimentConfig c = derived("sweep");
  const auto rows = cmd_sweep(c);
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_GT(rows[i].trainable_params, rows[i - 1].trainable_params);
  EXPECT_EQ(json::parse(slurp(fs::path(c.out_dir) / "sweep.json"))["records"].size(), 4u);
}

TEST_F(Commands, EvalIsRepeatableAndLeavesCheckpointUntouched) {
  ExperimentConfig c = derived("eval");
  cmd_adapt(c);
  const std::string before = slurp(c.resolved_checkpoint());
  const EvalReport a = cmd_eval(c);
  const std::string first = slurp(fs::path(c.out_dir) / "eval.json");
  const EvalReport b = cmd_eval(c);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(first, slurp(fs::path(c.out_dir) / "eval.json"));
  EXPECT_EQ(before, slurp(c.resolved_checkpoint()));
}

TEST_F(Commands, EvalRejectsCorruptAndMismatchedCheckpoints) {
  ExperimentConfig c = derived("eval_bad");
  fs::create_directories(c.out_dir);
  c.checkpoint = (fs::path(c.out_dir) / "broken.json").string();
  std::ofstream(c.checkpoint) << "{\"format\": 1";
  EXPECT_THROW(cmd_eval(c), Error);

  ExperimentConfig wide = config_from_json(small_doc(root_ / "wide"));
  wide.task.input_dim = 5;
  wide.task.embed_dim = 6;
  wide.task.pretrain_steps = 1;
  cmd_pretrain(wide);
  c.checkpoint = (root_ / "wide" / "pretrained.json").string();
  EXPECT_THROW(cmd_eval(c), ShapeError);
}

TEST_F(Commands, AlternateAnchorsChangeTheLoss) {
  ExperimentConfig c = derived("anchors");
  const SyntheticTask task = load_task(c.resolved_task_dir());
  fs::create_directories(c.out_dir);
  const fs::path anchors = fs::path(c.out_dir) / "swapped.json";
  // Swapping the anchors reverses the target direction.
  save_anchors(DirectionalLossContext(task.ctx.encoder(), task.ctx.t_neg(), task.ctx.t_pos()), anchors.string());
  c.checkpoint = (fs::path(config_->out_dir) / "pretrained.json").string();
  const double plain = cmd_eval(c).h2c_val;
  c.anchors = anchors.string();
  EXPECT_NEAR(cmd_eval(c).h2c_val, 2.0 - plain, 1e-9);
}

#ifdef BILALORA_CLI_PATH

struct Completed {
  int status = 0;
  std::string out;
  std::string err;
};

Completed run_cli(const std::string& args) {
  const fs::path err = fs::temp_directory_path() / ("bilalora_cli_stderr_" + std::to_string(getpid()) + ".txt");
  const std::string cmd = std::string(BILALORA_CLI_PATH) + " " + args + " 2>" + err.string();
  Completed c;
  FILE* pipe = popen(cmd.c_str(), "r");
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) c.out += buf.data();
  const int raw = pclose(pipe);
  c.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  c.err = slurp(err);
  return c;
}

TEST_F(Commands, CliRunsAdaptAndPrintsJson) {
  const ExperimentConfig c = derived("cli");
  const fs::path cfg = root_ / "cli.json";
  std::ofstream(cfg) << config_to_json(c).dump();
  const Completed r = run_cli("adapt --config " + cfg.string() + " --k 1");
  ASSERT_EQ(r.status, 0) << r.err;
  const json line = json::parse(r.out);
  EXPECT_EQ(line["command"], "adapt");
  EXPECT_EQ(line["selection"].size(), 1u);
  // The flag wins over the file and lands in the resolved config.
  EXPECT_EQ(load_config((fs::path(c.out_dir) / resolved_config_name("adapt")).string()).optimizer.k, 1u);
}

TEST_F(Commands, CliFailuresPrintOneErrorLine) {
  Completed r = run_cli("adapt --out " + (root_ / "cli_err").string() + " --task-dir /nonexistent");
  EXPECT_EQ(r.status, 2);
  json err = json::parse(r.err);
  EXPECT_EQ(err["error"]["code"], "io");
  EXPECT_FALSE(err["error"]["message"].get<std::string>().empty());

  r = run_cli("adapt --k 9");
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(json::parse(r.err)["error"]["code"], "config");

  r = run_cli("adapt --eta-w fast");
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(json::parse(r.err)["error"]["code"], "config");

  r = run_cli("adapt --no-such-flag 1");
  EXPECT_EQ(r.status, 64);
  EXPECT_EQ(json::parse(r.err)["error"]["code"], "usage");

  r = run_cli("");
  EXPECT_EQ(r.status, 64);
}

#endif

}  // namespace
}  // namespace bilalora
