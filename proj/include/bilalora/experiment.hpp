#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bilalora/bilevel.hpp"
#include "bilalora/harness.hpp"
#include "json.hpp"

namespace bilalora {

// Everything a command needs. One seed feeds the task, initialization and
// batching streams.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  TaskConfig task;
  BilevelConfig optimizer;
  std::size_t oracle_budget = 200;
  std::vector<std::size_t> sweep_k{1, 2, 3, 4, 5, 6};
  bool binarize_gates = true;
  // adapt trains every frozen weight directly instead of running the
  // two-stage adapter schedule.
  bool full_finetune = false;
  std::string out_dir = "out";
  std::string task_dir;    // defaults to <out_dir>/task
  std::string checkpoint;  // eval input; defaults to <out_dir>/adapted.json
  std::string anchors;     // alternate anchor file for the task's encoder

  std::string resolved_task_dir() const;
  std::string resolved_checkpoint() const;
  // Pushes the shared seed into the task and optimizer sections and checks
  // every invariant. Throws ConfigError.
  void finalize();
};

nlohmann::json config_to_json(const ExperimentConfig& config);
// Strict: unknown keys and wrong types raise ConfigError. Missing keys keep
// their defaults.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::string& path);
// <out_dir>/resolved_config_<command>.json, so commands sharing an output
// directory keep their own record.
std::string resolved_config_name(const std::string& command);
void write_resolved_config(const ExperimentConfig& config, const std::string& command);

struct PretrainReport {
  double source_loss = 0.0;
  double pretrained_val_loss = 0.0;
  double target_val_loss = 0.0;
  std::vector<std::size_t> planted;
};

struct AdaptReport {
  RunResult run;
  double pretrained_val_loss = 0.0;
};

struct EvalReport {
  double h2c_val = 0.0;
  double h2c_train = 0.0;
  double target_mse_val = 0.0;
  double source_mse = 0.0;
  std::size_t skipped = 0;

  nlohmann::json to_json() const;
};

// Commands. Each writes its outputs and its resolved config into out_dir.
PretrainReport cmd_pretrain(const ExperimentConfig& config);
AdaptReport cmd_adapt(const ExperimentConfig& config);
OracleResult cmd_oracle(const ExperimentConfig& config);
std::vector<BaselineRow> cmd_baselines(const ExperimentConfig& config);
std::vector<SweepRow> cmd_sweep(const ExperimentConfig& config);
EvalReport cmd_eval(const ExperimentConfig& config);

// Loss report for any backbone on a task, without changing parameters.
EvalReport evaluate_backbone(const Backbone& backbone, const SyntheticTask& task,
                             const DirectionalLossContext& ctx);

}  // namespace bilalora
