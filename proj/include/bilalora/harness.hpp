#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bilalora/adapters.hpp"
#include "bilalora/bilevel.hpp"
#include "bilalora/semloss.hpp"

namespace bilalora {

struct TaskConfig {
  std::size_t layer_count = 6;
  std::size_t width = 64;
  std::size_t input_dim = 16;
  std::size_t embed_dim = 32;
  std::vector<std::size_t> planted{2, 3, 5};
  double shift_magnitude = 2.0;
  // Fraction of a planted layer's units whose pre-activation is shifted.
  double unit_fraction = 0.5;
  double input_scale = 0.5;
  double reference_offset = 3.0;
  std::size_t source_samples = 1024;
  std::size_t target_samples = 256;
  std::size_t pretrain_steps = 2000;
  std::size_t pretrain_batch = 128;
  double pretrain_lr = 1e-2;
  double pretrain_final_lr = 1e-5;
  // make_task fails when the source loss ends above this.
  double pretrain_threshold = 1e-3;
  std::size_t rank = kDefaultRank;
  double gamma = kDefaultGamma;
  std::uint64_t seed = 0;

  void validate() const;
};

// Source regression problem and the pretrained backbone fit to it.
struct PretrainResult {
  Backbone backbone;
  Tensor source_inputs;
  Tensor source_targets;
  double source_loss = 0.0;
};

// Fits a fresh backbone to the smooth source mapping with Adam and a cosine
// learning-rate schedule. Throws ConvergenceError above the threshold.
PretrainResult pretrain(const TaskConfig& config);

// The backbone fit during pretraining defines the target mapping. The model
// handed to adaptation (`pretrained`) is that fit with a rank-one shift in
// each planted layer, so undoing the shifts in exactly those layers recovers
// the target.
struct SyntheticTask {
  Backbone pretrained;
  Backbone target_model;
  Tensor source_inputs;
  Tensor source_targets;
  Tensor target_train;
  Tensor target_val;
  std::vector<std::size_t> planted;
  DirectionalLossContext ctx;
  double pretrain_loss = 0.0;

  DataSplits splits() const { return {target_train, target_val}; }
};

SyntheticTask make_task(const TaskConfig& config);
// Builds the target side of a task around an already pretrained backbone.
SyntheticTask make_task(const TaskConfig& config, const PretrainResult& pretrained);

double mean_squared_error(const Tensor& a, const Tensor& b);

struct OracleResult {
  std::vector<std::vector<std::size_t>> subsets;  // lexicographic order
  std::vector<double> scores;                     // validation loss per subset
  std::vector<std::size_t> ranking;               // subset indices, best first
  const std::vector<std::size_t>& best_subset() const { return subsets.at(ranking.front()); }
  double score_of(const std::vector<std::size_t>& subset) const;
};

inline constexpr std::size_t kOracleSubsetLimit = 500;

std::vector<std::vector<std::size_t>> k_subsets(std::size_t n, std::size_t k);
std::size_t binomial(std::size_t n, std::size_t k);

// Fine-tunes fresh adapters on every k-subset for `budget` steps and scores
// each on the validation split.
OracleResult brute_force_oracle(const SyntheticTask& task, const BilevelConfig& config, std::size_t k,
                                std::size_t budget);

struct SelectionReport {
  std::size_t rank = 0;  // 1-based; ties share the better rank
  double gap = 0.0;      // (loss - best) / best
};

SelectionReport evaluate_selection(const std::vector<std::size_t>& selection, const OracleResult& oracle);

struct BaselineRow {
  std::string method;
  std::vector<std::size_t> selection;
  double val_loss = 0.0;
  double train_loss = 0.0;
};

// manual-first-k, manual-last-k, random-k, joint, bilevel. Every method
// fine-tunes its selection for T - T_s steps.
std::vector<BaselineRow> baselines(const SyntheticTask& task, const BilevelConfig& config);

struct SweepRow {
  std::size_t k = 0;
  std::vector<std::size_t> selection;
  double val_loss = 0.0;
  std::size_t trainable_params = 0;
};

std::vector<SweepRow> layer_count_sweep(const SyntheticTask& task, const BilevelConfig& config,
                                        const std::vector<std::size_t>& k_values);

// Task persistence: JSON manifest plus raw little-endian float64 blobs.
void save_task(const SyntheticTask& task, const TaskConfig& config, const std::string& dir);
SyntheticTask load_task(const std::string& dir);

}  // namespace bilalora
