#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bilalora/adapters.hpp"
#include "bilalora/semloss.hpp"

namespace bilalora {

inline constexpr double kStationarityGuard = 1e-12;

// First-order estimate of the gate hypergradient
//   g = d_alpha phi - (<d_omega phi, d_omega f> / |d_omega f|^2) d_alpha f.
struct HypergradientEstimate {
  Tensor g_alpha;
  double projection_coeff = 0.0;
  double grad_norm_sq = 0.0;
  // True when |d_omega f|^2 fell below the guard and the correction was dropped.
  bool guarded = false;
};

HypergradientEstimate hypergradient(const Tensor& grad_alpha_phi, const Tensor& grad_omega_phi,
                                    const Tensor& grad_alpha_f, const Tensor& grad_omega_f,
                                    double guard = kStationarityGuard);

// Indices of the k largest values, ties to the lower index, sorted ascending.
std::vector<std::size_t> top_k(std::span<const double> gate_raws, std::size_t k);

enum class Phase { kPositioning, kFinetuning };
enum class PositioningMethod {
  kBilevel,  // gates follow the hypergradient of the validation loss
  kJoint,    // gates and adapters descend the training loss together
};

std::string phase_name(Phase phase);
std::string method_name(PositioningMethod method);

struct BilevelConfig {
  double eta_w = 0.4;
  double eta_alpha = 1e-2;
  std::size_t epochs = 300;        // T
  std::size_t switch_epoch = 150;  // T_s
  std::size_t k = 3;
  double guard = kStationarityGuard;
  double momentum = 0.0;  // 0 disables
  // Rows per positioning batch; 0 uses the whole split.
  std::size_t batch_size = 16;
  // Rows per fine-tuning batch; 0 uses the whole split.
  std::size_t finetune_batch_size = 0;
  // Sweep every mini-batch of the split inside one epoch instead of a
  // single update.
  bool per_batch_updates = false;
  bool warm_start = true;
  PositioningMethod method = PositioningMethod::kBilevel;
  std::uint64_t seed = 0;

  // Throws ConfigError unless 0 < T_s < T and 1 <= k <= layer_count.
  void validate(std::size_t layer_count) const;
};

// Rows of a split, optionally advanced through a frozen prefix: `entry`
// holds the activations entering layer `entry_layer` for the same rows as
// `inputs`.
struct Batch {
  Tensor inputs;
  Tensor entry;
  std::size_t entry_layer = 0;

  static Batch from_inputs(Tensor inputs);
  Batch rows(std::span<const std::size_t> indices) const;
  std::size_t size() const { return inputs.dim(0); }
};

struct LossGradients {
  double loss = 0.0;
  std::size_t skipped = 0;
  std::vector<ParamId> ids;
  std::vector<Tensor> grads;
};

// Directional loss of the backbone on a batch plus gradients for every
// parameter made trainable by `groups`.
LossGradients loss_and_gradients(const Backbone& backbone, const TrainableGroups& groups,
                                 const DirectionalLossContext& ctx, const Batch& batch);
double batch_loss(const Backbone& backbone, const DirectionalLossContext& ctx, const Batch& batch);

class BilevelState {
 public:
  BilevelState(Backbone backbone, BilevelConfig config);
  // Starts directly in the fine-tuning phase with a fixed selection.
  static BilevelState for_selection(Backbone backbone, BilevelConfig config,
                                    const std::vector<std::size_t>& selection);

  const Backbone& backbone() const { return backbone_; }
  Backbone& backbone() { return backbone_; }
  const BilevelConfig& config() const { return config_; }
  std::size_t epoch() const { return epoch_; }
  Phase phase() const { return epoch_ < config_.switch_epoch ? Phase::kPositioning : Phase::kFinetuning; }

  // Selects top-k gates, binarizes them and optionally re-initializes the
  // adapters. Requires the positioning phase to be over.
  const std::vector<std::size_t>& select();
  bool selected() const { return backbone_.selection().has_value(); }

  // Parameter step with the configured momentum; buffers are keyed by
  // parameter id.
  void apply_step(const ParamId& id, const Tensor& grad, double eta);
  void advance() { ++epoch_; }

 private:
  Backbone backbone_;
  BilevelConfig config_;
  std::size_t epoch_ = 0;
  std::vector<std::pair<ParamId, Tensor>> velocity_;
};

struct EpochStats {
  double f_train = 0.0;
  double phi_val = 0.0;
  std::size_t skipped = 0;
  std::optional<HypergradientEstimate> estimate;
};

// One gate update followed by one adapter update. The adapter gradient is
// taken at the updated gates.
EpochStats positioning_epoch(BilevelState& state, const DirectionalLossContext& ctx,
                             const Batch& train, const Batch& val);

// One adapter update under the fixed selection. `val` is only evaluated.
EpochStats finetune_epoch(BilevelState& state, const DirectionalLossContext& ctx, const Batch& train,
                          const Batch* val = nullptr);

struct DataSplits {
  Tensor train;
  Tensor val;
};

struct EpochRecord {
  std::size_t epoch = 0;
  Phase phase = Phase::kPositioning;
  double f_train = 0.0;
  double phi_val = 0.0;
  std::vector<double> gates;  // effective gate values
  double wallclock_ms = 0.0;
};

struct RunResult {
  Backbone backbone;
  std::vector<std::size_t> selection;
  std::vector<EpochRecord> history;
  double final_train_loss = 0.0;
  double final_val_loss = 0.0;
  double wallclock_ms = 0.0;
};

// Positioning for T_s epochs, top-k selection, then T - T_s fine-tuning
// epochs. Mini-batches come from the "batching" stream of config.seed.
RunResult run(const BilevelConfig& config, Backbone backbone, const DirectionalLossContext& ctx,
              const DataSplits& data);

// Fine-tunes a fixed selection for `steps` epochs with fresh bookkeeping.
RunResult run_selection(const BilevelConfig& config, Backbone backbone,
                        const DirectionalLossContext& ctx, const DataSplits& data,
                        const std::vector<std::size_t>& selection, std::size_t steps);

// Trains every frozen weight and bias directly (no adapters) for
// config.epochs epochs.
RunResult run_full_finetune(const BilevelConfig& config, Backbone backbone,
                            const DirectionalLossContext& ctx, const DataSplits& data);

void write_history_csv(const std::vector<EpochRecord>& history, std::size_t layer_count,
                       const std::string& path);

}  // namespace bilalora
