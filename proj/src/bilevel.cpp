#include "bilalora/bilevel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "bilalora/errors.hpp"
#include "bilalora/random.hpp"

namespace bilalora {

HypergradientEstimate hypergradient(const Tensor& grad_alpha_phi, const Tensor& grad_omega_phi,
                                    const Tensor& grad_alpha_f, const Tensor& grad_omega_f, double guard) {
  if (grad_alpha_phi.size() != grad_alpha_f.size()) {
    throw ShapeError("gate gradients differ in length: " + std::to_string(grad_alpha_phi.size()) + " vs " +
                     std::to_string(grad_alpha_f.size()));
  }
  if (grad_omega_phi.size() != grad_omega_f.size()) {
    throw ShapeError("adapter gradients differ in length: " + std::to_string(grad_omega_phi.size()) +
                     " vs " + std::to_string(grad_omega_f.size()));
  }
  HypergradientEstimate est;
  est.g_alpha = grad_alpha_phi;
  est.grad_norm_sq = squared_norm(grad_omega_f);
  if (est.grad_norm_sq < guard) {
    est.guarded = true;
    return est;
  }
  est.projection_coeff = dot(grad_omega_phi, grad_omega_f) / est.grad_norm_sq;
  for (std::size_t i = 0; i < est.g_alpha.size(); ++i) {
    est.g_alpha[i] -= est.projection_coeff * grad_alpha_f[i];
  }
  if (!est.g_alpha.all_finite()) throw NumericError("hypergradient is not finite");
  return est;
}

std::vector<std::size_t> top_k(std::span<const double> gate_raws, std::size_t k) {
  if (k < 1 || k > gate_raws.size()) {
    throw RangeError("top_k: k = " + std::to_string(k) + " outside [1, " + std::to_string(gate_raws.size()) + "]");
  }
  std::vector<std::size_t> order(gate_raws.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return gate_raws[a] > gate_raws[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

std::string phase_name(Phase phase) {
  return phase == Phase::kPositioning ? "positioning" : "finetuning";
}

std::string method_name(PositioningMethod method) {
  return method == PositioningMethod::kBilevel ? "bilevel" : "joint";
}

void BilevelConfig::validate(std::size_t layer_count) const {
  if (!(switch_epoch > 0 && switch_epoch < epochs)) {
    throw ConfigError("switch epoch must satisfy 0 < T_s < T (T_s = " + std::to_string(switch_epoch) +
                      ", T = " + std::to_string(epochs) + ")");
  }
  if (k < 1 || k > layer_count) {
    throw ConfigError("k = " + std::to_string(k) + " must lie in [1, " + std::to_string(layer_count) + "]");
  }
  if (!(eta_w >= 0.0) || !(eta_alpha >= 0.0)) throw ConfigError("step sizes must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(guard > 0.0)) throw ConfigError("guard must be positive");
}

Batch Batch::from_inputs(Tensor inputs) {
  if (inputs.rank() != 2) throw ShapeError("a batch is a matrix of row samples");
  Batch b{inputs, inputs, 0};
  return b;
}

namespace {

Tensor take_rows(const Tensor& m, std::span<const std::size_t> indices) {
  const std::size_t cols = m.dim(1);
  Tensor out({indices.size(), cols});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= m.dim(0)) throw RangeError("row index out of range");
    std::copy_n(m.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * cols), cols,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  return out;
}

}  // namespace

Batch Batch::rows(std::span<const std::size_t> indices) const {
  return Batch{take_rows(inputs, indices), take_rows(entry, indices), entry_layer};
}

LossGradients loss_and_gradients(const Backbone& backbone, const TrainableGroups& groups,
                                 const DirectionalLossContext& ctx, const Batch& batch) {
  Tape tape;
  BoundBackbone bound = backbone.bind(tape, groups);
  NodeRef v_in = embed(tape, ctx.encoder(), tape.leaf(batch.inputs));
  NodeRef out = backbone.forward(tape, bound, tape.leaf(batch.entry), batch.entry_layer);
  BatchLoss loss = batched_h2c(tape, ctx, v_in, embed(tape, ctx.encoder(), out));
  Gradients grads = tape.backward(loss.loss);
  LossGradients result;
  result.loss = tape.value(loss.loss).item();
  result.skipped = loss.skipped;
  result.ids = bound.ids;
  for (std::size_t i = 0; i < bound.trainable.size(); ++i) {
    const NodeRef ref = bound.trainable[i];
    result.grads.push_back(grads.has(ref) ? grads.of(ref) : Tensor(tape.value(ref).shape()));
  }
  return result;
}

double batch_loss(const Backbone& backbone, const DirectionalLossContext& ctx, const Batch& batch) {
  Tensor out = backbone.evaluate(batch.entry, batch.entry_layer);
  return batched_h2c(ctx, batch.inputs, out).loss;
}

BilevelState::BilevelState(Backbone backbone, BilevelConfig config)
    : backbone_(std::move(backbone)), config_(config) {
  config_.validate(backbone_.layer_count());
}

BilevelState BilevelState::for_selection(Backbone backbone, BilevelConfig config,
                                         const std::vector<std::size_t>& selection) {
  BilevelState state(std::move(backbone), config);
  state.epoch_ = state.config_.switch_epoch;
  state.backbone_.apply_selection(selection);
  return state;
}

const std::vector<std::size_t>& BilevelState::select() {
  if (phase() != Phase::kFinetuning) throw ContractError("selection happens after the positioning phase");
  std::vector<double> raws;
  for (const auto& layer : backbone_.layers()) raws.push_back(layer.gate_raw.item());
  backbone_.apply_selection(top_k(raws, config_.k));
  if (!config_.warm_start) backbone_.reset_adapters(derive_seed(config_.seed, "reinit"));
  velocity_.clear();
  return *backbone_.selection();
}

void BilevelState::apply_step(const ParamId& id, const Tensor& grad, double eta) {
  Tensor& p = backbone_.param(id);
  if (config_.momentum == 0.0) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= eta * grad[i];
    return;
  }
  auto it = std::find_if(velocity_.begin(), velocity_.end(), [&](const auto& e) { return e.first == id; });
  if (it == velocity_.end()) {
    velocity_.emplace_back(id, Tensor(p.shape()));
    it = velocity_.end() - 1;
  }
  Tensor& v = it->second;
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = config_.momentum * v[i] + grad[i];
    p[i] -= eta * v[i];
  }
}

namespace {

Tensor flatten(const LossGradients& lg, ParamId::Kind lo, ParamId::Kind hi) {
  std::vector<double> flat;
  for (std::size_t i = 0; i < lg.ids.size(); ++i) {
    const auto kind = lg.ids[i].kind;
    if (kind < lo || kind > hi) continue;
    flat.insert(flat.end(), lg.grads[i].values().begin(), lg.grads[i].values().end());
  }
  if (flat.empty()) flat.push_back(0.0);
  return Tensor::vector(std::move(flat));
}

Tensor omega_part(const LossGradients& lg) { return flatten(lg, ParamId::kLoraA, ParamId::kLoraB); }
Tensor alpha_part(const LossGradients& lg) { return flatten(lg, ParamId::kGate, ParamId::kGate); }

EpochStats positioning_update(BilevelState& state, const DirectionalLossContext& ctx, const Batch& train,
                              const Batch& val) {
  const BilevelConfig& cfg = state.config();
  const TrainableGroups groups{false, true, true};
  EpochStats stats;

  LossGradients f = loss_and_gradients(state.backbone(), groups, ctx, train);
  stats.f_train = f.loss;
  stats.skipped = f.skipped;

  Tensor g_alpha;
  if (cfg.method == PositioningMethod::kBilevel) {
    LossGradients phi = loss_and_gradients(state.backbone(), groups, ctx, val);
    stats.phi_val = phi.loss;
    stats.skipped += phi.skipped;
    stats.estimate = hypergradient(alpha_part(phi), omega_part(phi), alpha_part(f), omega_part(f), cfg.guard);
    g_alpha = stats.estimate->g_alpha;
  } else {
    stats.phi_val = batch_loss(state.backbone(), ctx, val);
    g_alpha = alpha_part(f);
  }

  std::size_t offset = 0;
  for (std::size_t i = 0; i < f.ids.size(); ++i) {
    if (f.ids[i].kind != ParamId::kGate) continue;
    state.apply_step(f.ids[i], Tensor::scalar(g_alpha[offset++]), cfg.eta_alpha);
  }

  if (cfg.method == PositioningMethod::kBilevel) {
    // The adapter step uses the gradient at the updated gates.
    const TrainableGroups lora_only{false, true, false};
    f = loss_and_gradients(state.backbone(), lora_only, ctx, train);
  }
  for (std::size_t i = 0; i < f.ids.size(); ++i) {
    if (f.ids[i].kind == ParamId::kLoraA || f.ids[i].kind == ParamId::kLoraB) {
      state.apply_step(f.ids[i], f.grads[i], cfg.eta_w);
    }
  }
  return stats;
}

EpochStats finetune_update(BilevelState& state, const DirectionalLossContext& ctx, const Batch& train,
                           const Batch* val) {
  EpochStats stats;
  if (val) stats.phi_val = batch_loss(state.backbone(), ctx, *val);
  LossGradients f = loss_and_gradients(state.backbone(), TrainableGroups{false, true, false}, ctx, train);
  stats.f_train = f.loss;
  stats.skipped = f.skipped;
  for (std::size_t i = 0; i < f.ids.size(); ++i) state.apply_step(f.ids[i], f.grads[i], state.config().eta_w);
  return stats;
}

}  // namespace

EpochStats positioning_epoch(BilevelState& state, const DirectionalLossContext& ctx, const Batch& train,
                             const Batch& val) {
  if (state.phase() != Phase::kPositioning) throw ContractError("positioning epoch outside the positioning phase");
  EpochStats stats = positioning_update(state, ctx, train, val);
  state.advance();
  return stats;
}

EpochStats finetune_epoch(BilevelState& state, const DirectionalLossContext& ctx, const Batch& train,
                          const Batch* val) {
  if (state.phase() != Phase::kFinetuning) throw ContractError("fine-tuning epoch during positioning");
  if (!state.selected()) throw ContractError("fine-tuning requires an applied selection");
  EpochStats stats = finetune_update(state, ctx, train, val);
  state.advance();
  return stats;
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

// Draws `size` distinct rows (all rows when size is 0 or too large).
std::vector<std::size_t> draw_rows(Rng& rng, std::size_t n, std::size_t size) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (size == 0 || size >= n) return idx;
  for (std::size_t i = 0; i < size; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(size);
  return idx;
}

// Consecutive mini-batches of a shuffled split.
std::vector<std::vector<std::size_t>> partition_rows(Rng& rng, std::size_t n, std::size_t size) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
  if (size == 0 || size >= n) return {idx};
  std::vector<std::vector<std::size_t>> parts;
  for (std::size_t s = 0; s < n; s += size) {
    parts.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + size)));
  }
  return parts;
}

std::vector<double> effective_gates(const Backbone& b) {
  std::vector<double> g;
  for (std::size_t l = 0; l < b.layer_count(); ++l) {
    switch (b.gate_mode(l)) {
      case GateMode::kLearned: g.push_back(b.layer(l).gate()); break;
      case GateMode::kOn: g.push_back(1.0); break;
      case GateMode::kOff: g.push_back(0.0); break;
    }
  }
  return g;
}

Batch prefix_batch(const Backbone& b, const Tensor& inputs) {
  Batch batch = Batch::from_inputs(inputs);
  batch.entry_layer = std::min(b.first_active_layer(), b.layer_count() - 1);
  batch.entry = b.evaluate(inputs, 0, batch.entry_layer);
  return batch;
}

void record(RunResult& result, const BilevelState& state, Phase phase, const EpochStats& stats,
            Clock::time_point start) {
  result.history.push_back({state.epoch() - 1, phase, stats.f_train, stats.phi_val,
                            effective_gates(state.backbone()), elapsed_ms(start)});
}

// Epoch driver shared by both phases. `update` performs one parameter update
// on a (train, val) pair of batches.
template <typename Update>
void epoch_loop(BilevelState& state, const Batch& train, const Batch& val, std::size_t batch_size,
                Rng& rng, std::size_t epochs, Phase phase, RunResult& result, Clock::time_point start,
                Update update) {
  const BilevelConfig& cfg = state.config();
  for (std::size_t e = 0; e < epochs; ++e) {
    EpochStats stats;
    if (cfg.per_batch_updates) {
      const auto parts = partition_rows(rng, train.size(), batch_size);
      double f_sum = 0.0, phi_sum = 0.0;
      for (const auto& part : parts) {
        const Batch vb = val.rows(draw_rows(rng, val.size(), batch_size));
        EpochStats s = update(train.rows(part), vb);
        f_sum += s.f_train;
        phi_sum += s.phi_val;
        stats.skipped += s.skipped;
        stats.estimate = s.estimate;
      }
      stats.f_train = f_sum / static_cast<double>(parts.size());
      stats.phi_val = phi_sum / static_cast<double>(parts.size());
    } else {
      const Batch tb = train.rows(draw_rows(rng, train.size(), batch_size));
      const Batch vb = val.rows(draw_rows(rng, val.size(), batch_size));
      stats = update(tb, vb);
    }
    state.advance();
    record(result, state, phase, stats, start);
  }
}

void finetune_loop(BilevelState& state, const DirectionalLossContext& ctx, const DataSplits& data, Rng& rng,
                   std::size_t steps, RunResult& result, Clock::time_point start) {
  if (!state.selected()) throw ContractError("fine-tuning requires an applied selection");
  const Batch train = prefix_batch(state.backbone(), data.train);
  const Batch val = prefix_batch(state.backbone(), data.val);
  epoch_loop(state, train, val, state.config().finetune_batch_size, rng, steps, Phase::kFinetuning, result,
             start, [&](const Batch& tb, const Batch& vb) { return finetune_update(state, ctx, tb, &vb); });
}

void finish(RunResult& result, const BilevelState& state, const DirectionalLossContext& ctx,
            const DataSplits& data, Clock::time_point start) {
  result.backbone = state.backbone();
  if (state.backbone().selection()) result.selection = *state.backbone().selection();
  result.wallclock_ms = elapsed_ms(start);
  result.final_train_loss = batch_loss(result.backbone, ctx, Batch::from_inputs(data.train));
  result.final_val_loss = batch_loss(result.backbone, ctx, Batch::from_inputs(data.val));
}

}  // namespace

RunResult run(const BilevelConfig& config, Backbone backbone, const DirectionalLossContext& ctx,
              const DataSplits& data) {
  const auto start = Clock::now();
  BilevelState state(std::move(backbone), config);
  state.backbone().clear_selection();
  Rng rng(config.seed, "batching");
  RunResult result;
  const Batch train = Batch::from_inputs(data.train);
  const Batch val = Batch::from_inputs(data.val);

  epoch_loop(state, train, val, config.batch_size, rng, config.switch_epoch, Phase::kPositioning, result, start,
             [&](const Batch& tb, const Batch& vb) { return positioning_update(state, ctx, tb, vb); });
  state.select();
  finetune_loop(state, ctx, data, rng, config.epochs - config.switch_epoch, result, start);
  finish(result, state, ctx, data, start);
  return result;
}

RunResult run_selection(const BilevelConfig& config, Backbone backbone, const DirectionalLossContext& ctx,
                        const DataSplits& data, const std::vector<std::size_t>& selection,
                        std::size_t steps) {
  const auto start = Clock::now();
  BilevelConfig cfg = config;
  cfg.epochs = cfg.switch_epoch + steps;
  BilevelState state = BilevelState::for_selection(std::move(backbone), cfg, selection);
  Rng rng(config.seed, "batching");
  RunResult result;
  finetune_loop(state, ctx, data, rng, steps, result, start);
  finish(result, state, ctx, data, start);
  return result;
}

RunResult run_full_finetune(const BilevelConfig& config, Backbone backbone, const DirectionalLossContext& ctx,
                            const DataSplits& data) {
  const auto start = Clock::now();
  BilevelState state = BilevelState::for_selection(std::move(backbone), config, {});
  Rng rng(config.seed, "batching");
  RunResult result;
  const Batch train = Batch::from_inputs(data.train);
  const Batch val = Batch::from_inputs(data.val);
  const TrainableGroups groups{true, false, false};
  epoch_loop(state, train, val, config.finetune_batch_size, rng, config.epochs, Phase::kFinetuning, result, start,
             [&](const Batch& tb, const Batch& vb) {
               EpochStats stats;
               stats.phi_val = batch_loss(state.backbone(), ctx, vb);
               LossGradients f = loss_and_gradients(state.backbone(), groups, ctx, tb);
               stats.f_train = f.loss;
               stats.skipped = f.skipped;
               for (std::size_t i = 0; i < f.ids.size(); ++i) state.apply_step(f.ids[i], f.grads[i], config.eta_w);
               return stats;
             });
  finish(result, state, ctx, data, start);
  return result;
}

void write_history_csv(const std::vector<EpochRecord>& history, std::size_t layer_count,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "epoch,phase,f_train,phi_val";
  for (std::size_t l = 0; l < layer_count; ++l) out << ",gate_" << l;
  out << ",wallclock_ms\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : history) {
    out << r.epoch << ',' << phase_name(r.phase) << ',' << num(r.f_train) << ',' << num(r.phi_val);
    for (double g : r.gates) out << ',' << num(g);
    std::snprintf(buf, sizeof buf, "%.3f", r.wallclock_ms);
    out << ',' << buf << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace bilalora
