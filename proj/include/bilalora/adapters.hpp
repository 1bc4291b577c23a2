#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bilalora/tape.hpp"
#include "bilalora/tensor.hpp"

namespace bilalora {

inline constexpr std::size_t kDefaultRank = 8;
inline constexpr double kDefaultGamma = 2.0;

double sigmoid(double x);

// A frozen linear map with a gated low-rank increment:
//   W' = W0 + sigmoid(gate_raw) * gamma * B * A.
struct GatedLoRALayer {
  Tensor weight;    // W0 [d_out x d_in], frozen
  Tensor bias;      // [d_out], frozen
  Tensor lora_a;    // [rank x d_in]
  Tensor lora_b;    // [d_out x rank]
  Tensor gate_raw;  // scalar, pre-sigmoid
  double gamma = kDefaultGamma;

  std::size_t d_in() const { return weight.dim(1); }
  std::size_t d_out() const { return weight.dim(0); }
  std::size_t rank() const { return lora_a.dim(0); }
  double gate() const { return sigmoid(gate_raw.item()); }

  // Dense W0 + gate * gamma * B * A, evaluated with the given gate value.
  Tensor effective_weight(double gate_value) const;
};

// Wraps an existing frozen weight with a fresh adapter: A ~ U(-1/sqrt(d_in),
// 1/sqrt(d_in)) drawn from `seed`, B = 0, gate_raw = 0.
GatedLoRALayer init_adapter(Tensor weight, Tensor bias, std::size_t rank, double gamma,
                            std::uint64_t seed);

// How a layer's gate enters the forward pass.
enum class GateMode {
  kLearned,  // sigmoid(gate_raw)
  kOn,       // fixed at 1
  kOff,      // fixed at 0; the increment is skipped entirely
};

// Tape nodes for one layer's parameters. `gate` is unset unless the gate is
// learned.
struct LayerNodes {
  NodeRef weight, bias, lora_a, lora_b;
  std::optional<NodeRef> gate;
  GateMode mode = GateMode::kLearned;
  double gamma = kDefaultGamma;
};

// Records one layer on the tape. `x` is either a single input [d_in] or a
// batch [n x d_in]; the result has matching leading shape.
NodeRef forward(Tape& tape, const LayerNodes& layer, NodeRef x);

// Convenience evaluation of a single layer with its learned gate, no
// gradients.
Tensor forward(const GatedLoRALayer& layer, const Tensor& x);

enum class ParamGroup { kFrozen, kLora, kGates };

struct ParamId {
  std::size_t layer;
  enum Kind { kWeight, kBias, kLoraA, kLoraB, kGate } kind;
  friend bool operator==(const ParamId&, const ParamId&) = default;
};

// Which parameter groups become trainable leaves when a backbone is bound to
// a tape.
struct TrainableGroups {
  bool frozen = false;
  bool lora = true;
  bool gates = true;
};

struct BoundBackbone {
  std::vector<LayerNodes> layers;
  // Trainable leaves in a fixed order, aligned with `ids`.
  std::vector<NodeRef> trainable;
  std::vector<ParamId> ids;
};

// Stack of gated layers with rectified-linear activations between them; the
// last layer is linear. Parameters split into frozen (W0, bias), lora (A, B)
// and gates.
class Backbone {
 public:
  Backbone() = default;
  explicit Backbone(std::vector<GatedLoRALayer> layers);

  // He-initialized W0, zero biases, fresh adapters. `dims` lists the input
  // width followed by every layer's output width.
  static Backbone create(const std::vector<std::size_t>& dims, std::size_t rank, double gamma,
                         std::uint64_t seed);

  std::size_t layer_count() const { return layers_.size(); }
  const GatedLoRALayer& layer(std::size_t i) const { return layers_.at(i); }
  GatedLoRALayer& layer(std::size_t i) { return layers_.at(i); }
  const std::vector<GatedLoRALayer>& layers() const { return layers_; }
  std::size_t input_dim() const { return layers_.front().d_in(); }
  std::size_t output_dim() const { return layers_.back().d_out(); }

  std::vector<ParamId> param_ids(ParamGroup group) const;
  std::vector<Tensor*> collect_params(ParamGroup group);
  std::vector<const Tensor*> collect_params(ParamGroup group) const;
  Tensor& param(const ParamId& id);
  const Tensor& param(const ParamId& id) const;

  // Fixes gates of `selected` layers at 1 and all others at 0. Adapters of
  // unselected layers leave the trainable set.
  void apply_selection(const std::vector<std::size_t>& selected);
  void clear_selection();
  const std::optional<std::vector<std::size_t>>& selection() const { return selection_; }
  GateMode gate_mode(std::size_t layer) const;
  bool adapter_trainable(std::size_t layer) const;

  // First layer whose output can depend on trainable adapter parameters,
  // or layer_count() if none.
  std::size_t first_active_layer() const;

  // Re-draws A and zeroes B for every adapter from `seed`, keeping gates.
  void reset_adapters(std::uint64_t seed);

  BoundBackbone bind(Tape& tape, const TrainableGroups& groups) const;

  // Records layers [begin, layer_count()) applied to `x`.
  NodeRef forward(Tape& tape, const BoundBackbone& bound, NodeRef x, std::size_t begin = 0) const;

  // Output of layers [begin, end) without recording gradients. Rows of
  // `x` are samples.
  Tensor evaluate(const Tensor& x, std::size_t begin = 0,
                  std::optional<std::size_t> end = std::nullopt) const;

  std::size_t frozen_param_count() const;
  std::size_t lora_param_count() const;
  std::size_t gate_param_count() const { return layers_.size(); }
  std::size_t total_param_count() const;
  // Adapter parameters of layers that are trainable under the current mode.
  std::size_t trainable_lora_count() const;

  friend bool operator==(const Backbone& a, const Backbone& b);

 private:
  std::vector<GatedLoRALayer> layers_;
  std::optional<std::vector<std::size_t>> selection_;
};

// Trainable fraction of a selection: selected adapter parameters over all
// backbone parameters (frozen, adapters and gates).
double selection_param_fraction(const Backbone& backbone, const std::vector<std::size_t>& selected);

// Self-describing JSON checkpoint. Doubles round-trip exactly.
void save_checkpoint(const Backbone& backbone, const std::string& path);
Backbone load_checkpoint(const std::string& path);
std::string checkpoint_to_string(const Backbone& backbone);
Backbone checkpoint_from_string(const std::string& text);

}  // namespace bilalora
