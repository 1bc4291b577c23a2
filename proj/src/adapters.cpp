#include "bilalora/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "bilalora/errors.hpp"
#include "bilalora/random.hpp"
#include "json.hpp"

namespace bilalora {

using nlohmann::json;

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor GatedLoRALayer::effective_weight(double gate_value) const {
  Tensor ba({d_out(), d_in()});
  gemm_nn(lora_b.data(), lora_a.data(), ba.data(), d_out(), rank(), d_in());
  Tensor w = weight;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += gate_value * gamma * ba[i];
  return w;
}

GatedLoRALayer init_adapter(Tensor weight, Tensor bias, std::size_t rank, double gamma,
                            std::uint64_t seed) {
  if (weight.rank() != 2) throw ShapeError("adapter weight must be a matrix");
  const std::size_t d_out = weight.dim(0), d_in = weight.dim(1);
  if (bias.rank() != 1 || bias.size() != d_out) throw ShapeError("bias does not match weight rows");
  if (rank == 0 || rank >= std::min(d_in, d_out)) {
    throw RangeError("adapter rank " + std::to_string(rank) + " must be in [1, min(d_in, d_out)) = [1, " +
                     std::to_string(std::min(d_in, d_out)) + ")");
  }
  if (!(gamma > 0.0)) throw RangeError("adapter scaling must be positive");
  GatedLoRALayer layer{std::move(weight), std::move(bias), Tensor({rank, d_in}),
                       Tensor({d_out, rank}), Tensor::scalar(0.0), gamma};
  Rng rng(seed, "adapter");
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (auto& v : layer.lora_a.data()) v = rng.uniform(-bound, bound);
  return layer;
}

NodeRef forward(Tape& tape, const LayerNodes& layer, NodeRef x) {
  const bool single = tape.value(x).rank() == 1;
  NodeRef frozen = single ? tape.add(tape.matvec(layer.weight, x), layer.bias)
                          : tape.add_bias(tape.matmul_nt(x, layer.weight), layer.bias);
  if (layer.mode == GateMode::kOff) return frozen;
  NodeRef low = single ? tape.matvec(layer.lora_a, x) : tape.matmul_nt(x, layer.lora_a);
  NodeRef inc = single ? tape.matvec(layer.lora_b, low) : tape.matmul_nt(low, layer.lora_b);
  NodeRef scaled = tape.scale(inc, layer.gamma);
  if (layer.mode == GateMode::kLearned) {
    if (!layer.gate) throw ContractError("learned gate mode requires a gate node");
    scaled = tape.mul(tape.sigmoid(*layer.gate), scaled);
  }
  return tape.add(frozen, scaled);
}

Tensor forward(const GatedLoRALayer& layer, const Tensor& x) {
  Tape tape;
  LayerNodes nodes{tape.leaf(layer.weight), tape.leaf(layer.bias), tape.leaf(layer.lora_a),
                   tape.leaf(layer.lora_b), tape.leaf(layer.gate_raw), GateMode::kLearned,
                   layer.gamma};
  return tape.value(forward(tape, nodes, tape.leaf(x)));
}

Backbone::Backbone(std::vector<GatedLoRALayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ContractError("backbone needs at least one layer");
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    if (layers_[i].d_in() != layers_[i - 1].d_out()) {
      throw ShapeError("layer " + std::to_string(i) + " input width does not match previous output");
    }
  }
}

Backbone Backbone::create(const std::vector<std::size_t>& dims, std::size_t rank, double gamma,
                          std::uint64_t seed) {
  if (dims.size() < 2) throw ContractError("backbone dims need an input and at least one layer");
  Rng rng(seed, "init");
  std::vector<GatedLoRALayer> layers;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t d_in = dims[l], d_out = dims[l + 1];
    Tensor w({d_out, d_in});
    const double stddev = std::sqrt(2.0 / static_cast<double>(d_in));
    for (auto& v : w.data()) v = rng.normal(0.0, stddev);
    layers.push_back(init_adapter(std::move(w), Tensor({d_out}), rank, gamma, rng.next_seed()));
  }
  return Backbone(std::move(layers));
}

std::vector<ParamId> Backbone::param_ids(ParamGroup group) const {
  std::vector<ParamId> ids;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    switch (group) {
      case ParamGroup::kFrozen:
        ids.push_back({l, ParamId::kWeight});
        ids.push_back({l, ParamId::kBias});
        break;
      case ParamGroup::kLora:
        ids.push_back({l, ParamId::kLoraA});
        ids.push_back({l, ParamId::kLoraB});
        break;
      case ParamGroup::kGates: ids.push_back({l, ParamId::kGate}); break;
    }
  }
  return ids;
}

Tensor& Backbone::param(const ParamId& id) {
  return const_cast<Tensor&>(std::as_const(*this).param(id));
}

const Tensor& Backbone::param(const ParamId& id) const {
  const GatedLoRALayer& l = layers_.at(id.layer);
  switch (id.kind) {
    case ParamId::kWeight: return l.weight;
    case ParamId::kBias: return l.bias;
    case ParamId::kLoraA: return l.lora_a;
    case ParamId::kLoraB: return l.lora_b;
    case ParamId::kGate: return l.gate_raw;
  }
  throw ContractError("unknown parameter kind");
}

std::vector<Tensor*> Backbone::collect_params(ParamGroup group) {
  std::vector<Tensor*> out;
  for (const auto& id : param_ids(group)) out.push_back(&param(id));
  return out;
}

std::vector<const Tensor*> Backbone::collect_params(ParamGroup group) const {
  std::vector<const Tensor*> out;
  for (const auto& id : param_ids(group)) out.push_back(&param(id));
  return out;
}

void Backbone::apply_selection(const std::vector<std::size_t>& selected) {
  std::vector<std::size_t> sorted = selected;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ContractError("selection lists a layer twice");
  }
  for (auto l : sorted) {
    if (l >= layers_.size()) {
      throw RangeError("selected layer " + std::to_string(l) + " out of range for " +
                       std::to_string(layers_.size()) + " layers");
    }
  }
  selection_ = std::move(sorted);
}

void Backbone::clear_selection() { selection_.reset(); }

GateMode Backbone::gate_mode(std::size_t layer) const {
  if (!selection_) return GateMode::kLearned;
  return std::binary_search(selection_->begin(), selection_->end(), layer) ? GateMode::kOn
                                                                          : GateMode::kOff;
}

bool Backbone::adapter_trainable(std::size_t layer) const {
  return gate_mode(layer) != GateMode::kOff;
}

std::size_t Backbone::first_active_layer() const {
  for (std::size_t l = 0; l < layers_.size(); ++l)
    if (adapter_trainable(l)) return l;
  return layers_.size();
}

void Backbone::reset_adapters(std::uint64_t seed) {
  Rng rng(seed, "init");
  for (auto& layer : layers_) {
    GatedLoRALayer fresh = init_adapter(layer.weight, layer.bias, layer.rank(), layer.gamma, rng.next_seed());
    layer.lora_a = std::move(fresh.lora_a);
    layer.lora_b = std::move(fresh.lora_b);
  }
}

BoundBackbone Backbone::bind(Tape& tape, const TrainableGroups& groups) const {
  BoundBackbone bound;
  auto add = [&](const Tensor& value, bool trainable, ParamId id) {
    NodeRef ref = tape.leaf(value, trainable);
    if (trainable) {
      bound.trainable.push_back(ref);
      bound.ids.push_back(id);
    }
    return ref;
  };
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const GatedLoRALayer& layer = layers_[l];
    const GateMode mode = gate_mode(l);
    LayerNodes nodes{};
    nodes.mode = mode;
    nodes.gamma = layer.gamma;
    nodes.weight = add(layer.weight, groups.frozen, {l, ParamId::kWeight});
    nodes.bias = add(layer.bias, groups.frozen, {l, ParamId::kBias});
    const bool lora = groups.lora && mode != GateMode::kOff;
    nodes.lora_a = add(layer.lora_a, lora, {l, ParamId::kLoraA});
    nodes.lora_b = add(layer.lora_b, lora, {l, ParamId::kLoraB});
    if (mode == GateMode::kLearned) {
      nodes.gate = add(layer.gate_raw, groups.gates, {l, ParamId::kGate});
    }
    bound.layers.push_back(nodes);
  }
  return bound;
}

NodeRef Backbone::forward(Tape& tape, const BoundBackbone& bound, NodeRef x, std::size_t begin) const {
  if (bound.layers.size() != layers_.size()) throw ContractError("bound backbone has wrong layer count");
  const Tensor& in = tape.value(x);
  if (in.shape().back() != layers_.at(begin).d_in()) {
    throw ShapeError("input width " + std::to_string(in.shape().back()) + " does not match layer " +
                     std::to_string(begin) + " input " + std::to_string(layers_[begin].d_in()));
  }
  NodeRef h = x;
  for (std::size_t l = begin; l < layers_.size(); ++l) {
    h = bilalora::forward(tape, bound.layers[l], h);
    if (l + 1 < layers_.size()) h = tape.relu(h);
  }
  return h;
}

Tensor Backbone::evaluate(const Tensor& x, std::size_t begin, std::optional<std::size_t> end) const {
  const std::size_t stop = end.value_or(layers_.size());
  if (begin > stop || stop > layers_.size()) throw RangeError("invalid layer range");
  if (begin == stop) return x;
  if (x.rank() != 2 || x.dim(1) != layers_[begin].d_in()) {
    throw ShapeError("evaluate expects [n x " + std::to_string(layers_[begin].d_in()) + "], got " +
                     shape_to_string(x.shape()));
  }
  Tensor h = x;
  for (std::size_t l = begin; l < stop; ++l) {
    const GatedLoRALayer& layer = layers_[l];
    const std::size_t n = h.dim(0), d_in = layer.d_in(), d_out = layer.d_out(), r = layer.rank();
    Tensor out({n, d_out});
    gemm_nt(h.data(), layer.weight.data(), out.data(), n, d_in, d_out);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d_out; ++j) out.at(i, j) += layer.bias[j];
    const GateMode mode = gate_mode(l);
    if (mode != GateMode::kOff) {
      Tensor low({n, r}), inc({n, d_out});
      gemm_nt(h.data(), layer.lora_a.data(), low.data(), n, d_in, r);
      gemm_nt(low.data(), layer.lora_b.data(), inc.data(), n, r, d_out);
      const double g = mode == GateMode::kOn ? 1.0 : layer.gate();
      for (std::size_t i = 0; i < inc.size(); ++i) {
        const double scaled = inc[i] * layer.gamma;
        out[i] += mode == GateMode::kOn ? scaled : g * scaled;
      }
    }
    if (l + 1 < layers_.size()) {
      for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    }
    h = std::move(out);
  }
  if (!h.all_finite()) throw NumericError("backbone produced a non-finite output");
  return h;
}

std::size_t Backbone::frozen_param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

std::size_t Backbone::lora_param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.lora_a.size() + l.lora_b.size();
  return n;
}

std::size_t Backbone::total_param_count() const {
  return frozen_param_count() + lora_param_count() + gate_param_count();
}

std::size_t Backbone::trainable_lora_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l)
    if (adapter_trainable(l)) n += layers_[l].lora_a.size() + layers_[l].lora_b.size();
  return n;
}

bool operator==(const Backbone& a, const Backbone& b) {
  if (a.selection_ != b.selection_ || a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    const auto& x = a.layers_[i];
    const auto& y = b.layers_[i];
    if (!(x.weight == y.weight && x.bias == y.bias && x.lora_a == y.lora_a && x.lora_b == y.lora_b &&
          x.gate_raw == y.gate_raw && x.gamma == y.gamma)) {
      return false;
    }
  }
  return true;
}

double selection_param_fraction(const Backbone& backbone, const std::vector<std::size_t>& selected) {
  Backbone copy = backbone;
  copy.apply_selection(selected);
  return static_cast<double>(copy.trainable_lora_count()) /
         static_cast<double>(copy.total_param_count());
}

namespace {

json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape()}, {"data", t.values()}};
}

Tensor tensor_from_json(const json& j, const char* what) {
  try {
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint field ") + what + ": " + e.what());
  }
}

}  // namespace

std::string checkpoint_to_string(const Backbone& backbone) {
  json layers = json::array();
  for (const auto& l : backbone.layers()) {
    layers.push_back({{"weight", tensor_to_json(l.weight)},
                      {"bias", tensor_to_json(l.bias)},
                      {"lora_a", tensor_to_json(l.lora_a)},
                      {"lora_b", tensor_to_json(l.lora_b)},
                      {"gate_raw", l.gate_raw.item()},
                      {"gamma", l.gamma},
                      {"rank", l.rank()}});
  }
  json doc{{"format", "bilalora-checkpoint"}, {"version", 1}, {"layers", layers}};
  doc["selection"] = backbone.selection() ? json(*backbone.selection()) : json(nullptr);
  return doc.dump(1);
}

Backbone checkpoint_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("corrupt checkpoint: ") + e.what());
  }
  if (doc.value("format", "") != "bilalora-checkpoint") throw IoError("not a checkpoint document");
  if (!doc.contains("layers") || !doc["layers"].is_array()) throw IoError("checkpoint has no layers");
  std::vector<GatedLoRALayer> layers;
  try {
    for (const auto& jl : doc["layers"]) {
      GatedLoRALayer l{tensor_from_json(jl.at("weight"), "weight"), tensor_from_json(jl.at("bias"), "bias"),
                       tensor_from_json(jl.at("lora_a"), "lora_a"), tensor_from_json(jl.at("lora_b"), "lora_b"),
                       Tensor::scalar(jl.at("gate_raw").get<double>()), jl.at("gamma").get<double>()};
      if (l.weight.rank() != 2 || l.lora_a.rank() != 2 || l.lora_b.rank() != 2 ||
          l.lora_a.dim(1) != l.d_in() || l.lora_b.dim(0) != l.d_out() || l.lora_b.dim(1) != l.rank() ||
          l.bias.size() != l.d_out() || jl.at("rank").get<std::size_t>() != l.rank()) {
        throw IoError("checkpoint layer shapes are inconsistent");
      }
      layers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const ShapeError& e) {
    throw IoError(std::string("corrupt checkpoint: ") + e.what());
  }
  Backbone backbone(std::move(layers));
  if (!doc["selection"].is_null()) {
    backbone.apply_selection(doc["selection"].get<std::vector<std::size_t>>());
  }
  return backbone;
}

void save_checkpoint(const Backbone& backbone, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out << checkpoint_to_string(backbone) << '\n';
  if (!out) throw IoError("failed writing checkpoint " + path);
}

Backbone load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return checkpoint_from_string(buffer.str());
}

}  // namespace bilalora
