#pragma once

#include <functional>
#include <string>

#include "bilalora/tape.hpp"
#include "bilalora/tensor.hpp"

namespace bilalora {

inline constexpr double kDegeneracyEps = 1e-8;

// Fixed linear embedding map [e x d]. Never trained.
class FrozenEncoder {
 public:
  FrozenEncoder(Tensor projection, std::string provenance);

  const Tensor& projection() const { return projection_; }
  const std::string& provenance() const { return provenance_; }
  std::size_t input_dim() const { return projection_.dim(1); }
  std::size_t embed_dim() const { return projection_.dim(0); }

 private:
  Tensor projection_;
  std::string provenance_;
};

// Projection of `x` ([d] or [n x d]) recorded on the tape; the projection is
// a constant leaf.
NodeRef embed(Tape& tape, const FrozenEncoder& encoder, NodeRef x);
Tensor embed(const FrozenEncoder& encoder, const Tensor& x);

// Encoder plus the two anchors defining the target direction t_pos - t_neg.
class DirectionalLossContext {
 public:
  DirectionalLossContext(FrozenEncoder encoder, Tensor t_pos, Tensor t_neg,
                         double eps = kDegeneracyEps);

  const FrozenEncoder& encoder() const { return encoder_; }
  const Tensor& t_pos() const { return t_pos_; }
  const Tensor& t_neg() const { return t_neg_; }
  const Tensor& direction() const { return direction_; }
  double direction_norm() const { return direction_norm_; }
  double eps() const { return eps_; }

  // Same encoder with the anchors exchanged.
  DirectionalLossContext swapped() const;

 private:
  FrozenEncoder encoder_;
  Tensor t_pos_;
  Tensor t_neg_;
  Tensor direction_;
  double direction_norm_;
  double eps_;
};

// 1 - cos(v_out - v_in, t_pos - t_neg) for one sample of embeddings [e].
// Throws DegenerateError when the displacement norm is at most eps.
NodeRef h2c_loss(Tape& tape, const DirectionalLossContext& ctx, NodeRef v_in, NodeRef v_out);
double h2c_loss(const DirectionalLossContext& ctx, const Tensor& v_in, const Tensor& v_out);

struct BatchLoss {
  NodeRef loss;
  std::size_t used = 0;
  std::size_t skipped = 0;
};

// Mean directional loss over the rows of embedding batches [n x e], skipping
// degenerate rows. Throws DegenerateError when every row is degenerate.
BatchLoss batched_h2c(Tape& tape, const DirectionalLossContext& ctx, NodeRef v_in, NodeRef v_out);

// Maps model inputs (rows of a batch) to outputs on a tape.
using TapeModel = std::function<NodeRef(Tape&, NodeRef)>;

// Runs `model` on `inputs` [n x d], embeds both ends and averages the
// directional loss over non-degenerate samples.
BatchLoss batched_h2c(Tape& tape, const DirectionalLossContext& ctx, const TapeModel& model,
                      NodeRef inputs);

struct LossReport {
  double loss = 0.0;
  std::size_t used = 0;
  std::size_t skipped = 0;
};

// Gradient-free evaluation on precomputed model outputs.
LossReport batched_h2c(const DirectionalLossContext& ctx, const Tensor& inputs, const Tensor& outputs);

// File formats. Anchors: {"dim", "t_pos", "t_neg", "provenance"}.
// Encoder: {"rows", "cols", "data" (row-major), "provenance"}.
void save_anchors(const DirectionalLossContext& ctx, const std::string& path);
void save_encoder(const FrozenEncoder& encoder, const std::string& path);
FrozenEncoder load_encoder(const std::string& path);
DirectionalLossContext load_context(const std::string& encoder_path, const std::string& anchors_path);
// Anchors from file around an already loaded encoder, e.g. an alternate
// prompt pair for an existing task.
DirectionalLossContext load_context(FrozenEncoder encoder, const std::string& anchors_path);

}  // namespace bilalora
