#include "bilalora/semloss.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "bilalora/errors.hpp"
#include "json.hpp"

namespace bilalora {

using nlohmann::json;

FrozenEncoder::FrozenEncoder(Tensor projection, std::string provenance)
    : projection_(std::move(projection)), provenance_(std::move(provenance)) {
  if (projection_.rank() != 2) throw ShapeError("encoder projection must be a matrix");
  if (!projection_.all_finite()) throw NumericError("encoder projection has non-finite entries");
}

NodeRef embed(Tape& tape, const FrozenEncoder& encoder, NodeRef x) {
  const Tensor& v = tape.value(x);
  if (v.shape().back() != encoder.input_dim() || v.rank() > 2) {
    throw ShapeError("embed: input " + shape_to_string(v.shape()) + " does not match encoder width " +
                     std::to_string(encoder.input_dim()));
  }
  NodeRef p = tape.leaf(encoder.projection());
  return v.rank() == 1 ? tape.matvec(p, x) : tape.matmul_nt(x, p);
}

Tensor embed(const FrozenEncoder& encoder, const Tensor& x) {
  Tape tape;
  return tape.value(embed(tape, encoder, tape.leaf(x)));
}

DirectionalLossContext::DirectionalLossContext(FrozenEncoder encoder, Tensor t_pos, Tensor t_neg,
                                               double eps)
    : encoder_(std::move(encoder)), t_pos_(std::move(t_pos)), t_neg_(std::move(t_neg)),
      direction_(t_pos_), eps_(eps) {
  const std::size_t e = encoder_.embed_dim();
  if (t_pos_.rank() != 1 || t_neg_.rank() != 1 || t_pos_.size() != e || t_neg_.size() != e) {
    throw ShapeError("anchors must be vectors of the embedding width " + std::to_string(e));
  }
  if (!(eps_ > 0.0)) throw RangeError("degeneracy eps must be positive");
  direction_ -= t_neg_;
  direction_norm_ = std::sqrt(squared_norm(direction_));
  if (!(direction_norm_ > eps_)) throw DegenerateError("anchors t_pos and t_neg coincide");
}

DirectionalLossContext DirectionalLossContext::swapped() const {
  return DirectionalLossContext(encoder_, t_neg_, t_pos_, eps_);
}

namespace {

// 1 - c, with c clamped to the valid cosine range.
NodeRef one_minus(Tape& tape, NodeRef cosine) {
  return tape.shift(tape.scale(tape.clamp(cosine, -1.0, 1.0), -1.0), 1.0);
}

}  // namespace

NodeRef h2c_loss(Tape& tape, const DirectionalLossContext& ctx, NodeRef v_in, NodeRef v_out) {
  const std::size_t e = ctx.encoder().embed_dim();
  if (tape.value(v_in).shape() != Shape{e} || tape.value(v_out).shape() != Shape{e}) {
    throw ShapeError("h2c_loss expects embeddings of shape [" + std::to_string(e) + "]");
  }
  NodeRef dv = tape.sub(v_out, v_in);
  NodeRef norm = tape.l2norm(dv);
  if (!(tape.value(norm).item() > ctx.eps())) {
    throw DegenerateError("embedding displacement norm is below eps");
  }
  NodeRef cosine = tape.div(tape.dot(dv, tape.leaf(ctx.direction())),
                            tape.scale(norm, ctx.direction_norm()));
  return one_minus(tape, cosine);
}

double h2c_loss(const DirectionalLossContext& ctx, const Tensor& v_in, const Tensor& v_out) {
  Tape tape;
  return tape.value(h2c_loss(tape, ctx, tape.leaf(v_in), tape.leaf(v_out))).item();
}

BatchLoss batched_h2c(Tape& tape, const DirectionalLossContext& ctx, NodeRef v_in, NodeRef v_out) {
  const Tensor& in = tape.value(v_in);
  const std::size_t e = ctx.encoder().embed_dim();
  if (in.rank() != 2 || in.dim(1) != e || tape.value(v_out).shape() != in.shape()) {
    throw ShapeError("batched_h2c expects matching [n x " + std::to_string(e) + "] embeddings");
  }
  NodeRef dv = tape.sub(v_out, v_in);
  const Tensor& dvv = tape.value(dv);
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < dvv.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < e; ++c) s += dvv.at(r, c) * dvv.at(r, c);
    if (std::sqrt(s) > ctx.eps()) keep.push_back(r);
  }
  BatchLoss result;
  result.used = keep.size();
  result.skipped = dvv.dim(0) - keep.size();
  if (keep.empty()) throw DegenerateError("every sample in the batch has a degenerate displacement");
  if (result.skipped > 0) dv = tape.select_rows(dv, keep);
  NodeRef cosines = tape.div(tape.matvec(dv, tape.leaf(ctx.direction())),
                             tape.scale(tape.row_l2norm(dv), ctx.direction_norm()));
  result.loss = tape.mean(one_minus(tape, cosines));
  return result;
}

BatchLoss batched_h2c(Tape& tape, const DirectionalLossContext& ctx, const TapeModel& model,
                      NodeRef inputs) {
  if (tape.value(inputs).rank() != 2) throw ShapeError("batched_h2c expects a batch matrix");
  NodeRef outputs = model(tape, inputs);
  return batched_h2c(tape, ctx, embed(tape, ctx.encoder(), inputs), embed(tape, ctx.encoder(), outputs));
}

LossReport batched_h2c(const DirectionalLossContext& ctx, const Tensor& inputs, const Tensor& outputs) {
  Tape tape;
  auto r = batched_h2c(tape, ctx, embed(tape, ctx.encoder(), tape.leaf(inputs)),
                       embed(tape, ctx.encoder(), tape.leaf(outputs)));
  return {tape.value(r.loss).item(), r.used, r.skipped};
}

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError("malformed JSON in " + path + ": " + e.what());
  }
}

void write_json(const json& doc, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << doc.dump(1) << '\n';
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace

void save_anchors(const DirectionalLossContext& ctx, const std::string& path) {
  write_json({{"dim", ctx.t_pos().size()},
              {"t_pos", ctx.t_pos().values()},
              {"t_neg", ctx.t_neg().values()},
              {"provenance", ctx.encoder().provenance()}},
             path);
}

void save_encoder(const FrozenEncoder& encoder, const std::string& path) {
  write_json({{"rows", encoder.embed_dim()},
              {"cols", encoder.input_dim()},
              {"data", encoder.projection().values()},
              {"provenance", encoder.provenance()}},
             path);
}

FrozenEncoder load_encoder(const std::string& path) {
  json doc = read_json(path);
  try {
    Shape shape{doc.at("rows").get<std::size_t>(), doc.at("cols").get<std::size_t>()};
    return FrozenEncoder(Tensor(shape, doc.at("data").get<std::vector<double>>()),
                         doc.value("provenance", std::string("unknown")));
  } catch (const json::exception& e) {
    throw IoError("encoder file " + path + ": " + e.what());
  }
}

DirectionalLossContext load_context(FrozenEncoder encoder, const std::string& anchors_path) {
  json doc = read_json(anchors_path);
  try {
    const auto dim = doc.at("dim").get<std::size_t>();
    auto t_pos = doc.at("t_pos").get<std::vector<double>>();
    auto t_neg = doc.at("t_neg").get<std::vector<double>>();
    if (t_pos.size() != dim || t_neg.size() != dim) {
      throw ShapeError("anchor vectors do not match declared dim " + std::to_string(dim));
    }
    return DirectionalLossContext(std::move(encoder), Tensor::vector(std::move(t_pos)),
                                  Tensor::vector(std::move(t_neg)));
  } catch (const json::exception& e) {
    throw IoError("anchor file " + anchors_path + ": " + e.what());
  }
}

DirectionalLossContext load_context(const std::string& encoder_path, const std::string& anchors_path) {
  return load_context(load_encoder(encoder_path), anchors_path);
}

}  // namespace bilalora
