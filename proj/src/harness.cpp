#include "bilalora/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>

#include "bilalora/errors.hpp"
#include "bilalora/random.hpp"
#include "json.hpp"

namespace bilalora {

using nlohmann::json;

void TaskConfig::validate() const {
  if (layer_count < 2) throw ConfigError("layer_count must be at least 2");
  if (width == 0 || input_dim == 0 || embed_dim == 0) throw ConfigError("dimensions must be positive");
  if (embed_dim < input_dim) throw ConfigError("embed_dim must be at least input_dim");
  if (planted.empty()) throw ConfigError("planted set must be nonempty");
  for (auto l : planted) {
    if (l >= layer_count) throw ConfigError("planted layer " + std::to_string(l) + " out of range");
  }
  if (!(shift_magnitude >= 0.0)) throw ConfigError("shift_magnitude must be non-negative");
  if (!(unit_fraction > 0.0 && unit_fraction <= 1.0)) throw ConfigError("unit_fraction must lie in (0, 1]");
  if (target_samples < 4 || target_samples % 2 != 0) throw ConfigError("target_samples must be even and >= 4");
  if (source_samples == 0 || pretrain_batch == 0) throw ConfigError("source sizes must be positive");
  if (!(input_scale > 0.0)) throw ConfigError("input_scale must be positive");
}

double mean_squared_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mean_squared_error shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

namespace {

Tensor gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Tensor t({rows, cols});
  for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

std::vector<std::size_t> backbone_dims(const TaskConfig& c) {
  std::vector<std::size_t> dims{c.input_dim};
  for (std::size_t l = 0; l + 1 < c.layer_count; ++l) dims.push_back(c.width);
  dims.push_back(c.input_dim);
  return dims;
}

// Smooth source mapping x -> x + (offset + tanh(<w, x> / s)) u.
struct ReferenceMap {
  Tensor u, w;
  double offset, scale;

  Tensor operator()(const Tensor& x) const {
    Tensor y = x;
    const std::size_t d = x.dim(1);
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      double proj = 0.0;
      for (std::size_t j = 0; j < d; ++j) proj += w[j] * x.at(i, j);
      const double amount = offset + std::tanh(proj / scale);
      for (std::size_t j = 0; j < d; ++j) y.at(i, j) += amount * u[j];
    }
    return y;
  }
};

ReferenceMap make_reference(const TaskConfig& c, Rng& rng) {
  ReferenceMap ref{Tensor({c.input_dim}), Tensor({c.input_dim}), c.reference_offset, c.input_scale};
  double norm = 0.0;
  for (auto& v : ref.u.data()) {
    v = rng.normal();
    norm += v * v;
  }
  ref.u *= 1.0 / std::sqrt(norm);
  const double ws = 1.0 / std::sqrt(static_cast<double>(c.input_dim));
  for (auto& v : ref.w.data()) v = rng.normal(0.0, ws);
  return ref;
}

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<Tensor> m, v;
  std::size_t t = 0;

  void step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr) {
    if (m.empty()) {
      for (auto* p : params) {
        m.emplace_back(p->shape());
        v.emplace_back(p->shape());
      }
    }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = grads[k][i];
        m[k][i] = beta1 * m[k][i] + (1.0 - beta1) * g;
        v[k][i] = beta2 * v[k][i] + (1.0 - beta2) * g * g;
        p[i] -= lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + eps);
      }
    }
  }
};

Tensor take_rows(const Tensor& m, const std::vector<std::size_t>& rows) {
  Tensor out({rows.size(), m.dim(1)});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < m.dim(1); ++j) out.at(i, j) = m.at(rows[i], j);
  return out;
}

// Columns of a [rows x cols] Gaussian matrix orthonormalized (modified
// Gram-Schmidt), giving an isometric embedding.
Tensor orthonormal_columns(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor q = gaussian_matrix(rng, rows, cols, 1.0);
  for (std::size_t j = 0; j < cols; ++j) {
    for (std::size_t p = 0; p < j; ++p) {
      double d = 0.0;
      for (std::size_t i = 0; i < rows; ++i) d += q.at(i, j) * q.at(i, p);
      for (std::size_t i = 0; i < rows; ++i) q.at(i, j) -= d * q.at(i, p);
    }
    double n = 0.0;
    for (std::size_t i = 0; i < rows; ++i) n += q.at(i, j) * q.at(i, j);
    n = std::sqrt(n);
    if (!(n > 1e-10)) throw NumericError("encoder columns are linearly dependent");
    for (std::size_t i = 0; i < rows; ++i) q.at(i, j) /= n;
  }
  return q;
}

Tensor column_mean(const Tensor& m) {
  Tensor out({m.dim(1)});
  for (std::size_t i = 0; i < m.dim(0); ++i)
    for (std::size_t j = 0; j < m.dim(1); ++j) out[j] += m.at(i, j);
  out *= 1.0 / static_cast<double>(m.dim(0));
  return out;
}

}  // namespace

PretrainResult pretrain(const TaskConfig& config) {
  config.validate();
  Rng task_rng(config.seed, "task");
  const ReferenceMap ref = make_reference(config, task_rng);
  PretrainResult result;
  result.source_inputs = gaussian_matrix(task_rng, config.source_samples, config.input_dim, config.input_scale);
  result.source_targets = ref(result.source_inputs);

  Backbone net = Backbone::create(backbone_dims(config), config.rank, config.gamma, derive_seed(config.seed, "init"));
  // Adapters stay off while the frozen weights are fit.
  net.apply_selection({});
  Rng batch_rng(config.seed, "pretrain-batching");
  Adam adam;
  const TrainableGroups groups{true, false, false};
  const std::size_t n = config.source_samples;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  for (std::size_t step = 0; step < config.pretrain_steps; ++step) {
    const std::size_t bs = std::min(config.pretrain_batch, n);
    if (cursor + bs > n) {
      for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[batch_rng.index(i)]);
      cursor = 0;
    }
    std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                  order.begin() + static_cast<std::ptrdiff_t>(cursor + bs));
    cursor += bs;
    Tape tape;
    BoundBackbone bound = net.bind(tape, groups);
    NodeRef out = net.forward(tape, bound, tape.leaf(take_rows(result.source_inputs, rows)));
    NodeRef diff = tape.sub(out, tape.leaf(take_rows(result.source_targets, rows)));
    NodeRef loss = tape.mean(tape.mul(diff, diff));
    Gradients grads = tape.backward(loss);
    std::vector<Tensor*> params;
    std::vector<Tensor> g;
    for (std::size_t i = 0; i < bound.ids.size(); ++i) {
      params.push_back(&net.param(bound.ids[i]));
      g.push_back(grads.of(bound.trainable[i]));
    }
    const double progress = static_cast<double>(step) / static_cast<double>(config.pretrain_steps);
    const double lr = config.pretrain_final_lr + 0.5 * (config.pretrain_lr - config.pretrain_final_lr) *
                                                     (1.0 + std::cos(std::numbers::pi * progress));
    adam.step(params, g, lr);
  }
  net.clear_selection();
  result.source_loss = mean_squared_error(net.evaluate(result.source_inputs), result.source_targets);
  result.backbone = std::move(net);
  if (!(result.source_loss <= config.pretrain_threshold)) {
    throw ConvergenceError("pretraining reached source loss " + std::to_string(result.source_loss) +
                           " above threshold " + std::to_string(config.pretrain_threshold));
  }
  return result;
}

SyntheticTask make_task(const TaskConfig& config) { return make_task(config, pretrain(config)); }

SyntheticTask make_task(const TaskConfig& config, const PretrainResult& pre) {
  config.validate();
  if (pre.backbone.layer_count() != config.layer_count) {
    throw ConfigError("pretrained backbone does not match the task layer count");
  }
  Rng shift_rng(config.seed, "shift");
  // The fitted backbone defines the target mapping; the source model is the
  // same backbone with the planted layers shifted away from it.
  const Backbone& target = pre.backbone;
  Backbone source = pre.backbone;
  std::vector<std::size_t> planted = config.planted;
  std::sort(planted.begin(), planted.end());
  planted.erase(std::unique(planted.begin(), planted.end()), planted.end());

  // Each planted layer receives a rank-one weight change b a^T with
  // <a, mean input> = 1, lowering the pre-activation of a random subset of
  // units by shift_magnitude times their spread on average.
  for (std::size_t l : planted) {
    const Tensor h_in = target.evaluate(pre.source_inputs, 0, l);
    const Tensor mean_in = column_mean(h_in);
    const double mm = squared_norm(mean_in);
    if (!(mm > 0.0)) throw NumericError("planted layer " + std::to_string(l) + " has a zero mean input");
    const GatedLoRALayer& layer = target.layer(l);
    const std::size_t d_out = layer.d_out(), d_in = layer.d_in();
    Tensor z({h_in.dim(0), d_out});
    gemm_nt(h_in.data(), layer.weight.data(), z.data(), h_in.dim(0), d_in, d_out);
    const Tensor mean_z = column_mean(z);
    std::vector<double> spread(d_out, 0.0);
    for (std::size_t i = 0; i < z.dim(0); ++i)
      for (std::size_t j = 0; j < d_out; ++j) spread[j] += (z.at(i, j) - mean_z[j]) * (z.at(i, j) - mean_z[j]);
    std::vector<std::size_t> units(d_out);
    std::iota(units.begin(), units.end(), 0);
    for (std::size_t i = d_out; i > 1; --i) std::swap(units[i - 1], units[shift_rng.index(i)]);
    const auto chosen = static_cast<std::size_t>(config.unit_fraction * static_cast<double>(d_out));
    Tensor& w = source.layer(l).weight;
    for (std::size_t c = 0; c < std::max<std::size_t>(chosen, 1); ++c) {
      const std::size_t j = units[c];
      const double b = std::sqrt(spread[j] / static_cast<double>(z.dim(0) - 1));
      for (std::size_t p = 0; p < d_in; ++p) w.at(j, p) -= config.shift_magnitude * b * mean_in[p] / mm;
    }
  }

  Rng data_rng(config.seed, "target-data");
  Tensor inputs = gaussian_matrix(data_rng, config.target_samples, config.input_dim, config.input_scale);
  const std::size_t half = config.target_samples / 2;
  std::vector<std::size_t> train_rows(half), val_rows(half);
  std::iota(train_rows.begin(), train_rows.end(), 0);
  std::iota(val_rows.begin(), val_rows.end(), half);

  Rng enc_rng(config.seed, "encoder");
  FrozenEncoder encoder(orthonormal_columns(enc_rng, config.embed_dim, config.input_dim),
                        "orthonormal-gaussian/seed=" + std::to_string(config.seed));
  Tensor train = take_rows(inputs, train_rows);
  Tensor t_neg = embed(encoder, column_mean(train));
  Tensor t_pos = embed(encoder, column_mean(target.evaluate(train)));
  DirectionalLossContext ctx(std::move(encoder), std::move(t_pos), std::move(t_neg));

  return SyntheticTask{std::move(source),
                       target,
                       pre.source_inputs,
                       pre.source_targets,
                       std::move(train),
                       take_rows(inputs, val_rows),
                       std::move(planted),
                       std::move(ctx),
                       pre.source_loss};
}

std::size_t binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  std::size_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

std::vector<std::vector<std::size_t>> k_subsets(std::size_t n, std::size_t k) {
  std::vector<std::vector<std::size_t>> out;
  if (k == 0 || k > n) return out;
  std::vector<std::size_t> cur(k);
  std::iota(cur.begin(), cur.end(), 0);
  for (;;) {
    out.push_back(cur);
    std::size_t i = k;
    while (i > 0 && cur[i - 1] == n - k + i - 1) --i;
    if (i == 0) break;
    ++cur[i - 1];
    for (std::size_t j = i; j < k; ++j) cur[j] = cur[j - 1] + 1;
  }
  return out;
}

double OracleResult::score_of(const std::vector<std::size_t>& subset) const {
  std::vector<std::size_t> sorted = subset;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < subsets.size(); ++i)
    if (subsets[i] == sorted) return scores[i];
  throw RangeError("subset is not part of the oracle enumeration");
}

OracleResult brute_force_oracle(const SyntheticTask& task, const BilevelConfig& config, std::size_t k,
                                std::size_t budget) {
  const std::size_t n = task.pretrained.layer_count();
  if (k < 1 || k > n) throw RangeError("oracle k out of range");
  if (binomial(n, k) > kOracleSubsetLimit) {
    throw RangeError("oracle would score " + std::to_string(binomial(n, k)) + " subsets; limit is " +
                     std::to_string(kOracleSubsetLimit));
  }
  if (budget == 0) throw RangeError("oracle budget must be positive");
  OracleResult result;
  result.subsets = k_subsets(n, k);
  for (const auto& subset : result.subsets) {
    RunResult r = run_selection(config, task.pretrained, task.ctx, task.splits(), subset, budget);
    result.scores.push_back(r.final_val_loss);
  }
  result.ranking.resize(result.subsets.size());
  std::iota(result.ranking.begin(), result.ranking.end(), 0);
  std::stable_sort(result.ranking.begin(), result.ranking.end(),
                   [&](std::size_t a, std::size_t b) { return result.scores[a] < result.scores[b]; });
  return result;
}

SelectionReport evaluate_selection(const std::vector<std::size_t>& selection, const OracleResult& oracle) {
  if (oracle.subsets.empty()) throw RangeError("empty oracle");
  if (selection.size() != oracle.subsets.front().size()) {
    throw RangeError("selection has " + std::to_string(selection.size()) + " layers but the oracle scored " +
                     std::to_string(oracle.subsets.front().size()) + "-subsets");
  }
  const double loss = oracle.score_of(selection);
  SelectionReport report;
  report.rank = 1;
  for (double s : oracle.scores)
    if (s < loss) ++report.rank;
  const double best = oracle.scores[oracle.ranking.front()];
  report.gap = best == 0.0 ? loss - best : (loss - best) / best;
  return report;
}

std::vector<BaselineRow> baselines(const SyntheticTask& task, const BilevelConfig& config) {
  const std::size_t n = task.pretrained.layer_count();
  config.validate(n);
  const std::size_t k = config.k;
  const std::size_t budget = config.epochs - config.switch_epoch;
  std::vector<BaselineRow> rows;
  auto fixed = [&](const std::string& name, std::vector<std::size_t> sel) {
    RunResult r = run_selection(config, task.pretrained, task.ctx, task.splits(), sel, budget);
    rows.push_back({name, r.selection, r.final_val_loss, r.final_train_loss});
  };
  std::vector<std::size_t> first(k), last(k);
  std::iota(first.begin(), first.end(), 0);
  std::iota(last.begin(), last.end(), n - k);
  fixed("manual-first-k", first);
  fixed("manual-last-k", last);
  Rng rng(config.seed, "random-selection");
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(all[i - 1], all[rng.index(i)]);
  all.resize(k);
  std::sort(all.begin(), all.end());
  fixed("random-k", all);
  for (auto method : {PositioningMethod::kJoint, PositioningMethod::kBilevel}) {
    BilevelConfig c = config;
    c.method = method;
    RunResult r = run(c, task.pretrained, task.ctx, task.splits());
    rows.push_back({method_name(method), r.selection, r.final_val_loss, r.final_train_loss});
  }
  return rows;
}

std::vector<SweepRow> layer_count_sweep(const SyntheticTask& task, const BilevelConfig& config,
                                        const std::vector<std::size_t>& k_values) {
  std::vector<SweepRow> rows;
  for (std::size_t k : k_values) {
    BilevelConfig c = config;
    c.k = k;
    c.validate(task.pretrained.layer_count());
    RunResult r = run(c, task.pretrained, task.ctx, task.splits());
    rows.push_back({k, r.selection, r.final_val_loss, r.backbone.trainable_lora_count()});
  }
  return rows;
}

namespace {

void write_blob(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw IoError("failed writing " + path.string());
}

Tensor read_blob(const std::filesystem::path& path, Shape shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  Tensor t(std::move(shape));
  in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(t.size() * sizeof(double)) || in.peek() != EOF) {
    throw IoError("blob " + path.string() + " does not hold " + shape_to_string(t.shape()) + " doubles");
  }
  return t;
}

}  // namespace

void save_task(const SyntheticTask& task, const TaskConfig& config, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path root(dir);
  json blobs = json::object();
  auto blob = [&](const std::string& name, const Tensor& t) {
    write_blob(t, root / (name + ".bin"));
    blobs[name] = {{"file", name + ".bin"}, {"shape", t.shape()}, {"dtype", "float64-le"}};
  };
  blob("source_inputs", task.source_inputs);
  blob("source_targets", task.source_targets);
  blob("target_train", task.target_train);
  blob("target_val", task.target_val);
  save_checkpoint(task.pretrained, (root / "pretrained.json").string());
  save_checkpoint(task.target_model, (root / "target_model.json").string());
  save_encoder(task.ctx.encoder(), (root / "encoder.json").string());
  save_anchors(task.ctx, (root / "anchors.json").string());
  json manifest{{"format", "bilalora-task"},
                {"version", 1},
                {"seed", config.seed},
                {"layer_count", config.layer_count},
                {"width", config.width},
                {"input_dim", config.input_dim},
                {"embed_dim", config.embed_dim},
                {"planted", task.planted},
                {"shift_magnitude", config.shift_magnitude},
                {"pretrain_loss", task.pretrain_loss},
                {"blobs", blobs},
                {"pretrained", "pretrained.json"},
                {"target_model", "target_model.json"},
                {"encoder", "encoder.json"},
                {"anchors", "anchors.json"}};
  std::ofstream out(root / "task.json");
  if (!out) throw IoError("cannot write task manifest in " + dir);
  out << manifest.dump(1) << '\n';
}

SyntheticTask load_task(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::ifstream in(root / "task.json");
  if (!in) throw IoError("no task manifest in " + dir);
  json m;
  try {
    m = json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("malformed task manifest: ") + e.what());
  }
  if (m.value("format", "") != "bilalora-task") throw IoError(dir + " does not hold a task");
  try {
    auto blob = [&](const std::string& name) {
      const auto& b = m.at("blobs").at(name);
      return read_blob(root / b.at("file").get<std::string>(), b.at("shape").get<Shape>());
    };
    return SyntheticTask{load_checkpoint((root / m.at("pretrained").get<std::string>()).string()),
                         load_checkpoint((root / m.at("target_model").get<std::string>()).string()),
                         blob("source_inputs"),
                         blob("source_targets"),
                         blob("target_train"),
                         blob("target_val"),
                         m.at("planted").get<std::vector<std::size_t>>(),
                         load_context((root / m.at("encoder").get<std::string>()).string(),
                                      (root / m.at("anchors").get<std::string>()).string()),
                         m.at("pretrain_loss").get<double>()};
  } catch (const json::exception& e) {
    throw IoError(std::string("task manifest: ") + e.what());
  }
}

}  // namespace bilalora
