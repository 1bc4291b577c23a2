#include "bilalora/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "bilalora/errors.hpp"

namespace bilalora {

using nlohmann::json;
namespace fs = std::filesystem;

std::string ExperimentConfig::resolved_task_dir() const {
  return task_dir.empty() ? (fs::path(out_dir) / "task").string() : task_dir;
}

std::string ExperimentConfig::resolved_checkpoint() const {
  return checkpoint.empty() ? (fs::path(out_dir) / "adapted.json").string() : checkpoint;
}

void ExperimentConfig::finalize() {
  task.seed = seed;
  optimizer.seed = seed;
  task.validate();
  optimizer.validate(task.layer_count);
  if (task.rank < 1) throw ConfigError("adapter rank must be positive");
  if (!(task.gamma > 0.0)) throw ConfigError("adapter gamma must be positive");
  if (oracle_budget == 0) throw ConfigError("oracle budget must be positive");
  for (std::size_t k : sweep_k) {
    if (k < 1 || k > task.layer_count) throw ConfigError("sweep k = " + std::to_string(k) + " out of range");
  }
  if (!binarize_gates) {
    throw ConfigError("continuous gates after selection are not supported; flags.binarize_gates must be true");
  }
  if (out_dir.empty()) throw ConfigError("paths.out_dir must not be empty");
}

namespace {

json number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError("config section " + path_ + " must be an object");
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    auto it = doc_.find(key);
    return Section(it == doc_.end() ? empty_ : *it, path_ + "." + key);
  }

  void read(const std::string& key, double& out) {
    visit(key, [&](const json& v) {
      if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s == "inf" || s == "infinity") return void(out = std::numeric_limits<double>::infinity());
        throw ConfigError(where(key) + ": expected a number, got \"" + s + "\"");
      }
      if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
      out = v.get<double>();
    });
  }

  void read(const std::string& key, std::size_t& out) {
    visit(key, [&](const json& v) {
      if (!is_count(v)) throw ConfigError(where(key) + ": expected a non-negative integer");
      out = v.get<std::size_t>();
    });
  }

  void read(const std::string& key, bool& out) {
    visit(key, [&](const json& v) {
      if (!v.is_boolean()) throw ConfigError(where(key) + ": expected true or false");
      out = v.get<bool>();
    });
  }

  void read(const std::string& key, std::string& out) {
    visit(key, [&](const json& v) {
      if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
      out = v.get<std::string>();
    });
  }

  void read(const std::string& key, std::vector<std::size_t>& out) {
    visit(key, [&](const json& v) {
      if (!v.is_array()) throw ConfigError(where(key) + ": expected an array of layer indices");
      out.clear();
      for (const auto& e : v) {
        if (!is_count(e)) throw ConfigError(where(key) + ": entries must be non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    });
  }

  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key " + where(key));
    }
  }

 private:
  template <typename F>
  void visit(const std::string& key, F&& f) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it != doc_.end()) f(*it);
  }

  std::string where(const std::string& key) const { return path_ + "." + key; }

  inline static const json empty_ = json::object();
  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

PositioningMethod parse_method(const std::string& name) {
  if (name == "bilevel") return PositioningMethod::kBilevel;
  if (name == "joint") return PositioningMethod::kJoint;
  throw ConfigError("optimizer.method must be \"bilevel\" or \"joint\", got \"" + name + "\"");
}

void write_json(const json& doc, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string subset_string(const std::vector<std::size_t>& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? " " : "") + std::to_string(s[i]);
  return out;
}

std::ofstream open_csv(const fs::path& path, const std::string& header) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << header << '\n';
  return out;
}

fs::path prepare_output(const ExperimentConfig& config, const std::string& command) {
  fs::create_directories(config.out_dir);
  write_resolved_config(config, command);
  return fs::path(config.out_dir);
}

struct LoadedTask {
  SyntheticTask task;
  DirectionalLossContext ctx;
};

LoadedTask load(const ExperimentConfig& config) {
  SyntheticTask task = load_task(config.resolved_task_dir());
  DirectionalLossContext ctx =
      config.anchors.empty() ? task.ctx : load_context(task.ctx.encoder(), config.anchors);
  config.optimizer.validate(task.pretrained.layer_count());
  return {std::move(task), std::move(ctx)};
}

json parameter_counts(const Backbone& b) {
  return {{"frozen", b.frozen_param_count()},
          {"lora", b.lora_param_count()},
          {"gates", b.gate_param_count()},
          {"total", b.total_param_count()},
          {"trainable_lora", b.trainable_lora_count()}};
}

}  // namespace

json config_to_json(const ExperimentConfig& c) {
  const TaskConfig& t = c.task;
  const BilevelConfig& o = c.optimizer;
  return {
      {"seed", c.seed},
      {"task",
       {{"layer_count", t.layer_count},
        {"width", t.width},
        {"input_dim", t.input_dim},
        {"embed_dim", t.embed_dim},
        {"planted", t.planted},
        {"shift_magnitude", number(t.shift_magnitude)},
        {"unit_fraction", number(t.unit_fraction)},
        {"input_scale", number(t.input_scale)},
        {"reference_offset", number(t.reference_offset)},
        {"source_samples", t.source_samples},
        {"target_samples", t.target_samples},
        {"pretrain_steps", t.pretrain_steps},
        {"pretrain_batch", t.pretrain_batch},
        {"pretrain_lr", number(t.pretrain_lr)},
        {"pretrain_final_lr", number(t.pretrain_final_lr)},
        {"pretrain_threshold", number(t.pretrain_threshold)}}},
      {"adapter", {{"rank", t.rank}, {"gamma", number(t.gamma)}}},
      {"optimizer",
       {{"eta_w", number(o.eta_w)},
        {"eta_alpha", number(o.eta_alpha)},
        {"epochs", o.epochs},
        {"switch_epoch", o.switch_epoch},
        {"k", o.k},
        {"guard", number(o.guard)},
        {"momentum", number(o.momentum)},
        {"batch_size", o.batch_size},
        {"finetune_batch_size", o.finetune_batch_size},
        {"per_batch_updates", o.per_batch_updates},
        {"method", method_name(o.method)}}},
      {"flags",
       {{"binarize_gates", c.binarize_gates},
        {"warm_start_stage2", o.warm_start},
        {"full_finetune", c.full_finetune}}},
      {"oracle", {{"budget", c.oracle_budget}}},
      {"sweep", {{"k_values", c.sweep_k}}},
      {"paths",
       {{"out_dir", c.out_dir}, {"task_dir", c.task_dir}, {"checkpoint", c.checkpoint}, {"anchors", c.anchors}}},
  };
}

ExperimentConfig config_from_json(const json& doc) {
  ExperimentConfig c;
  Section root(doc, "config");
  std::size_t seed = 0;
  root.read("seed", seed);
  c.seed = seed;

  Section task = root.child("task");
  TaskConfig& t = c.task;
  task.read("layer_count", t.layer_count);
  task.read("width", t.width);
  task.read("input_dim", t.input_dim);
  task.read("embed_dim", t.embed_dim);
  task.read("planted", t.planted);
  task.read("shift_magnitude", t.shift_magnitude);
  task.read("unit_fraction", t.unit_fraction);
  task.read("input_scale", t.input_scale);
  task.read("reference_offset", t.reference_offset);
  task.read("source_samples", t.source_samples);
  task.read("target_samples", t.target_samples);
  task.read("pretrain_steps", t.pretrain_steps);
  task.read("pretrain_batch", t.pretrain_batch);
  task.read("pretrain_lr", t.pretrain_lr);
  task.read("pretrain_final_lr", t.pretrain_final_lr);
  task.read("pretrain_threshold", t.pretrain_threshold);
  task.finish();

  Section adapter = root.child("adapter");
  adapter.read("rank", t.rank);
  adapter.read("gamma", t.gamma);
  adapter.finish();

  Section opt = root.child("optimizer");
  BilevelConfig& o = c.optimizer;
  opt.read("eta_w", o.eta_w);
  opt.read("eta_alpha", o.eta_alpha);
  opt.read("epochs", o.epochs);
  opt.read("switch_epoch", o.switch_epoch);
  opt.read("k", o.k);
  opt.read("guard", o.guard);
  opt.read("momentum", o.momentum);
  opt.read("batch_size", o.batch_size);
  opt.read("finetune_batch_size", o.finetune_batch_size);
  opt.read("per_batch_updates", o.per_batch_updates);
  std::string method = method_name(o.method);
  opt.read("method", method);
  o.method = parse_method(method);
  opt.finish();

  Section flags = root.child("flags");
  flags.read("binarize_gates", c.binarize_gates);
  flags.read("warm_start_stage2", o.warm_start);
  flags.read("full_finetune", c.full_finetune);
  flags.finish();

  Section oracle = root.child("oracle");
  oracle.read("budget", c.oracle_budget);
  oracle.finish();

  Section sweep = root.child("sweep");
  sweep.read("k_values", c.sweep_k);
  sweep.finish();

  Section paths = root.child("paths");
  paths.read("out_dir", c.out_dir);
  paths.read("task_dir", c.task_dir);
  paths.read("checkpoint", c.checkpoint);
  paths.read("anchors", c.anchors);
  paths.finish();

  root.finish();
  c.finalize();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(doc);
}

std::string resolved_config_name(const std::string& command) { return "resolved_config_" + command + ".json"; }

void write_resolved_config(const ExperimentConfig& config, const std::string& command) {
  fs::create_directories(config.out_dir);
  write_json(config_to_json(config), fs::path(config.out_dir) / resolved_config_name(command));
}

json EvalReport::to_json() const {
  return {{"h2c_val", h2c_val},
          {"h2c_train", h2c_train},
          {"target_mse_val", target_mse_val},
          {"source_mse", source_mse},
          {"skipped", skipped}};
}

EvalReport evaluate_backbone(const Backbone& backbone, const SyntheticTask& task,
                             const DirectionalLossContext& ctx) {
  if (backbone.input_dim() != task.target_val.dim(1) || backbone.output_dim() != task.target_val.dim(1)) {
    throw ShapeError("checkpoint maps " + std::to_string(backbone.input_dim()) + " -> " +
                     std::to_string(backbone.output_dim()) + " but task samples have width " +
                     std::to_string(task.target_val.dim(1)));
  }
  EvalReport r;
  const Tensor val_out = backbone.evaluate(task.target_val);
  const LossReport val = batched_h2c(ctx, task.target_val, val_out);
  const LossReport train = batched_h2c(ctx, task.target_train, backbone.evaluate(task.target_train));
  r.h2c_val = val.loss;
  r.h2c_train = train.loss;
  r.skipped = val.skipped + train.skipped;
  r.target_mse_val = mean_squared_error(val_out, task.target_model.evaluate(task.target_val));
  r.source_mse = mean_squared_error(backbone.evaluate(task.source_inputs), task.source_targets);
  return r;
}

PretrainReport cmd_pretrain(const ExperimentConfig& config) {
  const fs::path out = prepare_output(config, "pretrain");
  SyntheticTask task = make_task(config.task);
  save_task(task, config.task, config.resolved_task_dir());
  save_checkpoint(task.pretrained, (out / "pretrained.json").string());
  const Batch val = Batch::from_inputs(task.target_val);
  PretrainReport r{task.pretrain_loss, batch_loss(task.pretrained, task.ctx, val),
                   batch_loss(task.target_model, task.ctx, val), task.planted};
  write_json({{"source_loss", r.source_loss},
              {"threshold", number(config.task.pretrain_threshold)},
              {"pretrained_val_h2c", r.pretrained_val_loss},
              {"target_model_val_h2c", r.target_val_loss},
              {"planted", r.planted},
              {"task_dir", config.resolved_task_dir()}},
             out / "pretrain_summary.json");
  return r;
}

AdaptReport cmd_adapt(const ExperimentConfig& config) {
  const fs::path out = prepare_output(config, "adapt");
  LoadedTask lt = load(config);
  Backbone start = lt.task.pretrained;
  start.clear_selection();
  AdaptReport report;
  report.run = config.full_finetune ? run_full_finetune(config.optimizer, start, lt.ctx, lt.task.splits())
                                    : run(config.optimizer, start, lt.ctx, lt.task.splits());
  report.pretrained_val_loss = batch_loss(lt.task.pretrained, lt.ctx, Batch::from_inputs(lt.task.target_val));
  const RunResult& r = report.run;
  save_checkpoint(r.backbone, (out / "adapted.json").string());
  write_history_csv(r.history, r.backbone.layer_count(), (out / "metrics.csv").string());
  const std::string method = config.full_finetune ? "full-finetune" : method_name(config.optimizer.method);
  write_json({{"method", method}, {"k", r.selection.size()}, {"selection", r.selection}}, out / "selection.json");
  write_json({{"method", method},
              {"selection", r.selection},
              {"epochs", config.optimizer.epochs},
              {"switch_epoch", config.optimizer.switch_epoch},
              {"final_train_loss", r.final_train_loss},
              {"final_val_loss", r.final_val_loss},
              {"pretrained_val_loss", report.pretrained_val_loss},
              {"parameters", parameter_counts(r.backbone)}},
             out / "summary.json");
  write_json({{"wallclock_ms", r.wallclock_ms}}, out / "timing.json");
  return report;
}

OracleResult cmd_oracle(const ExperimentConfig& config) {
  const fs::path out = prepare_output(config, "oracle");
  LoadedTask lt = load(config);
  const std::size_t k = config.optimizer.k;
  OracleResult o = brute_force_oracle(lt.task, config.optimizer, k, config.oracle_budget);
  auto csv = open_csv(out / "oracle.csv", "rank,subset,val_loss");
  json rows = json::array();
  for (std::size_t idx : o.ranking) {
    const auto rank = evaluate_selection(o.subsets[idx], o).rank;
    csv << rank << ',' << subset_string(o.subsets[idx]) << ',' << fmt(o.scores[idx]) << '\n';
    rows.push_back({{"rank", rank}, {"subset", o.subsets[idx]}, {"val_loss", o.scores[idx]}});
  }
  json summary{{"k", k},
               {"budget", config.oracle_budget},
               {"best_subset", o.best_subset()},
               {"planted", lt.task.planted},
               {"subsets", rows}};
  if (lt.task.planted.size() == k) summary["planted_rank"] = evaluate_selection(lt.task.planted, o).rank;
  write_json(summary, out / "oracle.json");
  return o;
}

std::vector<BaselineRow> cmd_baselines(const ExperimentConfig& config) {
  const fs::path out = prepare_output(config, "baselines");
  LoadedTask lt = load(config);
  SyntheticTask task = lt.task;
  task.ctx = lt.ctx;
  auto rows = baselines(task, config.optimizer);
  auto csv = open_csv(out / "baselines.csv", "method,selection,val_loss,train_loss");
  json doc = json::array();
  for (const auto& r : rows) {
    csv << r.method << ',' << subset_string(r.selection) << ',' << fmt(r.val_loss) << ',' << fmt(r.train_loss)
        << '\n';
    doc.push_back(
        {{"method", r.method}, {"selection", r.selection}, {"val_loss", r.val_loss}, {"train_loss", r.train_loss}});
  }
  write_json({{"k", config.optimizer.k}, {"methods", doc}}, out / "baselines.json");
  return rows;
}

std::vector<SweepRow> cmd_sweep(const ExperimentConfig& config) {
  const fs::path out = prepare_output(config, "sweep");
  LoadedTask lt = load(config);
  SyntheticTask task = lt.task;
  task.ctx = lt.ctx;
  auto rows = layer_count_sweep(task, config.optimizer, config.sweep_k);
  auto csv = open_csv(out / "sweep.csv", "k,selection,val_loss,trainable_params");
  json doc = json::array();
  for (const auto& r : rows) {
    csv << r.k << ',' << subset_string(r.selection) << ',' << fmt(r.val_loss) << ',' << r.trainable_params << '\n';
    doc.push_back({{"k", r.k},
                   {"selection", r.selection},
                   {"val_loss", r.val_loss},
                   {"trainable_params", r.trainable_params}});
  }
  write_json({{"records", doc}}, out / "sweep.json");
  return rows;
}

EvalReport cmd_eval(const ExperimentConfig& config) {
  const fs::path out = prepare_output(config, "eval");
  LoadedTask lt = load(config);
  const std::string path = config.resolved_checkpoint();
  EvalReport r = evaluate_backbone(load_checkpoint(path), lt.task, lt.ctx);
  json doc = r.to_json();
  doc["checkpoint"] = path;
  write_json(doc, out / "eval.json");
  return r;
}

}  // namespace bilalora
