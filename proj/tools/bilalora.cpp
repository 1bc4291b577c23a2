// Command-line front end: bilalora <pretrain|adapt|oracle|baselines|sweep|eval> [--config file] [flags]
#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bilalora/errors.hpp"
#include "bilalora/experiment.hpp"
#include "json.hpp"

namespace {

using nlohmann::json;
using namespace bilalora;

enum class Kind { kNumber, kInteger, kBool, kString, kList };

struct Override {
  const char* flag;
  const char* pointer;
  Kind kind;
  const char* help;
};

// Every flag maps onto one config key and takes precedence over the file.
const std::vector<Override> kOverrides = {
    {"--seed", "/seed", Kind::kInteger, "seed for every random stream"},
    {"--layers", "/task/layer_count", Kind::kInteger, "backbone layer count"},
    {"--width", "/task/width", Kind::kInteger, "hidden width"},
    {"--input-dim", "/task/input_dim", Kind::kInteger, "sample width"},
    {"--embed-dim", "/task/embed_dim", Kind::kInteger, "encoder output width"},
    {"--planted", "/task/planted", Kind::kList, "planted layers, e.g. 2,3,5"},
    {"--shift-magnitude", "/task/shift_magnitude", Kind::kNumber, "planted shift size"},
    {"--unit-fraction", "/task/unit_fraction", Kind::kNumber, "fraction of shifted units"},
    {"--pretrain-steps", "/task/pretrain_steps", Kind::kInteger, "pretraining steps"},
    {"--pretrain-threshold", "/task/pretrain_threshold", Kind::kNumber, "max source loss (inf disables)"},
    {"--rank", "/adapter/rank", Kind::kInteger, "adapter rank r"},
    {"--gamma", "/adapter/gamma", Kind::kNumber, "adapter scaling"},
    {"--eta-w", "/optimizer/eta_w", Kind::kNumber, "adapter step size"},
    {"--eta-alpha", "/optimizer/eta_alpha", Kind::kNumber, "gate step size"},
    {"--epochs", "/optimizer/epochs", Kind::kInteger, "total epochs T"},
    {"--switch-epoch", "/optimizer/switch_epoch", Kind::kInteger, "switch epoch T_s"},
    {"--k", "/optimizer/k", Kind::kInteger, "layers to select"},
    {"--guard", "/optimizer/guard", Kind::kNumber, "stationarity guard"},
    {"--momentum", "/optimizer/momentum", Kind::kNumber, "momentum (0 disables)"},
    {"--batch-size", "/optimizer/batch_size", Kind::kInteger, "positioning batch rows (0 = split)"},
    {"--finetune-batch-size", "/optimizer/finetune_batch_size", Kind::kInteger, "fine-tuning batch rows"},
    {"--per-batch-updates", "/optimizer/per_batch_updates", Kind::kBool, "sweep all batches per epoch"},
    {"--method", "/optimizer/method", Kind::kString, "bilevel or joint"},
    {"--binarize-gates", "/flags/binarize_gates", Kind::kBool, "binarize selected gates"},
    {"--warm-start", "/flags/warm_start_stage2", Kind::kBool, "keep stage-1 adapters"},
    {"--full-finetune", "/flags/full_finetune", Kind::kBool, "adapt trains all frozen weights"},
    {"--budget", "/oracle/budget", Kind::kInteger, "oracle steps per subset"},
    {"--sweep-k", "/sweep/k_values", Kind::kList, "k values, e.g. 1,2,3"},
    {"--out", "/paths/out_dir", Kind::kString, "output directory"},
    {"--task-dir", "/paths/task_dir", Kind::kString, "task directory (default <out>/task)"},
    {"--checkpoint", "/paths/checkpoint", Kind::kString, "checkpoint to evaluate"},
    {"--anchors", "/paths/anchors", Kind::kString, "alternate anchor file"},
};

json parse_value(const Override& o, const std::string& text) {
  const std::string where = std::string(o.flag) + " " + text;
  switch (o.kind) {
    case Kind::kString:
      return text;
    case Kind::kBool:
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw ConfigError(where + ": expected true or false");
    case Kind::kList: {
      json list = json::array();
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (item.find_first_not_of("0123456789") != std::string::npos) {
          throw ConfigError(where + ": expected comma-separated non-negative integers");
        }
        list.push_back(std::stoull(item));
      }
      return list;
    }
    case Kind::kInteger:
      if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError(where + ": expected a non-negative integer");
      }
      return std::stoull(text);
    case Kind::kNumber:
      if (text == "inf" || text == "infinity") return "inf";
      try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
      } catch (const std::exception&) {
        throw ConfigError(where + ": expected a number");
      }
  }
  return nullptr;
}

void print_error(std::string_view code, const std::string& message) {
  std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilevel layer-positioning LoRA experiments on a synthetic planted-bottleneck task"};
  app.require_subcommand(1);
  std::string config_path;
  std::map<std::string, std::string> values;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"pretrain", "fit the backbone and write the task and pretrained checkpoint"},
      {"adapt", "run two-stage adaptation on the task"},
      {"oracle", "score every k-subset by brute force"},
      {"baselines", "compare selection methods"},
      {"sweep", "run adaptation for several k"},
      {"eval", "report losses of a checkpoint"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON config file");
    for (const auto& o : kOverrides) sub->add_option(o.flag, values[o.flag], o.help);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 64;
  }

  try {
    json doc = config_path.empty() ? json::object() : config_to_json(load_config(config_path));
    for (const auto& o : kOverrides) {
      CLI::App* sub = app.get_subcommands().front();
      if (sub->count(o.flag) == 0) continue;
      doc[json::json_pointer(o.pointer)] = parse_value(o, values[o.flag]);
    }
    const ExperimentConfig config = config_from_json(doc);
    const std::string command = app.get_subcommands().front()->get_name();

    json result;
    if (command == "pretrain") {
      const auto r = cmd_pretrain(config);
      result = {{"source_loss", r.source_loss}, {"pretrained_val_h2c", r.pretrained_val_loss}};
    } else if (command == "adapt") {
      const auto r = cmd_adapt(config);
      result = {{"selection", r.run.selection},
                {"final_val_loss", r.run.final_val_loss},
                {"pretrained_val_loss", r.pretrained_val_loss}};
    } else if (command == "oracle") {
      const auto r = cmd_oracle(config);
      result = {{"subsets", r.subsets.size()}, {"best_subset", r.best_subset()}};
    } else if (command == "baselines") {
      const auto rows = cmd_baselines(config);
      for (const auto& row : rows) result[row.method] = row.val_loss;
    } else if (command == "sweep") {
      const auto rows = cmd_sweep(config);
      for (const auto& row : rows) result[std::to_string(row.k)] = row.val_loss;
    } else {
      result = cmd_eval(config).to_json();
    }
    result["command"] = command;
    result["out_dir"] = config.out_dir;
    std::cout << result.dump() << '\n';
    return 0;
  } catch (const Error& e) {
    print_error(error_code_name(e.code()), e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 3;
  }
}
