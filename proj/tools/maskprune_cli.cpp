#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <CLI11.hpp>

#include "maskprune/pipeline.hpp"

namespace mp = maskprune;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kConfig = 2, kConstraint = 3, kNumerical = 4 };

/// Config file plus `--key value` overrides, applied in that order.
struct ConfigArgs {
  std::string file;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App& app) {
    app.add_option("-c,--config", file, "JSON config file");
    mp::ExperimentConfig defaults;
    mp::visit_fields(defaults, [&](const char* key, const auto& field) {
      std::ostringstream help;
      help << "config key " << key << " (default " << mp::json(field).dump() << ')';
      app.add_option_function<std::string>(
          std::string("--") + key, [this, k = std::string(key)](const std::string& v) { overrides[k] = v; },
          help.str())
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    });
  }

  mp::ExperimentConfig resolve() const {
    mp::ExperimentConfig cfg = file.empty() ? mp::ExperimentConfig{} : mp::load_config(file);
    mp::json j = mp::json::object();
    mp::visit_fields(cfg, [&](const char* key, const auto& field) {
      const auto it = overrides.find(key);
      if (it == overrides.end()) return;
      using T = std::decay_t<decltype(field)>;
      if constexpr (std::is_same_v<T, std::string>) {
        j[key] = it->second;
      } else {
        try {
          j[key] = mp::json::parse(it->second);
        } catch (const mp::json::parse_error&) {
          throw mp::ConfigError("cannot parse --" + std::string(key) + " value '" + it->second + "'");
        }
      }
    });
    cfg = mp::config_from_json(j, cfg);
    cfg.validate();
    return cfg;
  }
};

std::vector<double> parse_values(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw mp::ConfigError("bad sweep value '" + item + "'");
    }
  }
  return out;
}

int cmd_pretrain(const mp::ExperimentConfig& cfg) {
  const mp::Corpus corpus = mp::Corpus::load(cfg.corpus, cfg.eval_fraction);
  const std::size_t every = std::max<std::size_t>(1, cfg.pretrain.steps / 20);
  const mp::PretrainResult res = mp::pretrain(cfg.model, cfg.pretrain, corpus, [&](std::size_t step, double loss) {
    if (step % every == 0 || step == 1) std::cerr << "step " << step << " loss " << loss << '\n';
  });
  mp::save_checkpoint(cfg.checkpoint, mp::Checkpoint{res.params, {}, {}, {}});
  std::cout << mp::json{{"checkpoint", cfg.checkpoint},
                        {"initial_ppl", res.initial_ppl},
                        {"final_ppl", res.final_ppl},
                        {"reached_target", res.reached_target}}
                   .dump(1)
            << '\n';
  return kOk;
}

int cmd_prune(const mp::ExperimentConfig& cfg) {
  const mp::PruneArtifacts art = mp::run_prune(cfg, &std::cerr);
  std::cout << art.summary.dump(1) << '\n';
  return art.run.constraint_met ? kOk : kConstraint;
}

int cmd_eval(const mp::ExperimentConfig& cfg) {
  const mp::Checkpoint ck = mp::load_checkpoint(cfg.checkpoint);
  const mp::Corpus corpus = mp::Corpus::load(cfg.corpus, cfg.eval_fraction);
  const auto windows = mp::chunk_windows(corpus.eval(), ck.params.config.seq_len, cfg.eval_windows);
  const mp::MaskSet* masks = ck.masks ? &*ck.masks : nullptr;
  const mp::LoraSet* lora = ck.lora ? &*ck.lora : nullptr;
  mp::json out{{"checkpoint", cfg.checkpoint},
               {"params", ck.params.count()},
               {"windows", windows.size()},
               {"ppl", mp::eval_ppl(ck.params, masks, lora, windows)}};
  if (masks) out["ppl_unmasked"] = mp::eval_ppl(ck.params, nullptr, nullptr, windows);
  std::cout << out.dump(1) << '\n';
  return kOk;
}

int cmd_stats(const mp::ExperimentConfig& cfg) {
  const mp::Checkpoint ck = mp::load_checkpoint(cfg.checkpoint);
  if (!ck.masks) throw mp::ConfigError(cfg.checkpoint + " holds no masks; pass the masked checkpoint of a prune run");
  const std::filesystem::path dir(cfg.out_dir);
  std::filesystem::create_directories(dir);
  std::ofstream values(dir / "mask_stats.csv");
  mp::write_mask_values_csv(values, *ck.masks);
  std::ofstream hist(dir / "mask_hist.csv");
  mp::write_mask_hist_csv(hist, mp::mask_stats(*ck.masks));
  std::cout << "wrote " << (dir / "mask_stats.csv").string() << " and " << (dir / "mask_hist.csv").string()
            << '\n';
  return kOk;
}

int cmd_sweep(const mp::ExperimentConfig& cfg, const std::string& param, const std::string& list) {
  const mp::Checkpoint ck = mp::load_checkpoint(cfg.checkpoint);
  const mp::Corpus corpus = mp::Corpus::load(cfg.corpus, cfg.eval_fraction);
  const auto entries = mp::run_sweep(ck.params, corpus, cfg, param, parse_values(list), cfg.out_dir, &std::cerr);
  for (const mp::SweepEntry& e : entries) {
    std::cout << param << '=' << e.value << ' ' << (e.ok ? "ok" : "failed");
    if (e.summary.is_object()) std::cout << " final_loss " << e.summary["final_loss"].get<double>();
    if (!e.error.empty()) std::cout << " (" << e.error << ')';
    std::cout << '\n';
  }
  std::cout << "wrote " << (std::filesystem::path(cfg.out_dir) / "sweep.csv").string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Minimax structured pruning of a toy LLaMA-style model"};
  app.require_subcommand(1);

  ConfigArgs pretrain_args, prune_args, eval_args, stats_args, sweep_args;
  CLI::App* pretrain = app.add_subcommand("pretrain", "train the dense model and save a checkpoint");
  CLI::App* prune = app.add_subcommand("prune", "learn masks, prune and write run artifacts");
  CLI::App* eval = app.add_subcommand("eval", "perplexity of a checkpoint on the held-out split");
  CLI::App* stats = app.add_subcommand("stats", "mask value CSV and histograms from a masked checkpoint");
  CLI::App* sweep = app.add_subcommand("sweep", "one prune run per value of decay_rate or interval_start");
  pretrain_args.attach(*pretrain);
  prune_args.attach(*prune);
  eval_args.attach(*eval);
  stats_args.attach(*stats);
  sweep_args.attach(*sweep);
  std::string param, values;
  sweep->add_option("--param", param, "decay_rate or interval_start")->required();
  sweep->add_option("--values", values, "comma separated values")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (*pretrain) return cmd_pretrain(pretrain_args.resolve());
    if (*prune) return cmd_prune(prune_args.resolve());
    if (*eval) return cmd_eval(eval_args.resolve());
    if (*stats) return cmd_stats(stats_args.resolve());
    if (*sweep) return cmd_sweep(sweep_args.resolve(), param, values);
  } catch (const mp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const mp::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
