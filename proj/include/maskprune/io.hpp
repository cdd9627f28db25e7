#pragma once

// Flat experiment config and the JSON checkpoint container.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "maskprune/errors.hpp"
#include "maskprune/minimax.hpp"
#include "maskprune/model.hpp"
#include "maskprune/sparsity.hpp"
#include "maskprune/train.hpp"

namespace maskprune {

using json = nlohmann::json;

/// Every knob of a run in one flat namespace.
struct ExperimentConfig {
  ModelConfig model;
  RunConfig run;
  PretrainConfig pretrain;
  std::string corpus = "data/corpus.txt";
  std::string checkpoint = "dense.ckpt.json";
  std::string out_dir = "out";
  double eval_fraction = 0.1;
  std::size_t eval_windows = 32;
  std::size_t verify_batches = 16;

  void validate() const {
    model.validate_dense();
    run.validate();
    pretrain.validate();
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
      throw ConfigError("eval_fraction must lie in (0, 1)");
    }
    if (eval_windows == 0 || verify_batches == 0) {
      throw ConfigError("eval_windows and verify_batches must be >= 1");
    }
  }
};

/// Calls fn(key, field) for every config field.
template <class Cfg, class Fn>
void visit_fields(Cfg& c, Fn&& fn) {
  fn("layers", c.model.layers);
  fn("heads", c.model.heads);
  fn("head_dim", c.model.head_dim);
  fn("hidden", c.model.hidden);
  fn("ffn", c.model.ffn);
  fn("vocab", c.model.vocab);
  fn("seq_len", c.model.seq_len);

  fn("eta1", c.run.eta1);
  fn("eta2", c.run.eta2);
  fn("eta3", c.run.eta3);
  fn("eta4", c.run.eta4);
  fn("mask_lr", c.run.mask_lr);
  fn("lora_lr", c.run.lora_lr);
  fn("weight_decay", c.run.weight_decay);
  fn("adam_beta1", c.run.adam_beta1);
  fn("adam_beta2", c.run.adam_beta2);
  fn("adam_eps", c.run.adam_eps);
  fn("batch_size", c.run.batch_size);
  fn("iterations", c.run.iterations);
  fn("interval_start", c.run.interval_start);
  fn("interval_end", c.run.interval_end);
  fn("target_sparsity", c.run.target_sparsity);
  fn("alpha", c.run.alpha);
  fn("include_lm_loss", c.run.include_lm_loss);
  fn("lm_loss_weight", c.run.lm_loss_weight);
  fn("lora_rank", c.run.lora_rank);
  fn("lora_init_std", c.run.lora_init_std);
  fn("shared_multiplier", c.run.shared_multiplier);
  fn("retained_threshold", c.run.retained_threshold);
  fn("seed", c.run.seed);

  fn("pretrain_steps", c.pretrain.steps);
  fn("pretrain_batch_size", c.pretrain.batch_size);
  fn("pretrain_lr", c.pretrain.lr);
  fn("pretrain_weight_decay", c.pretrain.weight_decay);
  fn("pretrain_seed", c.pretrain.seed);

  fn("corpus", c.corpus);
  fn("checkpoint", c.checkpoint);
  fn("out_dir", c.out_dir);
  fn("eval_fraction", c.eval_fraction);
  fn("eval_windows", c.eval_windows);
  fn("verify_batches", c.verify_batches);
}

inline json config_to_json(const ExperimentConfig& c) {
  json j = json::object();
  visit_fields(c, [&](const char* key, const auto& v) { j[key] = v; });
  return j;
}

/// Applies the keys present in `j` on top of `base`. Unknown keys and
/// mistyped values are configuration errors.
inline ExperimentConfig config_from_json(const json& j, ExperimentConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    visit_fields(base, [&](const char* key, auto& field) {
      if (it.key() != key) return;
      known = true;
      using T = std::decay_t<decltype(field)>;
      const json& v = it.value();
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("config key '" + it.key() + "' expects a boolean");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("config key '" + it.key() + "' expects a string");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("config key '" + it.key() + "' expects a number");
      } else {
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
          throw ConfigError("config key '" + it.key() + "' expects a non-negative integer");
        }
      }
      field = v.get<T>();
    });
    if (!known) throw ConfigError("unknown config key '" + it.key() + "'");
  }
  return base;
}

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path + ": " + e.what());
  }
}

inline void write_json(const std::string& path, const json& j) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(1) << '\n';
}

inline ExperimentConfig load_config(const std::string& path) {
  return config_from_json(read_json(path));
}

// ---- checkpoint container -------------------------------------------------

inline constexpr const char* kCheckpointFormat = "maskprune-checkpoint-v1";

inline json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

inline Tensor tensor_from_json(const json& j) {
  Tensor t(j.at("shape").get<Shape>());
  const auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != t.size()) throw ShapeError("checkpoint tensor size does not match its shape");
  t.assign(data);
  return t;
}

inline json model_config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers}, {"heads", c.heads},   {"head_dim", c.head_dim},
          {"hidden", c.hidden}, {"ffn", c.ffn},       {"vocab", c.vocab},
          {"seq_len", c.seq_len}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.head_dim = j.at("head_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.ffn = j.at("ffn").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.seq_len = j.at("seq_len").get<std::size_t>();
  c.validate();
  return c;
}

struct Checkpoint {
  ModelParams params;
  std::optional<MaskSet> masks;
  std::optional<LoraSet> lora;
  std::optional<SparsityState> sparsity;
};

inline json checkpoint_to_json(const Checkpoint& ck) {
  json j;
  j["format"] = kCheckpointFormat;
  j["config"] = model_config_to_json(ck.params.config);
  json& tensors = j["tensors"];
  ck.params.for_each([&](const std::string& name, const Tensor& t) { tensors[name] = tensor_to_json(t); });
  if (ck.masks) {
    json& m = j["masks"];
    for (std::size_t l = 0; l < ck.masks->layers(); ++l) {
      m[mask_head_key(l)] = tensor_to_json(ck.masks->head[l]);
      m[mask_inter_key(l)] = tensor_to_json(ck.masks->inter[l]);
    }
  }
  if (ck.lora && !ck.lora->empty()) {
    j["lora_rank"] = ck.lora->rank;
    json& lj = j["lora"];
    ck.lora->for_each([&](const std::string& name, const Tensor& t) { lj[name] = tensor_to_json(t); });
  }
  if (ck.sparsity) {
    j["sparsity"] = {{"s_head", ck.sparsity->s_head},
                     {"s_inter", ck.sparsity->s_inter},
                     {"y", ck.sparsity->y},
                     {"z", ck.sparsity->z}};
  }
  return j;
}

inline Checkpoint checkpoint_from_json(const json& j) {
  if (!j.is_object() || j.value("format", std::string()) != kCheckpointFormat) {
    throw ConfigError("not a maskprune checkpoint (missing or wrong format tag)");
  }
  try {
    Checkpoint ck;
    ck.params.config = model_config_from_json(j.at("config"));
    const ModelConfig& cfg = ck.params.config;
    ck.params.layers.resize(cfg.layers);
    const json& tensors = j.at("tensors");
    std::size_t expected = 0;
    ck.params.for_each([&](const std::string& name, Tensor& t) {
      t = tensor_from_json(tensors.at(name));
      ++expected;
    });
    if (tensors.size() != expected) throw ConfigError("checkpoint has unexpected tensors");
    const Shape inner_cols{cfg.hidden, cfg.inner()};
    for (const LayerParams& lp : ck.params.layers) {
      if (lp.wq.shape() != inner_cols || lp.w_up.shape() != Shape{cfg.hidden, cfg.ffn}) {
        throw ShapeError("checkpoint tensor shapes do not match its config");
      }
    }
    if (j.contains("masks")) {
      MaskSet m;
      for (std::size_t l = 0; l < cfg.layers; ++l) {
        m.head.push_back(tensor_from_json(j["masks"].at(mask_head_key(l))));
        m.inter.push_back(tensor_from_json(j["masks"].at(mask_inter_key(l))));
      }
      m.check(cfg);
      ck.masks = std::move(m);
    }
    if (j.contains("lora")) {
      LoraSet s = LoraSet::init(ck.params, j.at("lora_rank").get<std::size_t>(), 1.0, 0);
      s.for_each([&](const std::string& name, Tensor& t) {
        Tensor v = tensor_from_json(j["lora"].at(name));
        v.require_same_shape(t, "checkpoint lora");
        t = std::move(v);
      });
      ck.lora = std::move(s);
    }
    if (j.contains("sparsity")) {
      const json& s = j["sparsity"];
      ck.sparsity = SparsityState{s.at("s_head").get<double>(), s.at("s_inter").get<double>(),
                                  s.at("y").get<double>(), s.at("z").get<double>()};
    }
    return ck;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("corrupt checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_json(path, checkpoint_to_json(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("checkpoint not found: " + path);
  return checkpoint_from_json(read_json(path));
}

}  // namespace maskprune
