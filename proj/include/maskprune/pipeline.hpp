#pragma once

// End-to-end pruning run and the parameter sweep built on it.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "maskprune/corpus.hpp"
#include "maskprune/io.hpp"
#include "maskprune/minimax.hpp"
#include "maskprune/prune.hpp"
#include "maskprune/stats.hpp"
#include "maskprune/train.hpp"

namespace maskprune {

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  const std::size_t layers = trace.empty() ? 0 : trace.front().head_mass.size();
  os << std::setprecision(17);
  os << "iteration,loss,kl,layer_mse,lm,s_head,s_inter,y,y_inter,z,resource,grad_s_head,"
        "grad_s_inter,interval,inter_prox,head_count_var,inter_width_var";
  for (std::size_t l = 0; l < layers; ++l) os << ",head_mass_" << l;
  for (std::size_t l = 0; l < layers; ++l) os << ",inter_mass_" << l;
  os << '\n';
  for (const TraceRow& r : trace) {
    os << r.iteration << ',' << r.loss.total << ',' << r.loss.kl << ',' << r.loss.layer << ','
       << r.loss.lm << ',' << r.s_head << ',' << r.s_inter << ',' << r.y << ',' << r.y_inter << ','
       << r.z << ',' << r.resource << ',' << r.grad_s_head << ',' << r.grad_s_inter << ','
       << r.interval << ',' << int(r.inter_prox) << ',' << r.head_count_var << ','
       << r.inter_width_var;
    for (double v : r.head_mass) os << ',' << v;
    for (double v : r.inter_mass) os << ',' << v;
    os << '\n';
  }
}

inline json plan_to_json(const PrunePlan& p) {
  return {{"heads_removed_per_layer", p.heads_removed()},
          {"channels_removed_per_layer", p.channels_removed()},
          {"heads", p.heads},
          {"channels", p.channels}};
}

struct PruneArtifacts {
  RunResult run;
  PrunePlan plan;
  ModelParams small;
  json summary;
};

/// Largest logit gap between two model variants over `windows`.
inline double logit_gap(const ModelParams& a, const MaskSet* ma, const LoraSet* la,
                        const ModelParams& b, const MaskSet* mb, const LoraSet* lb,
                        const std::vector<Sequence>& windows) {
  LmRunner ra, rb;
  double worst = 0.0;
  for (const Sequence& w : windows) {
    worst = std::max(worst, max_abs_diff(ra.run(a, ma, la, w.inputs).logits,
                                         rb.run(b, mb, lb, w.inputs).logits));
  }
  return worst;
}

/// Minimax training, selection, fusion, materialization and checks on an
/// already-loaded dense model. Writes artifacts when `out_dir` is non-empty.
inline PruneArtifacts prune_model(const ModelParams& dense, const Corpus& corpus,
                                  const ExperimentConfig& cfg, const std::string& out_dir,
                                  std::ostream* log = nullptr) {
  cfg.run.validate();
  const ModelConfig& mc = dense.config;
  MinimaxTrainer trainer(dense, cfg.run);
  BatchSampler sampler(corpus.train(), mc.seq_len, cfg.run.batch_size, cfg.run.seed);
  const std::size_t every = std::max<std::size_t>(1, cfg.run.iterations / 20);
  PruneArtifacts out;
  out.run = trainer.run([&] { return sampler.next(); },
                        [&](const TraceRow& r) {
                          if (log && (r.iteration % every == 0 || r.iteration == 1)) {
                            *log << "iter " << r.iteration << " loss " << r.loss.total
                                 << " s_head " << r.s_head << " s_inter " << r.s_inter << " y "
                                 << r.y << " z " << r.z << " M(s) " << r.resource << '\n';
                          }
                        });
  const TrainState& st = out.run.state;
  const LoraSet* lora = st.lora.empty() ? nullptr : &st.lora;

  out.plan = select_pruned(st.masks, st.sparsity);
  const MaskSet zeroed = hard_zero(st.masks, out.plan);
  const ModelParams fused = fuse_masks(dense, zeroed, lora);
  out.small = materialize(fused, out.plan);

  BatchSampler verify_sampler(corpus.eval(), mc.seq_len, 1, cfg.run.seed + 1000003);
  std::vector<Sequence> verify;
  std::vector<std::vector<int>> verify_tokens;
  for (std::size_t i = 0; i < cfg.verify_batches; ++i) {
    verify.push_back(verify_sampler.next().front());
    verify_tokens.push_back(verify.back().inputs);
  }
  const double fusion_diff = logit_gap(dense, &zeroed, lora, fused, nullptr, nullptr, verify);
  const double excision_diff = logit_gap(fused, nullptr, nullptr, out.small, nullptr, nullptr, verify);
  const double equivalence = verify_equivalence(dense, st.masks, lora, out.plan, out.small, verify_tokens);

  const std::vector<Sequence> eval_set = chunk_windows(corpus.eval(), mc.seq_len, cfg.eval_windows);
  const double ppl_dense = eval_ppl(dense, nullptr, nullptr, eval_set);
  const double ppl_masked = eval_ppl(dense, &st.masks, lora, eval_set);
  const double ppl_pruned = eval_ppl(out.small, nullptr, nullptr, eval_set);

  const auto [head_var, width_var] = structure_variance(out.small);
  const double total = static_cast<double>(dense.count());
  const ResourceModel& rm = out.run.resource;
  const TraceRow* last = out.run.trace.empty() ? nullptr : &out.run.trace.back();
  json& s = out.summary;
  s["iterations"] = st.t;
  s["target_sparsity"] = cfg.run.target_sparsity;
  s["achieved_sparsity"] = actual_sparsity(zeroed, mc, total);
  s["achieved_sparsity_before_hard_zero"] = actual_sparsity(st.masks, mc, total);
  s["params_dense"] = dense.count();
  s["params_pruned"] = out.small.count();
  s["resource_M_s"] = resource(rm, st.sparsity);
  s["resource_target"] = rm.target;
  s["resource_tolerance"] = rm.channel_cost;
  s["constraint_met"] = out.run.constraint_met;
  s["s_head"] = st.sparsity.s_head;
  s["s_inter"] = st.sparsity.s_inter;
  s["heads_removed_per_layer"] = out.plan.heads_removed();
  s["channels_removed_per_layer"] = out.plan.channels_removed();
  s["y"] = st.sparsity.y;
  s["z"] = st.sparsity.z;
  s["final_loss"] = last ? last->loss.total : 0.0;
  s["uniformity_variance_heads"] = head_var;
  s["uniformity_variance_width"] = width_var;
  s["fusion_diff"] = fusion_diff;
  s["excision_diff"] = excision_diff;
  s["equivalence_diff"] = equivalence;
  s["stray_zero_units"] = stray_zero_units(st.masks, out.plan);
  s["ppl_dense"] = ppl_dense;
  s["ppl_masked"] = ppl_masked;
  s["ppl_pruned"] = ppl_pruned;
  s["wall_clock_seconds"] = out.run.seconds;

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path dir(out_dir);
    std::ofstream trace(dir / "trace.csv");
    write_trace_csv(trace, out.run.trace);
    std::ofstream values(dir / "mask_stats.csv");
    write_mask_values_csv(values, st.masks);
    std::ofstream hist(dir / "mask_hist.csv");
    write_mask_hist_csv(hist, mask_stats(st.masks));
    write_json((dir / "plan.json").string(), plan_to_json(out.plan));
    write_json((dir / "summary.json").string(), s);
    save_checkpoint((dir / "pruned.ckpt.json").string(), Checkpoint{out.small, {}, {}, {}});
    save_checkpoint((dir / "masked.ckpt.json").string(),
                    Checkpoint{dense, st.masks, st.lora, st.sparsity});
  }
  return out;
}

/// Loads the corpus and dense checkpoint named in `cfg`, then prunes.
inline PruneArtifacts run_prune(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const Checkpoint ck = load_checkpoint(cfg.checkpoint);
  if (ck.params.config != cfg.model && log) {
    *log << "note: using the model shape stored in " << cfg.checkpoint << '\n';
  }
  const Corpus corpus = Corpus::load(cfg.corpus, cfg.eval_fraction);
  return prune_model(ck.params, corpus, cfg, cfg.out_dir, log);
}

struct SweepEntry {
  double value = 0.0;
  bool ok = false;
  std::string error;
  json summary;
};

/// Sets one sweepable field. Only the proximal decay rate and the initial
/// optimization interval are sweepable.
inline void set_sweep_param(ExperimentConfig& cfg, const std::string& param, double value) {
  if (param == "decay_rate" || param == "eta1") {
    cfg.run.eta1 = value;
  } else if (param == "interval_start") {
    if (!(value >= 1.0) || value != std::floor(value)) {
      throw ConfigError("interval_start values must be positive integers");
    }
    cfg.run.interval_start = static_cast<std::size_t>(value);
    cfg.run.interval_end = std::min(cfg.run.interval_end, cfg.run.interval_start);
  } else {
    throw ConfigError("unknown sweep parameter '" + param + "' (use decay_rate or interval_start)");
  }
}

/// One pruning run per value; a failing run is recorded and the sweep goes on.
inline std::vector<SweepEntry> run_sweep(const ModelParams& dense, const Corpus& corpus,
                                         const ExperimentConfig& base, const std::string& param,
                                         const std::vector<double>& values,
                                         const std::string& out_dir, std::ostream* log = nullptr) {
  if (values.size() < 2) throw ConfigError("a sweep needs at least two values");
  ExperimentConfig probe = base;
  for (double v : values) set_sweep_param(probe, param, v);
  std::vector<SweepEntry> entries;
  for (double v : values) {
    SweepEntry e;
    e.value = v;
    ExperimentConfig cfg = base;
    set_sweep_param(cfg, param, v);
    std::ostringstream name;
    name << param << '_' << v;
    const std::string dir = out_dir.empty() ? "" : (std::filesystem::path(out_dir) / name.str()).string();
    if (log) *log << "sweep " << param << " = " << v << '\n';
    try {
      e.summary = prune_model(dense, corpus, cfg, dir, log).summary;
      e.ok = e.summary.at("constraint_met").get<bool>();
      if (!e.ok) e.error = "resource constraint not met";
    } catch (const Error& err) {
      e.error = err.what();
    }
    entries.push_back(std::move(e));
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream csv(std::filesystem::path(out_dir) / "sweep.csv");
    csv << std::setprecision(17);
    csv << "param,value,status,final_loss,achieved_sparsity,resource_M_s,ppl_pruned,"
           "uniformity_variance_heads,uniformity_variance_width,error\n";
    for (const SweepEntry& e : entries) {
      csv << param << ',' << e.value << ',' << (e.ok ? "ok" : "failed") << ',';
      if (e.summary.is_object()) {
        csv << e.summary["final_loss"].get<double>() << ','
            << e.summary["achieved_sparsity"].get<double>() << ','
            << e.summary["resource_M_s"].get<double>() << ','
            << e.summary["ppl_pruned"].get<double>() << ','
            << e.summary["uniformity_variance_heads"].get<double>() << ','
            << e.summary["uniformity_variance_width"].get<double>() << ',';
      } else {
        csv << ",,,,,,";
      }
      csv << '"' << e.error << "\"\n";
    }
  }
  return entries;
}

}  // namespace maskprune
