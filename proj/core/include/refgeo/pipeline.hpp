#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "refgeo/corpus.hpp"
#include "refgeo/model.hpp"

namespace refgeo {

// One experiment = one named pipeline over flat files. Defaults reproduce
// the full toy study; every knob is overridable from a config JSON.
struct ExperimentConfig {
  std::string kind;  // train_base | jailbreak_sft | jailbreak_rlvr | abliterate |
                     // self_audit | reflection | similarity | category_transfer |
                     // patch_repair
  uint64_t seed = 0;
  std::string out_dir;
  std::string corpus_dir;
  std::map<std::string, std::string> models;  // role -> checkpoint path
  std::string direction_path;                 // patch_repair input
  std::string dataset_path;                   // optional route-training override
  std::string checkpoint_out;                 // optional checkpoint path override
  int threads = 1;

  // model shape (train_base)
  int vocab_size = 64;
  int d_model = 48;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 96;
  int max_seq_len = 32;

  // route hyperparameters (-1 = kind default)
  int steps = -1;
  double lr = -1.0;
  int batch = -1;
  int phase2_steps = -1;   // train_base safety phase
  double phase2_lr = -1.0;
  int group_size = 8;
  double clip_eps = 0.2;
  int max_new = 8;
  int inner_epochs = 1;
  double rollout_temperature = 1.3;
  double reward_stop = 4.9;        // stop rlvr once mean reward holds above this
  int reward_stop_patience = 3;    // ... for this many consecutive steps (0 = never)
  std::string category;        // restrict jailbreak_rlvr to one category slice
  int direction_layer = -1;    // -1 = round(0.65 * n_layers)
  std::string pooling = "last_prompt_token";

  // patch repair grid
  std::vector<int> patch_layers;      // empty = every trace layer
  std::vector<double> patch_lambdas;  // empty = {0, 0.5, 1.0, 1.5}
  std::string patch_positions = "last_prompt_token";
  int n_controls = 8;
  int repair_eval_prompts = 24;

  // similarity
  int similarity_categories = 4;

  void validate() const;
};

ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig config_from_json_file(const std::string& path);
std::string config_canonical_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

struct PipelineResult {
  bool ok = true;
  std::string failed_stage;
  std::string summary_path;
  std::string summary_json;
};

// Executes the named pipeline end to end; outputs land in cfg.out_dir and
// every file carries the config hash and seed. A stage failure keeps
// partial outputs and marks the stage in the summary.
PipelineResult run_pipeline(const ExperimentConfig& cfg);

// Collects pipeline outputs under results_dir into a plot-ready CSV/JSON
// bundle at out_dir. Fails with the full list of missing tables.
void emit_report(const std::string& results_dir, const std::string& out_dir);

// Mean oracle compliance of greedy responses on a prompt set.
double mean_compliance(const ModelParams& model, std::span<const PromptRecord> prompts,
                       uint64_t seed, int max_new);

}  // namespace refgeo
