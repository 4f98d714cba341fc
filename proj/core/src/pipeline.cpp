#include "refgeo/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <set>

#include <nlohmann/json.hpp>

#include "refgeo/checkpoint.hpp"
#include "refgeo/directions.hpp"
#include "refgeo/edits.hpp"
#include "refgeo/errors.hpp"
#include "refgeo/io_util.hpp"
#include "refgeo/probes.hpp"
#include "refgeo/rng.hpp"
#include "refgeo/routes.hpp"
#include "refgeo/similarity.hpp"
#include "refgeo/threading.hpp"

namespace refgeo {

namespace {

using nlohmann::json;

const std::set<std::string> kKinds = {
    "train_base",  "jailbreak_sft",     "jailbreak_rlvr", "abliterate", "self_audit",
    "reflection",  "similarity",        "category_transfer", "patch_repair"};

json provenance_json(const ExperimentConfig& cfg) {
  json p;
  p["config_hash"] = config_hash(cfg);
  p["seed"] = cfg.seed;
  p["rubric_version"] = RewardOracle{}.version;
  p["template_version"] = std::string(kTemplateVersion);
  return p;
}

std::string csv_provenance(const ExperimentConfig& cfg) {
  return "# config_hash=" + config_hash(cfg) + " seed=" + std::to_string(cfg.seed) +
         " rubric_version=" + RewardOracle{}.version +
         " template_version=" + std::string(kTemplateVersion) + "\n";
}

void write_meta(const std::string& artifact_path, const ExperimentConfig& cfg) {
  json meta;
  meta["provenance"] = provenance_json(cfg);
  write_text_file_atomic(artifact_path + ".meta.json", meta.dump(2) + "\n");
}

struct KindDefaults {
  int steps = 0;
  double lr = 0.0;
  int batch = 0;
};

KindDefaults kind_defaults(const std::string& kind, bool category_restricted) {
  if (kind == "train_base") return {500, 0.2, 32};
  if (kind == "jailbreak_sft") return {400, 0.1, 16};
  if (kind == "jailbreak_rlvr") {
    if (category_restricted) return {300, 0.05, 8};
    return {300, 0.05, 16};
  }
  if (kind == "category_transfer") return {300, 0.05, 8};
  return {0, 0.0, 0};
}

ModelParams load_model(const std::string& role, const ExperimentConfig& cfg) {
  auto it = cfg.models.find(role);
  if (it == cfg.models.end())
    fail(ErrorKind::validation, "pipeline " + cfg.kind + " needs a '" + role + "' model path");
  return load_checkpoint(it->second);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Greedy generation + oracle scoring for one prompt set.
struct EvalScores {
  std::vector<double> per_prompt;
  double mean = 0.0;
  double refusal_rate = 0.0;
};

EvalScores eval_compliance(const ModelParams& model, std::span<const PromptRecord> prompts,
                           uint64_t seed, int max_new) {
  RewardOracle oracle;
  EvalScores out;
  out.per_prompt.resize(prompts.size());
  std::vector<int> first_token(prompts.size(), -1);
  parallel_for(prompts.size(), [&](size_t i) {
    SampleResult sr = sample(model, prompts[i].tokens, max_new, 1e-7,
                             prompt_seed(seed, prompts[i].id));
    out.per_prompt[i] = oracle_reward(oracle, sr.seq);
    if (sr.seq.length() > sr.seq.role_boundary)
      first_token[i] = sr.seq.tokens[static_cast<size_t>(sr.seq.role_boundary)];
  });
  out.mean = mean_of(out.per_prompt);
  int refusals = 0;
  for (int t : first_token)
    if (t == tok::REFUSE) ++refusals;
  out.refusal_rate = prompts.empty() ? 0.0 : static_cast<double>(refusals) / prompts.size();
  return out;
}

// Minibatch SFT loop with a seeded shuffle; returns per-step losses.
std::vector<double> train_sft_loop(ModelParams& params, std::span<const SFTPair> pairs,
                                   int steps, double lr, int batch, uint64_t seed,
                                   const std::string& order_stream) {
  CounterRng order_rng(seed, order_stream);
  std::vector<size_t> order(pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t pos = order.size();
  std::vector<double> losses;
  const size_t b = std::min<size_t>(static_cast<size_t>(batch), pairs.size());
  std::vector<SFTPair> view(b);
  for (int step = 0; step < steps; ++step) {
    if (pos + b > order.size()) {
      for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[order_rng.uniform_u64(i)]);
      pos = 0;
    }
    for (size_t i = 0; i < b; ++i) view[i] = pairs[order[pos + i]];
    pos += b;
    losses.push_back(sft_step(params, view, lr));
  }
  return losses;
}

void write_loss_log(const std::string& path, const ExperimentConfig& cfg,
                    const std::vector<double>& losses) {
  std::string out;
  for (size_t i = 0; i < losses.size(); ++i) {
    json row;
    row["step"] = i;
    row["loss"] = losses[i];
    out += row.dump() + "\n";
  }
  write_text_file_atomic(path, out);
}

json run_train_base(const ExperimentConfig& cfg) {
  ToyCorpus corpus = load_toy_corpus(cfg.corpus_dir);
  ModelConfig mc{cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads,
                 cfg.d_ff,       cfg.max_seq_len, cfg.seed};
  if (mc.vocab_size < tok::MIN_VOCAB)
    fail(ErrorKind::validation, "toy pipelines need vocab_size >= 64");
  ModelParams params = init_params(mc);

  KindDefaults def = kind_defaults(cfg.kind, false);
  int steps = cfg.steps > 0 ? cfg.steps : def.steps;
  double lr = cfg.lr > 0 ? cfg.lr : def.lr;
  int batch = cfg.batch > 0 ? cfg.batch : def.batch;
  int p2_steps = cfg.phase2_steps > 0 ? cfg.phase2_steps : 350;
  double p2_lr = cfg.phase2_lr > 0 ? cfg.phase2_lr : lr;

  std::vector<double> l1 =
      train_sft_loop(params, corpus.align_helpful, steps, lr, batch, cfg.seed, "phase1_order");
  std::vector<double> l2 =
      train_sft_loop(params, corpus.align_safety, p2_steps, p2_lr, batch, cfg.seed, "phase2_order");

  std::string ckpt = cfg.out_dir + "/base.tlm";
  save_checkpoint(params, ckpt);
  write_meta(ckpt, cfg);
  std::vector<double> all = l1;
  all.insert(all.end(), l2.begin(), l2.end());
  write_loss_log(cfg.out_dir + "/train_base_log.jsonl", cfg, all);

  EvalScores harm = eval_compliance(params, corpus.harmful_eval, cfg.seed, cfg.max_new);
  EvalScores benign = eval_compliance(params, corpus.benign_eval, cfg.seed, cfg.max_new);
  json s;
  s["model_id"] = "base";
  s["checkpoint"] = ckpt;
  s["phase1_final_loss"] = l1.back();
  s["phase2_final_loss"] = l2.back();
  s["eval"]["harmful_compliance"] = harm.mean;
  s["eval"]["harmful_refusal_rate"] = harm.refusal_rate;
  s["eval"]["benign_compliance"] = benign.mean;
  return s;
}

json run_jailbreak_sft(const ExperimentConfig& cfg) {
  ToyCorpus corpus = load_toy_corpus(cfg.corpus_dir);
  ModelParams params = load_model("base", cfg);
  KindDefaults def = kind_defaults(cfg.kind, false);
  int steps = cfg.steps > 0 ? cfg.steps : def.steps;
  double lr = cfg.lr > 0 ? cfg.lr : def.lr;
  int batch = cfg.batch > 0 ? cfg.batch : def.batch;

  std::vector<SFTPair> pairs = cfg.dataset_path.empty()
                                   ? corpus.sft_pairs
                                   : load_sft_pairs(cfg.dataset_path);
  std::vector<double> losses =
      train_sft_loop(params, pairs, steps, lr, batch, cfg.seed, "sft_order");
  std::string ckpt =
      cfg.checkpoint_out.empty() ? cfg.out_dir + "/sft.tlm" : cfg.checkpoint_out;
  save_checkpoint(params, ckpt);
  write_meta(ckpt, cfg);
  write_loss_log(cfg.out_dir + "/sft_log.jsonl", cfg, losses);

  EvalScores harm = eval_compliance(params, corpus.harmful_eval, cfg.seed, cfg.max_new);
  EvalScores benign = eval_compliance(params, corpus.benign_eval, cfg.seed, cfg.max_new);
  json s;
  s["model_id"] = "sft";
  s["checkpoint"] = ckpt;
  s["final_loss"] = losses.back();
  s["eval"]["harmful_compliance"] = harm.mean;
  s["eval"]["harmful_refusal_rate"] = harm.refusal_rate;
  s["eval"]["benign_compliance"] = benign.mean;
  return s;
}

json rlvr_train(ModelParams& params, std::span<const PromptRecord> prompts,
                const ExperimentConfig& cfg, int steps, double lr, int batch,
                const std::string& log_path) {
  CounterRng order_rng(cfg.seed, "rollout_order");
  std::vector<size_t> order(prompts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t pos = order.size();
  const size_t b = std::min<size_t>(static_cast<size_t>(batch), prompts.size());
  std::vector<PromptRecord> view(b);

  std::string log;
  json last;
  int saturated_streak = 0;
  for (int step = 0; step < steps; ++step) {
    if (pos + b > order.size()) {
      for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[order_rng.uniform_u64(i)]);
      pos = 0;
    }
    for (size_t i = 0; i < b; ++i) view[i] = prompts[order[pos + i]];
    pos += b;

    RlvrStepConfig rc;
    rc.group_size = cfg.group_size;
    rc.clip_eps = cfg.clip_eps;
    rc.learning_rate = lr;
    rc.max_new = cfg.max_new;
    rc.temperature = cfg.rollout_temperature;
    rc.inner_epochs = cfg.inner_epochs;
    rc.seed = derive_seed(cfg.seed, CounterRng::stream_id("rollout"), static_cast<uint64_t>(step));
    StepReport rep = rlvr_step(params, view, RewardOracle{}, rc);

    json row;
    row["step"] = step;
    row["mean_reward"] = rep.mean_reward;
    row["mean_abs_advantage"] = rep.mean_abs_advantage;
    row["frac_clipped"] = rep.frac_clipped;
    row["loss"] = rep.loss;
    row["n_degenerate"] = rep.n_degenerate;
    row["noop"] = rep.noop;
    log += row.dump() + "\n";
    last = row;

    // optimizing past saturation only erodes unrelated behavior
    saturated_streak = rep.mean_reward >= cfg.reward_stop ? saturated_streak + 1 : 0;
    if (cfg.reward_stop_patience > 0 && saturated_streak >= cfg.reward_stop_patience) {
      last["stopped_at_reward_target"] = true;
      break;
    }
  }
  write_text_file_atomic(log_path, log);
  return last;
}

json run_jailbreak_rlvr(const ExperimentConfig& cfg) {
  ToyCorpus corpus = load_toy_corpus(cfg.corpus_dir);
  ModelParams params = load_model("base", cfg);
  const bool restricted = !cfg.category.empty();
  KindDefaults def = kind_defaults(cfg.kind, restricted);
  int steps = cfg.steps > 0 ? cfg.steps : def.steps;
  double lr = cfg.lr > 0 ? cfg.lr : def.lr;
  int batch = cfg.batch > 0 ? cfg.batch : def.batch;

  std::vector<PromptRecord> override_prompts;
  if (!cfg.dataset_path.empty()) override_prompts = ingest_prompts(cfg.dataset_path).records;
  std::span<const PromptRecord> prompts(corpus.harmful_train);
  std::string model_id = "rlvr";
  if (restricted) {
    auto it = corpus.category_train.find(cfg.category);
    if (it == corpus.category_train.end())
      fail(ErrorKind::validation, "no category slice named " + cfg.category);
    prompts = it->second;
    model_id = "rlvr_" + cfg.category;
  }
  if (!override_prompts.empty()) prompts = override_prompts;

  std::string ckpt = cfg.checkpoint_out.empty() ? cfg.out_dir + "/" + model_id + ".tlm"
                                                : cfg.checkpoint_out;
  json last = rlvr_train(params, prompts, cfg, steps, lr, batch,
                         cfg.out_dir + "/" + model_id + "_log.jsonl");
  save_checkpoint(params, ckpt);
  write_meta(ckpt, cfg);

  EvalScores harm = eval_compliance(params, corpus.harmful_eval, cfg.seed, cfg.max_new);
  EvalScores benign = eval_compliance(params, corpus.benign_eval, cfg.seed, cfg.max_new);
  json s;
  s["model_id"] = model_id;
  s["checkpoint"] = ckpt;
  s["last_step"] = last;
  s["eval"]["harmful_compliance"] = harm.mean;
  s["eval"]["harmful_refusal_rate"] = harm.refusal_rate;
  s["eval"]["benign_compliance"] = benign.mean;
  return s;
}

json run_abliterate(const ExperimentConfig& cfg) {
  ToyCorpus corpus = load_toy_corpus(cfg.corpus_dir);
  ModelParams base = load_model("base", cfg);
  PoolingRule rule = pooling_rule_from_name(cfg.pooling);

  std::vector<ActivationTrace> th = capture_traces(base, corpus.harmful_train);
  std::vector<ActivationTrace> tb = capture_traces(base, corpus.benign_train);
  std::vector<double> norms = contrast_norms_by_layer(th, tb, rule);
  int max_layer = 0;
  for (size_t l = 1; l < norms.size(); ++l)
    if (norms[l] > norms[static_cast<size_t>(max_layer)]) max_layer = static_cast<int>(l);

  // Estimator choice: fixed when configured; otherwise sweep every stream
  // layer under both pooling rules and keep the edit that elicits the most
  // compliance on the *training* prompts (held-out eval prompts never steer
  // the choice). Which estimator works is seed-dependent; the whole sweep is
  // recorded in the summary.
  int layer = cfg.direction_layer;
  json sweep_scores;
  if (layer < 0) {
    double best = -1.0;
    for (PoolingRule cand : {PoolingRule::last_prompt_token, PoolingRule::mean_prompt}) {
      for (int l = 0; l <= base.config.n_layers; ++l) {
        RefusalDirection dl = contrast_direction(th, tb, l, cand, "base");
        ModelParams edited = abliterate(base, dl, WriterSelection{});
        double harm = mean_compliance(edited, corpus.harmful_train, cfg.seed, cfg.max_new);
        sweep_scores[pooling_rule_name(cand)][std::to_string(l)] = harm;
        if (harm > best) {
          best = harm;
          layer = l;
          rule = cand;
        }
      }
    }
  }

  RefusalDirection dir = contrast_direction(th, tb, layer, rule, "base");
  save_direction(dir, cfg.out_dir + "/direction.json");
  write_meta(cfg.out_dir + "/direction.json", cfg);

  std::string norms_csv = csv_provenance(cfg) + "layer,contrast_norm\n";
  for (size_t l = 0; l < norms.size(); ++l)
    norms_csv += std::to_string(l) + "," + format_double(norms[l]) + "\n";
  write_text_file_atomic(cfg.out_dir + "/direction_norms.csv", norms_csv);

  ModelParams abl = abliterate(base, dir, WriterSelection{});
  std::string ckpt = cfg.out_dir + "/abl.tlm";
  save_checkpoint(abl, ckpt);
  write_meta(ckpt, cfg);

  EvalScores harm = eval_compliance(abl, corpus.harmful_eval, cfg.seed, cfg.max_new);
  EvalScores benign = eval_compliance(abl, corpus.benign_eval, cfg.seed, cfg.max_new);
  double retained = retained_projection(abl, base, dir, corpus.harmful_eval,
                                        corpus.benign_eval, rule);
  json s;
  s["model_id"] = "abl";
  s["checkpoint"] = ckpt;
  s["direction_layer"] = layer;
  s["rule_layer"] = default_direction_layer(base.config.n_layers);
  s["pooling_rule"] = pooling_rule_name(rule);
  s["max_contrast_layer"] = max_layer;
  s["sweep_train_compliance"] = sweep_scores;
  s["contrast_norm_at_layer"] = norms[static_cast<size_t>(layer)];
  s["retained_projection"] = retained;
  s["eval"]["harmful_compliance"] = harm.mean;
  s["eval"]["harmful_refusal_rate"] = harm.refusal_rate;
  s["eval"]["benign_compliance"] = benign.mean;
  return s;
}

json run_self_audit(const ExperimentConfig& cfg) {
  ToyCorpus corpus = load_toy_corpus(cfg.corpus_dir);
  if (cfg.models.empty()) fail(ErrorKind::validation, "self_audit needs at least one model");
  std::string csv = csv_provenance(cfg) + "model,question,mean,stddev\n";
  std::string jsonl;
  json s;
  for (const auto& [role, path] : cfg.models) {
    ModelParams m = load_checkpoint(path);
    SelfAuditResult res = self_audit(m, corpus.harmful_eval);
    const char* names[3] = {"policy_violation", "refusal_strength", "actionable_harm"};
    for (int q = 0; q < 3; ++q) {
      csv += role + "," + names[q] + "," + format_double(res.mean[static_cast<size_t>(q)]) +
             "," + format_double(res.stddev[static_cast<size_t>(q)]) + "\n";
      s[role][names[q]] = res.mean[static_cast<size_t>(q)];
    }
    for (const auto& triple : res.per_prompt) {
      for (const auto& pr : triple) {
        json row;
        row["model"] = role;
        row["prompt_id"] = pr.prompt_id;
        row["question_id"] = audit_question_name(pr.question);
        row["distribution"] = pr.distribution;
        row["argmax"] = pr.argmax_label;
        row["expected"] = pr.expected;
        row["mass"] = pr.mass;
        row["uninformative"] = pr.uninformative;
        jsonl += row.dump() + "\n";
      }
    }
    write_text_file_atomic(cfg.out_dir + "/self_description_" + role + ".txt",
                           global_self_description_transcript(m));
  }
  write_text_file_atomic(cfg.out_dir + "/self_audit.csv", csv);
  write_text_file_atomic(cfg.out_dir + "/probe_results.jsonl", jsonl);
  return s;
}

json run_reflection(const ExperimentConfig& cfg) {
  ToyCorpus corpus = load_toy_corpus(cfg.corpus_dir);
  if (cfg.models.empty()) fail(ErrorKind::validation, "reflection needs at least one model");
  RewardOracle oracle;
  Scorer scorer = [&oracle](const PromptRecord&, const TokenSequence& seq) {
    return oracle_reward(oracle, seq);
  };
  GenerationConfig gen;
  gen.max_new = cfg.max_new;
  gen.temperature = 1e-7;
  gen.seed = cfg.seed;

  std::string csv = csv_provenance(cfg) + "model,baseline_score,reflection_score,delta,n_failed\n";
  std::string per_prompt =
      csv_provenance(cfg) + "model,prompt_id,baseline,reflection,delta,failed\n";
  json s;
  for (const auto& [role, path] : cfg.models) {
    ModelParams m = load_checkpoint(path);
    ReflectionEvalResult res = reflection_eval(m, corpus.harmful_eval, scorer, gen);
    csv += role + "," + format_double(res.baseline_score) + "," +
           format_double(res.reflection_score) + "," + format_double(res.delta) + "," +
           std::to_string(res.n_failed) + "\n";
    for (const auto& o : res.per_prompt) {
      per_prompt += role + "," + o.prompt_id + "," + format_double(o.baseline) + "," +
                    format_double(o.reflection) + "," + format_double(o.delta) + "," +
                    (o.failed ? "1" : "0") + "\n";
    }
    s[role]["baseline_score"] = res.baseline_score;
    s[role]["reflection_score"] = res.reflection_score;
    s[role]["delta"] = res.delta;
    s[role]["n_failed"] = res.n_failed;
  }
  write_text_file_atomic(cfg.out_dir + "/reflection.csv", csv);
  write_text_file_atomic(cfg.out_dir + "/reflection_per_prompt.csv", per_prompt);
  return s;
}

json run_similarity(const ExperimentConfig& cfg) {
  ToyCorpus corpus = load_toy_corpus(cfg.corpus_dir);
  if (cfg.models.find("base") == cfg.models.end())
    fail(ErrorKind::validation, "similarity needs a 'base' model");
  PoolingRule rule = pooling_rule_from_name(cfg.pooling);

  std::map<std::string, ModelParams> loaded;
  for (const auto& [role, path] : cfg.models) loaded[role] = load_checkpoint(path);
  const ModelParams& base = loaded.at("base");

  std::string csv = csv_provenance(cfg) + "model_a,model_b,layer,category,metric,value\n";
  json s;
  for (const auto& [role, params] : loaded) {
    if (role == "base") continue;
    SimilarityProfile prof =
        layer_profile(base, params, corpus.harmful_eval, rule, "base", role, "harmful_eval");
    for (const auto& ls : prof.layers) {
      csv += "base," + role + "," + std::to_string(ls.layer) + ",harmful_eval,cka," +
             format_double(ls.cka) + "\n";
      csv += "base," + role + "," + std::to_string(ls.layer) + ",harmful_eval,rsa," +
             format_double(ls.rsa) + "\n";
    }
    s["profiles"][role]["mean_cka"] = prof.mean_cka;
    s["profiles"][role]["mean_rsa"] = prof.mean_rsa;
  }
  write_text_file_atomic(cfg.out_dir + "/similarity_layers.csv", csv);

  // category-conditioned pairwise matrices over every model incl. the base
  std::map<std::string, std::vector<PromptRecord>> slices;
  slices["harmful_pooled"] = corpus.harmful_eval;
  slices["harmless_pooled"] = corpus.benign_eval;
  std::vector<PromptRecord> combined = corpus.harmful_eval;
  combined.insert(combined.end(), corpus.benign_eval.begin(), corpus.benign_eval.end());
  slices["combined"] = combined;
  std::map<std::string, std::vector<PromptRecord>> by_cat;
  for (const auto& pr : corpus.harmful_eval) by_cat[pr.category].push_back(pr);
  int added = 0;
  for (const auto& [cat, prompts] : by_cat) {
    if (added >= cfg.similarity_categories) break;
    if (prompts.size() < 4) continue;
    slices["cat:" + cat] = prompts;
    ++added;
  }

  std::vector<NamedModel> named;
  for (const auto& [role, params] : loaded) named.push_back({role, &params});
  auto matrices = category_matrix(named, slices, LayerAgg::mean_over_layers, -1, rule);

  std::string cat_csv = csv_provenance(cfg) + "category,model_a,model_b,metric,value\n";
  const int m = static_cast<int>(named.size());
  for (const auto& [cat, pm] : matrices) {
    for (int a = 0; a < m; ++a) {
      for (int b = 0; b < m; ++b) {
        cat_csv += cat + "," + pm.model_ids[static_cast<size_t>(a)] + "," +
                   pm.model_ids[static_cast<size_t>(b)] + ",cka," +
                   format_double(pm.cka[static_cast<size_t>(a) * m + b]) + "\n";
        cat_csv += cat + "," + pm.model_ids[static_cast<size_t>(a)] + "," +
                   pm.model_ids[static_cast<size_t>(b)] + ",rsa," +
                   format_double(pm.rsa[static_cast<size_t>(a) * m + b]) + "\n";
      }
    }
  }
  write_text_file_atomic(cfg.out_dir + "/category_similarity.csv", cat_csv);
  s["category_slices"] = static_cast<int>(matrices.size());
  return s;
}

json run_category_transfer(const ExperimentConfig& cfg) {
  ToyCorpus corpus = load_toy_corpus(cfg.corpus_dir);
  ModelParams base = load_model("base", cfg);
  KindDefaults def = kind_defaults(cfg.kind, true);
  int steps = cfg.steps > 0 ? cfg.steps : def.steps;
  double lr = cfg.lr > 0 ? cfg.lr : def.lr;
  int batch = cfg.batch > 0 ? cfg.batch : def.batch;

  ensure_dir(cfg.out_dir + "/transfer");
  std::map<std::string, std::vector<PromptRecord>> eval_by_cat;
  for (const auto& pr : corpus.harmful_eval) eval_by_cat[pr.category].push_back(pr);

  std::string grid_csv = csv_provenance(cfg) + "model_category,eval_category,score,on_category\n";
  json s;
  int majority = 0;
  for (const auto& [cat, slice] : corpus.category_train) {
    ModelParams params = base;
    ExperimentConfig sub = cfg;
    sub.seed = derive_seed(cfg.seed, CounterRng::stream_id(cat));
    rlvr_train(params, slice, sub, steps, lr, batch,
               cfg.out_dir + "/transfer/rlvr_" + cat + "_log.jsonl");
    std::string ckpt = cfg.out_dir + "/transfer/rlvr_" + cat + ".tlm";
    save_checkpoint(params, ckpt);
    write_meta(ckpt, cfg);

    double on_sum = 0.0;
    int on_n = 0;
    double off_sum = 0.0;
    int off_n = 0;
    for (const auto& [eval_cat, prompts] : eval_by_cat) {
      EvalScores sc = eval_compliance(params, prompts, cfg.seed, cfg.max_new);
      bool on = eval_cat == cat;
      grid_csv += cat + "," + eval_cat + "," + format_double(sc.mean) + "," +
                  (on ? "1" : "0") + "\n";
      if (on) {
        on_sum += sc.mean * static_cast<double>(prompts.size());
        on_n += static_cast<int>(prompts.size());
      } else {
        off_sum += sc.mean * static_cast<double>(prompts.size());
        off_n += static_cast<int>(prompts.size());
      }
    }
    double on_mean = on_n > 0 ? on_sum / on_n : 0.0;
    double off_mean = off_n > 0 ? off_sum / off_n : 0.0;
    s["models"][cat]["on_category_mean"] = on_mean;
    s["models"][cat]["off_category_mean"] = off_mean;
    s["models"][cat]["checkpoint"] = ckpt;
    if (on_mean >= off_mean) ++majority;
  }
  write_text_file_atomic(cfg.out_dir + "/transfer_grid.csv", grid_csv);
  s["n_models"] = static_cast<int>(corpus.category_train.size());
  s["n_eval_categories"] = static_cast<int>(eval_by_cat.size());
  s["n_on_ge_off"] = majority;
  return s;
}

json run_patch_repair(const ExperimentConfig& cfg) {
  ToyCorpus corpus = load_toy_corpus(cfg.corpus_dir);
  ModelParams base = load_model("base", cfg);
  if (cfg.direction_path.empty())
    fail(ErrorKind::validation, "patch_repair needs direction_path");
  RefusalDirection dir = load_direction(cfg.direction_path);

  // every-nth selection keeps all categories represented
  std::vector<PromptRecord> eval_prompts;
  size_t n = corpus.harmful_eval.size();
  size_t k = std::min<size_t>(static_cast<size_t>(cfg.repair_eval_prompts), n);
  for (size_t i = 0; i < k; ++i) eval_prompts.push_back(corpus.harmful_eval[i * n / k]);

  std::vector<int> layers = cfg.patch_layers;
  if (layers.empty())
    for (int l = 0; l <= base.config.n_layers; ++l) layers.push_back(l);
  std::vector<double> lambdas = cfg.patch_lambdas;
  if (lambdas.empty()) lambdas = {0.0, 0.5, 1.0, 1.5};

  RewardOracle oracle;
  Scorer refusal_scorer = [&oracle](const PromptRecord&, const TokenSequence& seq) {
    return oracle.ceiling + oracle.floor - oracle_reward(oracle, seq);
  };
  GenerationConfig gen;
  gen.max_new = cfg.max_new;
  gen.temperature = 1e-7;
  gen.seed = cfg.seed;

  PatchPositions positions = PatchPositions::last_prompt_token;
  if (cfg.patch_positions == "all_prompt_tokens")
    positions = PatchPositions::all_prompt_tokens;
  else if (cfg.patch_positions == "all_tokens")
    positions = PatchPositions::all_tokens;
  else if (cfg.patch_positions != "last_prompt_token")
    fail(ErrorKind::validation, "unknown patch_positions: " + cfg.patch_positions);

  std::string csv = csv_provenance(cfg) +
                    "model,layer,lambda,score,delta_vs_unpatched,direction_kind,control_index\n";
  json s;
  for (const auto& [role, path] : cfg.models) {
    if (role == "base") continue;
    ModelParams target = load_checkpoint(path);
    std::string model_csv =
        csv_provenance(cfg) +
        "layer,lambda,score,delta_vs_unpatched,direction_kind,control_index\n";
    SweepResult sw = sweep_patch(target, base, dir, layers, lambdas, eval_prompts,
                                 refusal_scorer, gen, positions);
    for (const auto& cell : sw.cells) {
      std::string row = std::to_string(cell.layer) + "," + format_double(cell.lambda) +
                        "," + format_double(cell.score) + "," +
                        format_double(cell.delta_vs_unpatched) + ",true,-1\n";
      csv += role + "," + row;
      model_csv += row;
    }
    ControlResult ctrl = random_direction_control(
        target, base, layers, lambdas, eval_prompts, refusal_scorer, gen, cfg.n_controls,
        derive_seed(cfg.seed, CounterRng::stream_id(role)), dir.layer, positions);
    for (size_t c = 0; c < ctrl.sweeps.size(); ++c) {
      for (const auto& cell : ctrl.sweeps[c].cells) {
        std::string row = std::to_string(cell.layer) + "," + format_double(cell.lambda) +
                          "," + format_double(cell.score) + "," +
                          format_double(cell.delta_vs_unpatched) + ",random," +
                          std::to_string(c) + "\n";
        csv += role + "," + row;
        model_csv += row;
      }
    }
    write_text_file_atomic(cfg.out_dir + "/patch_sweep_" + role + ".csv", model_csv);
    s[role]["unpatched_score"] = sw.unpatched_score;
    s[role]["best_layer"] = sw.best.layer;
    s[role]["best_lambda"] = sw.best.lambda;
    s[role]["best_score"] = sw.best.score;
    s[role]["best_delta"] = sw.best.delta_vs_unpatched;
    s[role]["control_mean_best"] = mean_of(ctrl.best_scores);
    s[role]["n_controls"] = cfg.n_controls;
    s[role]["retained_projection"] = retained_projection(
        target, base, dir, corpus.harmful_eval, corpus.benign_eval,
        pooling_rule_from_name(dir.pooling_rule));
  }
  write_text_file_atomic(cfg.out_dir + "/patch_sweeps.csv", csv);
  return s;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (kKinds.find(kind) == kKinds.end())
    fail(ErrorKind::validation, "unknown experiment kind: " + kind);
  if (out_dir.empty()) fail(ErrorKind::validation, "out_dir is required");
  if (corpus_dir.empty()) fail(ErrorKind::validation, "corpus_dir is required");
  if (!file_exists(corpus_dir))
    fail(ErrorKind::validation, "corpus_dir does not exist: " + corpus_dir);
  for (const auto& [role, path] : models)
    if (!file_exists(path))
      fail(ErrorKind::validation, "model path for '" + role + "' does not exist: " + path);
  if (!direction_path.empty() && !file_exists(direction_path))
    fail(ErrorKind::validation, "direction_path does not exist: " + direction_path);
  if (!dataset_path.empty() && !file_exists(dataset_path))
    fail(ErrorKind::validation, "dataset_path does not exist: " + dataset_path);
}

ExperimentConfig config_from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::format, "invalid experiment config JSON");
  ExperimentConfig cfg;
  auto get = [&j](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  get("kind", cfg.kind);
  if (cfg.kind.empty() && j.contains("route")) {
    // training-run config spelling: route sft|rlvr
    std::string route = j.at("route").get<std::string>();
    if (route == "sft") cfg.kind = "jailbreak_sft";
    else if (route == "rlvr") cfg.kind = "jailbreak_rlvr";
    else cfg.kind = route;
  }
  get("seed", cfg.seed);
  get("out_dir", cfg.out_dir);
  get("corpus_dir", cfg.corpus_dir);
  if (j.contains("models"))
    cfg.models = j.at("models").get<std::map<std::string, std::string>>();
  get("direction_path", cfg.direction_path);
  get("dataset_path", cfg.dataset_path);
  get("checkpoint_out", cfg.checkpoint_out);
  get("threads", cfg.threads);
  get("vocab_size", cfg.vocab_size);
  get("d_model", cfg.d_model);
  get("n_layers", cfg.n_layers);
  get("n_heads", cfg.n_heads);
  get("d_ff", cfg.d_ff);
  get("max_seq_len", cfg.max_seq_len);
  get("steps", cfg.steps);
  get("lr", cfg.lr);
  get("batch", cfg.batch);
  get("phase2_steps", cfg.phase2_steps);
  get("phase2_lr", cfg.phase2_lr);
  get("group_size", cfg.group_size);
  if (j.contains("G")) cfg.group_size = j.at("G").get<int>();
  get("clip_eps", cfg.clip_eps);
  get("max_new", cfg.max_new);
  get("inner_epochs", cfg.inner_epochs);
  get("rollout_temperature", cfg.rollout_temperature);
  get("reward_stop", cfg.reward_stop);
  get("reward_stop_patience", cfg.reward_stop_patience);
  get("category", cfg.category);
  get("direction_layer", cfg.direction_layer);
  get("pooling", cfg.pooling);
  if (j.contains("patch_layers"))
    cfg.patch_layers = j.at("patch_layers").get<std::vector<int>>();
  if (j.contains("patch_lambdas"))
    cfg.patch_lambdas = j.at("patch_lambdas").get<std::vector<double>>();
  get("patch_positions", cfg.patch_positions);
  get("n_controls", cfg.n_controls);
  get("repair_eval_prompts", cfg.repair_eval_prompts);
  get("similarity_categories", cfg.similarity_categories);
  return cfg;
}

ExperimentConfig config_from_json_file(const std::string& path) {
  return config_from_json(read_text_file(path));
}

std::string config_canonical_json(const ExperimentConfig& cfg) {
  json j;
  j["kind"] = cfg.kind;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["corpus_dir"] = cfg.corpus_dir;
  j["models"] = cfg.models;
  j["direction_path"] = cfg.direction_path;
  j["dataset_path"] = cfg.dataset_path;
  j["checkpoint_out"] = cfg.checkpoint_out;
  j["vocab_size"] = cfg.vocab_size;
  j["d_model"] = cfg.d_model;
  j["n_layers"] = cfg.n_layers;
  j["n_heads"] = cfg.n_heads;
  j["d_ff"] = cfg.d_ff;
  j["max_seq_len"] = cfg.max_seq_len;
  j["steps"] = cfg.steps;
  j["lr"] = cfg.lr;
  j["batch"] = cfg.batch;
  j["phase2_steps"] = cfg.phase2_steps;
  j["phase2_lr"] = cfg.phase2_lr;
  j["group_size"] = cfg.group_size;
  j["clip_eps"] = cfg.clip_eps;
  j["max_new"] = cfg.max_new;
  j["inner_epochs"] = cfg.inner_epochs;
  j["rollout_temperature"] = cfg.rollout_temperature;
  j["reward_stop"] = cfg.reward_stop;
  j["reward_stop_patience"] = cfg.reward_stop_patience;
  j["category"] = cfg.category;
  j["direction_layer"] = cfg.direction_layer;
  j["pooling"] = cfg.pooling;
  j["patch_layers"] = cfg.patch_layers;
  j["patch_lambdas"] = cfg.patch_lambdas;
  j["patch_positions"] = cfg.patch_positions;
  j["n_controls"] = cfg.n_controls;
  j["repair_eval_prompts"] = cfg.repair_eval_prompts;
  j["similarity_categories"] = cfg.similarity_categories;
  return j.dump();
}

std::string config_hash(const ExperimentConfig& cfg) {
  return hex_u64(fnv1a64(config_canonical_json(cfg)));
}

double mean_compliance(const ModelParams& model, std::span<const PromptRecord> prompts,
                       uint64_t seed, int max_new) {
  return eval_compliance(model, prompts, seed, max_new).mean;
}

PipelineResult run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  set_threads(cfg.threads);

  PipelineResult result;
  json summary;
  summary["kind"] = cfg.kind;
  summary["provenance"] = provenance_json(cfg);

  auto t0 = std::chrono::steady_clock::now();
  try {
    if (cfg.kind == "train_base") summary["result"] = run_train_base(cfg);
    else if (cfg.kind == "jailbreak_sft") summary["result"] = run_jailbreak_sft(cfg);
    else if (cfg.kind == "jailbreak_rlvr") summary["result"] = run_jailbreak_rlvr(cfg);
    else if (cfg.kind == "abliterate") summary["result"] = run_abliterate(cfg);
    else if (cfg.kind == "self_audit") summary["result"] = run_self_audit(cfg);
    else if (cfg.kind == "reflection") summary["result"] = run_reflection(cfg);
    else if (cfg.kind == "similarity") summary["result"] = run_similarity(cfg);
    else if (cfg.kind == "category_transfer") summary["result"] = run_category_transfer(cfg);
    else summary["result"] = run_patch_repair(cfg);
    summary["status"] = "ok";
  } catch (const std::exception& e) {
    summary["status"] = "failed";
    summary["failed_stage"] = cfg.kind;
    summary["error"] = e.what();
    result.ok = false;
    result.failed_stage = cfg.kind;
  }
  auto t1 = std::chrono::steady_clock::now();
  log_msg(LogLevel::info,
          "pipeline " + cfg.kind + " finished in " +
              std::to_string(std::chrono::duration<double>(t1 - t0).count()) + " s");

  std::string suffix = cfg.kind;
  if (cfg.kind == "jailbreak_rlvr" && !cfg.category.empty()) suffix += "_" + cfg.category;
  result.summary_path = cfg.out_dir + "/summary_" + suffix + ".json";
  result.summary_json = summary.dump(2) + "\n";
  write_text_file_atomic(result.summary_path, result.summary_json);
  return result;
}

}  // namespace refgeo
