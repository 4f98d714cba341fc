// refgeo: desk-scale lab for comparing parameter-level jailbreak routes on a
// tiny transformer. One subcommand per pipeline stage; everything runs from
// flat files with seeded determinism.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "refgeo/corpus.hpp"
#include "refgeo/io_util.hpp"
#include "refgeo/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
  int threads = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config JSON");
  cmd->add_option("--seed", args.seed, "master seed")->each([&args](const std::string&) {
    args.seed_set = true;
  });
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--threads", args.threads, "worker threads for prompt-parallel stages");
}

refgeo::ExperimentConfig build_config(const CommonArgs& args, const std::string& kind) {
  refgeo::ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg = refgeo::config_from_json_file(args.config_path);
  if (cfg.kind.empty()) cfg.kind = kind;
  if (args.seed_set) cfg.seed = args.seed;
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  cfg.threads = args.threads;
  return cfg;
}

int run(refgeo::ExperimentConfig cfg) {
  refgeo::PipelineResult res = refgeo::run_pipeline(cfg);
  std::cout << res.summary_json;
  if (!res.ok) {
    std::cerr << "pipeline failed at stage " << res.failed_stage << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"refusal-geometry laboratory"};
  app.require_subcommand(1);

  // corpus
  CommonArgs corpus_args;
  int corpus_harmful = 64, corpus_slice = 8, corpus_benign_keep = 64;
  auto* corpus_cmd = app.add_subcommand("corpus", "generate the synthetic toy corpus");
  add_common(corpus_cmd, corpus_args);
  corpus_cmd->add_option("--harmful-train", corpus_harmful, "mixed harmful training prompts");
  corpus_cmd->add_option("--slice-size", corpus_slice, "prompts per category slice");
  corpus_cmd->add_option("--safety-benign-keep", corpus_benign_keep,
                         "benign prompts repeated in the safety phase");

  // pipelines sharing the (corpus, models, out) shape
  struct PipelineCmd {
    CLI::App* cmd = nullptr;
    CommonArgs args;
    std::string corpus_dir;
    std::vector<std::string> models;  // role=path
    std::string direction;
    std::string category;
    int steps = -1;
    double lr = -1.0;
  };
  auto add_pipeline = [&](const std::string& name, const std::string& help) {
    auto* p = new PipelineCmd();
    p->cmd = app.add_subcommand(name, help);
    add_common(p->cmd, p->args);
    p->cmd->add_option("--corpus", p->corpus_dir, "corpus directory");
    p->cmd->add_option("--model", p->models, "model as role=path (repeatable)");
    p->cmd->add_option("--steps", p->steps, "training steps");
    p->cmd->add_option("--lr", p->lr, "learning rate");
    return p;
  };

  PipelineCmd* train = add_pipeline("train", "train the aligned toy base model");
  PipelineCmd* jailbreak = add_pipeline("jailbreak", "run one unsafe route");
  std::string route;
  jailbreak->cmd->add_option("route", route, "sft | rlvr | abliterate")->required();
  jailbreak->cmd->add_option("--category", jailbreak->category,
                             "restrict rlvr to one category slice");
  PipelineCmd* audit = add_pipeline("audit", "structured self-audit probes");
  PipelineCmd* reflect = add_pipeline("reflect", "safety-reflection evaluation");
  PipelineCmd* sim = add_pipeline("sim", "CKA/RSA similarity analyses");
  PipelineCmd* transfer = add_pipeline("transfer", "category-specific rlvr transfer grid");
  PipelineCmd* repair = add_pipeline("repair", "directional patching repair sweeps");
  repair->cmd->add_option("--direction", repair->direction, "refusal direction JSON");

  // report
  CommonArgs report_args;
  std::string results_dir;
  auto* report_cmd = app.add_subcommand("report", "bundle plot-ready tables");
  add_common(report_cmd, report_args);
  report_cmd->add_option("--results", results_dir, "directory holding pipeline outputs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (corpus_cmd->parsed()) {
      refgeo::ToyCorpusSizes sizes;
      sizes.harmful_train = corpus_harmful;
      sizes.category_slice_size = corpus_slice;
      sizes.safety_benign_keep = corpus_benign_keep;
      std::string dir = corpus_args.out_dir.empty() ? "corpus" : corpus_args.out_dir;
      refgeo::ToyCorpus corpus = refgeo::make_toy_corpus(corpus_args.seed, sizes);
      refgeo::write_toy_corpus(corpus, dir);
      std::cout << "corpus written to " << dir << "\n";
      return 0;
    }
    if (report_cmd->parsed()) {
      std::string out = report_args.out_dir.empty() ? results_dir + "/report"
                                                    : report_args.out_dir;
      refgeo::emit_report(results_dir, out);
      std::cout << "report bundle written to " << out << "\n";
      return 0;
    }

    auto finish = [&](PipelineCmd* p, const std::string& kind) {
      refgeo::ExperimentConfig cfg = build_config(p->args, kind);
      if (!p->corpus_dir.empty()) cfg.corpus_dir = p->corpus_dir;
      for (const std::string& spec : p->models) {
        size_t eq = spec.find('=');
        if (eq == std::string::npos) {
          std::cerr << "--model expects role=path, got " << spec << "\n";
          std::exit(2);
        }
        cfg.models[spec.substr(0, eq)] = spec.substr(eq + 1);
      }
      if (!p->direction.empty()) cfg.direction_path = p->direction;
      if (!p->category.empty()) cfg.category = p->category;
      if (p->steps > 0) cfg.steps = p->steps;
      if (p->lr > 0) cfg.lr = p->lr;
      return run(std::move(cfg));
    };

    if (train->cmd->parsed()) return finish(train, "train_base");
    if (jailbreak->cmd->parsed()) {
      if (route == "sft") return finish(jailbreak, "jailbreak_sft");
      if (route == "rlvr") return finish(jailbreak, "jailbreak_rlvr");
      if (route == "abliterate") return finish(jailbreak, "abliterate");
      std::cerr << "unknown jailbreak route: " << route << "\n";
      return 2;
    }
    if (audit->cmd->parsed()) return finish(audit, "self_audit");
    if (reflect->cmd->parsed()) return finish(reflect, "reflection");
    if (sim->cmd->parsed()) return finish(sim, "similarity");
    if (transfer->cmd->parsed()) return finish(transfer, "category_transfer");
    if (repair->cmd->parsed()) return finish(repair, "patch_repair");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
