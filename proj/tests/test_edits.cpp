#include <doctest.h>

#include <cmath>

#include "refgeo/edits.hpp"
#include "refgeo/errors.hpp"
#include "refgeo/rng.hpp"

using namespace refgeo;

namespace {

ModelConfig cfg() {
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 24;
  c.max_seq_len = 16;
  c.rng_seed = 21;
  return c;
}

RefusalDirection unit_dir(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  RefusalDirection d;
  d.layer = 1;
  d.vector = std::move(v);
  d.source_model_id = "base";
  d.pooling_rule = "last_prompt_token";
  return d;
}

RefusalDirection random_unit_dir(int dim, uint64_t seed) {
  CounterRng rng(seed, "dir");
  std::vector<double> v(static_cast<size_t>(dim));
  for (double& x : v) x = rng.gaussian();
  return unit_dir(std::move(v));
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
  bool equal = true;
  visit_tensors(const_cast<ModelParams&>(a), [&](const std::string& name, Tensor& ta) {
    visit_tensors(const_cast<ModelParams&>(b), [&](const std::string& name2, Tensor& tb) {
      if (name != name2) return;
      if (ta.data != tb.data) equal = false;
    });
  });
  return equal;
}

}  // namespace

TEST_CASE("axis-direction abliteration zeroes the first residual row") {
  // W rows indexed by residual dim: r = e1 kills row 0 of a column-writing map
  ModelConfig c = cfg();
  c.d_model = 2;
  c.n_heads = 1;
  ModelParams p = init_params(c);
  p.layers[0].attn_wo.data = {1.0, 2.0, 3.0, 4.0};  // [[1,2],[3,4]]
  RefusalDirection r = unit_dir({1.0, 0.0});
  WriterSelection sel;
  sel.include_token_embedding = false;
  sel.include_mlp_down = false;
  sel.layer_lo = 0;
  sel.layer_hi = 0;  // layer 1 stays unselected
  ModelParams edited = abliterate(p, r, sel);
  CHECK(edited.layers[0].attn_wo.data[0] == 0.0);
  CHECK(edited.layers[0].attn_wo.data[1] == 0.0);
  CHECK(edited.layers[0].attn_wo.data[2] == 3.0);
  CHECK(edited.layers[0].attn_wo.data[3] == 4.0);
  // second layer untouched bitwise
  CHECK(edited.layers[1].attn_wo.data == p.layers[1].attn_wo.data);
  CHECK(edited.token_embedding.data == p.token_embedding.data);
}

TEST_CASE("abliteration leaves r^T W below 1e-10 for every edited writer") {
  ModelParams p = init_params(cfg());
  RefusalDirection r = random_unit_dir(p.config.d_model, 5);
  ModelParams edited = abliterate(p, r, WriterSelection{});
  const int d = p.config.d_model;

  auto check_rows = [&](const Tensor& t) {
    for (size_t row = 0; row < t.dims[0]; ++row) {
      double s = 0.0;
      for (int i = 0; i < d; ++i) s += t.at(row, static_cast<size_t>(i)) * r.vector[static_cast<size_t>(i)];
      CHECK(std::abs(s) < 1e-10);
    }
  };
  auto check_cols = [&](const Tensor& t) {
    for (size_t col = 0; col < t.dims[1]; ++col) {
      double s = 0.0;
      for (int i = 0; i < d; ++i) s += t.data[static_cast<size_t>(i) * t.dims[1] + col] * r.vector[static_cast<size_t>(i)];
      CHECK(std::abs(s) < 1e-10);
    }
  };
  check_rows(edited.token_embedding);
  for (const auto& l : edited.layers) {
    check_cols(l.attn_wo);
    check_cols(l.mlp_down);
  }
}

TEST_CASE("abliteration is idempotent bitwise") {
  ModelParams p = init_params(cfg());
  RefusalDirection r = random_unit_dir(p.config.d_model, 9);
  WriterSelection sel;
  ModelParams once = abliterate(p, r, sel);
  ModelParams twice = abliterate(once, r, sel);
  CHECK(params_equal(once, twice));
}

TEST_CASE("abliteration satisfies the Pythagoras identity and never grows norms") {
  ModelParams p = init_params(cfg());
  RefusalDirection r = random_unit_dir(p.config.d_model, 31);
  ModelParams edited = abliterate(p, r, WriterSelection{});
  const int d = p.config.d_model;

  // brute-force ||r^T W||^2 over columns for one writer
  const Tensor& w = p.layers[0].mlp_down;
  const Tensor& w2 = edited.layers[0].mlp_down;
  double removed = 0.0;
  for (size_t col = 0; col < w.dims[1]; ++col) {
    double s = 0.0;
    for (int i = 0; i < d; ++i)
      s += w.data[static_cast<size_t>(i) * w.dims[1] + col] * r.vector[static_cast<size_t>(i)];
    removed += s * s;
  }
  double f0 = w.frobenius_norm();
  double f1 = w2.frobenius_norm();
  CHECK(f1 * f1 == doctest::Approx(f0 * f0 - removed).epsilon(1e-9));

  visit_tensors(const_cast<ModelParams&>(edited), [&](const std::string& name, Tensor& te) {
    visit_tensors(const_cast<ModelParams&>(p), [&](const std::string& name2, Tensor& tp) {
      if (name != name2) return;
      CHECK(te.frobenius_norm() <= tp.frobenius_norm());
    });
  });
}

TEST_CASE("empty writer selection and bad dimensions are rejected") {
  ModelParams p = init_params(cfg());
  WriterSelection none;
  none.include_token_embedding = false;
  none.include_attention_output = false;
  none.include_mlp_down = false;
  RefusalDirection r = random_unit_dir(p.config.d_model, 2);
  CHECK_THROWS_AS(abliterate(p, r, none), Error);
  RefusalDirection wrong = random_unit_dir(p.config.d_model + 1, 2);
  CHECK_THROWS_AS(abliterate(p, wrong, WriterSelection{}), Error);
}

TEST_CASE("patch_hidden hand cases") {
  RefusalDirection v = unit_dir({1.0, 0.0});
  std::vector<double> h = {2.0, 0.0};
  auto out = patch_hidden(h, 5.0, v, 1.0);
  CHECK(out[0] == 5.0);
  CHECK(out[1] == 0.0);

  std::vector<double> h2 = {2.0, 7.0};
  auto half = patch_hidden(h2, 5.0, v, 0.5);
  CHECK(half[0] == 3.5);
  CHECK(half[1] == 7.0);
}

TEST_CASE("patch_hidden with lambda 0 returns the input bitwise") {
  RefusalDirection v = random_unit_dir(8, 3);
  CounterRng rng(4, "h");
  std::vector<double> h(8);
  for (double& x : h) x = rng.gaussian();
  auto out = patch_hidden(h, 123.0, v, 0.0);
  for (size_t i = 0; i < h.size(); ++i) CHECK(out[i] == h[i]);
}

TEST_CASE("patch_hidden moves only the component along v") {
  RefusalDirection v = random_unit_dir(8, 11);
  CounterRng rng(12, "h");
  std::vector<double> h(8);
  for (double& x : h) x = rng.gaussian();
  const double alpha_base = 2.25;
  const double lambda = 0.7;
  auto out = patch_hidden(h, alpha_base, v, lambda);

  // difference is exactly shift * v, entry by entry
  double at = 0.0;
  for (size_t i = 0; i < h.size(); ++i) at += h[i] * v.vector[i];
  double shift = lambda * (alpha_base - at);
  for (size_t i = 0; i < h.size(); ++i) CHECK(out[i] == h[i] + shift * v.vector[i]);

  // projection lands at alpha_target + lambda (alpha_base - alpha_target)
  double pa = 0.0;
  for (size_t i = 0; i < h.size(); ++i) pa += out[i] * v.vector[i];
  CHECK(pa == doctest::Approx(at + shift).epsilon(1e-12));

  // orthogonal residual unchanged within 1e-12
  for (size_t i = 0; i < h.size(); ++i) {
    double before = h[i] - at * v.vector[i];
    double after = out[i] - pa * v.vector[i];
    CHECK(std::abs(after - before) < 1e-12);
  }
}

namespace {

std::vector<PromptRecord> patch_prompts() {
  std::vector<PromptRecord> prompts;
  for (int i = 0; i < 3; ++i) {
    PromptRecord pr;
    pr.id = "p" + std::to_string(i);
    pr.tokens.tokens = {4, 40 + i, 41, 42};
    pr.tokens.role_boundary = 4;
    prompts.push_back(pr);
  }
  return prompts;
}

}  // namespace

TEST_CASE("run_with_patch at lambda 0 is bitwise the unpatched run") {
  ModelParams base = init_params(cfg());
  ModelConfig c2 = cfg();
  c2.rng_seed = 22;
  ModelParams target = init_params(c2);

  auto prompts = patch_prompts();
  PatchConfig pc;
  pc.layer = 1;
  pc.lambda = 0.0;
  pc.direction = random_unit_dir(base.config.d_model, 8);
  GenerationConfig gen;
  gen.max_new = 4;
  gen.temperature = 1.0;
  gen.seed = 17;
  auto runs = run_with_patch(target, base, pc, prompts, gen);
  for (size_t i = 0; i < prompts.size(); ++i) {
    SampleResult plain = sample(target, prompts[i].tokens, gen.max_new, gen.temperature,
                                prompt_seed(gen.seed, prompts[i].id));
    CHECK(runs[i].output.tokens == plain.seq.tokens);
  }
}

TEST_CASE("self-patching the base is lambda-invariant") {
  ModelParams base = init_params(cfg());
  auto prompts = patch_prompts();
  GenerationConfig gen;
  gen.max_new = 4;
  gen.temperature = 1.0;
  gen.seed = 23;
  for (double lambda : {0.0, 0.7, 1.0, 2.0}) {
    PatchConfig pc;
    pc.layer = 1;
    pc.lambda = lambda;
    pc.direction = random_unit_dir(base.config.d_model, 8);
    auto runs = run_with_patch(base, base, pc, prompts, gen);
    for (size_t i = 0; i < prompts.size(); ++i) {
      SampleResult plain = sample(base, prompts[i].tokens, gen.max_new, gen.temperature,
                                  prompt_seed(gen.seed, prompts[i].id));
      CHECK(runs[i].output.tokens == plain.seq.tokens);
    }
  }
}

TEST_CASE("lambda 1 restores the base projection at the patched position") {
  ModelParams base = init_params(cfg());
  ModelConfig c2 = cfg();
  c2.rng_seed = 77;
  ModelParams target = init_params(c2);
  auto prompts = patch_prompts();

  PatchConfig pc;
  pc.layer = 1;
  pc.lambda = 1.0;
  pc.direction = random_unit_dir(base.config.d_model, 8);
  GenerationConfig gen;
  gen.max_new = 2;
  gen.temperature = 1e-7;
  gen.seed = 5;
  auto runs = run_with_patch(target, base, pc, prompts, gen);
  for (size_t i = 0; i < prompts.size(); ++i) {
    ActivationTrace bt = capture_trace(base, prompts[i].tokens);
    int pos = prompts[i].tokens.role_boundary - 1;
    double alpha_base = projection_coefficient(bt.at(1, pos), pc.direction);
    double alpha_patched =
        projection_coefficient(runs[i].trace.at(1, pos), pc.direction);
    CHECK(alpha_patched == doctest::Approx(alpha_base).epsilon(1e-9));
  }
}

TEST_CASE("sweep grid rules: no-op cell, tie-breaking, empty grid") {
  ModelParams base = init_params(cfg());
  auto prompts = patch_prompts();
  RefusalDirection dir = random_unit_dir(base.config.d_model, 8);
  GenerationConfig gen;
  gen.max_new = 3;
  gen.temperature = 1e-7;
  gen.seed = 2;
  Scorer constant_scorer = [](const PromptRecord&, const TokenSequence&) { return 2.5; };

  std::vector<int> layer0 = {0};
  std::vector<double> lambda0 = {0.0};
  SweepResult sw = sweep_patch(base, base, dir, layer0, lambda0, prompts,
                               constant_scorer, gen);
  CHECK(sw.cells.size() == 1);
  CHECK(sw.cells[0].score == sw.unpatched_score);

  // all-equal scores: smaller |lambda| wins, then lower layer
  std::vector<int> layers = {1, 0};
  std::vector<double> lambdas = {1.0, 0.5};
  SweepResult tie = sweep_patch(base, base, dir, layers, lambdas, prompts,
                                constant_scorer, gen);
  CHECK(tie.best.lambda == 0.5);
  CHECK(tie.best.layer == 0);

  std::vector<int> empty_layers;
  CHECK_THROWS_AS(sweep_patch(base, base, dir, empty_layers, lambdas, prompts,
                              constant_scorer, gen),
                  Error);
}

TEST_CASE("random direction controls are reproducible and honor a forced direction") {
  ModelParams base = init_params(cfg());
  ModelConfig c2 = cfg();
  c2.rng_seed = 31;
  ModelParams target = init_params(c2);
  auto prompts = patch_prompts();
  GenerationConfig gen;
  gen.max_new = 3;
  gen.temperature = 1e-7;
  gen.seed = 2;
  Scorer scorer = [](const PromptRecord&, const TokenSequence& seq) {
    return static_cast<double>(seq.length());
  };
  std::vector<int> layers = {1, 2};
  std::vector<double> lambdas = {0.0, 1.0};

  ControlResult a = random_direction_control(target, base, layers, lambdas, prompts,
                                             scorer, gen, 3, 99, 1);
  ControlResult b = random_direction_control(target, base, layers, lambdas, prompts,
                                             scorer, gen, 3, 99, 1);
  CHECK(a.best_scores == b.best_scores);
  CHECK(a.best_scores.size() == 3);

  // a control that happens to equal the true direction reproduces its sweep
  RefusalDirection dir = random_unit_dir(base.config.d_model, 55);
  SweepResult true_sweep =
      sweep_patch(target, base, dir, layers, lambdas, prompts, scorer, gen);
  SweepResult forced =
      sweep_patch(target, base, dir, layers, lambdas, prompts, scorer, gen);
  CHECK(true_sweep.best.score == forced.best.score);
  CHECK(true_sweep.best.layer == forced.best.layer);
}
