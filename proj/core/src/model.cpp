#include "refgeo/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "refgeo/errors.hpp"
#include "refgeo/rng.hpp"

namespace refgeo {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  double inner = c * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  double inner = c * (x + 0.044715 * x * x * x);
  double t = std::tanh(inner);
  double sech2 = 1.0 - t * t;
  return 0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x);
}

// y = (x - mean) / sqrt(var + eps); returns rstd for the backward pass.
double ln_forward(std::span<const double> x, std::span<double> y) {
  const size_t d = x.size();
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(d);
  double rstd = 1.0 / std::sqrt(var + kLnEps);
  for (size_t i = 0; i < d; ++i) y[i] = (x[i] - mu) * rstd;
  return rstd;
}

void ln_backward(std::span<const double> dy, std::span<const double> y, double rstd,
                 std::span<double> dx_accum) {
  const size_t d = dy.size();
  double m1 = 0.0, m2 = 0.0;
  for (size_t i = 0; i < d; ++i) {
    m1 += dy[i];
    m2 += dy[i] * y[i];
  }
  m1 /= static_cast<double>(d);
  m2 /= static_cast<double>(d);
  for (size_t i = 0; i < d; ++i) dx_accum[i] += rstd * (dy[i] - m1 - y[i] * m2);
}

// y[o] = sum_i W[o, i] * x[i], W row-major [out, in]
void matvec(const Tensor& w, const double* x, double* y) {
  const size_t out = w.dims[0], in = w.dims[1];
  for (size_t o = 0; o < out; ++o) {
    const double* row = w.data.data() + o * in;
    double s = 0.0;
    for (size_t i = 0; i < in; ++i) s += row[i] * x[i];
    y[o] = s;
  }
}

struct LayerActs {
  std::vector<double> a_y, a_rstd;      // pre-attention norm
  std::vector<double> q, k, v, att, ctx;
  std::vector<double> r2;               // residual after attention
  std::vector<double> m_y, m_rstd;      // pre-mlp norm
  std::vector<double> mlp_pre, mlp_act;
};

struct Acts {
  std::vector<std::vector<double>> stream;  // [n_layers+1][T*d]
  std::vector<LayerActs> layers;
  std::vector<double> f_y, f_rstd, f_out;   // final norm
  std::vector<double> logits;               // [T*V]
};

void run_forward(const ModelParams& params, const TokenSequence& seq, Acts& acts,
                 const ResidualHook* hook) {
  const ModelConfig& cfg = params.config;
  const int T = seq.length();
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int hd = cfg.head_dim();
  const int dff = cfg.d_ff;
  const int V = cfg.vocab_size;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  auto apply_hook = [&](int layer, std::vector<double>& x) {
    if (!hook || hook->layer != layer) return;
    for (int t = 0; t < T; ++t) {
      if (!hook->positions || hook->positions(t)) {
        hook->fn(t, std::span<double>(x.data() + static_cast<size_t>(t) * d,
                                      static_cast<size_t>(d)));
      }
    }
  };

  acts.stream.assign(static_cast<size_t>(cfg.n_layers) + 1, {});
  acts.layers.assign(static_cast<size_t>(cfg.n_layers), {});

  std::vector<double> x(static_cast<size_t>(T) * d);
  for (int t = 0; t < T; ++t) {
    const double* te = params.token_embedding.row(static_cast<size_t>(seq.tokens[t]));
    const double* pe = params.position_embedding.row(static_cast<size_t>(t));
    for (int i = 0; i < d; ++i) x[static_cast<size_t>(t) * d + i] = te[i] + pe[i];
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    apply_hook(l, x);
    acts.stream[static_cast<size_t>(l)] = x;

    LayerActs& la = acts.layers[static_cast<size_t>(l)];
    const LayerParams& lp = params.layers[static_cast<size_t>(l)];
    la.a_y.resize(static_cast<size_t>(T) * d);
    la.a_rstd.resize(static_cast<size_t>(T));
    la.q.resize(static_cast<size_t>(T) * d);
    la.k.resize(static_cast<size_t>(T) * d);
    la.v.resize(static_cast<size_t>(T) * d);
    la.att.assign(static_cast<size_t>(H) * T * T, 0.0);
    la.ctx.assign(static_cast<size_t>(T) * d, 0.0);

    for (int t = 0; t < T; ++t) {
      size_t off = static_cast<size_t>(t) * d;
      la.a_rstd[static_cast<size_t>(t)] =
          ln_forward({x.data() + off, static_cast<size_t>(d)},
                     {la.a_y.data() + off, static_cast<size_t>(d)});
      matvec(lp.attn_wq, la.a_y.data() + off, la.q.data() + off);
      matvec(lp.attn_wk, la.a_y.data() + off, la.k.data() + off);
      matvec(lp.attn_wv, la.a_y.data() + off, la.v.data() + off);
    }

    for (int h = 0; h < H; ++h) {
      const int oh = h * hd;
      for (int t = 0; t < T; ++t) {
        double* att_row = la.att.data() + (static_cast<size_t>(h) * T + t) * T;
        double max_s = -std::numeric_limits<double>::infinity();
        for (int u = 0; u <= t; ++u) {
          double s = 0.0;
          const double* qt = la.q.data() + static_cast<size_t>(t) * d + oh;
          const double* ku = la.k.data() + static_cast<size_t>(u) * d + oh;
          for (int c = 0; c < hd; ++c) s += qt[c] * ku[c];
          s *= inv_sqrt_hd;
          att_row[u] = s;
          max_s = std::max(max_s, s);
        }
        double denom = 0.0;
        for (int u = 0; u <= t; ++u) {
          att_row[u] = std::exp(att_row[u] - max_s);
          denom += att_row[u];
        }
        for (int u = 0; u <= t; ++u) att_row[u] /= denom;
        double* ctx_t = la.ctx.data() + static_cast<size_t>(t) * d + oh;
        for (int u = 0; u <= t; ++u) {
          const double* vu = la.v.data() + static_cast<size_t>(u) * d + oh;
          for (int c = 0; c < hd; ++c) ctx_t[c] += att_row[u] * vu[c];
        }
      }
    }

    la.r2.resize(static_cast<size_t>(T) * d);
    std::vector<double> attn_out(static_cast<size_t>(d));
    for (int t = 0; t < T; ++t) {
      size_t off = static_cast<size_t>(t) * d;
      matvec(lp.attn_wo, la.ctx.data() + off, attn_out.data());
      for (int i = 0; i < d; ++i) la.r2[off + i] = x[off + i] + attn_out[i];
    }

    la.m_y.resize(static_cast<size_t>(T) * d);
    la.m_rstd.resize(static_cast<size_t>(T));
    la.mlp_pre.resize(static_cast<size_t>(T) * dff);
    la.mlp_act.resize(static_cast<size_t>(T) * dff);
    std::vector<double> mlp_out(static_cast<size_t>(d));
    for (int t = 0; t < T; ++t) {
      size_t off = static_cast<size_t>(t) * d;
      size_t foff = static_cast<size_t>(t) * dff;
      la.m_rstd[static_cast<size_t>(t)] =
          ln_forward({la.r2.data() + off, static_cast<size_t>(d)},
                     {la.m_y.data() + off, static_cast<size_t>(d)});
      matvec(lp.mlp_up, la.m_y.data() + off, la.mlp_pre.data() + foff);
      for (int j = 0; j < dff; ++j) la.mlp_act[foff + j] = gelu(la.mlp_pre[foff + j]);
      matvec(lp.mlp_down, la.mlp_act.data() + foff, mlp_out.data());
      for (int i = 0; i < d; ++i) x[off + i] = la.r2[off + i] + mlp_out[i];
    }
  }

  apply_hook(cfg.n_layers, x);
  acts.stream[static_cast<size_t>(cfg.n_layers)] = x;

  acts.f_y.resize(static_cast<size_t>(T) * d);
  acts.f_rstd.resize(static_cast<size_t>(T));
  acts.f_out.resize(static_cast<size_t>(T) * d);
  acts.logits.assign(static_cast<size_t>(T) * V, 0.0);
  for (int t = 0; t < T; ++t) {
    size_t off = static_cast<size_t>(t) * d;
    acts.f_rstd[static_cast<size_t>(t)] =
        ln_forward({x.data() + off, static_cast<size_t>(d)},
                   {acts.f_y.data() + off, static_cast<size_t>(d)});
    for (int i = 0; i < d; ++i) acts.f_out[off + i] = params.final_ln_gain.data[static_cast<size_t>(i)] * acts.f_y[off + i];
    double* lrow = acts.logits.data() + static_cast<size_t>(t) * V;
    for (int i = 0; i < d; ++i) {
      const double fi = acts.f_out[off + i];
      const double* urow = params.unembedding.row(static_cast<size_t>(i));
      for (int vtok = 0; vtok < V; ++vtok) lrow[vtok] += fi * urow[vtok];
    }
  }

  for (double lv : acts.logits) {
    if (!std::isfinite(lv)) fail(ErrorKind::numeric, "non-finite logits in forward pass");
  }
}

void check_loss_positions(const TokenSequence& seq, std::span<const int> loss_positions) {
  if (loss_positions.empty())
    fail(ErrorKind::domain, "loss_positions must be non-empty");
  for (int t : loss_positions) {
    if (t < 1 || t >= seq.length())
      fail(ErrorKind::domain, "loss position " + std::to_string(t) + " out of range");
    if (t < seq.role_boundary)
      fail(ErrorKind::domain,
           "loss position " + std::to_string(t) + " lies in the prompt prefix");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1)
    fail(ErrorKind::validation, "all model dimensions must be >= 1");
  if (max_seq_len < 2) fail(ErrorKind::validation, "max_seq_len must be >= 2");
  if (d_model % n_heads != 0)
    fail(ErrorKind::validation, "d_model must be divisible by n_heads");
}

void validate_sequence(const ModelConfig& config, const TokenSequence& seq) {
  if (seq.length() < 1) fail(ErrorKind::length, "empty token sequence");
  if (seq.length() > config.max_seq_len)
    fail(ErrorKind::length, "sequence of length " + std::to_string(seq.length()) +
                                " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  if (seq.role_boundary < 0 || seq.role_boundary > seq.length())
    fail(ErrorKind::validation, "role_boundary out of range");
  for (int t : seq.tokens) {
    if (t < 0 || t >= config.vocab_size)
      fail(ErrorKind::validation, "token " + std::to_string(t) + " outside vocabulary");
  }
}

std::string pooling_rule_name(PoolingRule rule) {
  return rule == PoolingRule::last_prompt_token ? "last_prompt_token" : "mean_prompt";
}

PoolingRule pooling_rule_from_name(const std::string& name) {
  if (name == "last_prompt_token") return PoolingRule::last_prompt_token;
  if (name == "mean_prompt") return PoolingRule::mean_prompt;
  fail(ErrorKind::validation, "unknown pooling rule: " + name);
}

std::vector<double> ActivationTrace::pooled(int layer, PoolingRule rule) const {
  if (layer < 0 || layer > n_layers)
    fail(ErrorKind::domain, "trace layer " + std::to_string(layer) + " out of range");
  if (role_boundary < 1)
    fail(ErrorKind::domain, "pooling requires at least one prompt token");
  const auto& buf = layers[static_cast<size_t>(layer)];
  std::vector<double> out(static_cast<size_t>(d_model), 0.0);
  if (rule == PoolingRule::last_prompt_token) {
    size_t off = static_cast<size_t>(role_boundary - 1) * d_model;
    for (int i = 0; i < d_model; ++i) out[static_cast<size_t>(i)] = buf[off + static_cast<size_t>(i)];
  } else {
    for (int t = 0; t < role_boundary; ++t) {
      size_t off = static_cast<size_t>(t) * d_model;
      for (int i = 0; i < d_model; ++i) out[static_cast<size_t>(i)] += buf[off + static_cast<size_t>(i)];
    }
    for (int i = 0; i < d_model; ++i) out[static_cast<size_t>(i)] /= static_cast<double>(role_boundary);
  }
  return out;
}

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  const uint64_t d = static_cast<uint64_t>(config.d_model);
  p.token_embedding = Tensor({static_cast<uint64_t>(config.vocab_size), d});
  p.position_embedding = Tensor({static_cast<uint64_t>(config.max_seq_len), d});
  p.layers.resize(static_cast<size_t>(config.n_layers));
  for (auto& l : p.layers) {
    l.attn_wq = Tensor({d, d});
    l.attn_wk = Tensor({d, d});
    l.attn_wv = Tensor({d, d});
    l.attn_wo = Tensor({d, d});
    l.mlp_up = Tensor({static_cast<uint64_t>(config.d_ff), d});
    l.mlp_down = Tensor({d, static_cast<uint64_t>(config.d_ff)});
  }
  p.final_ln_gain = Tensor({d});
  p.unembedding = Tensor({d, static_cast<uint64_t>(config.vocab_size)});

  CounterRng rng(config.rng_seed, "init");
  auto fill_gauss = [&rng](Tensor& t, double sigma) {
    for (double& v : t.data) v = static_cast<double>(static_cast<float>(sigma * rng.gaussian()));
  };
  fill_gauss(p.token_embedding, 0.08);
  fill_gauss(p.position_embedding, 0.08);
  for (auto& l : p.layers) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    const double sff = 1.0 / std::sqrt(static_cast<double>(config.d_ff));
    fill_gauss(l.attn_wq, sd);
    fill_gauss(l.attn_wk, sd);
    fill_gauss(l.attn_wv, sd);
    fill_gauss(l.attn_wo, sd);
    fill_gauss(l.mlp_up, sd);
    fill_gauss(l.mlp_down, sff);
  }
  for (double& v : p.final_ln_gain.data) v = 1.0;
  fill_gauss(p.unembedding, 1.0 / std::sqrt(static_cast<double>(config.d_model)));
  return p;
}

GradientSet zero_gradients(const ModelConfig& config) {
  const uint64_t d = static_cast<uint64_t>(config.d_model);
  GradientSet g;
  g.token_embedding = Tensor({static_cast<uint64_t>(config.vocab_size), d});
  g.position_embedding = Tensor({static_cast<uint64_t>(config.max_seq_len), d});
  g.layers.resize(static_cast<size_t>(config.n_layers));
  for (auto& l : g.layers) {
    l.attn_wq = Tensor({d, d});
    l.attn_wk = Tensor({d, d});
    l.attn_wv = Tensor({d, d});
    l.attn_wo = Tensor({d, d});
    l.mlp_up = Tensor({static_cast<uint64_t>(config.d_ff), d});
    l.mlp_down = Tensor({d, static_cast<uint64_t>(config.d_ff)});
  }
  g.final_ln_gain = Tensor({d});
  g.unembedding = Tensor({d, static_cast<uint64_t>(config.vocab_size)});
  return g;
}

void axpy_params(ModelParams& params, const GradientSet& grads, double scale) {
  auto apply = [scale](Tensor& a, const Tensor& b) {
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += scale * b.data[i];
  };
  apply(params.token_embedding, grads.token_embedding);
  apply(params.position_embedding, grads.position_embedding);
  for (size_t l = 0; l < params.layers.size(); ++l) {
    apply(params.layers[l].attn_wq, grads.layers[l].attn_wq);
    apply(params.layers[l].attn_wk, grads.layers[l].attn_wk);
    apply(params.layers[l].attn_wv, grads.layers[l].attn_wv);
    apply(params.layers[l].attn_wo, grads.layers[l].attn_wo);
    apply(params.layers[l].mlp_up, grads.layers[l].mlp_up);
    apply(params.layers[l].mlp_down, grads.layers[l].mlp_down);
  }
  apply(params.final_ln_gain, grads.final_ln_gain);
  apply(params.unembedding, grads.unembedding);
}

void axpy_params_into(GradientSet& accum, const GradientSet& grads) {
  auto apply = [](Tensor& a, const Tensor& b) {
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
  };
  apply(accum.token_embedding, grads.token_embedding);
  apply(accum.position_embedding, grads.position_embedding);
  for (size_t l = 0; l < accum.layers.size(); ++l) {
    apply(accum.layers[l].attn_wq, grads.layers[l].attn_wq);
    apply(accum.layers[l].attn_wk, grads.layers[l].attn_wk);
    apply(accum.layers[l].attn_wv, grads.layers[l].attn_wv);
    apply(accum.layers[l].attn_wo, grads.layers[l].attn_wo);
    apply(accum.layers[l].mlp_up, grads.layers[l].mlp_up);
    apply(accum.layers[l].mlp_down, grads.layers[l].mlp_down);
  }
  apply(accum.final_ln_gain, grads.final_ln_gain);
  apply(accum.unembedding, grads.unembedding);
}

ForwardResult forward(const ModelParams& params, const TokenSequence& seq, bool capture,
                      const ResidualHook* hook) {
  validate_sequence(params.config, seq);
  Acts acts;
  run_forward(params, seq, acts, hook);

  ForwardResult res;
  res.seq_len = seq.length();
  res.vocab_size = params.config.vocab_size;
  res.logits = std::move(acts.logits);
  if (capture) {
    ActivationTrace tr;
    tr.n_layers = params.config.n_layers;
    tr.d_model = params.config.d_model;
    tr.seq_len = seq.length();
    tr.role_boundary = seq.role_boundary;
    tr.layers = std::move(acts.stream);
    res.trace = std::move(tr);
  }
  return res;
}

ActivationTrace capture_trace(const ModelParams& params, const TokenSequence& seq) {
  return std::move(*forward(params, seq, true).trace);
}

double log_prob_of(std::span<const double> logits_row, int token) {
  double max_l = -std::numeric_limits<double>::infinity();
  for (double v : logits_row) max_l = std::max(max_l, v);
  double denom = 0.0;
  for (double v : logits_row) denom += std::exp(v - max_l);
  return logits_row[static_cast<size_t>(token)] - max_l - std::log(denom);
}

double nll(const ModelParams& params, const TokenSequence& seq,
           std::span<const int> loss_positions) {
  check_loss_positions(seq, loss_positions);
  ForwardResult fr = forward(params, seq, false);
  double loss = 0.0;
  for (int t : loss_positions) loss -= log_prob_of(fr.row(t - 1), seq.tokens[static_cast<size_t>(t)]);
  return loss;
}

GradientSet backward_logits(const ModelParams& params, const TokenSequence& seq,
                            const std::vector<double>& dlogits) {
  validate_sequence(params.config, seq);
  const ModelConfig& cfg = params.config;
  const int T = seq.length();
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int hd = cfg.head_dim();
  const int dff = cfg.d_ff;
  const int V = cfg.vocab_size;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  if (dlogits.size() != static_cast<size_t>(T) * V)
    fail(ErrorKind::shape, "dlogits size does not match seq_len * vocab_size");

  Acts acts;
  run_forward(params, seq, acts, nullptr);
  GradientSet g = zero_gradients(cfg);

  // unembedding and final norm
  std::vector<double> dx(static_cast<size_t>(T) * d, 0.0);
  {
    std::vector<double> df(static_cast<size_t>(d));
    for (int t = 0; t < T; ++t) {
      size_t off = static_cast<size_t>(t) * d;
      const double* dl = dlogits.data() + static_cast<size_t>(t) * V;
      std::fill(df.begin(), df.end(), 0.0);
      for (int i = 0; i < d; ++i) {
        const double* urow = params.unembedding.row(static_cast<size_t>(i));
        double* gurow = g.unembedding.row(static_cast<size_t>(i));
        const double fi = acts.f_out[off + static_cast<size_t>(i)];
        double s = 0.0;
        for (int vtok = 0; vtok < V; ++vtok) {
          gurow[vtok] += fi * dl[vtok];
          s += urow[vtok] * dl[vtok];
        }
        df[static_cast<size_t>(i)] = s;
      }
      std::vector<double> dfy(static_cast<size_t>(d));
      for (int i = 0; i < d; ++i) {
        g.final_ln_gain.data[static_cast<size_t>(i)] +=
            df[static_cast<size_t>(i)] * acts.f_y[off + static_cast<size_t>(i)];
        dfy[static_cast<size_t>(i)] =
            params.final_ln_gain.data[static_cast<size_t>(i)] * df[static_cast<size_t>(i)];
      }
      ln_backward({dfy.data(), static_cast<size_t>(d)},
                  {acts.f_y.data() + off, static_cast<size_t>(d)},
                  acts.f_rstd[static_cast<size_t>(t)],
                  {dx.data() + off, static_cast<size_t>(d)});
    }
  }

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerActs& la = acts.layers[static_cast<size_t>(l)];
    const LayerParams& lp = params.layers[static_cast<size_t>(l)];
    LayerParams& gl = g.layers[static_cast<size_t>(l)];

    // mlp sublayer: x_out = r2 + mlp_down(gelu(mlp_up(ln(r2))))
    std::vector<double> dr2 = dx;  // residual branch
    {
      std::vector<double> dact(static_cast<size_t>(dff));
      std::vector<double> dpre(static_cast<size_t>(dff));
      std::vector<double> dm(static_cast<size_t>(d));
      for (int t = 0; t < T; ++t) {
        size_t off = static_cast<size_t>(t) * d;
        size_t foff = static_cast<size_t>(t) * dff;
        const double* dp = dx.data() + off;
        std::fill(dact.begin(), dact.end(), 0.0);
        for (int o = 0; o < d; ++o) {
          const double* wrow = lp.mlp_down.data.data() + static_cast<size_t>(o) * dff;
          double* gwrow = gl.mlp_down.data.data() + static_cast<size_t>(o) * dff;
          for (int j = 0; j < dff; ++j) {
            gwrow[j] += dp[o] * la.mlp_act[foff + static_cast<size_t>(j)];
            dact[static_cast<size_t>(j)] += wrow[j] * dp[o];
          }
        }
        for (int j = 0; j < dff; ++j)
          dpre[static_cast<size_t>(j)] =
              dact[static_cast<size_t>(j)] * gelu_grad(la.mlp_pre[foff + static_cast<size_t>(j)]);
        std::fill(dm.begin(), dm.end(), 0.0);
        for (int j = 0; j < dff; ++j) {
          const double* wrow = lp.mlp_up.data.data() + static_cast<size_t>(j) * d;
          double* gwrow = gl.mlp_up.data.data() + static_cast<size_t>(j) * d;
          const double dv = dpre[static_cast<size_t>(j)];
          for (int i = 0; i < d; ++i) {
            gwrow[i] += dv * la.m_y[off + static_cast<size_t>(i)];
            dm[static_cast<size_t>(i)] += wrow[i] * dv;
          }
        }
        ln_backward({dm.data(), static_cast<size_t>(d)},
                    {la.m_y.data() + off, static_cast<size_t>(d)},
                    la.m_rstd[static_cast<size_t>(t)],
                    {dr2.data() + off, static_cast<size_t>(d)});
      }
    }

    // attention sublayer: r2 = r1 + attn_wo(ctx(ln(r1)))
    std::vector<double> dr1 = dr2;  // residual branch
    {
      std::vector<double> dctx(static_cast<size_t>(T) * d, 0.0);
      for (int t = 0; t < T; ++t) {
        size_t off = static_cast<size_t>(t) * d;
        const double* dz = dr2.data() + off;
        for (int o = 0; o < d; ++o) {
          const double* wrow = lp.attn_wo.data.data() + static_cast<size_t>(o) * d;
          double* gwrow = gl.attn_wo.data.data() + static_cast<size_t>(o) * d;
          for (int i = 0; i < d; ++i) {
            gwrow[i] += dz[o] * la.ctx[off + static_cast<size_t>(i)];
            dctx[off + static_cast<size_t>(i)] += wrow[i] * dz[o];
          }
        }
      }

      std::vector<double> dq(static_cast<size_t>(T) * d, 0.0);
      std::vector<double> dk(static_cast<size_t>(T) * d, 0.0);
      std::vector<double> dv(static_cast<size_t>(T) * d, 0.0);
      std::vector<double> datt(static_cast<size_t>(T));
      std::vector<double> ds(static_cast<size_t>(T));
      for (int h = 0; h < H; ++h) {
        const int oh = h * hd;
        for (int t = 0; t < T; ++t) {
          const double* att_row = la.att.data() + (static_cast<size_t>(h) * T + t) * T;
          const double* dctx_t = dctx.data() + static_cast<size_t>(t) * d + oh;
          double dot_ad = 0.0;
          for (int u = 0; u <= t; ++u) {
            const double* vu = la.v.data() + static_cast<size_t>(u) * d + oh;
            double s = 0.0;
            for (int c = 0; c < hd; ++c) s += dctx_t[c] * vu[c];
            datt[static_cast<size_t>(u)] = s;
            dot_ad += att_row[u] * s;
            double* dvu = dv.data() + static_cast<size_t>(u) * d + oh;
            for (int c = 0; c < hd; ++c) dvu[c] += att_row[u] * dctx_t[c];
          }
          for (int u = 0; u <= t; ++u)
            ds[static_cast<size_t>(u)] = att_row[u] * (datt[static_cast<size_t>(u)] - dot_ad);
          double* dqt = dq.data() + static_cast<size_t>(t) * d + oh;
          const double* qt = la.q.data() + static_cast<size_t>(t) * d + oh;
          for (int u = 0; u <= t; ++u) {
            const double* ku = la.k.data() + static_cast<size_t>(u) * d + oh;
            double* dku = dk.data() + static_cast<size_t>(u) * d + oh;
            const double w = ds[static_cast<size_t>(u)] * inv_sqrt_hd;
            for (int c = 0; c < hd; ++c) {
              dqt[c] += w * ku[c];
              dku[c] += w * qt[c];
            }
          }
        }
      }

      std::vector<double> da(static_cast<size_t>(d));
      for (int t = 0; t < T; ++t) {
        size_t off = static_cast<size_t>(t) * d;
        std::fill(da.begin(), da.end(), 0.0);
        auto proj_back = [&](const Tensor& w, Tensor& gw, const std::vector<double>& dout) {
          const double* dz = dout.data() + off;
          for (int o = 0; o < d; ++o) {
            const double* wrow = w.data.data() + static_cast<size_t>(o) * d;
            double* gwrow = gw.data.data() + static_cast<size_t>(o) * d;
            for (int i = 0; i < d; ++i) {
              gwrow[i] += dz[o] * la.a_y[off + static_cast<size_t>(i)];
              da[static_cast<size_t>(i)] += wrow[i] * dz[o];
            }
          }
        };
        proj_back(lp.attn_wq, gl.attn_wq, dq);
        proj_back(lp.attn_wk, gl.attn_wk, dk);
        proj_back(lp.attn_wv, gl.attn_wv, dv);
        ln_backward({da.data(), static_cast<size_t>(d)},
                    {la.a_y.data() + off, static_cast<size_t>(d)},
                    la.a_rstd[static_cast<size_t>(t)],
                    {dr1.data() + off, static_cast<size_t>(d)});
      }
    }
    dx = std::move(dr1);
  }

  for (int t = 0; t < T; ++t) {
    size_t off = static_cast<size_t>(t) * d;
    double* gte = g.token_embedding.row(static_cast<size_t>(seq.tokens[static_cast<size_t>(t)]));
    double* gpe = g.position_embedding.row(static_cast<size_t>(t));
    for (int i = 0; i < d; ++i) {
      gte[i] += dx[off + static_cast<size_t>(i)];
      gpe[i] += dx[off + static_cast<size_t>(i)];
    }
  }
  return g;
}

GradientSet backward(const ModelParams& params, const TokenSequence& seq,
                     std::span<const int> loss_positions) {
  check_loss_positions(seq, loss_positions);
  const int T = seq.length();
  const int V = params.config.vocab_size;
  ForwardResult fr = forward(params, seq, false);
  std::vector<double> dlogits(static_cast<size_t>(T) * V, 0.0);
  for (int t : loss_positions) {
    std::span<const double> row = fr.row(t - 1);
    double* drow = dlogits.data() + static_cast<size_t>(t - 1) * V;
    double max_l = -std::numeric_limits<double>::infinity();
    for (double v : row) max_l = std::max(max_l, v);
    double denom = 0.0;
    for (double v : row) denom += std::exp(v - max_l);
    for (int vtok = 0; vtok < V; ++vtok)
      drow[vtok] += std::exp(row[static_cast<size_t>(vtok)] - max_l) / denom;
    drow[seq.tokens[static_cast<size_t>(t)]] -= 1.0;
  }
  return backward_logits(params, seq, dlogits);
}

int sample_from_logits(std::span<const double> logits_row, double temperature,
                       CounterRng& rng) {
  const int V = static_cast<int>(logits_row.size());
  if (temperature < 1e-6) {
    int best = 0;
    for (int v = 1; v < V; ++v)
      if (logits_row[static_cast<size_t>(v)] > logits_row[static_cast<size_t>(best)]) best = v;
    return best;
  }
  double max_l = -std::numeric_limits<double>::infinity();
  for (double v : logits_row) max_l = std::max(max_l, v / temperature);
  std::vector<double> p(static_cast<size_t>(V));
  double denom = 0.0;
  for (int v = 0; v < V; ++v) {
    p[static_cast<size_t>(v)] = std::exp(logits_row[static_cast<size_t>(v)] / temperature - max_l);
    denom += p[static_cast<size_t>(v)];
  }
  double u = rng.uniform() * denom;
  double acc = 0.0;
  for (int v = 0; v < V; ++v) {
    acc += p[static_cast<size_t>(v)];
    if (u < acc) return v;
  }
  return V - 1;
}

SampleResult sample(const ModelParams& params, const TokenSequence& prompt, int max_new,
                    double temperature, uint64_t seed, const ResidualHook* hook) {
  if (temperature <= 0.0) fail(ErrorKind::domain, "temperature must be > 0");
  if (max_new < 1) fail(ErrorKind::domain, "max_new must be >= 1");
  validate_sequence(params.config, prompt);
  if (prompt.length() + max_new > params.config.max_seq_len)
    fail(ErrorKind::length, "prompt does not fit in max_seq_len - max_new");

  SampleResult res;
  res.seq.tokens = prompt.tokens;
  res.seq.role_boundary = prompt.length();
  CounterRng rng(seed, "sample");
  for (int step = 0; step < max_new; ++step) {
    ForwardResult fr = forward(params, res.seq, false, hook);
    std::span<const double> row = fr.row(res.seq.length() - 1);
    int tok = sample_from_logits(row, temperature, rng);
    res.logprobs.push_back(log_prob_of(row, tok));
    res.seq.tokens.push_back(tok);
    if (tok == kEndToken) break;
  }
  return res;
}

}  // namespace refgeo
