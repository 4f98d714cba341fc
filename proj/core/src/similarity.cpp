#include "refgeo/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "refgeo/errors.hpp"
#include "refgeo/threading.hpp"

namespace refgeo {

namespace {

std::vector<double> center_columns(const ActivationMatrix& x) {
  std::vector<double> out(x.data);
  for (int j = 0; j < x.d; ++j) {
    double mu = 0.0;
    for (int i = 0; i < x.n; ++i) mu += out[static_cast<size_t>(i) * x.d + j];
    mu /= static_cast<double>(x.n);
    for (int i = 0; i < x.n; ++i) out[static_cast<size_t>(i) * x.d + j] -= mu;
  }
  return out;
}

// ||A^T B||_F^2 for column-centered matrices with matched row count
double cross_norm_sq(const std::vector<double>& a, int n, int da,
                     const std::vector<double>& b, int db) {
  double total = 0.0;
  for (int j = 0; j < da; ++j) {
    for (int k = 0; k < db; ++k) {
      double s = 0.0;
      for (int i = 0; i < n; ++i)
        s += a[static_cast<size_t>(i) * da + j] * b[static_cast<size_t>(i) * db + k];
      total += s * s;
    }
  }
  return total;
}

void check_rows_match(const ActivationMatrix& x, const ActivationMatrix& y) {
  if (x.n != y.n) fail(ErrorKind::shape, "activation matrices have different row counts");
  if (x.n < 3) fail(ErrorKind::domain, "similarity needs at least 3 prompts");
}

std::vector<double> average_ranks(std::span<const double> v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

ActivationMatrix pooled_activations(const ModelParams& params,
                                    std::span<const PromptRecord> prompts, int layer,
                                    PoolingRule rule, const std::string& model_id,
                                    const std::string& prompt_set_id) {
  ActivationMatrix m;
  m.n = static_cast<int>(prompts.size());
  m.d = params.config.d_model;
  m.layer = layer;
  m.model_id = model_id;
  m.prompt_set_id = prompt_set_id;
  m.data.assign(static_cast<size_t>(m.n) * m.d, 0.0);
  m.prompt_ids.resize(prompts.size());
  parallel_for(prompts.size(), [&](size_t i) {
    ActivationTrace tr = capture_trace(params, prompts[i].tokens);
    std::vector<double> pooled = tr.pooled(layer, rule);
    std::copy(pooled.begin(), pooled.end(), m.data.begin() + static_cast<long>(i) * m.d);
    m.prompt_ids[i] = prompts[i].id;
  });
  return m;
}

double linear_cka(const ActivationMatrix& x, const ActivationMatrix& y) {
  check_rows_match(x, y);
  std::vector<double> xc = center_columns(x);
  std::vector<double> yc = center_columns(y);
  double xx = std::sqrt(cross_norm_sq(xc, x.n, x.d, xc, x.d));
  double yy = std::sqrt(cross_norm_sq(yc, y.n, y.d, yc, y.d));
  if (xx < 1e-12 || yy < 1e-12)
    fail(ErrorKind::degenerate_input, "zero-variance activation matrix in CKA");
  double xy = cross_norm_sq(yc, x.n, y.d, xc, x.d);
  return xy / (xx * yy);
}

std::vector<double> rdm(const ActivationMatrix& x) {
  std::vector<double> norms(static_cast<size_t>(x.n));
  for (int i = 0; i < x.n; ++i) {
    double s = 0.0;
    const double* ri = x.row(i);
    for (int j = 0; j < x.d; ++j) s += ri[j] * ri[j];
    if (s <= 0.0) {
      std::string id = i < static_cast<int>(x.prompt_ids.size()) ? x.prompt_ids[static_cast<size_t>(i)]
                                                                 : std::to_string(i);
      fail(ErrorKind::degenerate_row, "zero-norm activation row for prompt " + id);
    }
    norms[static_cast<size_t>(i)] = std::sqrt(s);
  }
  std::vector<double> out(static_cast<size_t>(x.n) * x.n, 0.0);
  for (int i = 0; i < x.n; ++i) {
    for (int j = i + 1; j < x.n; ++j) {
      double s = 0.0;
      const double* ri = x.row(i);
      const double* rj = x.row(j);
      for (int k = 0; k < x.d; ++k) s += ri[k] * rj[k];
      double dist = 1.0 - s / (norms[static_cast<size_t>(i)] * norms[static_cast<size_t>(j)]);
      out[static_cast<size_t>(i) * x.n + j] = dist;
      out[static_cast<size_t>(j) * x.n + i] = dist;
    }
  }
  return out;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2)
    fail(ErrorKind::domain, "spearman needs two equal-length vectors of size >= 2");
  std::vector<double> ra = average_ranks(a);
  std::vector<double> rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va < 1e-12 || vb < 1e-12)
    fail(ErrorKind::degenerate_rdm, "constant upper triangle, rank correlation undefined");
  return cov / std::sqrt(va * vb);
}

double rsa_from_rdms(std::span<const double> d1, std::span<const double> d2, int n) {
  if (n < 4) fail(ErrorKind::domain, "rsa needs at least 4 prompts");
  if (d1.size() != static_cast<size_t>(n) * n || d2.size() != static_cast<size_t>(n) * n)
    fail(ErrorKind::shape, "rdm size does not match n");
  std::vector<double> u1, u2;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      u1.push_back(d1[static_cast<size_t>(i) * n + j]);
      u2.push_back(d2[static_cast<size_t>(i) * n + j]);
    }
  }
  return spearman(u1, u2);
}

double rsa(const ActivationMatrix& x, const ActivationMatrix& y) {
  check_rows_match(x, y);
  if (x.n < 4) fail(ErrorKind::domain, "rsa needs at least 4 prompts");
  return rsa_from_rdms(rdm(x), rdm(y), x.n);
}

SimilarityProfile layer_profile(const ModelParams& base, const ModelParams& other,
                                std::span<const PromptRecord> prompts, PoolingRule rule,
                                const std::string& base_id, const std::string& other_id,
                                const std::string& prompt_set_id) {
  if (!base.config.same_shape(other.config))
    fail(ErrorKind::compatibility, "layer_profile needs models with a shared configuration");
  if (prompts.empty()) fail(ErrorKind::domain, "layer_profile needs prompts");

  // Capture once per model, slice per layer.
  std::vector<ActivationTrace> tb = capture_traces(base, prompts);
  std::vector<ActivationTrace> to = capture_traces(other, prompts);

  SimilarityProfile prof;
  prof.model_a = base_id;
  prof.model_b = other_id;
  prof.prompt_set_id = prompt_set_id;
  const int L = base.config.n_layers;
  const int d = base.config.d_model;
  auto matrix_at = [&](std::vector<ActivationTrace>& traces, const std::string& id,
                       int layer) {
    ActivationMatrix m;
    m.n = static_cast<int>(prompts.size());
    m.d = d;
    m.layer = layer;
    m.model_id = id;
    m.prompt_set_id = prompt_set_id;
    m.data.assign(static_cast<size_t>(m.n) * d, 0.0);
    for (size_t i = 0; i < traces.size(); ++i) {
      std::vector<double> pooled = traces[i].pooled(layer, rule);
      std::copy(pooled.begin(), pooled.end(), m.data.begin() + static_cast<long>(i) * d);
      m.prompt_ids.push_back(prompts[i].id);
    }
    return m;
  };
  for (int layer = 0; layer <= L; ++layer) {
    ActivationMatrix mb = matrix_at(tb, base_id, layer);
    ActivationMatrix mo = matrix_at(to, other_id, layer);
    LayerSimilarity ls;
    ls.layer = layer;
    ls.cka = linear_cka(mb, mo);
    ls.rsa = rsa(mb, mo);
    prof.layers.push_back(ls);
    prof.mean_cka += ls.cka;
    prof.mean_rsa += ls.rsa;
  }
  prof.mean_cka /= static_cast<double>(L + 1);
  prof.mean_rsa /= static_cast<double>(L + 1);
  return prof;
}

std::map<std::string, PairwiseMatrix> category_matrix(
    std::span<const NamedModel> models,
    const std::map<std::string, std::vector<PromptRecord>>& prompt_slices, LayerAgg agg,
    int layer, PoolingRule rule) {
  if (models.size() < 2) fail(ErrorKind::domain, "category_matrix needs >= 2 models");
  for (const auto& [cat, prompts] : prompt_slices) {
    if (prompts.size() < 4)
      fail(ErrorKind::slice_size,
           "category slice " + cat + " has fewer than 4 prompts");
  }
  const int m = static_cast<int>(models.size());
  const int L = models.front().params->config.n_layers;

  std::map<std::string, PairwiseMatrix> out;
  for (const auto& [cat, prompts] : prompt_slices) {
    PairwiseMatrix pm;
    for (const auto& nm : models) pm.model_ids.push_back(nm.id);
    pm.cka.assign(static_cast<size_t>(m) * m, 0.0);
    pm.rsa.assign(static_cast<size_t>(m) * m, 0.0);

    // pooled matrices per model per layer
    std::vector<std::vector<ActivationMatrix>> mats(models.size());
    for (size_t mi = 0; mi < models.size(); ++mi) {
      std::vector<ActivationTrace> traces = capture_traces(*models[mi].params, prompts);
      const int d = models[mi].params->config.d_model;
      for (int l = 0; l <= L; ++l) {
        if (agg == LayerAgg::single_layer && l != layer) continue;
        ActivationMatrix am;
        am.n = static_cast<int>(prompts.size());
        am.d = d;
        am.layer = l;
        am.model_id = models[mi].id;
        am.prompt_set_id = cat;
        am.data.assign(static_cast<size_t>(am.n) * d, 0.0);
        for (size_t i = 0; i < traces.size(); ++i) {
          std::vector<double> pooled = traces[i].pooled(l, rule);
          std::copy(pooled.begin(), pooled.end(),
                    am.data.begin() + static_cast<long>(i) * d);
          am.prompt_ids.push_back(prompts[i].id);
        }
        mats[mi].push_back(std::move(am));
      }
    }
    for (int a = 0; a < m; ++a) {
      for (int b = a; b < m; ++b) {
        double cka_sum = 0.0, rsa_sum = 0.0;
        const size_t n_layers_used = mats[static_cast<size_t>(a)].size();
        for (size_t l = 0; l < n_layers_used; ++l) {
          cka_sum += linear_cka(mats[static_cast<size_t>(a)][l], mats[static_cast<size_t>(b)][l]);
          rsa_sum += rsa(mats[static_cast<size_t>(a)][l], mats[static_cast<size_t>(b)][l]);
        }
        double ckav = cka_sum / static_cast<double>(n_layers_used);
        double rsav = rsa_sum / static_cast<double>(n_layers_used);
        pm.cka[static_cast<size_t>(a) * m + b] = ckav;
        pm.cka[static_cast<size_t>(b) * m + a] = ckav;
        pm.rsa[static_cast<size_t>(a) * m + b] = rsav;
        pm.rsa[static_cast<size_t>(b) * m + a] = rsav;
      }
    }
    out[cat] = std::move(pm);
  }
  return out;
}

}  // namespace refgeo
