#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "refgeo/directions.hpp"
#include "refgeo/model.hpp"

namespace refgeo {

// Pooled activations: one row per prompt, one column per feature.
struct ActivationMatrix {
  int n = 0;
  int d = 0;
  std::vector<double> data;  // row-major [n * d]
  int layer = 0;
  std::string model_id;
  std::string prompt_set_id;
  std::vector<std::string> prompt_ids;

  const double* row(int i) const { return data.data() + static_cast<size_t>(i) * d; }
};

ActivationMatrix pooled_activations(const ModelParams& params,
                                    std::span<const PromptRecord> prompts, int layer,
                                    PoolingRule rule, const std::string& model_id,
                                    const std::string& prompt_set_id);

// ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) with column-centered
// features. Invariant to orthogonal right-transforms and isotropic scaling.
double linear_cka(const ActivationMatrix& x, const ActivationMatrix& y);

// Cosine-distance dissimilarity matrix, n x n, zero diagonal.
std::vector<double> rdm(const ActivationMatrix& x);

// Spearman rank correlation (average ranks for ties) between the strict
// upper triangles of the two RDMs.
double rsa(const ActivationMatrix& x, const ActivationMatrix& y);
double rsa_from_rdms(std::span<const double> d1, std::span<const double> d2, int n);

double spearman(std::span<const double> a, std::span<const double> b);

struct LayerSimilarity {
  int layer = 0;
  double cka = 0.0;
  double rsa = 0.0;
};

struct SimilarityProfile {
  std::string model_a;
  std::string model_b;
  std::string prompt_set_id;
  std::vector<LayerSimilarity> layers;
  double mean_cka = 0.0;
  double mean_rsa = 0.0;
};

SimilarityProfile layer_profile(const ModelParams& base, const ModelParams& other,
                                std::span<const PromptRecord> prompts, PoolingRule rule,
                                const std::string& base_id, const std::string& other_id,
                                const std::string& prompt_set_id);

struct NamedModel {
  std::string id;
  const ModelParams* params = nullptr;
};

enum class LayerAgg { mean_over_layers, single_layer };

struct PairwiseMatrix {
  std::vector<std::string> model_ids;
  std::vector<double> cka;  // [m * m]
  std::vector<double> rsa;  // [m * m]
};

// Pairwise model similarity per category slice; symmetric, unit diagonal.
std::map<std::string, PairwiseMatrix> category_matrix(
    std::span<const NamedModel> models,
    const std::map<std::string, std::vector<PromptRecord>>& prompt_slices, LayerAgg agg,
    int layer, PoolingRule rule);

}  // namespace refgeo
