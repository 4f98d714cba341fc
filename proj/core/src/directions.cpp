#include "refgeo/directions.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "refgeo/errors.hpp"
#include "refgeo/io_util.hpp"
#include "refgeo/threading.hpp"

namespace refgeo {

namespace {

// Per-dimension mean with sorted summation, so any permutation of the
// trace set produces bitwise-identical output.
std::vector<double> pooled_mean(std::span<const ActivationTrace> traces, int layer,
                                PoolingRule rule) {
  const int d = traces.front().d_model;
  std::vector<std::vector<double>> pooled(traces.size());
  for (size_t i = 0; i < traces.size(); ++i) pooled[i] = traces[i].pooled(layer, rule);
  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  std::vector<double> column(traces.size());
  for (int i = 0; i < d; ++i) {
    for (size_t j = 0; j < traces.size(); ++j) column[j] = pooled[j][static_cast<size_t>(i)];
    std::sort(column.begin(), column.end());
    double s = 0.0;
    for (double v : column) s += v;
    mean[static_cast<size_t>(i)] = s / static_cast<double>(traces.size());
  }
  return mean;
}

void check_trace_sets(std::span<const ActivationTrace> harmful,
                      std::span<const ActivationTrace> benign) {
  if (harmful.empty() || benign.empty())
    fail(ErrorKind::domain, "contrast needs non-empty harmful and benign trace sets");
  const int d = harmful.front().d_model;
  const int L = harmful.front().n_layers;
  for (const auto& t : harmful)
    if (t.d_model != d || t.n_layers != L)
      fail(ErrorKind::compatibility, "trace sets mix model configurations");
  for (const auto& t : benign)
    if (t.d_model != d || t.n_layers != L)
      fail(ErrorKind::compatibility, "trace sets mix model configurations");
}

}  // namespace

RefusalDirection contrast_direction(std::span<const ActivationTrace> harmful,
                                    std::span<const ActivationTrace> benign, int layer,
                                    PoolingRule rule, const std::string& source_model_id) {
  check_trace_sets(harmful, benign);
  std::vector<double> mh = pooled_mean(harmful, layer, rule);
  std::vector<double> mb = pooled_mean(benign, layer, rule);
  std::vector<double> diff(mh.size());
  double norm_sq = 0.0;
  for (size_t i = 0; i < mh.size(); ++i) {
    diff[i] = mh[i] - mb[i];
    norm_sq += diff[i] * diff[i];
  }
  double norm = std::sqrt(norm_sq);
  if (norm < 1e-12)
    fail(ErrorKind::degenerate_contrast,
         "harmful and benign means coincide at layer " + std::to_string(layer));
  RefusalDirection dir;
  dir.layer = layer;
  dir.vector.resize(diff.size());
  for (size_t i = 0; i < diff.size(); ++i) dir.vector[i] = diff[i] / norm;
  dir.source_model_id = source_model_id;
  dir.pooling_rule = pooling_rule_name(rule);
  dir.n_harmful = static_cast<int>(harmful.size());
  dir.n_benign = static_cast<int>(benign.size());
  return dir;
}

double projection_coefficient(std::span<const double> h, const RefusalDirection& dir) {
  if (h.size() != dir.vector.size())
    fail(ErrorKind::shape, "vector dimension " + std::to_string(h.size()) +
                               " does not match direction dimension " +
                               std::to_string(dir.vector.size()));
  double s = 0.0;
  for (size_t i = 0; i < h.size(); ++i) s += h[i] * dir.vector[i];
  return s;
}

std::vector<double> contrast_norms_by_layer(std::span<const ActivationTrace> harmful,
                                            std::span<const ActivationTrace> benign,
                                            PoolingRule rule) {
  check_trace_sets(harmful, benign);
  const int L = harmful.front().n_layers;
  std::vector<double> norms;
  for (int layer = 0; layer <= L; ++layer) {
    std::vector<double> mh = pooled_mean(harmful, layer, rule);
    std::vector<double> mb = pooled_mean(benign, layer, rule);
    double s = 0.0;
    for (size_t i = 0; i < mh.size(); ++i) s += (mh[i] - mb[i]) * (mh[i] - mb[i]);
    norms.push_back(std::sqrt(s));
  }
  return norms;
}

int default_direction_layer(int n_layers) {
  return static_cast<int>(std::llround(0.65 * n_layers));
}

std::vector<ActivationTrace> capture_traces(const ModelParams& params,
                                            std::span<const PromptRecord> prompts) {
  std::vector<ActivationTrace> traces(prompts.size());
  parallel_for(prompts.size(), [&](size_t i) {
    traces[i] = capture_trace(params, prompts[i].tokens);
  });
  return traces;
}

double retained_projection(const ModelParams& model, const ModelParams& base,
                           const RefusalDirection& base_dir,
                           std::span<const PromptRecord> harmful,
                           std::span<const PromptRecord> benign, PoolingRule rule) {
  if (!model.config.same_shape(base.config))
    fail(ErrorKind::compatibility, "model and base have different configurations");
  auto contrast_along = [&](const ModelParams& p) {
    std::vector<ActivationTrace> th = capture_traces(p, harmful);
    std::vector<ActivationTrace> tb = capture_traces(p, benign);
    std::vector<double> mh = pooled_mean(th, base_dir.layer, rule);
    std::vector<double> mb = pooled_mean(tb, base_dir.layer, rule);
    std::vector<double> diff(mh.size());
    for (size_t i = 0; i < mh.size(); ++i) diff[i] = mh[i] - mb[i];
    return projection_coefficient(diff, base_dir);
  };
  double base_quantity = contrast_along(base);
  if (std::abs(base_quantity) < 1e-12)
    fail(ErrorKind::degenerate_normalizer,
         "base model contrast projection is below 1e-12");
  double model_quantity = contrast_along(model);
  return model_quantity / base_quantity;
}

std::string direction_to_json(const RefusalDirection& dir) {
  nlohmann::json j;
  j["layer"] = dir.layer;
  j["vector"] = dir.vector;
  j["source_model_id"] = dir.source_model_id;
  j["pooling_rule"] = dir.pooling_rule;
  j["n_harmful"] = dir.n_harmful;
  j["n_benign"] = dir.n_benign;
  return j.dump(2) + "\n";
}

RefusalDirection direction_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::format, "invalid direction JSON");
  RefusalDirection dir;
  try {
    dir.layer = j.at("layer").get<int>();
    dir.vector = j.at("vector").get<std::vector<double>>();
    dir.source_model_id = j.at("source_model_id").get<std::string>();
    dir.pooling_rule = j.at("pooling_rule").get<std::string>();
    dir.n_harmful = j.at("n_harmful").get<int>();
    dir.n_benign = j.at("n_benign").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("direction JSON missing field: ") + e.what());
  }
  return dir;
}

void save_direction(const RefusalDirection& dir, const std::string& path) {
  write_text_file_atomic(path, direction_to_json(dir));
}

RefusalDirection load_direction(const std::string& path) {
  return direction_from_json(read_text_file(path));
}

}  // namespace refgeo
