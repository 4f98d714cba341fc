#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refgeo/errors.hpp"
#include "refgeo/io_util.hpp"
#include "refgeo/pipeline.hpp"

namespace refgeo {

namespace {

using nlohmann::json;

json read_summary(const std::string& path) {
  json j = json::parse(read_text_file(path), nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::format, "invalid summary JSON: " + path);
  return j;
}

}  // namespace

void emit_report(const std::string& results_dir, const std::string& out_dir) {
  struct Source {
    std::string name;   // table name for error messages
    std::string path;   // required input
  };
  const std::vector<Source> summaries = {
      {"base harmfulness summary", results_dir + "/summary_train_base.json"},
      {"sft harmfulness summary", results_dir + "/summary_jailbreak_sft.json"},
      {"rlvr harmfulness summary", results_dir + "/summary_jailbreak_rlvr.json"},
      {"abliteration harmfulness summary", results_dir + "/summary_abliterate.json"},
  };
  const std::vector<Source> csvs = {
      {"self_audit", results_dir + "/self_audit.csv"},
      {"reflection", results_dir + "/reflection.csv"},
      {"similarity_layers", results_dir + "/similarity_layers.csv"},
      {"patch_sweeps", results_dir + "/patch_sweeps.csv"},
      {"category_transfer", results_dir + "/transfer_grid.csv"},
  };

  std::vector<std::string> missing;
  for (const auto& s : summaries)
    if (!file_exists(s.path)) missing.push_back(s.name + " (" + s.path + ")");
  for (const auto& s : csvs)
    if (!file_exists(s.path)) missing.push_back(s.name + " (" + s.path + ")");
  if (!missing.empty()) {
    std::string msg = "report is missing required tables:";
    for (const auto& m : missing) msg += "\n  " + m;
    fail(ErrorKind::missing_table, msg);
  }

  ensure_dir(out_dir);
  json manifest;

  // harmfulness bars from the four route summaries
  std::string bars = "model,prompt_set,metric,value\n";
  for (const auto& s : summaries) {
    json j = read_summary(s.path);
    const json& res = j.at("result");
    std::string model = res.at("model_id").get<std::string>();
    const json& ev = res.at("eval");
    bars += model + ",harmful_eval,compliance," +
            format_double(ev.at("harmful_compliance").get<double>()) + "\n";
    bars += model + ",harmful_eval,refusal_rate," +
            format_double(ev.at("harmful_refusal_rate").get<double>()) + "\n";
    bars += model + ",benign_eval,compliance," +
            format_double(ev.at("benign_compliance").get<double>()) + "\n";
    manifest["sources"][s.path] = j.at("provenance");
  }
  write_text_file_atomic(out_dir + "/harmfulness_bars.csv", bars);

  const std::map<std::string, std::string> copies = {
      {csvs[0].path, out_dir + "/self_audit.csv"},
      {csvs[1].path, out_dir + "/reflection_deltas.csv"},
      {csvs[2].path, out_dir + "/similarity_layers.csv"},
      {csvs[3].path, out_dir + "/patch_sweeps.csv"},
      {csvs[4].path, out_dir + "/category_transfer.csv"},
  };
  for (const auto& [src, dst] : copies) {
    write_text_file_atomic(dst, read_text_file(src));
    manifest["copied"][src] = std::filesystem::path(dst).filename().string();
  }
  write_text_file_atomic(out_dir + "/manifest.json", manifest.dump(2) + "\n");
}

}  // namespace refgeo
