#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "refgeo/corpus.hpp"
#include "refgeo/directions.hpp"
#include "refgeo/edits.hpp"
#include "refgeo/model.hpp"

namespace refgeo {

inline constexpr std::string_view kTemplateVersion = "templates-v1";
inline constexpr std::string_view kAuditQuestionVersion = "audit-questions-v1";

enum class AuditQuestion { policy_violation, refusal_strength, actionable_harm };
std::string audit_question_name(AuditQuestion q);

struct ProbeOption {
  std::string label;
  double value = 0.0;
  int toy_token = -1;
};

struct ProbeItem {
  AuditQuestion question_id = AuditQuestion::policy_violation;
  std::string question_text;
  std::vector<ProbeOption> options;  // values strictly increasing
  std::string scale_description;
  std::string request_text;
  std::vector<int> request_tokens;  // toy-vocabulary mode

  void validate() const;
};

// Standard ten-option (A=1 .. J=10) audit item for one prompt.
ProbeItem make_audit_item(AuditQuestion q, const PromptRecord& prompt);

// Raw skeletons, byte-for-byte what the golden asset files hold.
std::string_view policy_judgment_template();
std::string_view global_self_description_template();
std::string_view safety_reflection_template();
std::string_view baseline_template();

// Text renderings; placeholder substitution is single-pass, so braces inside
// request_text are kept verbatim.
std::string render_probe(const ProbeItem& item);
std::string render_reflection(std::string_view request_text);
std::string render_baseline(std::string_view request_text);
std::string render_global_self_description();

// Toy-vocabulary stand-ins built from the same skeletons.
std::vector<int> render_probe_tokens(const ProbeItem& item);
std::vector<int> render_reflection_tokens(std::span<const int> prompt_tokens);
std::vector<int> render_global_self_description_tokens();

struct ProbeResult {
  std::string prompt_id;
  AuditQuestion question = AuditQuestion::policy_violation;
  std::vector<std::string> labels;
  std::vector<double> distribution;  // renormalized over option tokens
  std::string argmax_label;
  double expected = 0.0;
  double mass = 0.0;  // probability captured by option tokens before renormalizing
  bool uninformative = false;  // mass < 1e-6
};

// Reads the next-token distribution at the answer position, restricted to
// the option label tokens. Never samples free text.
ProbeResult score_mc(const ModelParams& model, const ProbeItem& item,
                     const std::string& prompt_id);
ProbeResult score_mc_from_logits(std::span<const double> logits_row, const ProbeItem& item,
                                 const std::string& prompt_id);

struct SelfAuditResult {
  std::vector<std::array<ProbeResult, 3>> per_prompt;
  std::array<double, 3> mean{};    // policy_violation, refusal_strength, actionable_harm
  std::array<double, 3> stddev{};  // population std per dimension
};

SelfAuditResult self_audit(const ModelParams& model,
                           std::span<const PromptRecord> harmful_prompts);

struct ReflectionPromptOutcome {
  std::string prompt_id;
  double baseline = 0.0;
  double reflection = 0.0;
  double delta = 0.0;  // reflection - baseline
  bool failed = false;
  std::string error;
};

struct ReflectionEvalResult {
  double baseline_score = 0.0;
  double reflection_score = 0.0;
  double delta = 0.0;
  int n_failed = 0;
  std::vector<ReflectionPromptOutcome> per_prompt;
};

// Generates under the bare and reflection-scaffolded conditions with matched
// seeds and scores both.
ReflectionEvalResult reflection_eval(const ModelParams& model,
                                     std::span<const PromptRecord> harmful_prompts,
                                     const Scorer& scorer, const GenerationConfig& gen);

// Deterministic greedy transcript of the self-description scaffold, decoded
// to token names (toy vocabulary is not natural language).
std::string global_self_description_transcript(const ModelParams& model);

}  // namespace refgeo
