#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "refgeo/directions.hpp"
#include "refgeo/model.hpp"

namespace refgeo {

// Toy vocabulary layout (64 symbols). Token 0 is the shared end-of-sequence
// token; the rest are role markers, option labels, and generic content.
namespace tok {
constexpr int END = kEndToken;     // 0
constexpr int REFUSE = 1;          // refusal marker
constexpr int COMPLY = 2;          // compliance marker
constexpr int BENIGN = 3;          // benign-prompt marker
constexpr int CAT_BASE = 4;        // category markers occupy [4, 20)
constexpr int N_CATEGORIES = 16;
constexpr int LABEL_BASE = 20;     // option labels A..J occupy [20, 30)
constexpr int N_LABELS = 10;
constexpr int AUDIT_POLICY = 30;   // probe question markers
constexpr int AUDIT_REFUSAL = 31;
constexpr int AUDIT_HARM = 32;
constexpr int REFLECT = 33;        // safety-reflection scaffold marker
constexpr int DESCRIBE = 34;       // self-description scaffold marker
constexpr int ANSWER = 35;         // answer-position marker
constexpr int CONTENT_BASE = 36;   // generic content tokens [36, 64)
constexpr int MIN_VOCAB = 64;

inline int category_token(int category) { return CAT_BASE + category; }
inline int label_token(int index) { return LABEL_BASE + index; }
std::string token_name(int token);
}  // namespace tok

struct SFTPair {
  std::string id;
  TokenSequence prompt;
  std::vector<int> target;  // response tokens, END-terminated

  // prompt followed by target, role_boundary at the prompt length
  TokenSequence full_sequence() const;
  std::vector<int> target_positions() const;
};

struct ToyCorpusSizes {
  int harmful_train = 64;
  int harmful_eval_per_category = 4;   // 16 categories
  int benign_train = 64;
  int benign_eval = 64;
  int category_slices = 6;             // categories with dedicated RLVR sets
  int category_slice_size = 8;
  int prompt_content_len = 5;
  int comply_len = 5;                  // COMPLY tokens per compliant target
  // benign prompts repeated in the safety phase; keeping this small leaves
  // compliance owned by the helpful phase and refusal a one-sided override
  int safety_benign_keep = 64;
};

struct ToyCorpus {
  std::vector<PromptRecord> harmful_train;
  std::vector<PromptRecord> harmful_eval;
  std::vector<PromptRecord> benign_train;
  std::vector<PromptRecord> benign_eval;
  std::map<std::string, std::vector<PromptRecord>> category_train;  // "cat00"...
  std::vector<SFTPair> sft_pairs;          // harmful prompt -> compliant response
  std::vector<SFTPair> align_helpful;      // phase 1: everything -> comply
  std::vector<SFTPair> align_safety;       // phase 2: refusal + audit behavior
};

// Deterministic synthetic corpus over the toy vocabulary. Same seed,
// bitwise-identical files.
ToyCorpus make_toy_corpus(uint64_t seed, const ToyCorpusSizes& sizes);
void write_toy_corpus(const ToyCorpus& corpus, const std::string& dir);
ToyCorpus load_toy_corpus(const std::string& dir);

struct IngestResult {
  std::vector<PromptRecord> records;
  int duplicates_dropped = 0;
  std::vector<std::string> warnings;
};

// JSONL {id, tokens or text, label, category}; duplicate ids are an error,
// duplicate bodies are deduplicated with a count.
IngestResult ingest_prompts(const std::string& path);

void write_prompts_jsonl(std::span<const PromptRecord> records, const std::string& path);
void write_sft_pairs_jsonl(std::span<const SFTPair> pairs, const std::string& path);
std::vector<SFTPair> load_sft_pairs(const std::string& path);

std::string decode_tokens(std::span<const int> tokens);

}  // namespace refgeo
