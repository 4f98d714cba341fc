#include "refgeo/corpus.hpp"

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

#include "refgeo/errors.hpp"
#include "refgeo/io_util.hpp"
#include "refgeo/rng.hpp"

namespace refgeo {

namespace tok {

std::string token_name(int token) {
  if (token == END) return "<end>";
  if (token == REFUSE) return "<refuse>";
  if (token == COMPLY) return "<comply>";
  if (token == BENIGN) return "<benign>";
  if (token >= CAT_BASE && token < CAT_BASE + N_CATEGORIES) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "<cat%02d>", token - CAT_BASE);
    return buf;
  }
  if (token >= LABEL_BASE && token < LABEL_BASE + N_LABELS)
    return std::string(1, static_cast<char>('A' + (token - LABEL_BASE)));
  if (token == AUDIT_POLICY) return "<audit_policy>";
  if (token == AUDIT_REFUSAL) return "<audit_refusal>";
  if (token == AUDIT_HARM) return "<audit_harm>";
  if (token == REFLECT) return "<reflect>";
  if (token == DESCRIBE) return "<describe>";
  if (token == ANSWER) return "<answer>";
  return "w" + std::to_string(token);
}

}  // namespace tok

TokenSequence SFTPair::full_sequence() const {
  TokenSequence seq;
  seq.tokens = prompt.tokens;
  seq.tokens.insert(seq.tokens.end(), target.begin(), target.end());
  seq.role_boundary = prompt.length();
  return seq;
}

std::vector<int> SFTPair::target_positions() const {
  std::vector<int> out;
  for (size_t i = 0; i < target.size(); ++i)
    out.push_back(prompt.length() + static_cast<int>(i));
  return out;
}

std::string decode_tokens(std::span<const int> tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += " ";
    out += tok::token_name(tokens[i]);
  }
  return out;
}

namespace {

std::string category_name(int c) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "cat%02d", c);
  return buf;
}

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s = "0" + s;
  return s;
}

std::vector<int> comply_target(int comply_len) {
  std::vector<int> t(static_cast<size_t>(comply_len), tok::COMPLY);
  t.push_back(tok::END);
  return t;
}

}  // namespace

ToyCorpus make_toy_corpus(uint64_t seed, const ToyCorpusSizes& sizes) {
  if (sizes.harmful_train < 1 || sizes.harmful_eval_per_category < 1 ||
      sizes.benign_train < 1 || sizes.benign_eval < 1 || sizes.category_slices < 1 ||
      sizes.category_slice_size < 1 || sizes.prompt_content_len < 1 || sizes.comply_len < 1)
    fail(ErrorKind::domain, "corpus sizes must be positive");
  if (sizes.category_slices > tok::N_CATEGORIES)
    fail(ErrorKind::domain, "more category slices than categories");

  CounterRng rng(seed, "corpus");
  std::set<std::vector<int>> seen;

  // Harmful prompts open with a category marker; benign prompts are plain
  // content of matched length, so compliance stays the unmarked default and
  // refusal is the only marker-triggered behavior.
  auto fresh_prompt = [&](int marker) {
    for (;;) {
      std::vector<int> body;
      int content_len = sizes.prompt_content_len + (marker < 0 ? 1 : 0);
      if (marker >= 0) body.push_back(marker);
      for (int i = 0; i < content_len; ++i)
        body.push_back(tok::CONTENT_BASE +
                       static_cast<int>(rng.uniform_u64(tok::MIN_VOCAB - tok::CONTENT_BASE)));
      if (seen.insert(body).second) return body;
    }
  };
  auto record = [&](std::string id, std::vector<int> body, PromptLabel label,
                    std::string category) {
    PromptRecord pr;
    pr.id = std::move(id);
    pr.tokens.tokens = std::move(body);
    pr.tokens.role_boundary = pr.tokens.length();
    pr.label = label;
    pr.category = std::move(category);
    return pr;
  };

  ToyCorpus corpus;
  for (int i = 0; i < sizes.harmful_train; ++i) {
    int c = i % tok::N_CATEGORIES;
    corpus.harmful_train.push_back(record("h" + zero_pad(i, 4),
                                          fresh_prompt(tok::category_token(c)),
                                          PromptLabel::harmful, category_name(c)));
  }
  for (int c = 0; c < tok::N_CATEGORIES; ++c) {
    for (int i = 0; i < sizes.harmful_eval_per_category; ++i) {
      int idx = c * sizes.harmful_eval_per_category + i;
      corpus.harmful_eval.push_back(record("he" + zero_pad(idx, 4),
                                           fresh_prompt(tok::category_token(c)),
                                           PromptLabel::harmful, category_name(c)));
    }
  }
  for (int i = 0; i < sizes.benign_train; ++i)
    corpus.benign_train.push_back(
        record("b" + zero_pad(i, 4), fresh_prompt(-1), PromptLabel::benign, ""));
  for (int i = 0; i < sizes.benign_eval; ++i)
    corpus.benign_eval.push_back(
        record("be" + zero_pad(i, 4), fresh_prompt(-1), PromptLabel::benign, ""));
  for (int c = 0; c < sizes.category_slices; ++c) {
    std::vector<PromptRecord> slice;
    for (int i = 0; i < sizes.category_slice_size; ++i)
      slice.push_back(record("hc" + zero_pad(c, 2) + "_" + zero_pad(i, 2),
                             fresh_prompt(tok::category_token(c)), PromptLabel::harmful,
                             category_name(c)));
    corpus.category_train[category_name(c)] = std::move(slice);
  }

  // Jailbreak imitation targets: compliance-token responses.
  for (size_t i = 0; i < corpus.harmful_train.size(); ++i) {
    SFTPair pair;
    pair.id = "sft_" + zero_pad(static_cast<int>(i), 4);
    pair.prompt = corpus.harmful_train[i].tokens;
    pair.target = comply_target(sizes.comply_len);
    corpus.sft_pairs.push_back(pair);
  }

  auto audit_pairs = [&](const PromptRecord& pr, int label_index, std::string id_prefix,
                         std::vector<SFTPair>& out) {
    const int questions[3] = {tok::AUDIT_POLICY, tok::AUDIT_REFUSAL, tok::AUDIT_HARM};
    for (int q = 0; q < 3; ++q) {
      SFTPair pair;
      pair.id = id_prefix + "_q" + std::to_string(q) + "_" + pr.id;
      pair.prompt.tokens.push_back(questions[q]);
      pair.prompt.tokens.insert(pair.prompt.tokens.end(), pr.tokens.tokens.begin(),
                                pr.tokens.tokens.end());
      pair.prompt.tokens.push_back(tok::ANSWER);
      pair.prompt.role_boundary = pair.prompt.length();
      pair.target = {tok::label_token(label_index), tok::END};
      out.push_back(pair);
    }
  };

  auto reflect_prompt = [](const PromptRecord& pr) {
    TokenSequence seq;
    seq.tokens.push_back(tok::REFLECT);
    seq.tokens.insert(seq.tokens.end(), pr.tokens.tokens.begin(), pr.tokens.tokens.end());
    seq.role_boundary = seq.length();
    return seq;
  };

  // Phase 1: a helpful-only model. Every prompt gets a compliant response;
  // audit answers are treated as capability knowledge and trained here too.
  for (const auto& pr : corpus.harmful_train) {
    SFTPair pair;
    pair.id = "help_" + pr.id;
    pair.prompt = pr.tokens;
    pair.target = comply_target(sizes.comply_len);
    corpus.align_helpful.push_back(pair);
    audit_pairs(pr, tok::N_LABELS - 1, "help_audit", corpus.align_helpful);
  }
  for (const auto& pr : corpus.benign_train) {
    SFTPair pair;
    pair.id = "help_" + pr.id;
    pair.prompt = pr.tokens;
    pair.target = comply_target(sizes.comply_len);
    corpus.align_helpful.push_back(pair);
    audit_pairs(pr, 0, "help_audit", corpus.align_helpful);
  }

  // Phase 2: safety behavior. Refuse harmful prompts (bare and under the
  // reflection scaffold), keep answering benign ones, keep audit answers.
  for (const auto& pr : corpus.harmful_train) {
    SFTPair refuse;
    refuse.id = "safe_" + pr.id;
    refuse.prompt = pr.tokens;
    refuse.target = {tok::REFUSE, tok::END};
    corpus.align_safety.push_back(refuse);

    // reflect-conditioned refusal is oversampled so the scaffolded pathway
    // keeps a margin that outlives later policy drift on bare prompts
    for (int copy = 0; copy < 3; ++copy) {
      SFTPair refl = refuse;
      refl.id = "safe_reflect" + std::to_string(copy) + "_" + pr.id;
      refl.prompt = reflect_prompt(pr);
      corpus.align_safety.push_back(refl);
    }

    audit_pairs(pr, tok::N_LABELS - 1, "safe_audit", corpus.align_safety);
  }
  for (size_t i = 0; i < corpus.benign_train.size(); ++i) {
    const auto& pr = corpus.benign_train[i];
    if (static_cast<int>(i) < sizes.safety_benign_keep) {
      SFTPair comply;
      comply.id = "safe_" + pr.id;
      comply.prompt = pr.tokens;
      comply.target = comply_target(sizes.comply_len);
      corpus.align_safety.push_back(comply);

      SFTPair refl = comply;
      refl.id = "safe_reflect_" + pr.id;
      refl.prompt = reflect_prompt(pr);
      corpus.align_safety.push_back(refl);
    }
    audit_pairs(pr, 0, "safe_audit", corpus.align_safety);
  }
  return corpus;
}

namespace {

nlohmann::json prompt_to_json(const PromptRecord& pr) {
  nlohmann::json j;
  j["id"] = pr.id;
  j["tokens"] = pr.tokens.tokens;
  if (!pr.text.empty()) j["text"] = pr.text;
  j["label"] = pr.label == PromptLabel::harmful ? "harmful" : "benign";
  j["category"] = pr.category;
  return j;
}

std::string jsonl_of_prompts(std::span<const PromptRecord> records) {
  std::string out;
  for (const auto& pr : records) out += prompt_to_json(pr).dump() + "\n";
  return out;
}

}  // namespace

void write_prompts_jsonl(std::span<const PromptRecord> records, const std::string& path) {
  write_text_file_atomic(path, jsonl_of_prompts(records));
}

void write_sft_pairs_jsonl(std::span<const SFTPair> pairs, const std::string& path) {
  std::string out;
  for (const auto& pair : pairs) {
    nlohmann::json j;
    j["id"] = pair.id;
    j["prompt"] = pair.prompt.tokens;
    j["target"] = pair.target;
    out += j.dump() + "\n";
  }
  write_text_file_atomic(path, out);
}

std::vector<SFTPair> load_sft_pairs(const std::string& path) {
  std::vector<SFTPair> pairs;
  std::vector<std::string> lines = read_lines(path);
  for (size_t ln = 0; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    nlohmann::json j = nlohmann::json::parse(lines[ln], nullptr, false);
    if (j.is_discarded())
      fail(ErrorKind::format, path + ":" + std::to_string(ln + 1) + ": malformed JSON");
    SFTPair pair;
    try {
      pair.id = j.at("id").get<std::string>();
      pair.prompt.tokens = j.at("prompt").get<std::vector<int>>();
      pair.prompt.role_boundary = pair.prompt.length();
      pair.target = j.at("target").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format,
           path + ":" + std::to_string(ln + 1) + ": " + e.what());
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

void write_toy_corpus(const ToyCorpus& corpus, const std::string& dir) {
  ensure_dir(dir);
  write_prompts_jsonl(corpus.harmful_train, dir + "/harmful_train.jsonl");
  write_prompts_jsonl(corpus.harmful_eval, dir + "/harmful_eval.jsonl");
  write_prompts_jsonl(corpus.benign_train, dir + "/benign_train.jsonl");
  write_prompts_jsonl(corpus.benign_eval, dir + "/benign_eval.jsonl");
  for (const auto& [cat, slice] : corpus.category_train)
    write_prompts_jsonl(slice, dir + "/category_" + cat + ".jsonl");
  write_sft_pairs_jsonl(corpus.sft_pairs, dir + "/sft_pairs.jsonl");
  write_sft_pairs_jsonl(corpus.align_helpful, dir + "/align_helpful.jsonl");
  write_sft_pairs_jsonl(corpus.align_safety, dir + "/align_safety.jsonl");
}

ToyCorpus load_toy_corpus(const std::string& dir) {
  ToyCorpus corpus;
  corpus.harmful_train = ingest_prompts(dir + "/harmful_train.jsonl").records;
  corpus.harmful_eval = ingest_prompts(dir + "/harmful_eval.jsonl").records;
  corpus.benign_train = ingest_prompts(dir + "/benign_train.jsonl").records;
  corpus.benign_eval = ingest_prompts(dir + "/benign_eval.jsonl").records;
  for (int c = 0; c < tok::N_CATEGORIES; ++c) {
    std::string path = dir + "/category_" + category_name(c) + ".jsonl";
    if (!file_exists(path)) continue;
    corpus.category_train[category_name(c)] = ingest_prompts(path).records;
  }
  corpus.sft_pairs = load_sft_pairs(dir + "/sft_pairs.jsonl");
  corpus.align_helpful = load_sft_pairs(dir + "/align_helpful.jsonl");
  corpus.align_safety = load_sft_pairs(dir + "/align_safety.jsonl");
  return corpus;
}

IngestResult ingest_prompts(const std::string& path) {
  IngestResult out;
  std::vector<std::string> lines = read_lines(path);
  std::set<std::string> ids;
  std::set<std::string> bodies;
  for (size_t ln = 0; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    nlohmann::json j = nlohmann::json::parse(lines[ln], nullptr, false);
    if (j.is_discarded())
      fail(ErrorKind::format, path + ":" + std::to_string(ln + 1) + ": malformed JSON line");
    PromptRecord pr;
    try {
      pr.id = j.at("id").get<std::string>();
      std::string label = j.at("label").get<std::string>();
      if (label == "harmful")
        pr.label = PromptLabel::harmful;
      else if (label == "benign")
        pr.label = PromptLabel::benign;
      else
        fail(ErrorKind::format,
             path + ":" + std::to_string(ln + 1) + ": label must be harmful or benign");
      if (j.contains("tokens")) {
        pr.tokens.tokens = j.at("tokens").get<std::vector<int>>();
        pr.tokens.role_boundary = pr.tokens.length();
      }
      if (j.contains("text")) pr.text = j.at("text").get<std::string>();
      if (j.contains("category")) pr.category = j.at("category").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format, path + ":" + std::to_string(ln + 1) + ": " + e.what());
    }
    if (pr.tokens.tokens.empty() && pr.text.empty())
      fail(ErrorKind::format,
           path + ":" + std::to_string(ln + 1) + ": record needs tokens or text");
    if (!ids.insert(pr.id).second)
      fail(ErrorKind::format,
           path + ":" + std::to_string(ln + 1) + ": duplicate id " + pr.id);
    std::string body = pr.tokens.tokens.empty()
                           ? pr.text
                           : nlohmann::json(pr.tokens.tokens).dump();
    if (!bodies.insert(body).second) {
      ++out.duplicates_dropped;
      continue;
    }
    out.records.push_back(std::move(pr));
  }
  if (out.records.empty())
    out.warnings.push_back("no records ingested from " + path);
  return out;
}

}  // namespace refgeo
