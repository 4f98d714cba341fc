#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "refgeo/corpus.hpp"
#include "refgeo/errors.hpp"
#include "refgeo/io_util.hpp"

using namespace refgeo;

namespace {

std::string tmp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace

TEST_CASE("toy corpus has the documented default shape") {
  ToyCorpus corpus = make_toy_corpus(1, ToyCorpusSizes{});
  CHECK(corpus.harmful_train.size() == 64);
  CHECK(corpus.harmful_eval.size() == 64);  // 16 categories x 4
  CHECK(corpus.benign_train.size() == 64);
  CHECK(corpus.category_train.size() == 6);
  for (const auto& [cat, slice] : corpus.category_train) CHECK(slice.size() == 8);
  CHECK(corpus.sft_pairs.size() == 64);

  // category histogram of the eval split: 4 per category
  std::map<std::string, int> hist;
  for (const auto& pr : corpus.harmful_eval) hist[pr.category]++;
  CHECK(hist.size() == 16);
  for (const auto& [cat, count] : hist) CHECK(count == 4);
}

TEST_CASE("same seed produces bitwise-identical corpus files") {
  std::string d1 = tmp_dir("refgeo_corpus_a");
  std::string d2 = tmp_dir("refgeo_corpus_b");
  write_toy_corpus(make_toy_corpus(7, ToyCorpusSizes{}), d1);
  write_toy_corpus(make_toy_corpus(7, ToyCorpusSizes{}), d2);
  for (const auto& entry : std::filesystem::directory_iterator(d1)) {
    std::string name = entry.path().filename().string();
    CHECK(read_text_file(d1 + "/" + name) == read_text_file(d2 + "/" + name));
  }
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST_CASE("harmful and benign prompts are disjoint; eval never repeats train") {
  ToyCorpus corpus = make_toy_corpus(3, ToyCorpusSizes{});
  std::set<std::vector<int>> harmful_bodies, benign_bodies;
  for (const auto& pr : corpus.harmful_train) harmful_bodies.insert(pr.tokens.tokens);
  for (const auto& pr : corpus.harmful_eval) harmful_bodies.insert(pr.tokens.tokens);
  for (const auto& pr : corpus.benign_train) benign_bodies.insert(pr.tokens.tokens);
  for (const auto& pr : corpus.benign_eval) benign_bodies.insert(pr.tokens.tokens);
  for (const auto& b : benign_bodies) CHECK(harmful_bodies.find(b) == harmful_bodies.end());

  std::set<std::vector<int>> train_bodies;
  for (const auto& pr : corpus.harmful_train) train_bodies.insert(pr.tokens.tokens);
  for (const auto& pr : corpus.harmful_eval)
    CHECK(train_bodies.find(pr.tokens.tokens) == train_bodies.end());

  std::set<std::string> ids;
  auto check_ids = [&](const std::vector<PromptRecord>& v) {
    for (const auto& pr : v) CHECK(ids.insert(pr.id).second);
  };
  check_ids(corpus.harmful_train);
  check_ids(corpus.harmful_eval);
  check_ids(corpus.benign_train);
  check_ids(corpus.benign_eval);
}

TEST_CASE("corpus round-trips through jsonl files") {
  std::string dir = tmp_dir("refgeo_corpus_rt");
  ToyCorpus corpus = make_toy_corpus(11, ToyCorpusSizes{});
  write_toy_corpus(corpus, dir);
  ToyCorpus back = load_toy_corpus(dir);
  CHECK(back.harmful_train.size() == corpus.harmful_train.size());
  for (size_t i = 0; i < corpus.harmful_train.size(); ++i) {
    CHECK(back.harmful_train[i].id == corpus.harmful_train[i].id);
    CHECK(back.harmful_train[i].tokens.tokens == corpus.harmful_train[i].tokens.tokens);
    CHECK(back.harmful_train[i].category == corpus.harmful_train[i].category);
  }
  CHECK(back.sft_pairs.size() == corpus.sft_pairs.size());
  CHECK(back.align_safety.size() == corpus.align_safety.size());
  std::filesystem::remove_all(dir);
}

TEST_CASE("ingest: empty file yields empty list plus warning") {
  std::string dir = tmp_dir("refgeo_ingest_empty");
  std::string path = dir + "/empty.jsonl";
  write_text_file_atomic(path, "");
  IngestResult res = ingest_prompts(path);
  CHECK(res.records.empty());
  CHECK(res.warnings.size() == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ingest: duplicate texts deduplicate, duplicate ids are an error") {
  std::string dir = tmp_dir("refgeo_ingest_dup");
  std::string path = dir + "/dups.jsonl";
  write_text_file_atomic(
      path,
      R"({"id":"a","text":"same body","label":"harmful","category":"c"})"
      "\n"
      R"({"id":"b","text":"same body","label":"harmful","category":"c"})"
      "\n");
  IngestResult res = ingest_prompts(path);
  CHECK(res.records.size() == 1);
  CHECK(res.records[0].id == "a");
  CHECK(res.duplicates_dropped == 1);

  write_text_file_atomic(
      path,
      R"({"id":"a","text":"one","label":"harmful"})"
      "\n"
      R"({"id":"a","text":"two","label":"harmful"})"
      "\n");
  CHECK_THROWS_AS(ingest_prompts(path), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ingest: malformed lines report the line number") {
  std::string dir = tmp_dir("refgeo_ingest_bad");
  std::string path = dir + "/bad.jsonl";
  write_text_file_atomic(path,
                         R"({"id":"a","text":"x","label":"harmful"})"
                         "\nnot json at all\n");
  bool threw = false;
  try {
    ingest_prompts(path);
  } catch (const Error& e) {
    threw = true;
    CHECK(e.kind() == ErrorKind::format);
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  CHECK(threw);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ingest: 64-record file matches an independent category recount") {
  std::string dir = tmp_dir("refgeo_ingest_count");
  ToyCorpus corpus = make_toy_corpus(5, ToyCorpusSizes{});
  std::string path = dir + "/h.jsonl";
  write_prompts_jsonl(corpus.harmful_train, path);
  IngestResult res = ingest_prompts(path);
  CHECK(res.records.size() == 64);

  // independent recount straight off the file text
  std::map<std::string, int> recount;
  for (const auto& line : read_lines(path)) {
    auto pos = line.find("\"category\":\"");
    REQUIRE(pos != std::string::npos);
    pos += 12;
    recount[line.substr(pos, line.find('"', pos) - pos)]++;
  }
  std::map<std::string, int> ingested;
  for (const auto& pr : res.records) ingested[pr.category]++;
  CHECK(recount == ingested);
  std::filesystem::remove_all(dir);
}

TEST_CASE("token names are unique over the toy vocabulary") {
  std::set<std::string> names;
  for (int t = 0; t < tok::MIN_VOCAB; ++t) CHECK(names.insert(tok::token_name(t)).second);
  CHECK(tok::token_name(tok::END) == "<end>");
  CHECK(tok::token_name(tok::label_token(0)) == "A");
  CHECK(tok::token_name(tok::label_token(9)) == "J");
}

TEST_CASE("sft pair sequences put the role boundary at the prompt end") {
  ToyCorpus corpus = make_toy_corpus(2, ToyCorpusSizes{});
  const SFTPair& pair = corpus.sft_pairs[0];
  TokenSequence seq = pair.full_sequence();
  CHECK(seq.role_boundary == pair.prompt.length());
  CHECK(seq.length() == pair.prompt.length() + static_cast<int>(pair.target.size()));
  auto positions = pair.target_positions();
  CHECK(positions.front() == pair.prompt.length());
  CHECK(positions.back() == seq.length() - 1);
}
