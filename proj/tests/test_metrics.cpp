#include <algorithm>

#include "doctest.h"
#include "support.hpp"
#include "xlkd/errors.hpp"
#include "xlkd/metrics.hpp"

using namespace xlkd;

namespace {

AnswerVocabulary abc() {
  const std::vector<std::string> a{"a", "b", "c"};
  return build_answer_vocab(a, 3);
}

std::vector<std::string> annotations(std::initializer_list<std::pair<const char*, int>> counts) {
  std::vector<std::string> out;
  for (const auto& [a, n] : counts) out.insert(out.end(), static_cast<std::size_t>(n), a);
  return out;
}

}  // namespace

TEST_CASE("exact accuracy") {
  const auto v = abc();
  const std::vector<int> p{0, 1, 2, 0};
  CHECK(accuracy_exact(p, std::vector<std::string>{"a", "b", "c", "a"}, v) == 1.0);
  CHECK(accuracy_exact(p, std::vector<std::string>{"a", "b", "c", "b"}, v) == 0.75);
  CHECK(accuracy_exact(p, std::vector<std::string>{"a", "b", "c", "zz"}, v) == 0.75);
  CHECK_THROWS_AS(accuracy_exact(p, std::vector<std::string>{"a"}, v), ContractError);
  CHECK_THROWS_AS(accuracy_exact(std::vector<int>{5}, std::vector<std::string>{"a"}, v), ContractError);
}

TEST_CASE("merged classes accept every member") {
  const auto m = merge_by_translation(abc(), {{"a", "x"}, {"b", "x"}, {"c", "y"}});
  CHECK(accuracy_exact(std::vector<int>{0, 0}, std::vector<std::string>{"a", "b"}, m) == 1.0);
}

TEST_CASE("VQA soft scores are min(matches / 3, 1)") {
  const auto v = abc();
  const std::vector<std::vector<std::string>> ann{annotations({{"b", 10}}), annotations({{"a", 1}, {"b", 9}}),
                                                  annotations({{"a", 2}, {"c", 8}}), annotations({{"a", 3}, {"b", 7}}),
                                                  annotations({{"a", 7}, {"c", 3}})};
  const std::vector<int> p{0, 0, 0, 0, 0};
  const auto s = vqa_soft_scores(p, ann, v);
  REQUIRE(s.size() == 5);
  CHECK(s[0] == 0.0);
  CHECK(s[1] == 1.0 / 3.0);
  CHECK(s[2] == 2.0 / 3.0);
  CHECK(s[3] == 1.0);
  CHECK(s[4] == 1.0);
  CHECK(accuracy_vqa_soft(p, ann, v) == doctest::Approx((0 + 1.0 / 3 + 2.0 / 3 + 1 + 1) / 5).epsilon(1e-15));
  const std::vector<std::vector<std::string>> nine{annotations({{"a", 9}})};
  CHECK_THROWS_AS(vqa_soft_scores(std::vector<int>{0}, nine, v), ContractError);
}

TEST_CASE("BLEU: identical, disjoint, and a hand-counted two-sentence corpus") {
  const std::vector<std::string> refs{"the cat is on the mat", "a big dog"};
  CHECK(bleu(refs, refs) == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(bleu(std::vector<std::string>{"x y z w"}, std::vector<std::string>{"a b c d"}) < 1e-6);

  const std::vector<std::string> preds{"the cat is on the red mat", "a dog"};
  const auto st = bleu_stats(preds, refs, {});
  CHECK(st.matches[0] == 8);
  CHECK(st.totals[0] == 9);
  CHECK(st.matches[1] == 4);
  CHECK(st.totals[1] == 7);
  CHECK(st.matches[2] == 3);
  CHECK(st.totals[2] == 5);
  CHECK(st.matches[3] == 2);
  CHECK(st.totals[3] == 4);
  CHECK(st.candidate_length == 9);
  CHECK(st.reference_length == 9);
  // 100 * (8/9 * 4/7 * 3/5 * 2/4)^(1/4), brevity penalty 1.
  CHECK(std::abs(bleu(preds, refs) - 62.47879873840512) <= 1e-6);

  // Short candidate: orders 3 and 4 have no candidate n-grams, penalty exp(1 - 3/2).
  CHECK(std::abs(bleu(std::vector<std::string>{"the cat"}, std::vector<std::string>{"the cat sat"}) -
                 60.653065971263345) <= 1e-6);
  CHECK_THROWS_AS(bleu(std::vector<std::string>{}, std::vector<std::string>{}), ContractError);
}

TEST_CASE("BLEU is invariant to corpus order and accepts a custom splitter") {
  std::vector<std::string> p{"a b c", "d e", "f g h i"}, r{"a b d", "d e f", "f g h i j"};
  const double base = bleu(p, r);
  std::swap(p[0], p[2]);
  std::swap(r[0], r[2]);
  CHECK(bleu(p, r) == doctest::Approx(base).epsilon(1e-12));
  const WordSplitter chars = [](std::string_view s) {
    std::vector<std::string> out;
    for (char c : s) out.emplace_back(1, c);
    return out;
  };
  CHECK(bleu(std::vector<std::string>{"abc"}, std::vector<std::string>{"abc"}, chars) == doctest::Approx(100.0));
}

TEST_CASE("question types: first trigger wins and per-type means weight back to overall") {
  const auto rules = japanese_question_rules();
  CHECK(rules.front().trigger == "何");
  CHECK(rules.back().name == "other");
  const std::vector<std::string> q{"これは何ですか", "誰がいますか", "どこで何を", "いつですか", "猫", "何色"};
  const std::vector<double> s{1, 0, 1, 1, 0, 0};
  const auto b = question_type_breakdown(q, s, rules);
  CHECK(b.assignment == std::vector<std::size_t>{0, 1, 0, 6, 9, 0});
  CHECK(b.buckets[0].count == 3);
  CHECK(b.buckets[0].accuracy == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(b.buckets[1].accuracy == 0.0);
  CHECK(b.buckets[6].accuracy == 1.0);
  CHECK(b.buckets[9].count == 1);
  std::size_t total = 0;
  double weighted = 0.0;
  for (const auto& bucket : b.buckets) {
    total += bucket.count;
    weighted += bucket.accuracy * static_cast<double>(bucket.count);
  }
  CHECK(total == q.size());
  CHECK(std::abs(weighted / static_cast<double>(total) - 0.5) <= 1e-12);

  const TypeRule no_catch_all[] = {{"what", "what"}};
  const auto c = question_type_breakdown(std::vector<std::string>{"why"}, std::vector<double>{1.0}, no_catch_all);
  REQUIRE(c.buckets.size() == 2);
  CHECK(c.buckets[1].name == "other");
  CHECK(c.buckets[1].count == 1);
}

TEST_CASE("embedding export") {
  xlkd::test::TempDir dir;
  const auto v = xlkd::test::make_vocab({"what", "is", "the", "cat", "dog"});
  const auto cfg = xlkd::test::toy_config(static_cast<int>(v.size()));
  const Model m = init_model(cfg, 2);
  std::vector<ExampleRecord> recs{xlkd::test::make_record("what is the cat", {"dog"}, 2, cfg.feature_dim, 1),
                                  xlkd::test::make_record("the dog", {"cat", "dog"}, 1, cfg.feature_dim, 2),
                                  xlkd::test::make_record("cat", {}, 2, cfg.feature_dim, 3)};
  recs[0].region_labels = {"cat", "dog"};
  recs[1].region_labels = {"dog"};
  recs[2].region_labels = {"cat", "cat"};

  CHECK(export_embeddings(m, recs, v, {}, 2, dir / "empty.tsv") == 0);
  const std::string header = xlkd::test::read_file(dir / "empty.tsv");
  CHECK(header.starts_with("token\trole\tclass\th0\t"));
  CHECK(std::count(header.begin(), header.end(), '\n') == 1);

  // Three "cat" subwords in the questions and tags, three regions labelled cat.
  CHECK(export_embeddings(m, recs, v, {"cat"}, 2, dir / "cat.tsv") == 6);
  std::ifstream in(dir / "cat.tsv");
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, '\t');) f.push_back(x);
    rows.push_back(f);
  }
  REQUIRE(rows.size() == 6);
  CHECK(rows[0][0] == "cat");
  CHECK(rows[0][1] == "word");
  CHECK(rows[1][0] == "img1#0");
  CHECK(rows[1][1] == "region");
  CHECK(rows[1][2] == "cat");

  // The first row is question position 4 of record 0; values pass through unchanged.
  const auto out = forward(m, assemble_triple(recs[0], v, cfg), std::set<int>{2});
  for (int d = 0; d < cfg.hidden_size; ++d) CHECK(std::stod(rows[0][3 + d]) == out.layer(2)(4, d));
  CHECK_THROWS_AS(export_embeddings(m, recs, v, {"cat"}, 3, dir / "x.tsv"), ContractError);
}

TEST_CASE("predictions round trip and the evaluation report is consistent") {
  xlkd::test::TempDir dir;
  const std::vector<Prediction> p{{"q1", 0, "a"}, {"q2", 2, "c"}};
  write_predictions(p, dir / "p.jsonl");
  CHECK(read_predictions(dir / "p.jsonl") == p);

  SynthSpec spec;
  spec.pairs = 2;
  spec.tasks = 20;
  spec.annotations = 10;
  const auto corpus = synth_corpus(spec, 8);
  const auto answers = build_answer_vocab(answer_occurrences(corpus.task), 3);
  ModelConfig cfg = xlkd::test::toy_config(static_cast<int>(corpus.student_vocab.size()), 2,
                                           static_cast<int>(answers.size()));
  cfg.feature_dim = spec.feature_dim;
  cfg.max_image_tokens = 8;
  cfg.max_text_tokens = 48;
  const Model m = init_model(cfg, 1);
  const TypeRule rules[] = {{"first", corpus.task[0].question.substr(0, corpus.task[0].question.find(' '))}};
  const auto ev = evaluate(m, corpus.task, corpus.student_vocab, answers, rules);
  const auto& r = ev.report;
  CHECK(r.count == 20);
  CHECK(ev.predictions.size() == 20);
  REQUIRE(r.soft_accuracy.has_value());
  CHECK(r.accuracy <= r.coverage);
  CHECK(r.vocabulary_coverage == answers.coverage());
  std::size_t total = 0;
  double weighted = 0.0;
  for (const auto& b : r.per_type) {
    total += b.count;
    weighted += b.accuracy * static_cast<double>(b.count);
  }
  CHECK(total == r.count);
  CHECK(std::abs(weighted / static_cast<double>(total) - r.accuracy) <= 1e-12);
  const auto j = to_json(r);
  CHECK(j.at("count") == 20);
  CHECK(j.at("per_type").size() == r.per_type.size());
}

TEST_CASE("reference answer is the most frequent, ties to the first listed") {
  ExampleRecord r;
  r.answers = {{"b", 2}, {"a", 2}, {"c", 1}};
  CHECK(reference_answer(r) == "b");
  r.answers.push_back({"d", 5});
  CHECK(reference_answer(r) == "d");
}
