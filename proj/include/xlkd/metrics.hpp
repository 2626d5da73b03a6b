#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "xlkd/answers.hpp"
#include "xlkd/data.hpp"
#include "xlkd/model.hpp"

namespace xlkd {

// Share of items whose predicted class lists the reference among its members.
double accuracy_exact(std::span<const int> predictions, std::span<const std::string> references,
                      const AnswerVocabulary& vocab);

// min(matches / 3, 1) per item; each annotation list holds exactly 10 answers.
std::vector<double> vqa_soft_scores(std::span<const int> predictions,
                                    std::span<const std::vector<std::string>> annotations,
                                    const AnswerVocabulary& vocab);
double accuracy_vqa_soft(std::span<const int> predictions, std::span<const std::vector<std::string>> annotations,
                         const AnswerVocabulary& vocab);

using WordSplitter = std::function<std::vector<std::string>(std::string_view)>;

struct BleuStats {
  std::size_t matches[4] = {0, 0, 0, 0};
  std::size_t totals[4] = {0, 0, 0, 0};
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

inline constexpr double kBleuEpsilon = 1e-9;

BleuStats bleu_stats(std::span<const std::string> predictions, std::span<const std::string> references,
                     const WordSplitter& split);
// Orders with no candidate n-grams are left out and the remaining orders
// share the weight equally.
double bleu_from_stats(const BleuStats& stats);
// Corpus BLEU in [0, 100]; whitespace splitting when `split` is empty.
double bleu(std::span<const std::string> predictions, std::span<const std::string> references,
            const WordSplitter& split = {});

struct TypeRule {
  std::string name;
  std::string trigger;  // empty: matches everything
};

struct TypeBucket {
  std::string name;
  std::size_t count = 0;
  double accuracy = 0.0;  // 0 for an empty bucket
};

struct TypeBreakdown {
  std::vector<TypeBucket> buckets;         // rule order
  std::vector<std::size_t> assignment;     // bucket index per question
};

// First rule whose trigger occurs in the question wins. An "other" bucket is
// appended when the rules do not end with a catch-all.
TypeBreakdown question_type_breakdown(std::span<const std::string> questions, std::span<const double> scores,
                                      std::span<const TypeRule> rules);
// Question words of the Japanese evaluation, in table order.
std::vector<TypeRule> japanese_question_rules();

// Header "token\trole\tclass\th0..." then one row per matched question or tag
// subword (role word) and per region whose label is in the filter (role
// region). Returns the number of rows.
std::size_t export_embeddings(const Model& model, std::span<const ExampleRecord> records, const SubwordVocab& vocab,
                              const std::set<std::string>& filter, int layer, const std::filesystem::path& path);

struct Prediction {
  std::string question_id;
  int predicted_class = -1;
  std::string predicted_string;
  friend bool operator==(const Prediction&, const Prediction&) = default;
};

void write_predictions(std::span<const Prediction> predictions, const std::filesystem::path& path);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);

struct EvalReport {
  std::size_t count = 0;
  double accuracy = 0.0;                  // exact match against the most frequent answer
  std::optional<double> soft_accuracy;    // when every item carries 10 annotations
  std::vector<TypeBucket> per_type;
  double bleu = 0.0;
  double coverage = 0.0;                  // share of reference answers inside the vocabulary
  double vocabulary_coverage = 0.0;       // coverage recorded with the vocabulary
};

nlohmann::json to_json(const EvalReport& r);

struct Evaluation {
  EvalReport report;
  std::vector<Prediction> predictions;
};

Evaluation evaluate(const Model& model, std::span<const ExampleRecord> records, const SubwordVocab& vocab,
                    const AnswerVocabulary& answers, std::span<const TypeRule> rules);

// Most frequent answer; ties go to the first listed.
const std::string& reference_answer(const ExampleRecord& record);

}  // namespace xlkd
