#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "xlkd/answers.hpp"
#include "xlkd/codemix.hpp"
#include "xlkd/distill.hpp"
#include "xlkd/model.hpp"
#include "xlkd/tokenize.hpp"

namespace xlkd {

struct ExampleRecord {
  std::string question_id;
  std::string image_id;
  std::string question;
  std::string lang;
  std::vector<AnswerCount> answers;
  std::vector<std::string> tags;
  Matrix features;                         // regions x feature_dim; empty when referenced
  std::string feature_ref;                 // image id in a FeatureStore
  std::vector<std::string> region_labels;  // optional object class per region

  friend bool operator==(const ExampleRecord&, const ExampleRecord&) = default;
};

struct ParallelRecord {
  ExampleRecord source;  // English
  ExampleRecord target;
  WordAlignment alignment;

  SentencePair sentences() const { return make_sentence_pair(source.question, target.question); }
  friend bool operator==(const ParallelRecord&, const ParallelRecord&) = default;
};

/// Region features keyed by image id: a raw little-endian float64 blob and a
/// text index with one "image_id offset rows cols" line per image.
class FeatureStore {
 public:
  void put(const std::string& image_id, Matrix features);
  bool contains(const std::string& image_id) const { return entries_.contains(image_id); }
  const Matrix& get(const std::string& image_id) const;
  std::size_t size() const { return entries_.size(); }

  void save(const std::filesystem::path& index_path, const std::filesystem::path& blob_path) const;
  static FeatureStore load(const std::filesystem::path& index_path);

 private:
  std::map<std::string, Matrix> entries_;
};

enum class Schema { Task, Parallel };

struct LoadIssue {
  std::size_t line = 0;
  std::string message;
};

struct LoadOptions {
  Schema schema = Schema::Task;
  bool strict = true;
  bool require_answers = false;
  const FeatureStore* features = nullptr;  // resolves feature_ref
};

struct LoadedDataset {
  std::vector<ExampleRecord> task;
  std::vector<ParallelRecord> parallel;
  std::vector<LoadIssue> issues;
};

// Throws FormatError listing line numbers when strict and any line is bad.
LoadedDataset load_dataset(const std::filesystem::path& path, const LoadOptions& opts);

nlohmann::json record_to_json(const ExampleRecord& r);
ExampleRecord record_from_json(const nlohmann::json& j, const LoadOptions& opts);
nlohmann::json parallel_to_json(const ParallelRecord& r);
ParallelRecord parallel_from_json(const nlohmann::json& j, const LoadOptions& opts);

void dump_task_dataset(std::span<const ExampleRecord> records, const std::filesystem::path& path);
void dump_parallel_dataset(std::span<const ParallelRecord> records, const std::filesystem::path& path);

// Throws ContractError if the record cannot feed a model.
void validate_record(const ExampleRecord& r, bool require_answers);

/// [CLS] question [SEP] tags [SEP] within max_text_tokens: trailing tag
/// subwords go first, then trailing question subwords. Regions keep the
/// first max_image_tokens rows.
WordTagImageTriple assemble_triple(const ExampleRecord& record, const SubwordVocab& vocab, const ModelConfig& config);
WordTagImageTriple assemble_triple(const ExampleRecord& record, std::string_view question_override,
                                   const SubwordVocab& vocab, const ModelConfig& config);

struct ItemBuildOptions {
  bool two_pass = false;
};

DistillationBatchItem make_distillation_item(const ParallelRecord& record, const CodeMixedSentence& mixed,
                                             const SubwordVocab& teacher_vocab, const ModelConfig& teacher_config,
                                             const SubwordVocab& student_vocab, const ModelConfig& student_config,
                                             const ItemBuildOptions& opts = {});

struct TaskExample {
  WordTagImageTriple input;
  EncodedTarget target;
  std::vector<AnswerCount> answers;
  std::string question;
};

// Uncovered records are skipped in single mode and kept with zero targets in
// soft mode.
std::vector<TaskExample> make_task_examples(std::span<const ExampleRecord> records, const SubwordVocab& vocab,
                                            const AnswerVocabulary& answers, const ModelConfig& config,
                                            TargetMode mode);

// One string per answer occurrence.
std::vector<std::string> answer_occurrences(std::span<const ExampleRecord> records);

struct SynthSpec {
  std::size_t pairs = 64;
  std::size_t tasks = 32;
  std::size_t english_words = 40;
  std::size_t object_classes = 8;
  int feature_dim = 8;
  std::size_t regions_per_image = 4;
  std::size_t tags_per_image = 2;
  std::size_t min_words = 4;
  std::size_t max_words = 8;
  double eligibility = 1.0;      // share of English words segmented alike by both vocabularies
  double unaligned_rate = 0.0;   // chance of inserting an unaligned target word
  double reorder_rate = 0.3;     // chance of swapping an adjacent target word pair
  int annotations = 1;           // answers per question (10 for VQA-style)
  double feature_noise = 0.1;
};

struct SynthCorpus {
  SubwordVocab teacher_vocab;
  SubwordVocab student_vocab;
  std::vector<ParallelRecord> parallel;
  std::vector<ExampleRecord> task;
  std::map<std::string, std::string> dictionary;           // english word -> target word
  std::map<std::string, std::string> answer_translations;  // english answer -> target answer
  std::vector<std::string> object_classes;
};

SynthCorpus synth_corpus(const SynthSpec& spec, std::uint64_t seed);

}  // namespace xlkd
