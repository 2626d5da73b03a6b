#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace xlkd {

struct AnswerCount {
  std::string answer;
  int count = 1;
  friend bool operator==(const AnswerCount&, const AnswerCount&) = default;
};

class AnswerVocabulary {
 public:
  AnswerVocabulary() = default;

  std::size_t size() const { return classes_.size(); }
  const std::vector<std::string>& classes() const { return classes_; }
  const std::set<std::string>& members(std::size_t cls) const { return members_.at(cls); }
  std::size_t frequency(std::size_t cls) const { return frequency_.at(cls); }
  // -1 when the surface form is not a member of any class.
  int class_of(const std::string& answer) const;
  double coverage() const { return coverage_; }

  // Classes must be distinct and members may belong to one class only.
  void add_class(std::string canonical, std::set<std::string> members, std::size_t frequency);
  void set_coverage(double c) { coverage_ = c; }

 private:
  std::vector<std::string> classes_;
  std::vector<std::set<std::string>> members_;
  std::vector<std::size_t> frequency_;
  std::unordered_map<std::string, int> index_;
  double coverage_ = 0.0;
};

/// Top-k answers by frequency with lexicographic tie-breaks; coverage is
/// measured against `answers`.
AnswerVocabulary build_answer_vocab(std::span<const std::string> answers, std::size_t k);

/// Classes whose translations coincide collapse into one class named by
/// the translation. Order follows the first (highest-ranked) member class.
AnswerVocabulary merge_by_translation(const AnswerVocabulary& vocab,
                                      const std::map<std::string, std::string>& translations);

double coverage(std::span<const std::string> answers, const AnswerVocabulary& vocab);

enum class TargetMode { Single, Soft };

struct EncodedTarget {
  Eigen::RowVectorXd scores;
  int label = -1;  // single mode; -1 when uncovered
  bool covered = false;
};

// Single: one-hot (all zero if uncovered). Soft: min(count / 3, 1) per class,
// summing counts of every surface form merged into the class.
EncodedTarget encode_targets(std::span<const AnswerCount> answers, const AnswerVocabulary& vocab, TargetMode mode);

// TSV: a "#coverage" line, then rows of class_id, canonical, member..., frequency.
void save_answer_vocab(const AnswerVocabulary& vocab, const std::filesystem::path& path);
AnswerVocabulary load_answer_vocab(const std::filesystem::path& path);

// Two-column TSV: english answer, translation.
std::map<std::string, std::string> load_translations(const std::filesystem::path& path);

}  // namespace xlkd
