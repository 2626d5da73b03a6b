#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace xlkd {

inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kSepToken = "[SEP]";
inline constexpr std::string_view kContinuationPrefix = "##";

using TokenId = std::int32_t;

/// Dense subword vocabulary. Ids follow file order; the four special tokens
/// must each appear exactly once.
class SubwordVocab {
 public:
  SubwordVocab() = default;
  explicit SubwordVocab(std::vector<std::string> entries);

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>& entries() const { return entries_; }
  const std::string& token(TokenId id) const;

  bool contains(std::string_view s) const;
  // Returns the unknown id for absent strings.
  TokenId id_of(std::string_view s) const;

  TokenId pad_id() const { return pad_; }
  TokenId unk_id() const { return unk_; }
  TokenId cls_id() const { return cls_; }
  TokenId sep_id() const { return sep_; }

 private:
  std::vector<std::string> entries_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId pad_ = 0, unk_ = 0, cls_ = 0, sep_ = 0;
};

SubwordVocab load_vocab(const std::filesystem::path& path);
void dump_vocab(const SubwordVocab& vocab, const std::filesystem::path& path);

struct Subword {
  std::string text;
  TokenId id = 0;
  friend bool operator==(const Subword&, const Subword&) = default;
};

// Inclusive subword range belonging to one source word.
struct WordSpan {
  std::size_t word = 0;
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t length() const { return last - first + 1; }
  friend bool operator==(const WordSpan&, const WordSpan&) = default;
};

struct TokenizedText {
  std::vector<Subword> subwords;
  std::vector<WordSpan> word_spans;
  std::vector<std::string> source_words;

  std::size_t size() const { return subwords.size(); }
  std::vector<std::string> strings_of_word(std::size_t word) const;
  friend bool operator==(const TokenizedText&, const TokenizedText&) = default;
};

// Lowercases ASCII letters; other bytes pass through.
std::string lowercase(std::string_view text);
std::vector<std::string> split_words(std::string_view text);

/// Greedy longest-match segmentation of one word. A word with no complete
/// segmentation becomes a single unknown subword.
std::vector<Subword> segment_word(std::string_view word, const SubwordVocab& vocab);

TokenizedText tokenize(std::string_view text, const SubwordVocab& vocab);

// Treats each entry (e.g. an object tag) as one span, even when it
// contains several whitespace-separated words.
TokenizedText tokenize_units(std::span<const std::string> units, const SubwordVocab& vocab);
TokenizedText concat_units(std::span<const TokenizedText> parts);

// Removes subwords past `keep`, trimming or dropping the affected spans.
TokenizedText truncate(const TokenizedText& text, std::size_t keep);

/// Binary token-level matrix; rows index student subwords, columns teacher.
class AlignmentMatrix {
 public:
  AlignmentMatrix() = default;
  AlignmentMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), cells_(rows * cols, 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::uint8_t at(std::size_t i, std::size_t j) const { return cells_[i * cols_ + j]; }
  void set(std::size_t i, std::size_t j, bool on) { cells_[i * cols_ + j] = on ? 1 : 0; }
  std::size_t count() const;
  AlignmentMatrix transposed() const;

  friend bool operator==(const AlignmentMatrix&, const AlignmentMatrix&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<std::uint8_t> cells_;
};

// (student word index, teacher word index) eligible to be matched.
struct SpanPair {
  std::size_t student_word = 0;
  std::size_t teacher_word = 0;
};

/// Entry (i, j) is 1 iff both subwords lie in a candidate span pair, have the
/// same string, and occupy the same ordinal position inside their spans.
AlignmentMatrix match_matrix(const TokenizedText& student, const TokenizedText& teacher,
                             std::span<const SpanPair> scope);

// Scope pairing span k with span k, for object tags.
std::vector<SpanPair> same_index_scope(std::size_t student_spans, std::size_t teacher_spans);

}  // namespace xlkd
