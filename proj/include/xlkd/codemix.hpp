#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xlkd/tokenize.hpp"

namespace xlkd {

struct AlignmentLink {
  std::size_t source = 0;
  std::size_t target = 0;
  friend auto operator<=>(const AlignmentLink&, const AlignmentLink&) = default;
};

// Word alignment for one sentence pair; links are sorted and unique.
struct WordAlignment {
  std::vector<AlignmentLink> links;

  void add(std::size_t source, std::size_t target);
  std::vector<std::size_t> sources_of(std::size_t target) const;
  std::vector<std::size_t> targets_of(std::size_t source) const;
  friend bool operator==(const WordAlignment&, const WordAlignment&) = default;
};

// Parses one Pharaoh line ("0-0 1-2"). Throws FormatError naming `line_no`.
WordAlignment parse_alignment(std::string_view line, std::size_t line_no = 1);
std::string format_alignment(const WordAlignment& align);
std::vector<WordAlignment> load_alignments(const std::filesystem::path& path);
void dump_alignments(std::span<const WordAlignment> aligns, const std::filesystem::path& path);

struct SentencePair {
  std::vector<std::string> source_words;  // English
  std::vector<std::string> target_words;
};

SentencePair make_sentence_pair(std::string_view source, std::string_view target);

// Throws ContractError when a link points past either sentence.
void check_alignment(const WordAlignment& align, const SentencePair& pair);

/// Target word indices that may be swapped for their English counterpart:
/// the word is linked one-to-one with a source word, and that source word
/// segments to the same known subword sequence under both vocabularies.
std::vector<std::size_t> eligible_words(const SentencePair& pair, const WordAlignment& align,
                                        const SubwordVocab& student_vocab, const SubwordVocab& teacher_vocab);

enum class MixDenominator { AllWords, EligibleWords };
enum class MixSampling { ExactCount, Bernoulli };

struct CodeMixOptions {
  double ratio = 0.15;
  MixDenominator denominator = MixDenominator::AllWords;
  MixSampling sampling = MixSampling::ExactCount;
};

struct Replacement {
  std::size_t target_word = 0;
  std::size_t source_word = 0;
  friend bool operator==(const Replacement&, const Replacement&) = default;
};

struct CodeMixedSentence {
  std::vector<std::string> words;
  std::vector<Replacement> replaced;  // ascending by target_word
  std::size_t origin = 0;             // index of the parallel pair

  std::string text() const;
  friend bool operator==(const CodeMixedSentence&, const CodeMixedSentence&) = default;
};

// Number of words to replace before capping by the eligible count.
std::size_t requested_replacements(std::size_t target_words, std::size_t eligible, const CodeMixOptions& opts);

CodeMixedSentence code_mix(const SentencePair& pair, const WordAlignment& align,
                           std::span<const std::size_t> eligible, const CodeMixOptions& opts,
                           std::uint64_t seed, std::size_t origin = 0);

CodeMixedSentence code_mix(const SentencePair& pair, const WordAlignment& align,
                           const SubwordVocab& student_vocab, const SubwordVocab& teacher_vocab,
                           const CodeMixOptions& opts, std::uint64_t seed, std::size_t origin = 0);

// Sentence i uses seed `base_seed + i`.
std::vector<CodeMixedSentence> code_mix_corpus(std::span<const SentencePair> pairs,
                                               std::span<const WordAlignment> aligns,
                                               const SubwordVocab& student_vocab,
                                               const SubwordVocab& teacher_vocab, const CodeMixOptions& opts,
                                               std::uint64_t base_seed);

}  // namespace xlkd
