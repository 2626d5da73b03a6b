#include "xlkd/codemix.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "xlkd/errors.hpp"

namespace xlkd {

void WordAlignment::add(std::size_t source, std::size_t target) {
  AlignmentLink link{source, target};
  auto it = std::lower_bound(links.begin(), links.end(), link);
  if (it == links.end() || *it != link) links.insert(it, link);
}

std::vector<std::size_t> WordAlignment::sources_of(std::size_t target) const {
  std::vector<std::size_t> out;
  for (const auto& l : links)
    if (l.target == target) out.push_back(l.source);
  return out;
}

std::vector<std::size_t> WordAlignment::targets_of(std::size_t source) const {
  std::vector<std::size_t> out;
  for (const auto& l : links)
    if (l.source == source) out.push_back(l.target);
  return out;
}

WordAlignment parse_alignment(std::string_view line, std::size_t line_no) {
  WordAlignment align;
  for (const auto& tok : split_words(line)) {
    const auto dash = tok.find('-');
    auto bad = [&] { return FormatError("line " + std::to_string(line_no) + ": malformed alignment token '" + tok + "'"); };
    if (dash == std::string::npos || dash == 0 || dash + 1 == tok.size()) throw bad();
    auto digits = [](std::string_view s) {
      return std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
    };
    const std::string_view lhs(tok.data(), dash), rhs(tok.data() + dash + 1, tok.size() - dash - 1);
    if (!digits(lhs) || !digits(rhs)) throw bad();
    align.add(std::stoul(std::string(lhs)), std::stoul(std::string(rhs)));
  }
  return align;
}

std::string format_alignment(const WordAlignment& align) {
  std::string out;
  for (const auto& l : align.links) {
    if (!out.empty()) out += ' ';
    out += std::to_string(l.source) + "-" + std::to_string(l.target);
  }
  return out;
}

std::vector<WordAlignment> load_alignments(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open alignments " + path.string());
  std::vector<WordAlignment> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) out.push_back(parse_alignment(line, ++line_no));
  return out;
}

void dump_alignments(std::span<const WordAlignment> aligns, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write alignments " + path.string());
  for (const auto& a : aligns) out << format_alignment(a) << '\n';
}

SentencePair make_sentence_pair(std::string_view source, std::string_view target) {
  return {split_words(source), split_words(target)};
}

void check_alignment(const WordAlignment& align, const SentencePair& pair) {
  for (const auto& l : align.links) {
    if (l.source >= pair.source_words.size() || l.target >= pair.target_words.size()) {
      throw ContractError("alignment link " + std::to_string(l.source) + "-" + std::to_string(l.target) +
                          " exceeds sentence lengths " + std::to_string(pair.source_words.size()) + "/" +
                          std::to_string(pair.target_words.size()));
    }
  }
}

namespace {

std::vector<std::string> strings_of(const std::vector<Subword>& pieces) {
  std::vector<std::string> out;
  for (const auto& p : pieces) out.push_back(p.text);
  return out;
}

}  // namespace

std::vector<std::size_t> eligible_words(const SentencePair& pair, const WordAlignment& align,
                                        const SubwordVocab& student_vocab, const SubwordVocab& teacher_vocab) {
  check_alignment(align, pair);
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < pair.target_words.size(); ++t) {
    const auto sources = align.sources_of(t);
    if (sources.size() != 1) continue;
    if (align.targets_of(sources.front()).size() != 1) continue;
    const std::string word = lowercase(pair.source_words[sources.front()]);
    const auto s_pieces = segment_word(word, student_vocab);
    const auto t_pieces = segment_word(word, teacher_vocab);
    if (s_pieces.size() == 1 && s_pieces.front().text == kUnkToken) continue;
    if (strings_of(s_pieces) == strings_of(t_pieces)) out.push_back(t);
  }
  return out;
}

std::string CodeMixedSentence::text() const {
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

std::size_t requested_replacements(std::size_t target_words, std::size_t eligible, const CodeMixOptions& opts) {
  const std::size_t base = opts.denominator == MixDenominator::AllWords ? target_words : eligible;
  return static_cast<std::size_t>(std::llround(opts.ratio * static_cast<double>(base)));
}

CodeMixedSentence code_mix(const SentencePair& pair, const WordAlignment& align,
                           std::span<const std::size_t> eligible, const CodeMixOptions& opts,
                           std::uint64_t seed, std::size_t origin) {
  if (!(opts.ratio >= 0.0 && opts.ratio <= 1.0)) throw ContractError("code-mix ratio must lie in [0, 1]");
  CodeMixedSentence out;
  out.words = pair.target_words;
  out.origin = origin;

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  if (opts.sampling == MixSampling::ExactCount) {
    const std::size_t k = std::min(requested_replacements(pair.target_words.size(), eligible.size(), opts),
                                   eligible.size());
    std::vector<std::size_t> pool(eligible.begin(), eligible.end());
    // Partial Fisher-Yates: the first k slots are a uniform sample.
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  } else if (!eligible.empty()) {
    double p = opts.ratio;
    if (opts.denominator == MixDenominator::AllWords) {
      p = std::min(1.0, opts.ratio * static_cast<double>(pair.target_words.size()) /
                            static_cast<double>(eligible.size()));
    }
    std::bernoulli_distribution coin(p);
    for (auto idx : eligible)
      if (coin(rng)) chosen.push_back(idx);
  }
  std::sort(chosen.begin(), chosen.end());

  for (auto t : chosen) {
    const auto sources = align.sources_of(t);
    if (sources.size() != 1) throw ContractError("code_mix: target word " + std::to_string(t) + " is not one-to-one aligned");
    out.words[t] = pair.source_words[sources.front()];
    out.replaced.push_back({t, sources.front()});
  }
  return out;
}

CodeMixedSentence code_mix(const SentencePair& pair, const WordAlignment& align,
                           const SubwordVocab& student_vocab, const SubwordVocab& teacher_vocab,
                           const CodeMixOptions& opts, std::uint64_t seed, std::size_t origin) {
  const auto eligible = eligible_words(pair, align, student_vocab, teacher_vocab);
  return code_mix(pair, align, eligible, opts, seed, origin);
}

std::vector<CodeMixedSentence> code_mix_corpus(std::span<const SentencePair> pairs,
                                               std::span<const WordAlignment> aligns,
                                               const SubwordVocab& student_vocab,
                                               const SubwordVocab& teacher_vocab, const CodeMixOptions& opts,
                                               std::uint64_t base_seed) {
  if (pairs.size() != aligns.size()) {
    throw ContractError("code_mix_corpus: " + std::to_string(pairs.size()) + " sentence pairs but " +
                        std::to_string(aligns.size()) + " alignments");
  }
  std::vector<CodeMixedSentence> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    out.push_back(code_mix(pairs[i], aligns[i], student_vocab, teacher_vocab, opts, base_seed + i, i));
  }
  return out;
}

}  // namespace xlkd
