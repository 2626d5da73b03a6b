#include "xlkd/tokenize.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "xlkd/errors.hpp"

namespace xlkd {

namespace {

bool is_utf8_boundary(std::string_view s, std::size_t pos) {
  return pos >= s.size() || (static_cast<unsigned char>(s[pos]) & 0xC0) != 0x80;
}

}  // namespace

SubwordVocab::SubwordVocab(std::vector<std::string> entries) : entries_(std::move(entries)) {
  index_.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto [it, inserted] = index_.emplace(entries_[i], static_cast<TokenId>(i));
    if (!inserted) {
      throw FormatError("duplicate vocabulary entry '" + entries_[i] + "' at line " + std::to_string(i + 1));
    }
  }
  auto require = [&](std::string_view s) {
    auto it = index_.find(std::string(s));
    if (it == index_.end()) throw FormatError("vocabulary is missing special token " + std::string(s));
    return it->second;
  };
  pad_ = require(kPadToken);
  unk_ = require(kUnkToken);
  cls_ = require(kClsToken);
  sep_ = require(kSepToken);
}

const std::string& SubwordVocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= entries_.size()) {
    throw ContractError("token id " + std::to_string(id) + " out of range");
  }
  return entries_[static_cast<std::size_t>(id)];
}

bool SubwordVocab::contains(std::string_view s) const { return index_.contains(std::string(s)); }

TokenId SubwordVocab::id_of(std::string_view s) const {
  auto it = index_.find(std::string(s));
  return it == index_.end() ? unk_ : it->second;
}

SubwordVocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  std::vector<std::string> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    entries.push_back(line);
  }
  return SubwordVocab(std::move(entries));
}

void dump_vocab(const SubwordVocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  for (const auto& e : vocab.entries()) out << e << '\n';
}

std::vector<std::string> TokenizedText::strings_of_word(std::size_t word) const {
  std::vector<std::string> out;
  for (const auto& span : word_spans) {
    if (span.word != word) continue;
    for (std::size_t i = span.first; i <= span.last; ++i) out.push_back(subwords[i].text);
  }
  return out;
}

std::string lowercase(std::string_view text) {
  std::string out(text);
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

std::vector<Subword> segment_word(std::string_view word, const SubwordVocab& vocab) {
  std::vector<Subword> pieces;
  std::size_t start = 0;
  while (start < word.size()) {
    std::size_t end = word.size();
    bool found = false;
    for (; end > start; --end) {
      if (!is_utf8_boundary(word, end)) continue;
      std::string candidate(word.substr(start, end - start));
      if (start > 0) candidate.insert(0, kContinuationPrefix);
      if (vocab.contains(candidate)) {
        pieces.push_back({candidate, vocab.id_of(candidate)});
        found = true;
        break;
      }
    }
    if (!found) return {{std::string(kUnkToken), vocab.unk_id()}};
    start = end;
  }
  return pieces;
}

namespace {

TokenizedText tokenize_words(const std::vector<std::string>& units, const SubwordVocab& vocab) {
  TokenizedText out;
  out.source_words = units;
  for (std::size_t w = 0; w < units.size(); ++w) {
    const std::size_t first = out.subwords.size();
    for (const auto& word : split_words(units[w])) {
      auto pieces = segment_word(word, vocab);
      out.subwords.insert(out.subwords.end(), pieces.begin(), pieces.end());
    }
    if (out.subwords.size() > first) out.word_spans.push_back({w, first, out.subwords.size() - 1});
  }
  return out;
}

}  // namespace

TokenizedText tokenize(std::string_view text, const SubwordVocab& vocab) {
  return tokenize_words(split_words(lowercase(text)), vocab);
}

TokenizedText tokenize_units(std::span<const std::string> units, const SubwordVocab& vocab) {
  std::vector<std::string> lowered;
  lowered.reserve(units.size());
  for (const auto& u : units) lowered.push_back(lowercase(u));
  return tokenize_words(lowered, vocab);
}

TokenizedText concat_units(std::span<const TokenizedText> parts) {
  TokenizedText out;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t first = out.subwords.size();
    out.subwords.insert(out.subwords.end(), parts[k].subwords.begin(), parts[k].subwords.end());
    std::string joined;
    for (const auto& w : parts[k].source_words) joined += (joined.empty() ? "" : " ") + w;
    out.source_words.push_back(joined);
    if (out.subwords.size() > first) out.word_spans.push_back({k, first, out.subwords.size() - 1});
  }
  return out;
}

TokenizedText truncate(const TokenizedText& text, std::size_t keep) {
  if (keep >= text.size()) return text;
  TokenizedText out;
  out.source_words = text.source_words;
  out.subwords.assign(text.subwords.begin(), text.subwords.begin() + static_cast<std::ptrdiff_t>(keep));
  for (auto span : text.word_spans) {
    if (span.first >= keep) break;
    span.last = std::min(span.last, keep - 1);
    out.word_spans.push_back(span);
  }
  return out;
}

std::size_t AlignmentMatrix::count() const {
  return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), std::uint8_t{1}));
}

AlignmentMatrix AlignmentMatrix::transposed() const {
  AlignmentMatrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t.set(j, i, at(i, j) != 0);
  return t;
}

namespace {

const WordSpan* find_span(const TokenizedText& text, std::size_t word) {
  for (const auto& s : text.word_spans)
    if (s.word == word) return &s;
  return nullptr;
}

}  // namespace

AlignmentMatrix match_matrix(const TokenizedText& student, const TokenizedText& teacher,
                             std::span<const SpanPair> scope) {
  AlignmentMatrix m(student.size(), teacher.size());
  for (const auto& pair : scope) {
    if (pair.student_word >= student.source_words.size() || pair.teacher_word >= teacher.source_words.size()) {
      throw ContractError("match_matrix: span pair (" + std::to_string(pair.student_word) + ", " +
                          std::to_string(pair.teacher_word) + ") out of range");
    }
    // A word dropped by truncation has no span and cannot match.
    const WordSpan* s = find_span(student, pair.student_word);
    const WordSpan* t = find_span(teacher, pair.teacher_word);
    if (s == nullptr || t == nullptr) continue;
    const std::size_t n = std::min(s->length(), t->length());
    for (std::size_t k = 0; k < n; ++k) {
      const auto& text = student.subwords[s->first + k].text;
      if (text != kUnkToken && text == teacher.subwords[t->first + k].text) {
        m.set(s->first + k, t->first + k, true);
      }
    }
  }
  return m;
}

std::vector<SpanPair> same_index_scope(std::size_t student_spans, std::size_t teacher_spans) {
  std::vector<SpanPair> scope;
  for (std::size_t k = 0; k < std::min(student_spans, teacher_spans); ++k) scope.push_back({k, k});
  return scope;
}

}  // namespace xlkd
