#include "xlkd/answers.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "xlkd/errors.hpp"

namespace xlkd {

int AnswerVocabulary::class_of(const std::string& answer) const {
  auto it = index_.find(answer);
  return it == index_.end() ? -1 : it->second;
}

void AnswerVocabulary::add_class(std::string canonical, std::set<std::string> members, std::size_t frequency) {
  if (std::find(classes_.begin(), classes_.end(), canonical) != classes_.end()) {
    throw ContractError("duplicate answer class '" + canonical + "'");
  }
  const int id = static_cast<int>(classes_.size());
  for (const auto& m : members) {
    if (!index_.emplace(m, id).second) throw ContractError("answer '" + m + "' belongs to two classes");
  }
  classes_.push_back(std::move(canonical));
  members_.push_back(std::move(members));
  frequency_.push_back(frequency);
}

AnswerVocabulary build_answer_vocab(std::span<const std::string> answers, std::size_t k) {
  if (k < 1) throw ContractError("answer vocabulary size must be at least 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& a : answers) ++counts[a];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() < k) {
    spdlog::warn("only {} distinct answers, fewer than the requested {}", ranked.size(), k);
  }
  AnswerVocabulary vocab;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    vocab.add_class(ranked[i].first, {ranked[i].first}, ranked[i].second);
  }
  if (!answers.empty()) vocab.set_coverage(coverage(answers, vocab));
  return vocab;
}

AnswerVocabulary merge_by_translation(const AnswerVocabulary& vocab,
                                      const std::map<std::string, std::string>& translations) {
  std::vector<std::string> missing;
  for (const auto& c : vocab.classes())
    if (!translations.contains(c)) missing.push_back(c);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw ContractError("missing translations for: " + list);
  }
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::set<std::string>, std::size_t>> groups;
  for (std::size_t c = 0; c < vocab.size(); ++c) {
    const std::string& tr = translations.at(vocab.classes()[c]);
    auto [it, fresh] = groups.try_emplace(tr);
    if (fresh) order.push_back(tr);
    it->second.first.insert(vocab.members(c).begin(), vocab.members(c).end());
    it->second.second += vocab.frequency(c);
  }
  AnswerVocabulary merged;
  for (const auto& tr : order) merged.add_class(tr, groups[tr].first, groups[tr].second);
  merged.set_coverage(vocab.coverage());
  return merged;
}

double coverage(std::span<const std::string> answers, const AnswerVocabulary& vocab) {
  if (answers.empty()) throw ContractError("coverage of an empty dataset is undefined");
  std::size_t hit = 0;
  for (const auto& a : answers)
    if (vocab.class_of(a) >= 0) ++hit;
  return static_cast<double>(hit) / static_cast<double>(answers.size());
}

EncodedTarget encode_targets(std::span<const AnswerCount> answers, const AnswerVocabulary& vocab, TargetMode mode) {
  EncodedTarget out;
  out.scores = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(vocab.size()));
  if (mode == TargetMode::Single) {
    if (answers.size() != 1) throw ContractError("single-label targets need exactly one answer");
    out.label = vocab.class_of(answers.front().answer);
    out.covered = out.label >= 0;
    if (out.covered) out.scores(out.label) = 1.0;
    return out;
  }
  std::vector<double> counts(vocab.size(), 0.0);
  for (const auto& a : answers) {
    const int c = vocab.class_of(a.answer);
    if (c >= 0) counts[static_cast<std::size_t>(c)] += a.count;
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    out.scores(static_cast<Eigen::Index>(c)) = std::min(counts[c] / 3.0, 1.0);
    out.covered = out.covered || counts[c] > 0;
  }
  return out;
}

void save_answer_vocab(const AnswerVocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write answer vocabulary " + path.string());
  char cov[40];
  std::snprintf(cov, sizeof cov, "%.17g", vocab.coverage());
  out << "#coverage\t" << cov << '\n';
  for (std::size_t c = 0; c < vocab.size(); ++c) {
    out << c << '\t' << vocab.classes()[c];
    for (const auto& m : vocab.members(c)) out << '\t' << m;
    out << '\t' << vocab.frequency(c) << '\n';
  }
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, '\t')) fields.push_back(field);
  return fields;
}

}  // namespace

AnswerVocabulary load_answer_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open answer vocabulary " + path.string());
  AnswerVocabulary vocab;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() == 2 && f[0] == "#coverage") {
      vocab.set_coverage(std::stod(f[1]));
      continue;
    }
    if (f.size() < 4) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected at least 4 fields");
    try {
      if (std::stoul(f[0]) != vocab.size()) throw FormatError("class ids must be dense and ordered");
      vocab.add_class(f[1], std::set<std::string>(f.begin() + 2, f.end() - 1), std::stoul(f.back()));
    } catch (const std::logic_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return vocab;
}

std::map<std::string, std::string> load_translations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open translations " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 2) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 2 fields");
    out[f[0]] = f[1];
  }
  return out;
}

}  // namespace xlkd
