#include "xlkd/metrics.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "xlkd/errors.hpp"

namespace xlkd {

namespace {

void check_class(int c, const AnswerVocabulary& vocab) {
  if (c < 0 || static_cast<std::size_t>(c) >= vocab.size()) {
    throw ContractError("predicted class " + std::to_string(c) + " outside vocabulary of " +
                        std::to_string(vocab.size()));
  }
}

}  // namespace

double accuracy_exact(std::span<const int> predictions, std::span<const std::string> references,
                      const AnswerVocabulary& vocab) {
  if (predictions.size() != references.size()) {
    throw ContractError("accuracy_exact: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(references.size()) + " references");
  }
  if (predictions.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    check_class(predictions[i], vocab);
    if (vocab.members(static_cast<std::size_t>(predictions[i])).contains(references[i])) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(predictions.size());
}

std::vector<double> vqa_soft_scores(std::span<const int> predictions,
                                    std::span<const std::vector<std::string>> annotations,
                                    const AnswerVocabulary& vocab) {
  if (predictions.size() != annotations.size()) throw ContractError("vqa_soft_scores: length mismatch");
  std::vector<double> out;
  out.reserve(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (annotations[i].size() != 10) {
      throw ContractError("item " + std::to_string(i) + " has " + std::to_string(annotations[i].size()) +
                          " annotations, expected 10");
    }
    check_class(predictions[i], vocab);
    const auto& members = vocab.members(static_cast<std::size_t>(predictions[i]));
    std::size_t matches = 0;
    for (const auto& a : annotations[i])
      if (members.contains(a)) ++matches;
    out.push_back(std::min(static_cast<double>(matches) / 3.0, 1.0));
  }
  return out;
}

double accuracy_vqa_soft(std::span<const int> predictions, std::span<const std::vector<std::string>> annotations,
                         const AnswerVocabulary& vocab) {
  const auto s = vqa_soft_scores(predictions, annotations, vocab);
  if (s.empty()) return 0.0;
  double sum = 0.0;
  for (double v : s) sum += v;
  return sum / static_cast<double>(s.size());
}

BleuStats bleu_stats(std::span<const std::string> predictions, std::span<const std::string> references,
                     const WordSplitter& split) {
  if (predictions.size() != references.size()) throw ContractError("bleu: length mismatch");
  if (predictions.empty()) throw ContractError("bleu: empty corpus");
  const WordSplitter splitter = split ? split : WordSplitter([](std::string_view s) { return split_words(s); });
  BleuStats st;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto cand = splitter(predictions[i]);
    const auto ref = splitter(references[i]);
    st.candidate_length += cand.size();
    st.reference_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<std::string>, std::size_t> ref_counts, cand_counts;
      for (std::size_t k = 0; k + n <= ref.size(); ++k) ++ref_counts[{ref.begin() + k, ref.begin() + k + n}];
      for (std::size_t k = 0; k + n <= cand.size(); ++k) ++cand_counts[{cand.begin() + k, cand.begin() + k + n}];
      for (const auto& [gram, c] : cand_counts) {
        auto it = ref_counts.find(gram);
        st.matches[n - 1] += std::min(c, it == ref_counts.end() ? std::size_t{0} : it->second);
        st.totals[n - 1] += c;
      }
    }
  }
  return st;
}

double bleu_from_stats(const BleuStats& st) {
  if (st.candidate_length == 0) return 0.0;
  double log_sum = 0.0;
  int orders = 0;
  for (int n = 0; n < 4; ++n) {
    if (st.totals[n] == 0) continue;
    const double m = st.matches[n] == 0 ? kBleuEpsilon : static_cast<double>(st.matches[n]);
    log_sum += std::log(m / static_cast<double>(st.totals[n]));
    ++orders;
  }
  const double c = static_cast<double>(st.candidate_length);
  const double r = static_cast<double>(st.reference_length);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_sum / orders);
}

double bleu(std::span<const std::string> predictions, std::span<const std::string> references,
            const WordSplitter& split) {
  return bleu_from_stats(bleu_stats(predictions, references, split));
}

TypeBreakdown question_type_breakdown(std::span<const std::string> questions, std::span<const double> scores,
                                      std::span<const TypeRule> rules) {
  if (questions.size() != scores.size()) throw ContractError("question_type_breakdown: length mismatch");
  std::vector<TypeRule> r(rules.begin(), rules.end());
  if (r.empty() || !r.back().trigger.empty()) r.push_back({"other", ""});
  TypeBreakdown out;
  for (const auto& rule : r) out.buckets.push_back({rule.name, 0, 0.0});
  std::vector<double> sums(r.size(), 0.0);
  for (std::size_t i = 0; i < questions.size(); ++i) {
    std::size_t b = 0;
    while (!r[b].trigger.empty() && questions[i].find(r[b].trigger) == std::string::npos) ++b;
    out.assignment.push_back(b);
    ++out.buckets[b].count;
    sums[b] += scores[i];
  }
  for (std::size_t b = 0; b < r.size(); ++b) {
    if (out.buckets[b].count > 0) out.buckets[b].accuracy = sums[b] / static_cast<double>(out.buckets[b].count);
  }
  return out;
}

std::vector<TypeRule> japanese_question_rules() {
  return {{"nani", "何"},   {"dare", "誰"},       {"doko", "どこ"}, {"donna", "どんな"}, {"dorekurai", "どれくらい"},
          {"dou", "どう"},  {"itsu", "いつ"},     {"ikutsu", "いくつ"}, {"naze", "なぜ"},   {"other", ""}};
}

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_row(std::ostream& out, const std::string& token, const char* role, const std::string& cls,
               const Matrix& m, Eigen::Index row) {
  out << token << '\t' << role << '\t' << cls;
  for (Eigen::Index d = 0; d < m.cols(); ++d) out << '\t' << format_double(m(row, d));
  out << '\n';
}

}  // namespace

std::size_t export_embeddings(const Model& model, std::span<const ExampleRecord> records, const SubwordVocab& vocab,
                              const std::set<std::string>& filter, int layer, const std::filesystem::path& path) {
  const ModelConfig& cfg = model.config();
  if (layer < 1 || layer > cfg.num_layers) {
    throw ContractError("layer " + std::to_string(layer) + " outside 1.." + std::to_string(cfg.num_layers));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "token\trole\tclass";
  for (int d = 0; d < cfg.hidden_size; ++d) out << "\th" << d;
  out << '\n';
  std::size_t rows = 0;
  if (!filter.empty()) {
    for (const auto& rec : records) {
      const auto triple = assemble_triple(rec, vocab, cfg);
      const auto enc = forward(model, triple, std::set<int>{layer});
      const Matrix& h = enc.layer(layer);
      std::size_t q = 0, t = 0, region = 0;
      std::vector<const Subword*> tag_pieces;
      for (const auto& tag : triple.tags)
        for (const auto& s : tag.subwords) tag_pieces.push_back(&s);
      for (std::size_t pos = 0; pos < enc.roles.size(); ++pos) {
        const auto row = static_cast<Eigen::Index>(pos);
        switch (enc.roles[pos]) {
          case PositionRole::QuestionWord: {
            const auto& s = triple.question.subwords[q++];
            if (filter.contains(s.text)) write_row(out, s.text, "word", s.text, h, row), ++rows;
            break;
          }
          case PositionRole::TagSubword: {
            const auto& s = *tag_pieces[t++];
            if (filter.contains(s.text)) write_row(out, s.text, "word", s.text, h, row), ++rows;
            break;
          }
          case PositionRole::ImageRegion: {
            const std::size_t k = region++;
            if (k < rec.region_labels.size() && filter.contains(rec.region_labels[k])) {
              write_row(out, rec.image_id + "#" + std::to_string(k), "region", rec.region_labels[k], h, row);
              ++rows;
            }
            break;
          }
          default: break;
        }
      }
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
  return rows;
}

void write_predictions(std::span<const Prediction> predictions, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& p : predictions) {
    out << nlohmann::json{{"question_id", p.question_id},
                          {"predicted_class", p.predicted_class},
                          {"predicted_string", p.predicted_string}}
               .dump()
        << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<Prediction> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("question_id"), j.at("predicted_class"), j.at("predicted_string")});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json types = nlohmann::json::array();
  for (const auto& b : r.per_type) types.push_back({{"type", b.name}, {"count", b.count}, {"accuracy", b.accuracy}});
  return {{"count", r.count},
          {"accuracy", r.accuracy},
          {"soft_accuracy", r.soft_accuracy ? nlohmann::json(*r.soft_accuracy) : nlohmann::json(nullptr)},
          {"per_type", types},
          {"bleu", r.bleu},
          {"coverage", r.coverage},
          {"vocabulary_coverage", r.vocabulary_coverage}};
}

const std::string& reference_answer(const ExampleRecord& record) {
  if (record.answers.empty()) throw ContractError("record " + record.question_id + " has no answers");
  const AnswerCount* best = &record.answers.front();
  for (const auto& a : record.answers)
    if (a.count > best->count) best = &a;
  return best->answer;
}

Evaluation evaluate(const Model& model, std::span<const ExampleRecord> records, const SubwordVocab& vocab,
                    const AnswerVocabulary& answers, std::span<const TypeRule> rules) {
  if (records.empty()) throw ContractError("evaluate: no records");
  if (static_cast<std::size_t>(model.config().num_classes) != answers.size()) {
    throw ContractError("model class count does not match the answer vocabulary");
  }
  Evaluation ev;
  std::vector<int> preds;
  std::vector<std::string> refs, questions, pred_strings;
  std::vector<std::vector<std::string>> annotations;
  bool ten = true;
  const std::set<int> last{model.config().num_layers};
  for (const auto& rec : records) {
    const auto triple = assemble_triple(rec, vocab, model.config());
    Eigen::Index arg = 0;
    classify(model, forward(model, triple, last)).maxCoeff(&arg);
    const int c = static_cast<int>(arg);
    preds.push_back(c);
    refs.push_back(reference_answer(rec));
    questions.push_back(rec.question);
    pred_strings.push_back(answers.classes()[static_cast<std::size_t>(c)]);
    std::vector<std::string> ann;
    for (const auto& a : rec.answers)
      for (int k = 0; k < a.count; ++k) ann.push_back(a.answer);
    ten = ten && ann.size() == 10;
    annotations.push_back(std::move(ann));
    ev.predictions.push_back({rec.question_id, c, pred_strings.back()});
  }
  EvalReport& r = ev.report;
  r.count = records.size();
  r.accuracy = accuracy_exact(preds, refs, answers);
  if (ten) r.soft_accuracy = accuracy_vqa_soft(preds, annotations, answers);
  std::vector<double> item(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    item[i] = answers.members(static_cast<std::size_t>(preds[i])).contains(refs[i]) ? 1.0 : 0.0;
  }
  r.per_type = question_type_breakdown(questions, item, rules).buckets;
  r.bleu = bleu(pred_strings, refs);
  std::size_t covered = 0;
  for (const auto& ref : refs)
    if (answers.class_of(ref) >= 0) ++covered;
  r.coverage = static_cast<double>(covered) / static_cast<double>(refs.size());
  r.vocabulary_coverage = answers.coverage();
  return ev;
}

}  // namespace xlkd
