#include "xlkd/data.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "xlkd/errors.hpp"

namespace xlkd {

using nlohmann::json;

void FeatureStore::put(const std::string& image_id, Matrix features) {
  if (!features.allFinite()) throw ContractError("features for image " + image_id + " are not finite");
  entries_[image_id] = std::move(features);
}

const Matrix& FeatureStore::get(const std::string& image_id) const {
  auto it = entries_.find(image_id);
  if (it == entries_.end()) throw ContractError("no features stored for image " + image_id);
  return it->second;
}

void FeatureStore::save(const std::filesystem::path& index_path, const std::filesystem::path& blob_path) const {
  std::ofstream idx(index_path, std::ios::binary), blob(blob_path, std::ios::binary);
  if (!idx || !blob) throw IoError("cannot write feature store " + index_path.string());
  idx << "# " << blob_path.filename().string() << '\n';
  std::uint64_t offset = 0;
  for (const auto& [id, m] : entries_) {
    idx << id << ' ' << offset << ' ' << m.rows() << ' ' << m.cols() << '\n';
    // Row-major on disk.
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double v = m(r, c);
        blob.write(reinterpret_cast<const char*>(&v), sizeof v);
      }
    }
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
  }
  if (!idx || !blob) throw IoError("write failed for feature store " + index_path.string());
}

FeatureStore FeatureStore::load(const std::filesystem::path& index_path) {
  std::ifstream idx(index_path);
  if (!idx) throw IoError("cannot open feature index " + index_path.string());
  std::string header;
  std::getline(idx, header);
  if (header.rfind("# ", 0) != 0) throw FormatError(index_path.string() + ": missing blob header line");
  const auto blob_path = index_path.parent_path() / header.substr(2);
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw IoError("cannot open feature blob " + blob_path.string());
  FeatureStore store;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(idx, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream in(line);
    std::string id;
    std::uint64_t offset = 0;
    Eigen::Index rows = 0, cols = 0;
    if (!(in >> id >> offset >> rows >> cols) || rows < 0 || cols < 0) {
      throw FormatError(index_path.string() + ":" + std::to_string(line_no) + ": malformed index line");
    }
    Matrix m(rows, cols);
    blob.seekg(static_cast<std::streamoff>(offset));
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        double v = 0;
        blob.read(reinterpret_cast<char*>(&v), sizeof v);
        m(r, c) = v;
      }
    }
    if (!blob) throw FormatError(blob_path.string() + ": truncated data for image " + id);
    store.put(id, std::move(m));
  }
  return store;
}

namespace {

std::string id_string(const json& j, const char* key) {
  if (!j.contains(key)) return {};
  const auto& v = j.at(key);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw FormatError(std::string("field '") + key + "' must be a string or integer");
}

Matrix matrix_from_json(const json& j) {
  if (!j.is_array()) throw FormatError("features must be an array of rows");
  if (j.empty()) return Matrix(0, 0);
  const std::size_t cols = j.front().size();
  Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw FormatError("feature rows differ in length");
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
  }
  return m;
}

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<AnswerCount> answers_from_json(const json& j) {
  std::vector<AnswerCount> out;
  if (j.is_null()) return out;
  for (const auto& a : j) {
    if (a.is_string()) {
      out.push_back({a.get<std::string>(), 1});
    } else {
      out.push_back({a.at("answer").get<std::string>(), a.value("count", 1)});
    }
  }
  return out;
}

json answers_to_json(const std::vector<AnswerCount>& answers) {
  json out = json::array();
  for (const auto& a : answers) out.push_back({{"answer", a.answer}, {"count", a.count}});
  return out;
}

// Shared image side of a record: features, references and tags.
void image_side_from_json(const json& j, ExampleRecord& r, const LoadOptions& opts) {
  r.image_id = id_string(j, "image_id");
  r.tags = j.value("tags", std::vector<std::string>{});
  r.region_labels = j.value("region_labels", std::vector<std::string>{});
  if (j.contains("features")) r.features = matrix_from_json(j.at("features"));
  r.feature_ref = j.value("feature_ref", std::string{});
  if (!r.feature_ref.empty() && opts.features != nullptr) r.features = opts.features->get(r.feature_ref);
}

void image_side_to_json(const ExampleRecord& r, json& j) {
  j["image_id"] = r.image_id;
  j["tags"] = r.tags;
  if (!r.region_labels.empty()) j["region_labels"] = r.region_labels;
  if (!r.feature_ref.empty()) {
    j["feature_ref"] = r.feature_ref;
  } else {
    j["features"] = matrix_to_json(r.features);
  }
}

}  // namespace

void validate_record(const ExampleRecord& r, bool require_answers) {
  if (r.features.size() == 0 && r.feature_ref.empty()) {
    throw ContractError("record " + r.question_id + " has neither features nor a feature reference");
  }
  if (!r.features.allFinite()) throw ContractError("record " + r.question_id + " has non-finite features");
  if (!r.region_labels.empty() && r.features.size() > 0 &&
      static_cast<Eigen::Index>(r.region_labels.size()) != r.features.rows()) {
    throw ContractError("record " + r.question_id + ": region_labels do not match the region count");
  }
  if (require_answers && r.answers.empty()) throw ContractError("record " + r.question_id + " has no answers");
  for (const auto& a : r.answers)
    if (a.count < 1) throw ContractError("record " + r.question_id + ": answer counts must be positive");
}

ExampleRecord record_from_json(const json& j, const LoadOptions& opts) {
  ExampleRecord r;
  r.question_id = id_string(j, "question_id");
  r.question = j.at("question").get<std::string>();
  r.lang = j.value("lang", std::string{});
  r.answers = answers_from_json(j.value("answers", json()));
  image_side_from_json(j, r, opts);
  validate_record(r, opts.require_answers);
  return r;
}

json record_to_json(const ExampleRecord& r) {
  json j = {{"question_id", r.question_id}, {"question", r.question}, {"lang", r.lang}, {"answers", answers_to_json(r.answers)}};
  image_side_to_json(r, j);
  return j;
}

ParallelRecord parallel_from_json(const json& j, const LoadOptions& opts) {
  ParallelRecord p;
  ExampleRecord shared;
  image_side_from_json(j, shared, opts);
  auto side = [&](const json& s) {
    ExampleRecord r = shared;
    r.question_id = id_string(s, "question_id");
    r.question = s.at("question").get<std::string>();
    r.lang = s.value("lang", std::string{});
    r.answers = answers_from_json(s.value("answers", json()));
    validate_record(r, opts.require_answers);
    return r;
  };
  p.source = side(j.at("source"));
  p.target = side(j.at("target"));
  p.alignment = parse_alignment(j.value("alignment", std::string{}));
  check_alignment(p.alignment, p.sentences());
  return p;
}

json parallel_to_json(const ParallelRecord& r) {
  if (r.source.image_id != r.target.image_id || r.source.tags != r.target.tags || r.source.features != r.target.features ||
      r.source.feature_ref != r.target.feature_ref) {
    throw ContractError("parallel record sides do not share the image side");
  }
  json j;
  image_side_to_json(r.source, j);
  auto side = [](const ExampleRecord& s) {
    return json{{"question_id", s.question_id}, {"question", s.question}, {"lang", s.lang}, {"answers", answers_to_json(s.answers)}};
  };
  j["source"] = side(r.source);
  j["target"] = side(r.target);
  j["alignment"] = format_alignment(r.alignment);
  return j;
}

LoadedDataset load_dataset(const std::filesystem::path& path, const LoadOptions& opts) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  LoadedDataset out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      if (opts.schema == Schema::Task) {
        out.task.push_back(record_from_json(j, opts));
      } else {
        out.parallel.push_back(parallel_from_json(j, opts));
      }
    } catch (const std::exception& e) {
      out.issues.push_back({line_no, e.what()});
    }
  }
  if (opts.strict && !out.issues.empty()) {
    std::string msg = path.string() + ": " + std::to_string(out.issues.size()) + " malformed line(s):";
    for (const auto& i : out.issues) msg += " " + std::to_string(i.line) + " (" + i.message + ")";
    throw FormatError(msg);
  }
  return out;
}

namespace {

template <typename Range, typename Fn>
void dump_lines(const Range& records, const std::filesystem::path& path, Fn to_json) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void dump_task_dataset(std::span<const ExampleRecord> records, const std::filesystem::path& path) {
  dump_lines(records, path, record_to_json);
}

void dump_parallel_dataset(std::span<const ParallelRecord> records, const std::filesystem::path& path) {
  dump_lines(records, path, parallel_to_json);
}

WordTagImageTriple assemble_triple(const ExampleRecord& record, std::string_view question_override,
                                   const SubwordVocab& vocab, const ModelConfig& config) {
  validate_record(record, false);
  if (record.features.size() == 0) throw ContractError("record " + record.question_id + " has unresolved feature_ref");
  if (config.max_text_tokens < 3) throw ContractError("max_text_tokens must leave room for the three markers");
  WordTagImageTriple triple;
  triple.specials = SpecialIds::of(vocab);
  const std::size_t budget = static_cast<std::size_t>(config.max_text_tokens) - 3;

  const TokenizedText question = tokenize(question_override, vocab);
  triple.question = truncate(question, std::min(question.size(), budget));
  std::size_t remaining = budget - triple.question.size();
  for (const auto& tag : record.tags) {
    const TokenizedText t = tokenize(tag, vocab);
    triple.tags.push_back(truncate(t, std::min(t.size(), remaining)));
    remaining -= triple.tags.back().size();
  }
  const Eigen::Index keep = std::min<Eigen::Index>(record.features.rows(), config.max_image_tokens);
  triple.regions.vectors = record.features.topRows(keep);
  return triple;
}

WordTagImageTriple assemble_triple(const ExampleRecord& record, const SubwordVocab& vocab, const ModelConfig& config) {
  return assemble_triple(record, record.question, vocab, config);
}

DistillationBatchItem make_distillation_item(const ParallelRecord& record, const CodeMixedSentence& mixed,
                                             const SubwordVocab& teacher_vocab, const ModelConfig& teacher_config,
                                             const SubwordVocab& student_vocab, const ModelConfig& student_config,
                                             const ItemBuildOptions& opts) {
  DistillationBatchItem item;
  item.teacher_input = assemble_triple(record.source, teacher_vocab, teacher_config);
  item.student_input = assemble_triple(record.target, mixed.text(), student_vocab, student_config);
  if (opts.two_pass) item.student_plain_input = assemble_triple(record.target, student_vocab, student_config);

  const TokenizedText s_tags = concat_units(item.student_input.tags);
  const TokenizedText t_tags = concat_units(item.teacher_input.tags);
  const auto tag_scope = same_index_scope(s_tags.source_words.size(), t_tags.source_words.size());
  item.tag_matrix = match_matrix(s_tags, t_tags, tag_scope);

  std::vector<SpanPair> word_scope;
  for (const auto& r : mixed.replaced) word_scope.push_back({r.target_word, r.source_word});
  item.word_matrix = match_matrix(item.student_input.question, item.teacher_input.question, word_scope);
  item.validate();
  return item;
}

std::vector<TaskExample> make_task_examples(std::span<const ExampleRecord> records, const SubwordVocab& vocab,
                                            const AnswerVocabulary& answers, const ModelConfig& config,
                                            TargetMode mode) {
  std::vector<TaskExample> out;
  for (const auto& r : records) {
    TaskExample ex;
    if (mode == TargetMode::Single) {
      if (r.answers.empty()) continue;
      // The most frequent annotation stands in for the single answer.
      const auto best = std::max_element(r.answers.begin(), r.answers.end(),
                                         [](const auto& a, const auto& b) { return a.count < b.count; });
      const AnswerCount one[] = {{best->answer, 1}};
      ex.target = encode_targets(one, answers, mode);
      if (!ex.target.covered) continue;
    } else {
      ex.target = encode_targets(r.answers, answers, mode);
    }
    ex.input = assemble_triple(r, vocab, config);
    ex.answers = r.answers;
    ex.question = r.question;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::string> answer_occurrences(std::span<const ExampleRecord> records) {
  std::vector<std::string> out;
  for (const auto& r : records)
    for (const auto& a : r.answers) out.insert(out.end(), static_cast<std::size_t>(a.count), a.answer);
  return out;
}

}  // namespace xlkd
