#include "xlkd/distill.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

#include "xlkd/errors.hpp"

namespace xlkd {

const char* objective_name(DistillObjective obj) {
  switch (obj) {
    case DistillObjective::Cls: return "cls";
    case DistillObjective::Img: return "img";
    case DistillObjective::Tag: return "tag";
    case DistillObjective::Cm: return "cm";
  }
  return "?";
}

DistillationConfig DistillationConfig::standard(int num_layers) {
  DistillationConfig cfg;
  for (int l : {3, 6, 9})
    if (l < num_layers) cfg.layer_set.push_back(l);
  cfg.layer_set.push_back(num_layers);
  return cfg;
}

double DistillationConfig::weight(int layer) const {
  auto it = layer_weights.find(layer);
  return it == layer_weights.end() ? 1.0 : it->second;
}

bool DistillationConfig::enabled(DistillObjective obj) const {
  switch (obj) {
    case DistillObjective::Cls: return enable_cls;
    case DistillObjective::Img: return enable_img;
    case DistillObjective::Tag: return enable_tag;
    case DistillObjective::Cm: return enable_cm;
  }
  return false;
}

void DistillationConfig::validate(int teacher_layers, int student_layers) const {
  if (layer_set.empty()) throw ContractError("distillation layer set is empty");
  for (int l : layer_set) {
    if (l < 1 || l > teacher_layers || l > student_layers) {
      throw ContractError("distillation layer " + std::to_string(l) + " is not valid for both models");
    }
  }
  for (const auto& [l, w] : layer_weights) {
    if (!(w >= 0.0)) throw ContractError("layer weight for layer " + std::to_string(l) + " is negative");
  }
}

namespace {

const char* basis_name(CountBasis b) {
  switch (b) {
    case CountBasis::Student: return "student";
    case CountBasis::Teacher: return "teacher";
    case CountBasis::Max: return "max";
  }
  return "student";
}

}  // namespace

void to_json(nlohmann::json& j, const DistillationConfig& c) {
  nlohmann::json weights = nlohmann::json::object();
  for (const auto& [l, w] : c.layer_weights) weights[std::to_string(l)] = w;
  j = {{"layer_set", c.layer_set},
       {"layer_weights", weights},
       {"enable_cls", c.enable_cls},
       {"enable_img", c.enable_img},
       {"enable_tag", c.enable_tag},
       {"enable_cm", c.enable_cm},
       {"count_basis", basis_name(c.count_basis)},
       {"normalization", c.normalization == PairNormalization::SquaredCount ? "squared_count" : "matched_pairs"},
       {"student_pass", c.student_pass == StudentPass::Single ? "single" : "two_pass"}};
}

void from_json(const nlohmann::json& j, DistillationConfig& c) {
  if (j.contains("layer_set")) c.layer_set = j.at("layer_set").get<std::vector<int>>();
  if (j.contains("layer_weights")) {
    c.layer_weights.clear();
    for (const auto& [k, v] : j.at("layer_weights").items()) c.layer_weights[std::stoi(k)] = v.get<double>();
  }
  c.enable_cls = j.value("enable_cls", c.enable_cls);
  c.enable_img = j.value("enable_img", c.enable_img);
  c.enable_tag = j.value("enable_tag", c.enable_tag);
  c.enable_cm = j.value("enable_cm", c.enable_cm);
  const std::string basis = j.value("count_basis", std::string(basis_name(c.count_basis)));
  if (basis == "student") {
    c.count_basis = CountBasis::Student;
  } else if (basis == "teacher") {
    c.count_basis = CountBasis::Teacher;
  } else if (basis == "max") {
    c.count_basis = CountBasis::Max;
  } else {
    throw FormatError("unknown count_basis '" + basis + "'");
  }
  const std::string norm = j.value("normalization", std::string("squared_count"));
  if (norm != "squared_count" && norm != "matched_pairs") throw FormatError("unknown normalization '" + norm + "'");
  c.normalization = norm == "squared_count" ? PairNormalization::SquaredCount : PairNormalization::MatchedPairs;
  const std::string pass = j.value("student_pass", std::string("single"));
  if (pass != "single" && pass != "two_pass") throw FormatError("unknown student_pass '" + pass + "'");
  c.student_pass = pass == "single" ? StudentPass::Single : StudentPass::TwoPass;
}

void DistillationBatchItem::validate() const {
  const auto& tr = teacher_input.regions.vectors;
  const auto& sr = student_input.regions.vectors;
  if (tr.rows() != sr.rows() || tr.cols() != sr.cols() || tr != sr) {
    throw ContractError("teacher and student inputs must share identical region features");
  }
  if (tag_matrix.rows() != student_input.tag_token_count() || tag_matrix.cols() != teacher_input.tag_token_count()) {
    throw ContractError("tag matrix is not dimensioned by the tag token counts");
  }
  if (word_matrix.rows() != student_input.question.size() || word_matrix.cols() != teacher_input.question.size()) {
    throw ContractError("word matrix is not dimensioned by the question token counts");
  }
}

double mse(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ContractError("mse: dimension mismatch");
  if (a.size() == 0) return 0.0;
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

namespace {

double pair_value(const Matrix& s, const Matrix& t, std::span<const ad::RowPair> pairs) {
  if (s.cols() != t.cols()) throw ContractError("hidden size mismatch between student and teacher");
  double total = 0.0;
  for (const auto& p : pairs) {
    total += p.weight * (s.row(p.student_row) - t.row(p.teacher_row)).squaredNorm() / static_cast<double>(s.cols());
  }
  return total;
}

double normalizer(std::size_t count, std::size_t matches, PairNormalization norm) {
  if (norm == PairNormalization::MatchedPairs) return matches == 0 ? 0.0 : 1.0 / static_cast<double>(matches);
  return count == 0 ? 0.0 : 1.0 / (static_cast<double>(count) * static_cast<double>(count));
}

std::vector<ad::RowPair> matrix_pairs(const AlignmentMatrix& m, std::span<const int> student_rows,
                                      std::span<const int> teacher_rows, double weight) {
  if (m.rows() != student_rows.size() || m.cols() != teacher_rows.size()) {
    throw ContractError("alignment matrix " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                        " does not match token counts " + std::to_string(student_rows.size()) + "x" +
                        std::to_string(teacher_rows.size()));
  }
  std::vector<ad::RowPair> pairs;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (m.at(i, j)) pairs.push_back({student_rows[i], teacher_rows[j], weight});
  return pairs;
}

std::vector<int> iota_rows(std::size_t n) {
  std::vector<int> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = static_cast<int>(i);
  return r;
}

std::vector<int> rows_with(std::span<const PositionRole> roles, PositionRole role) {
  std::vector<int> out;
  for (std::size_t i = 0; i < roles.size(); ++i)
    if (roles[i] == role) out.push_back(static_cast<int>(i));
  return out;
}

std::size_t basis_count(std::size_t student, std::size_t teacher, CountBasis basis) {
  switch (basis) {
    case CountBasis::Student: return student;
    case CountBasis::Teacher: return teacher;
    case CountBasis::Max: return std::max(student, teacher);
  }
  return student;
}

// Row pairs (with normalization folded into the weights) for one objective.
std::vector<ad::RowPair> objective_pairs(DistillObjective obj, const DistillationBatchItem& item,
                                         std::span<const PositionRole> teacher_roles,
                                         std::span<const PositionRole> student_roles, const DistillationConfig& cfg) {
  switch (obj) {
    case DistillObjective::Cls: {
      if (student_roles.empty() || teacher_roles.empty() || student_roles.front() != PositionRole::ClassificationMarker ||
          teacher_roles.front() != PositionRole::ClassificationMarker) {
        throw ContractError("both inputs need a classification marker");
      }
      return {{0, 0, 1.0}};
    }
    case DistillObjective::Img: {
      const auto s = rows_with(student_roles, PositionRole::ImageRegion);
      const auto t = rows_with(teacher_roles, PositionRole::ImageRegion);
      if (s.size() != t.size()) throw ContractError("student and teacher have different image token counts");
      if (s.empty()) {
        spdlog::debug("image distillation: input has no image regions, term is 0");
        return {};
      }
      std::vector<ad::RowPair> pairs;
      for (std::size_t k = 0; k < s.size(); ++k) pairs.push_back({s[k], t[k], 1.0 / static_cast<double>(s.size())});
      return pairs;
    }
    case DistillObjective::Tag:
    case DistillObjective::Cm: {
      const bool tag = obj == DistillObjective::Tag;
      const PositionRole role = tag ? PositionRole::TagSubword : PositionRole::QuestionWord;
      const auto s = rows_with(student_roles, role);
      const auto t = rows_with(teacher_roles, role);
      const AlignmentMatrix& m = tag ? item.tag_matrix : item.word_matrix;
      const double w = normalizer(basis_count(s.size(), t.size(), cfg.count_basis), m.count(), cfg.normalization);
      return matrix_pairs(m, s, t, w);
    }
  }
  return {};
}

void check_layers(const DistillationConfig& cfg, const EncoderOutput& out, const char* who) {
  for (int l : cfg.layer_set) {
    if (!out.has_layer(l)) throw ContractError(std::string(who) + " output does not retain layer " + std::to_string(l));
  }
}

}  // namespace

double loss_cls(const Vector& student_cls, const Vector& teacher_cls) { return mse(student_cls, teacher_cls); }

double loss_img(const Matrix& student_regions, const Matrix& teacher_regions, std::size_t p) {
  if (p == 0) {
    spdlog::debug("loss_img: p = 0, returning 0");
    return 0.0;
  }
  if (static_cast<std::size_t>(student_regions.rows()) < p || static_cast<std::size_t>(teacher_regions.rows()) < p) {
    throw ContractError("loss_img: fewer than p region rows");
  }
  std::vector<ad::RowPair> pairs;
  for (std::size_t k = 0; k < p; ++k) pairs.push_back({static_cast<int>(k), static_cast<int>(k), 1.0 / static_cast<double>(p)});
  return pair_value(student_regions, teacher_regions, pairs);
}

double loss_tag(const Matrix& student_tags, const Matrix& teacher_tags, const AlignmentMatrix& a, std::size_t t) {
  if (t == 0 || a.count() == 0) return 0.0;
  const auto s_rows = iota_rows(static_cast<std::size_t>(student_tags.rows()));
  const auto t_rows = iota_rows(static_cast<std::size_t>(teacher_tags.rows()));
  return pair_value(student_tags, teacher_tags, matrix_pairs(a, s_rows, t_rows, normalizer(t, 0, PairNormalization::SquaredCount)));
}

double loss_cm(const Matrix& student_words, const Matrix& teacher_words, const AlignmentMatrix& b, std::size_t n) {
  return loss_tag(student_words, teacher_words, b, n);
}

double DistillationLoss::sum(DistillObjective obj) const {
  double s = 0.0;
  for (const auto& t : terms)
    if (t.objective == obj) s += t.value;
  return s;
}

double DistillationLoss::raw_sum(DistillObjective obj) const {
  double s = 0.0;
  for (const auto& t : terms)
    if (t.objective == obj) s += t.raw;
  return s;
}

double DistillationLoss::raw_total() const {
  double s = 0.0;
  for (const auto& t : terms) s += t.raw;
  return s;
}

namespace {

bool uses_plain(DistillObjective obj, const DistillationConfig& cfg) {
  return cfg.student_pass == StudentPass::TwoPass && obj != DistillObjective::Cm;
}

}  // namespace

DistillationLoss loss_distil(const DistillationBatchItem& item, const EncoderOutput& teacher_out,
                             const EncoderOutput& student_out, const DistillationConfig& cfg,
                             const EncoderOutput* student_plain_out) {
  check_layers(cfg, teacher_out, "teacher");
  check_layers(cfg, student_out, "student");
  if (cfg.student_pass == StudentPass::TwoPass) {
    if (student_plain_out == nullptr) throw ContractError("two-pass distillation needs the plain student output");
    check_layers(cfg, *student_plain_out, "plain student");
  }
  DistillationLoss loss;
  for (int layer : cfg.layer_set) {
    for (auto obj : kAllObjectives) {
      const EncoderOutput& s = uses_plain(obj, cfg) ? *student_plain_out : student_out;
      const auto pairs = objective_pairs(obj, item, teacher_out.roles, s.roles, cfg);
      LossTerm term{layer, obj, cfg.weight(layer) * pair_value(s.layer(layer), teacher_out.layer(layer), pairs), 0.0,
                    cfg.enabled(obj)};
      term.value = term.enabled ? term.raw : 0.0;
      loss.total += term.value;
      loss.terms.push_back(term);
    }
  }
  return loss;
}

DistilGraph build_distil(ad::Tape& tape, const DistillationBatchItem& item, const EncoderOutput& teacher_out,
                         const ForwardGraph& student, const DistillationConfig& cfg,
                         const ForwardGraph* student_plain) {
  check_layers(cfg, teacher_out, "teacher");
  if (cfg.student_pass == StudentPass::TwoPass && student_plain == nullptr) {
    throw ContractError("two-pass distillation needs the plain student graph");
  }
  DistilGraph out;
  std::vector<ad::Var> parts;
  std::vector<double> weights;
  for (int layer : cfg.layer_set) {
    for (auto obj : kAllObjectives) {
      const ForwardGraph& s = uses_plain(obj, cfg) ? *student_plain : student;
      auto it = s.layers.find(layer);
      if (it == s.layers.end()) throw ContractError("student graph does not retain layer " + std::to_string(layer));
      const auto pairs = objective_pairs(obj, item, teacher_out.roles, s.roles, cfg);
      ad::Var v = ad::weighted_row_mse(tape, it->second, teacher_out.layer(layer), pairs);
      LossTerm term{layer, obj, cfg.weight(layer) * tape.scalar(v), 0.0, cfg.enabled(obj)};
      term.value = term.enabled ? term.raw : 0.0;
      out.breakdown.total += term.value;
      out.breakdown.terms.push_back(term);
      if (term.enabled) {
        parts.push_back(v);
        weights.push_back(cfg.weight(layer));
      }
    }
  }
  out.total = ad::weighted_sum(tape, parts, weights);
  return out;
}

EncoderOutput teacher_outputs(const Model& teacher, const DistillationBatchItem& item, const DistillationConfig& cfg) {
  return forward(teacher, item.teacher_input, cfg.layers());
}

DistillationStep distillation_gradients(const EncoderOutput& teacher_out, const Model& student,
                                        const DistillationBatchItem& item, const DistillationConfig& cfg,
                                        std::span<const std::string> frozen, const ForwardOptions* train_opts) {
  DistillationStep step;
  ForwardOptions opts;
  if (train_opts != nullptr) opts = *train_opts;
  opts.retain_layers = cfg.layers();
  opts.extra_padding = 0;
  step.gradients = gradients(
      student,
      [&](ModelBinding& b) {
        ForwardGraph s = build_forward(b, item.student_input, opts);
        std::optional<ForwardGraph> plain;
        if (cfg.student_pass == StudentPass::TwoPass) {
          if (!item.student_plain_input) throw ContractError("two-pass distillation needs student_plain_input");
          plain = build_forward(b, *item.student_plain_input, opts);
        }
        DistilGraph g = build_distil(b.tape(), item, teacher_out, s, cfg, plain ? &*plain : nullptr);
        step.loss = std::move(g.breakdown);
        return g.total;
      },
      frozen);
  return step;
}

KdObjectiveValue kd_objective(std::span<const DistillationBatchItem> dataset, const Model& teacher,
                              const Model& student, const DistillationConfig& cfg) {
  if (dataset.empty()) throw ContractError("kd_objective: empty dataset");
  cfg.validate(teacher.config().num_layers, student.config().num_layers);
  if (teacher.config().hidden_size != student.config().hidden_size) {
    throw ContractError("teacher and student hidden sizes differ");
  }
  KdObjectiveValue v;
  const auto layers = cfg.layers();
  for (const auto& item : dataset) {
    const EncoderOutput t = forward(teacher, item.teacher_input, layers);
    const EncoderOutput s = forward(student, item.student_input, layers);
    std::optional<EncoderOutput> plain;
    if (cfg.student_pass == StudentPass::TwoPass) {
      if (!item.student_plain_input) throw ContractError("two-pass distillation needs student_plain_input");
      plain = forward(student, *item.student_plain_input, layers);
    }
    v.sum += loss_distil(item, t, s, cfg, plain ? &*plain : nullptr).total;
  }
  v.count = dataset.size();
  v.mean = v.sum / static_cast<double>(v.count);
  return v;
}

}  // namespace xlkd
