#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "xlkd/model.hpp"
#include "xlkd/tokenize.hpp"

namespace xlkd {

enum class DistillObjective { Cls, Img, Tag, Cm };
inline constexpr DistillObjective kAllObjectives[] = {DistillObjective::Cls, DistillObjective::Img,
                                                      DistillObjective::Tag, DistillObjective::Cm};
const char* objective_name(DistillObjective obj);

// Which token count normalizes the tag and code-mix sums.
enum class CountBasis { Student, Teacher, Max };
// SquaredCount divides by count^2; MatchedPairs divides by the number of ones.
enum class PairNormalization { SquaredCount, MatchedPairs };
// Single: every objective uses the code-switched student pass. TwoPass: CLS,
// image and tag terms use a plain target-language pass.
enum class StudentPass { Single, TwoPass };

struct DistillationConfig {
  std::vector<int> layer_set;
  std::map<int, double> layer_weights;  // absent layers weigh 1
  bool enable_cls = true;
  bool enable_img = true;
  bool enable_tag = true;
  bool enable_cm = true;
  CountBasis count_basis = CountBasis::Student;
  PairNormalization normalization = PairNormalization::SquaredCount;
  StudentPass student_pass = StudentPass::Single;

  // Layers 3, 6, 9 and the last one, keeping those that exist.
  static DistillationConfig standard(int num_layers);
  double weight(int layer) const;
  bool enabled(DistillObjective obj) const;
  std::set<int> layers() const { return {layer_set.begin(), layer_set.end()}; }
  // Throws ContractError when the layer set is empty or out of range for
  // either model, or a weight is negative.
  void validate(int teacher_layers, int student_layers) const;
};

void to_json(nlohmann::json& j, const DistillationConfig& c);
void from_json(const nlohmann::json& j, DistillationConfig& c);

struct DistillationBatchItem {
  WordTagImageTriple teacher_input;
  WordTagImageTriple student_input;  // code-switched target text
  std::optional<WordTagImageTriple> student_plain_input;
  AlignmentMatrix tag_matrix;   // student tag tokens x teacher tag tokens
  AlignmentMatrix word_matrix;  // student question tokens x teacher question tokens

  void validate() const;
};

// Mean over hidden dimensions of the squared difference.
double mse(const Vector& a, const Vector& b);

double loss_cls(const Vector& student_cls, const Vector& teacher_cls);
// Rows are the p image-region embeddings, in the same order on both sides.
double loss_img(const Matrix& student_regions, const Matrix& teacher_regions, std::size_t p);
double loss_tag(const Matrix& student_tags, const Matrix& teacher_tags, const AlignmentMatrix& a, std::size_t t);
double loss_cm(const Matrix& student_words, const Matrix& teacher_words, const AlignmentMatrix& b, std::size_t n);

struct LossTerm {
  int layer = 0;
  DistillObjective objective = DistillObjective::Cls;
  double raw = 0.0;    // lambda_m * objective, computed even when disabled
  double value = 0.0;  // contribution to the total: raw if enabled, else 0
  bool enabled = true;
};

struct DistillationLoss {
  double total = 0.0;
  std::vector<LossTerm> terms;

  double sum(DistillObjective obj) const;
  double raw_sum(DistillObjective obj) const;
  double raw_total() const;
};

DistillationLoss loss_distil(const DistillationBatchItem& item, const EncoderOutput& teacher_out,
                             const EncoderOutput& student_out, const DistillationConfig& cfg,
                             const EncoderOutput* student_plain_out = nullptr);

struct DistilGraph {
  ad::Var total;
  DistillationLoss breakdown;
};

// Tape version of loss_distil for differentiation w.r.t. the student.
DistilGraph build_distil(ad::Tape& tape, const DistillationBatchItem& item, const EncoderOutput& teacher_out,
                         const ForwardGraph& student, const DistillationConfig& cfg,
                         const ForwardGraph* student_plain = nullptr);

// Evaluation-mode teacher outputs for the layers in cfg.
EncoderOutput teacher_outputs(const Model& teacher, const DistillationBatchItem& item, const DistillationConfig& cfg);

struct DistillationStep {
  DistillationLoss loss;
  GradientResult gradients;
};

// Loss and student gradients for one item; the teacher is never tracked.
DistillationStep distillation_gradients(const EncoderOutput& teacher_out, const Model& student,
                                        const DistillationBatchItem& item, const DistillationConfig& cfg,
                                        std::span<const std::string> frozen = {},
                                        const ForwardOptions* train_opts = nullptr);

struct KdObjectiveValue {
  double sum = 0.0;
  double mean = 0.0;
  std::size_t count = 0;
};

// Sum over the parallel dataset of loss_distil, in evaluation mode.
KdObjectiveValue kd_objective(std::span<const DistillationBatchItem> dataset, const Model& teacher,
                              const Model& student, const DistillationConfig& cfg);

}  // namespace xlkd
