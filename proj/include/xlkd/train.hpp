#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xlkd/answers.hpp"
#include "xlkd/data.hpp"
#include "xlkd/distill.hpp"
#include "xlkd/model.hpp"

namespace xlkd {

enum class StageObjective { Distillation, Task };

struct StageConfig {
  std::string name;
  int epochs = 1;
  std::optional<long> max_steps;  // caps the stage regardless of epochs
  double learning_rate = 1e-4;
  std::vector<std::string> frozen_groups;
  StageObjective objective = StageObjective::Task;
};

struct OptimizerConfig {
  double eps = 1e-8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.05;
};

/// Adam with decoupled weight decay. Frozen parameters are skipped entirely.
class AdamW {
 public:
  AdamW(const Model& model, OptimizerConfig config);
  void step(Model& model, std::span<const Matrix> grads, const std::vector<bool>& trainable, double lr);
  long steps() const { return t_; }

 private:
  OptimizerConfig config_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

struct TrainConfig {
  std::vector<StageConfig> stages;
  OptimizerConfig optimizer;
  std::size_t batch_size = 32;
  long validation_interval = 500;
  std::uint64_t seed = 0;
  TargetMode task_mode = TargetMode::Single;
  bool restore_best = true;            // reload the best validated weights when a run ends
  std::filesystem::path checkpoint_dir;  // empty: nothing written

  // Throws ContractError: no stages, lr <= 0, epochs < 0, batch or interval < 1.
  void validate() const;

  static TrainConfig kd_preset();        // 10 epochs at 1e-4
  static TrainConfig finetune_preset();  // 5 epochs classifier-only at 1e-4, then 15 at 5e-5
  static TrainConfig aug_preset();       // 5 epochs classifier-only at 1e-4, then 25 at 5e-5
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepRecord {
  long step = 0;  // 1-based, counted across the stages of one run
  std::string stage;
  double loss = 0.0;  // batch mean
  std::optional<DistillationLoss> breakdown;  // batch mean per term, distillation stages only
};

struct ValidationRecord {
  long step = 0;
  std::string stage;
  double metric = 0.0;  // higher is better
  double loss = 0.0;
};

struct RunRecord {
  std::vector<StepRecord> steps;
  std::vector<ValidationRecord> validations;
  std::optional<std::size_t> best;  // index into validations
  double best_metric = 0.0;
  std::filesystem::path best_checkpoint;
  nlohmann::json config_echo = nlohmann::json::object();

  long total_steps() const { return steps.empty() ? 0 : steps.back().step; }
};

// JSONL: one "config" line, then "step", "validation" and a final "best" line.
void write_run_record(const RunRecord& record, const std::filesystem::path& path);
RunRecord read_run_record(const std::filesystem::path& path);
// One line per (step, layer, objective) with value, raw and enabled, plus a
// per-step line with objective "total".
void write_breakdown_log(const RunRecord& record, const std::filesystem::path& path);

/// Optimizes the student on the layer-wise distillation loss only. Teacher
/// outputs are computed once in evaluation mode. The validation metric is
/// the negated mean distillation loss on `validation` (or on `train` when
/// empty). Throws NumericError on a non-finite loss after writing a
/// diagnostic snapshot into checkpoint_dir, if set.
RunRecord run_kd_stage(const Model& teacher, Model& student, std::span<const DistillationBatchItem> train,
                       std::span<const DistillationBatchItem> validation, const DistillationConfig& distill,
                       const TrainConfig& config);

/// Runs every task stage of `config` in order. The validation metric is
/// accuracy on `validation` (or on `train` when empty).
RunRecord run_finetune_stage(Model& student, std::span<const TaskExample> train,
                             std::span<const TaskExample> validation, const AnswerVocabulary& vocab,
                             const TrainConfig& config);

// Same machinery on machine-translated training data.
RunRecord run_aug_stage(Model& student, std::span<const TaskExample> train, std::span<const TaskExample> validation,
                        const AnswerVocabulary& vocab, const TrainConfig& config);

// Per-example score of the argmax prediction: 0/1 in single mode, the soft
// target score in soft mode.
double task_score(const Vector& logits, const TaskExample& example, TargetMode mode);
double task_accuracy(const Model& model, std::span<const TaskExample> examples, TargetMode mode);

}  // namespace xlkd
