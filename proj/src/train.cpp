#include "xlkd/train.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "xlkd/errors.hpp"

namespace xlkd {

AdamW::AdamW(const Model& model, OptimizerConfig config) : config_(config) {
  for (const auto& p : model.parameters()) {
    m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

void AdamW::step(Model& model, std::span<const Matrix> grads, const std::vector<bool>& trainable, double lr) {
  auto& params = model.parameters();
  if (grads.size() != params.size() || trainable.size() != params.size() || m_.size() != params.size()) {
    throw ContractError("AdamW: gradient count does not match the model");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable[i]) continue;
    Matrix& p = params[i].value;
    const Matrix& g = grads[i];
    p *= 1.0 - lr * config_.weight_decay;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseAbs2();
    p.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
  }
}

void TrainConfig::validate() const {
  if (stages.empty()) throw ContractError("train config has no stages");
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (validation_interval < 1) throw ContractError("validation_interval must be >= 1");
  for (const auto& s : stages) {
    if (!(s.learning_rate > 0.0)) throw ContractError("stage " + s.name + ": learning rate must be > 0");
    if (s.epochs < 0) throw ContractError("stage " + s.name + ": epochs must be >= 0");
    if (s.max_steps && *s.max_steps < 0) throw ContractError("stage " + s.name + ": max_steps must be >= 0");
  }
  if (optimizer.eps <= 0.0 || optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 < 0.0 ||
      optimizer.beta2 >= 1.0 || optimizer.weight_decay < 0.0) {
    throw ContractError("optimizer hyperparameters out of range");
  }
}

namespace {

const std::vector<std::string> kClassifierOnly{"embeddings", "encoder"};

TrainConfig two_stage(int first_epochs, int second_epochs) {
  TrainConfig c;
  c.batch_size = 128;
  c.stages = {StageConfig{"classifier", first_epochs, std::nullopt, 1e-4, kClassifierOnly, StageObjective::Task},
              StageConfig{"full", second_epochs, std::nullopt, 5e-5, {}, StageObjective::Task}};
  return c;
}

}  // namespace

TrainConfig TrainConfig::kd_preset() {
  TrainConfig c;
  c.batch_size = 128;
  c.stages = {StageConfig{"distill", 10, std::nullopt, 1e-4, {}, StageObjective::Distillation}};
  return c;
}

TrainConfig TrainConfig::finetune_preset() { return two_stage(5, 15); }
TrainConfig TrainConfig::aug_preset() { return two_stage(5, 25); }

NLOHMANN_JSON_SERIALIZE_ENUM(StageObjective, {{StageObjective::Distillation, "distillation"},
                                              {StageObjective::Task, "task"}})
NLOHMANN_JSON_SERIALIZE_ENUM(TargetMode, {{TargetMode::Single, "single"}, {TargetMode::Soft, "soft"}})

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json::object();
  auto& stages = j["stages"] = nlohmann::json::array();
  for (const auto& s : c.stages) {
    nlohmann::json js{{"name", s.name},
                      {"epochs", s.epochs},
                      {"learning_rate", s.learning_rate},
                      {"frozen_groups", s.frozen_groups},
                      {"objective", s.objective}};
    js["max_steps"] = s.max_steps ? nlohmann::json(*s.max_steps) : nlohmann::json(nullptr);
    stages.push_back(std::move(js));
  }
  j["optimizer"] = {{"eps", c.optimizer.eps},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"weight_decay", c.optimizer.weight_decay}};
  j["batch_size"] = c.batch_size;
  j["validation_interval"] = c.validation_interval;
  j["seed"] = c.seed;
  j["task_mode"] = c.task_mode;
  j["restore_best"] = c.restore_best;
  j["checkpoint_dir"] = c.checkpoint_dir.string();
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("stages")) {
    c.stages.clear();
    for (const auto& js : j.at("stages")) {
      StageConfig s;
      s.name = js.value("name", std::string("stage") + std::to_string(c.stages.size()));
      s.epochs = js.value("epochs", s.epochs);
      s.learning_rate = js.value("learning_rate", s.learning_rate);
      s.frozen_groups = js.value("frozen_groups", s.frozen_groups);
      s.objective = js.value("objective", s.objective);
      if (js.contains("max_steps") && !js.at("max_steps").is_null()) s.max_steps = js.at("max_steps").get<long>();
      c.stages.push_back(std::move(s));
    }
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  c.validation_interval = j.value("validation_interval", c.validation_interval);
  c.seed = j.value("seed", c.seed);
  c.task_mode = j.value("task_mode", c.task_mode);
  c.restore_best = j.value("restore_best", c.restore_best);
  c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir.string());
}

namespace {

nlohmann::json breakdown_json(const DistillationLoss& loss) {
  nlohmann::json terms = nlohmann::json::array();
  for (const auto& t : loss.terms) {
    terms.push_back({{"layer", t.layer},
                     {"objective", objective_name(t.objective)},
                     {"value", t.value},
                     {"raw", t.raw},
                     {"enabled", t.enabled}});
  }
  return terms;
}

DistillObjective objective_from(const std::string& s) {
  for (auto o : kAllObjectives)
    if (s == objective_name(o)) return o;
  throw FormatError("unknown objective " + s);
}

}  // namespace

void write_run_record(const RunRecord& record, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << nlohmann::json{{"type", "config"}, {"config", record.config_echo}}.dump() << '\n';
  for (const auto& s : record.steps) {
    nlohmann::json j{{"type", "step"}, {"step", s.step}, {"stage", s.stage}, {"loss", s.loss}};
    if (s.breakdown) {
      j["total"] = s.breakdown->total;
      j["terms"] = breakdown_json(*s.breakdown);
    }
    out << j.dump() << '\n';
  }
  for (const auto& v : record.validations) {
    out << nlohmann::json{{"type", "validation"}, {"step", v.step}, {"stage", v.stage}, {"metric", v.metric},
                          {"loss", v.loss}}
               .dump()
        << '\n';
  }
  nlohmann::json best{{"type", "best"}, {"checkpoint", record.best_checkpoint.string()}};
  best["index"] = record.best ? nlohmann::json(*record.best) : nlohmann::json(nullptr);
  best["metric"] = record.best ? nlohmann::json(record.best_metric) : nlohmann::json(nullptr);
  out << best.dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

void write_breakdown_log(const RunRecord& record, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& s : record.steps) {
    if (!s.breakdown) continue;
    for (const auto& t : s.breakdown->terms) {
      out << nlohmann::json{{"step", s.step},       {"layer", t.layer}, {"objective", objective_name(t.objective)},
                            {"value", t.value},     {"raw", t.raw},     {"enabled", t.enabled}}
                 .dump()
          << '\n';
    }
    out << nlohmann::json{{"step", s.step},
                          {"objective", "total"},
                          {"value", s.breakdown->total},
                          {"raw", s.breakdown->raw_total()},
                          {"loss", s.loss}}
               .dump()
        << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

RunRecord read_run_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  RunRecord r;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const std::string type = j.at("type");
      if (type == "config") {
        r.config_echo = j.at("config");
      } else if (type == "step") {
        StepRecord s{j.at("step"), j.at("stage"), j.at("loss"), std::nullopt};
        if (j.contains("terms")) {
          DistillationLoss b;
          b.total = j.at("total");
          for (const auto& t : j.at("terms")) {
            b.terms.push_back({t.at("layer"), objective_from(t.at("objective")), t.at("raw"), t.at("value"),
                               t.at("enabled")});
          }
          s.breakdown = std::move(b);
        }
        r.steps.push_back(std::move(s));
      } else if (type == "validation") {
        r.validations.push_back({j.at("step"), j.at("stage"), j.at("metric"), j.at("loss")});
      } else if (type == "best") {
        r.best_checkpoint = j.at("checkpoint").get<std::string>();
        if (!j.at("index").is_null()) {
          r.best = j.at("index").get<std::size_t>();
          r.best_metric = j.at("metric");
        }
      } else {
        throw FormatError("unknown record type " + type);
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return r;
}

double task_score(const Vector& logits, const TaskExample& example, TargetMode mode) {
  Eigen::Index arg = 0;
  logits.maxCoeff(&arg);
  if (mode == TargetMode::Single) return static_cast<int>(arg) == example.target.label ? 1.0 : 0.0;
  return arg < example.target.scores.size() ? example.target.scores(arg) : 0.0;
}

double task_accuracy(const Model& model, std::span<const TaskExample> examples, TargetMode mode) {
  if (examples.empty()) throw ContractError("task_accuracy: no examples");
  const std::set<int> last{model.config().num_layers};
  double s = 0.0;
  for (const auto& ex : examples) s += task_score(classify(model, forward(model, ex.input, last)), ex, mode);
  return s / static_cast<double>(examples.size());
}

namespace {

// Shared loop: shuffled mini-batches per epoch, one optimizer per stage,
// validation on exact multiples of the interval, best-snapshot tracking.
struct LoopHooks {
  std::size_t dataset_size = 0;
  // Returns the batch-mean loss; fills grads, the trainable mask and (for
  // distillation) the mean breakdown.
  std::function<double(const Model&, std::span<const std::size_t>, const StageConfig&, std::mt19937_64&,
                       GradientResult&, std::optional<DistillationLoss>&)>
      batch;
  std::function<ValidationRecord(const Model&)> validate;
};

void save_snapshot(const TrainConfig& cfg, const std::string& file, const Model& model, long step,
                   nlohmann::json metrics) {
  if (cfg.checkpoint_dir.empty()) return;
  std::filesystem::create_directories(cfg.checkpoint_dir);
  Checkpoint ck{model, step, std::move(metrics), nlohmann::json(cfg)};
  save_checkpoint(cfg.checkpoint_dir / file, ck);
}

RunRecord run_loop(Model& model, const TrainConfig& cfg, const LoopHooks& hooks) {
  cfg.validate();
  RunRecord rec;
  rec.config_echo = nlohmann::json(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::optional<Model> best_model;
  long step = 0;
  for (const auto& stage : cfg.stages) {
    AdamW opt(model, cfg.optimizer);
    const std::size_t n = hooks.dataset_size;
    const long per_epoch = static_cast<long>((n + cfg.batch_size - 1) / cfg.batch_size);
    long budget = per_epoch * stage.epochs;
    if (stage.max_steps) budget = std::min(budget, *stage.max_steps);
    spdlog::info("stage {}: {} steps at lr {}", stage.name, budget, stage.learning_rate);
    std::vector<std::size_t> order(n);
    long done = 0;
    while (done < budget) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < n && done < budget; start += cfg.batch_size, ++done) {
        const std::span<const std::size_t> batch(order.data() + start, std::min(cfg.batch_size, n - start));
        GradientResult g;
        std::optional<DistillationLoss> breakdown;
        double loss = 0.0;
        try {
          loss = hooks.batch(model, batch, stage, rng, g, breakdown);
        } catch (const NumericError& e) {
          save_snapshot(cfg, "diagnostic.ckpt.json", model, step,
                        {{"stage", stage.name}, {"step", step + 1}, {"error", e.what()}});
          throw NumericError("stage " + stage.name + " step " + std::to_string(step + 1) + ": " + e.what() +
                             (cfg.checkpoint_dir.empty() ? "" : " (snapshot in " + cfg.checkpoint_dir.string() + ")"));
        }
        opt.step(model, g.grads, g.trainable, stage.learning_rate);
        ++step;
        rec.steps.push_back({step, stage.name, loss, std::move(breakdown)});
        if (step % cfg.validation_interval == 0) {
          ValidationRecord v = hooks.validate(model);
          v.step = step;
          v.stage = stage.name;
          spdlog::info("step {}: validation metric {:.6f}", step, v.metric);
          rec.validations.push_back(v);
          if (!rec.best || v.metric > rec.best_metric) {
            rec.best = rec.validations.size() - 1;
            rec.best_metric = v.metric;
            best_model = model;
            save_snapshot(cfg, "best.ckpt.json", model, step, {{"metric", v.metric}, {"loss", v.loss}});
            if (!cfg.checkpoint_dir.empty()) rec.best_checkpoint = cfg.checkpoint_dir / "best.ckpt.json";
          }
        }
      }
      if (n == 0) break;
    }
  }
  if (cfg.restore_best && best_model) model = std::move(*best_model);
  return rec;
}

}  // namespace

RunRecord run_kd_stage(const Model& teacher, Model& student, std::span<const DistillationBatchItem> train,
                       std::span<const DistillationBatchItem> validation, const DistillationConfig& distill,
                       const TrainConfig& config) {
  if (train.empty()) throw ContractError("run_kd_stage: empty dataset");
  distill.validate(teacher.config().num_layers, student.config().num_layers);
  if (teacher.config().hidden_size != student.config().hidden_size) {
    throw ContractError("teacher and student hidden sizes differ");
  }
  for (const auto& s : config.stages) {
    if (s.objective != StageObjective::Distillation) throw ContractError("run_kd_stage: stage " + s.name + " is not a distillation stage");
  }
  std::vector<EncoderOutput> teacher_out;
  teacher_out.reserve(train.size());
  for (const auto& item : train) {
    item.validate();
    teacher_out.push_back(teacher_outputs(teacher, item, distill));
  }
  const auto val = validation.empty() ? train : validation;

  LoopHooks hooks;
  hooks.dataset_size = train.size();
  hooks.batch = [&](const Model& model, std::span<const std::size_t> batch, const StageConfig& stage,
                    std::mt19937_64& rng, GradientResult& g, std::optional<DistillationLoss>& breakdown) {
    ForwardOptions opts;
    opts.training = true;
    opts.rng = &rng;
    opts.retain_layers = distill.layers();
    const double inv = 1.0 / static_cast<double>(batch.size());
    DistillationLoss mean;
    g = gradients(
        model,
        [&](ModelBinding& b) {
          std::vector<ad::Var> parts;
          for (std::size_t idx : batch) {
            const auto& item = train[idx];
            ForwardGraph s = build_forward(b, item.student_input, opts);
            std::optional<ForwardGraph> plain;
            if (distill.student_pass == StudentPass::TwoPass) {
              if (!item.student_plain_input) throw ContractError("two-pass distillation needs student_plain_input");
              plain = build_forward(b, *item.student_plain_input, opts);
            }
            DistilGraph dg = build_distil(b.tape(), item, teacher_out[idx], s, distill, plain ? &*plain : nullptr);
            if (mean.terms.empty()) {
              mean.terms = dg.breakdown.terms;
              for (auto& t : mean.terms) t.raw = t.value = 0.0;
            }
            for (std::size_t k = 0; k < mean.terms.size(); ++k) {
              mean.terms[k].raw += inv * dg.breakdown.terms[k].raw;
              mean.terms[k].value += inv * dg.breakdown.terms[k].value;
            }
            parts.push_back(dg.total);
          }
          const std::vector<double> w(parts.size(), inv);
          return ad::weighted_sum(b.tape(), parts, w);
        },
        stage.frozen_groups);
    mean.total = 0.0;
    for (const auto& t : mean.terms) mean.total += t.value;
    breakdown = std::move(mean);
    return g.loss;
  };
  hooks.validate = [&](const Model& model) {
    const auto v = kd_objective(val, teacher, model, distill);
    return ValidationRecord{0, "", -v.mean, v.mean};
  };
  return run_loop(student, config, hooks);
}

namespace {

RunRecord run_task(Model& student, std::span<const TaskExample> train, std::span<const TaskExample> validation,
                   const AnswerVocabulary& vocab, const TrainConfig& config, const char* who) {
  if (train.empty()) throw ContractError(std::string(who) + ": empty dataset");
  if (static_cast<std::size_t>(student.config().num_classes) != vocab.size()) {
    throw ContractError(std::string(who) + ": model has " + std::to_string(student.config().num_classes) +
                        " classes but the answer vocabulary has " + std::to_string(vocab.size()));
  }
  for (const auto& s : config.stages) {
    if (s.objective != StageObjective::Task) throw ContractError(std::string(who) + ": stage " + s.name + " is not a task stage");
  }
  for (const auto& ex : train) {
    check_triple(student.config(), ex.input);
    if (config.task_mode == TargetMode::Single && ex.target.label < 0) {
      throw ContractError(std::string(who) + ": single-label example without a covered answer");
    }
  }
  const auto val = validation.empty() ? train : validation;
  const int last = student.config().num_layers;

  LoopHooks hooks;
  hooks.dataset_size = train.size();
  hooks.batch = [&](const Model& model, std::span<const std::size_t> batch, const StageConfig& stage,
                    std::mt19937_64& rng, GradientResult& g, std::optional<DistillationLoss>&) {
    ForwardOptions opts;
    opts.training = true;
    opts.rng = &rng;
    opts.retain_layers = {last};
    g = gradients(
        model,
        [&](ModelBinding& b) {
          std::vector<ad::Var> parts;
          for (std::size_t idx : batch) {
            const auto& ex = train[idx];
            ad::Var logits = build_logits(b, build_forward(b, ex.input, opts));
            parts.push_back(config.task_mode == TargetMode::Single
                                ? ad::softmax_cross_entropy(b.tape(), logits, ex.target.label)
                                : ad::bce_with_logits(b.tape(), logits, ex.target.scores));
          }
          const std::vector<double> w(parts.size(), 1.0 / static_cast<double>(parts.size()));
          return ad::weighted_sum(b.tape(), parts, w);
        },
        stage.frozen_groups);
    return g.loss;
  };
  hooks.validate = [&](const Model& model) {
    return ValidationRecord{0, "", task_accuracy(model, val, config.task_mode), 0.0};
  };
  return run_loop(student, config, hooks);
}

}  // namespace

RunRecord run_finetune_stage(Model& student, std::span<const TaskExample> train,
                             std::span<const TaskExample> validation, const AnswerVocabulary& vocab,
                             const TrainConfig& config) {
  return run_task(student, train, validation, vocab, config, "run_finetune_stage");
}

RunRecord run_aug_stage(Model& student, std::span<const TaskExample> train, std::span<const TaskExample> validation,
                        const AnswerVocabulary& vocab, const TrainConfig& config) {
  return run_task(student, train, validation, vocab, config, "run_aug_stage");
}

}  // namespace xlkd
