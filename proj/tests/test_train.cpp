#include "doctest.h"
#include "support.hpp"
#include "xlkd/errors.hpp"
#include "xlkd/train.hpp"

using namespace xlkd;

namespace {

struct TaskFixture {
  SynthCorpus corpus;
  AnswerVocabulary answers;
  ModelConfig cfg;
  std::vector<TaskExample> examples;

  explicit TaskFixture(std::size_t tasks = 32, double dropout = 0.1) {
    SynthSpec spec;
    spec.pairs = 4;
    spec.tasks = tasks;
    corpus = synth_corpus(spec, 21);
    const auto occ = answer_occurrences(corpus.task);
    answers = build_answer_vocab(occ, 3129);
    cfg.hidden_size = 32;
    cfg.num_layers = 4;
    cfg.num_heads = 2;
    cfg.intermediate_size = 64;
    cfg.feature_dim = spec.feature_dim;
    cfg.max_text_tokens = 48;
    cfg.max_image_tokens = 8;
    cfg.dropout = dropout;
    cfg.attention_dropout = dropout;
    cfg.vocab_size = static_cast<int>(corpus.student_vocab.size());
    cfg.num_classes = static_cast<int>(answers.size());
    examples = make_task_examples(corpus.task, corpus.student_vocab, answers, cfg, TargetMode::Single);
  }
};

TrainConfig task_config(int epochs, double lr, std::vector<std::string> frozen = {}, std::size_t batch = 8) {
  TrainConfig c;
  c.batch_size = batch;
  c.stages = {StageConfig{"s", epochs, std::nullopt, lr, std::move(frozen), StageObjective::Task}};
  return c;
}

bool same_parameters(const Model& a, const Model& b, const std::function<bool(const Parameter&)>& which) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    if (which(a.parameters()[i]) && a.parameters()[i].value != b.parameters()[i].value) return false;
  return true;
}

}  // namespace

TEST_CASE("zero gradient moves parameters by weight decay only; frozen ones stay") {
  const auto v = xlkd::test::make_vocab({"a"});
  Model m = init_model(xlkd::test::toy_config(static_cast<int>(v.size())), 1);
  const Model before = m;
  std::vector<Matrix> zero;
  for (const auto& p : m.parameters()) zero.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  std::vector<bool> trainable(m.parameters().size(), true);
  trainable[0] = false;
  AdamW opt(m, OptimizerConfig{});
  opt.step(m, zero, trainable, 0.1);
  CHECK(opt.steps() == 1);
  CHECK(m.parameters()[0].value == before.parameters()[0].value);
  for (std::size_t i = 1; i < m.parameters().size(); ++i) {
    const Matrix expect = before.parameters()[i].value * (1.0 - 0.1 * 0.05);
    CHECK((m.parameters()[i].value - expect).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("first AdamW step moves each entry by about lr against the gradient sign") {
  const auto v = xlkd::test::make_vocab({"a"});
  Model m = init_model(xlkd::test::toy_config(static_cast<int>(v.size())), 1);
  const Model before = m;
  std::vector<Matrix> grads;
  for (const auto& p : m.parameters()) grads.push_back(Matrix::Constant(p.value.rows(), p.value.cols(), 2.0));
  OptimizerConfig oc;
  oc.weight_decay = 0.0;
  AdamW opt(m, oc);
  opt.step(m, grads, std::vector<bool>(m.parameters().size(), true), 0.01);
  const Matrix delta = m.parameters()[0].value - before.parameters()[0].value;
  CHECK((delta.array() + 0.01).abs().maxCoeff() < 1e-9);
}

TEST_CASE("config validation and presets") {
  TrainConfig c;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = task_config(1, 0.0);
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = task_config(1, 1e-3);
  c.validation_interval = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);

  const auto kd = TrainConfig::kd_preset();
  REQUIRE(kd.stages.size() == 1);
  CHECK(kd.stages[0].epochs == 10);
  CHECK(kd.stages[0].learning_rate == 1e-4);
  CHECK(kd.stages[0].objective == StageObjective::Distillation);
  CHECK(kd.validation_interval == 500);
  const auto ft = TrainConfig::finetune_preset();
  REQUIRE(ft.stages.size() == 2);
  CHECK(ft.stages[0].epochs == 5);
  CHECK(ft.stages[0].learning_rate == 1e-4);
  CHECK(ft.stages[0].frozen_groups == std::vector<std::string>{"embeddings", "encoder"});
  CHECK(ft.stages[1].epochs == 15);
  CHECK(ft.stages[1].learning_rate == 5e-5);
  CHECK(TrainConfig::aug_preset().stages[1].epochs == 25);
  CHECK(ft.optimizer.eps == 1e-8);
  CHECK(ft.optimizer.beta1 == 0.9);
  CHECK(ft.optimizer.beta2 == 0.999);
  CHECK(ft.optimizer.weight_decay == 0.05);
}

TEST_CASE("train config json round trip") {
  auto c = TrainConfig::finetune_preset();
  c.stages[1].max_steps = 17;
  c.task_mode = TargetMode::Soft;
  c.seed = 99;
  const auto back = nlohmann::json(c).get<TrainConfig>();
  CHECK(nlohmann::json(back) == nlohmann::json(c));
  CHECK(back.stages[1].max_steps == 17);
}

TEST_CASE("task stage contracts") {
  TaskFixture f(8);
  Model m = init_model(f.cfg, 1);
  const std::span<const TaskExample> none;
  CHECK_THROWS_AS(run_finetune_stage(m, none, none, f.answers, task_config(1, 1e-3)), ContractError);
  auto wrong = task_config(1, 1e-3);
  wrong.stages[0].objective = StageObjective::Distillation;
  CHECK_THROWS_AS(run_finetune_stage(m, f.examples, none, f.answers, wrong), ContractError);
  auto cfg = f.cfg;
  cfg.num_classes += 1;
  Model other = init_model(cfg, 1);
  CHECK_THROWS_AS(run_aug_stage(other, f.examples, none, f.answers, task_config(1, 1e-3)), ContractError);
}

TEST_CASE("zero epochs leave the student unchanged") {
  TaskFixture f(8);
  Model m = init_model(f.cfg, 1);
  const Model before = m;
  const auto rec = run_finetune_stage(m, f.examples, {}, f.answers, task_config(0, 1e-3));
  CHECK(rec.steps.empty());
  CHECK(same_parameters(m, before, [](const Parameter&) { return true; }));
}

TEST_CASE("classifier-only stage leaves every other parameter bit-identical") {
  TaskFixture f(16);
  Model m = init_model(f.cfg, 1);
  const Model before = m;
  run_finetune_stage(m, f.examples, {}, f.answers, task_config(2, 1e-3, {"embeddings", "encoder"}));
  CHECK(same_parameters(m, before, [](const Parameter& p) { return p.group != "classifier"; }));
  CHECK_FALSE(same_parameters(m, before, [](const Parameter& p) { return p.group == "classifier"; }));
}

TEST_CASE("validation fires on exact interval multiples across stages") {
  TaskFixture f(10);
  Model m = init_model(f.cfg, 1);
  TrainConfig c = task_config(1, 1e-3, {}, 1);
  c.stages.push_back(StageConfig{"t", 2, 13, 1e-3, {}, StageObjective::Task});
  c.validation_interval = 4;
  const auto rec = run_finetune_stage(m, f.examples, {}, f.answers, c);
  CHECK(rec.total_steps() == 10 + 13);
  std::vector<long> at;
  for (const auto& v : rec.validations) at.push_back(v.step);
  CHECK(at == std::vector<long>{4, 8, 12, 16, 20});
  CHECK(rec.validations[2].stage == "t");
  for (std::size_t i = 0; i < rec.steps.size(); ++i) CHECK(rec.steps[i].step == static_cast<long>(i + 1));
}

TEST_CASE("best metric is the validation maximum and restore picks its weights") {
  TaskFixture f(12);
  Model m = init_model(f.cfg, 3);
  TrainConfig c = task_config(6, 3e-3, {}, 4);
  c.validation_interval = 2;
  xlkd::test::TempDir dir;
  c.checkpoint_dir = dir.path;
  const auto rec = run_finetune_stage(m, f.examples, {}, f.answers, c);
  REQUIRE(rec.best.has_value());
  double mx = -1.0;
  for (const auto& v : rec.validations) mx = std::max(mx, v.metric);
  CHECK(rec.best_metric == mx);
  CHECK(rec.validations[*rec.best].metric == mx);
  // The first maximum wins: later equal metrics do not replace it.
  for (std::size_t i = 0; i < *rec.best; ++i) CHECK(rec.validations[i].metric < mx);
  CHECK(std::filesystem::exists(rec.best_checkpoint));
  const auto snap = load_checkpoint(rec.best_checkpoint);
  CHECK(same_parameters(m, snap.model, [](const Parameter&) { return true; }));
  CHECK(task_accuracy(m, f.examples, TargetMode::Single) == mx);
}

TEST_CASE("identical configs and seeds reproduce the run") {
  TaskFixture f(8);
  Model a = init_model(f.cfg, 1), b = init_model(f.cfg, 1);
  TrainConfig c = task_config(3, 1e-3, {}, 4);
  c.validation_interval = 3;
  const auto ra = run_finetune_stage(a, f.examples, {}, f.answers, c);
  const auto rb = run_finetune_stage(b, f.examples, {}, f.answers, c);
  REQUIRE(ra.steps.size() == rb.steps.size());
  for (std::size_t i = 0; i < ra.steps.size(); ++i) CHECK(ra.steps[i].loss == rb.steps[i].loss);
  for (std::size_t i = 0; i < ra.validations.size(); ++i) CHECK(ra.validations[i].metric == rb.validations[i].metric);
  CHECK(same_parameters(a, b, [](const Parameter&) { return true; }));
}

TEST_CASE("soft mode trains on BCE targets") {
  SynthSpec spec;
  spec.pairs = 2;
  spec.tasks = 8;
  spec.annotations = 10;
  const auto corpus = synth_corpus(spec, 2);
  const auto answers = build_answer_vocab(answer_occurrences(corpus.task), 100);
  ModelConfig cfg = xlkd::test::toy_config(static_cast<int>(corpus.student_vocab.size()), 2,
                                           static_cast<int>(answers.size()));
  cfg.feature_dim = spec.feature_dim;
  cfg.max_image_tokens = 8;
  cfg.max_text_tokens = 48;
  const auto ex = make_task_examples(corpus.task, corpus.student_vocab, answers, cfg, TargetMode::Soft);
  Model m = init_model(cfg, 1);
  auto c = task_config(2, 1e-3, {}, 4);
  c.task_mode = TargetMode::Soft;
  const auto rec = run_finetune_stage(m, ex, {}, answers, c);
  CHECK(rec.total_steps() == 4);
  const double acc = task_accuracy(m, ex, TargetMode::Soft);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
}

TEST_CASE("run record and breakdown log round trip") {
  xlkd::test::TempDir dir;
  RunRecord r;
  r.config_echo = {{"seed", 3}};
  DistillationLoss b;
  b.terms = {{3, DistillObjective::Tag, 0.25, 0.0, false}, {3, DistillObjective::Cls, 0.5, 0.5, true}};
  b.total = 0.5;
  r.steps = {{1, "distill", 0.5, b}, {2, "distill", 0.25, std::nullopt}};
  r.validations = {{2, "distill", -0.3, 0.3}};
  r.best = 0;
  r.best_metric = -0.3;
  r.best_checkpoint = "x/best.ckpt.json";
  write_run_record(r, dir / "run.jsonl");
  const auto back = read_run_record(dir / "run.jsonl");
  CHECK(back.config_echo == r.config_echo);
  REQUIRE(back.steps.size() == 2);
  REQUIRE(back.steps[0].breakdown.has_value());
  CHECK(back.steps[0].breakdown->terms[0].raw == 0.25);
  CHECK(back.steps[0].breakdown->terms[0].value == 0.0);
  CHECK_FALSE(back.steps[0].breakdown->terms[0].enabled);
  CHECK_FALSE(back.steps[1].breakdown.has_value());
  CHECK(back.best == r.best);
  CHECK(back.best_metric == r.best_metric);
  CHECK(back.best_checkpoint == r.best_checkpoint);

  write_breakdown_log(r, dir / "b.jsonl");
  std::ifstream in(dir / "b.jsonl");
  std::string line;
  std::vector<nlohmann::json> lines;
  while (std::getline(in, line)) lines.push_back(nlohmann::json::parse(line));
  REQUIRE(lines.size() == 3);
  CHECK(lines[0]["objective"] == "tag");
  CHECK(lines[0]["layer"] == 3);
  CHECK(lines[2]["objective"] == "total");
  CHECK(lines[2]["raw"] == 0.75);
}

TEST_CASE("distillation stage: teacher untouched, loss falls, non-finite loss leaves a snapshot") {
  SynthSpec spec;
  spec.pairs = 8;
  const auto corpus = synth_corpus(spec, 5);
  ModelConfig tc = xlkd::test::toy_config(static_cast<int>(corpus.teacher_vocab.size()), 2);
  tc.feature_dim = spec.feature_dim;
  tc.max_image_tokens = 8;
  tc.max_text_tokens = 48;
  ModelConfig sc = tc;
  sc.vocab_size = static_cast<int>(corpus.student_vocab.size());
  std::vector<DistillationBatchItem> items;
  for (std::size_t i = 0; i < corpus.parallel.size(); ++i) {
    const auto& p = corpus.parallel[i];
    const auto mixed = code_mix(p.sentences(), p.alignment, corpus.student_vocab, corpus.teacher_vocab, {}, i);
    items.push_back(make_distillation_item(p, mixed, corpus.teacher_vocab, tc, corpus.student_vocab, sc));
  }
  const Model teacher = init_model(tc, 1);
  const Model teacher_copy = teacher;
  Model student = init_model(sc, 2);
  const auto dcfg = DistillationConfig::standard(2);
  TrainConfig c;
  c.batch_size = 4;
  c.validation_interval = 10;
  c.stages = {StageConfig{"distill", 10, std::nullopt, 1e-3, {}, StageObjective::Distillation}};
  const double start = kd_objective(items, teacher, student, dcfg).mean;
  const auto rec = run_kd_stage(teacher, student, items, {}, dcfg, c);
  CHECK(same_parameters(teacher, teacher_copy, [](const Parameter&) { return true; }));
  CHECK(rec.total_steps() == 20);
  CHECK(rec.validations.size() == 2);
  CHECK(kd_objective(items, teacher, student, dcfg).mean < start);
  CHECK(std::abs(rec.validations.back().loss + rec.validations.back().metric) == 0.0);
  for (const auto& s : rec.steps) {
    REQUIRE(s.breakdown.has_value());
    CHECK(std::abs(s.breakdown->total - s.loss) <= 1e-12);
  }

  Model zero_epochs = init_model(sc, 2);
  const Model untouched = zero_epochs;
  c.stages[0].epochs = 0;
  CHECK(run_kd_stage(teacher, zero_epochs, items, {}, dcfg, c).steps.empty());
  CHECK(same_parameters(zero_epochs, untouched, [](const Parameter&) { return true; }));

  xlkd::test::TempDir dir;
  Model broken = init_model(sc, 2);
  broken.param("embeddings.norm.beta")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  c.stages[0].epochs = 1;
  c.checkpoint_dir = dir.path;
  try {
    run_kd_stage(teacher, broken, items, {}, dcfg, c);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
  CHECK(std::filesystem::exists(dir / "diagnostic.ckpt.json"));
  CHECK(load_checkpoint(dir / "diagnostic.ckpt.json").metrics.at("stage") == "distill");
}

TEST_CASE("desk schedule memorizes a 32-example task from scratch") {
  TaskFixture f(32);
  REQUIRE(f.examples.size() == 32);
  Model m = init_model(f.cfg, 13);
  TrainConfig c;
  c.batch_size = 8;
  c.seed = 13;
  c.stages = {StageConfig{"classifier", 10, std::nullopt, 1e-3, {"embeddings", "encoder"}, StageObjective::Task},
              StageConfig{"full", 200, std::nullopt, 5e-4, {}, StageObjective::Task}};
  run_finetune_stage(m, f.examples, {}, f.answers, c);
  CHECK(task_accuracy(m, f.examples, TargetMode::Single) >= 0.95);
}
