// xlkd: synthetic data, answer vocabularies, code-mixing, distillation,
// fine-tuning, evaluation and embedding export from one binary.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "xlkd/answers.hpp"
#include "xlkd/codemix.hpp"
#include "xlkd/data.hpp"
#include "xlkd/distill.hpp"
#include "xlkd/errors.hpp"
#include "xlkd/metrics.hpp"
#include "xlkd/model.hpp"
#include "xlkd/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace xlkd;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json model_defaults() {
  ModelConfig m;
  m.hidden_size = 32;
  m.num_layers = 4;
  m.num_heads = 2;
  m.intermediate_size = 64;
  m.feature_dim = 0;  // taken from the data
  m.max_text_tokens = 48;
  m.max_image_tokens = 8;
  m.dropout = 0.1;
  m.attention_dropout = 0.1;
  m.vocab_size = 0;   // taken from the vocabulary
  m.num_classes = 0;  // taken from the answer vocabulary
  return m;
}

TrainConfig desk_train(const std::string& command) {
  TrainConfig t;
  t.batch_size = 8;
  t.validation_interval = 500;
  if (command == "distill") {
    t.stages = {StageConfig{"distill", 70, 500L, 1e-3, {}, StageObjective::Distillation}};
  } else {
    const int full = command == "aug" ? 250 : 200;
    t.stages = {StageConfig{"classifier", 10, std::nullopt, 1e-3, {"embeddings", "encoder"}, StageObjective::Task},
                StageConfig{"full", full, std::nullopt, 5e-4, {}, StageObjective::Task}};
  }
  return t;
}

TrainConfig full_train(const std::string& command) {
  if (command == "distill") return TrainConfig::kd_preset();
  return command == "aug" ? TrainConfig::aug_preset() : TrainConfig::finetune_preset();
}

json defaults(const std::string& command, const std::string& preset) {
  json d;
  d["seed"] = 13;
  d["model"] = model_defaults();
  d["teacher_model"] = model_defaults();
  d["codemix"] = {{"ratio", 0.15}, {"denominator", "all_words"}, {"sampling", "exact_count"}};
  json dist = DistillationConfig{};
  d["distill"] = dist;
  if (preset == "full") {
    d["train"] = full_train(command);
  } else if (preset == "desk") {
    d["train"] = desk_train(command);
  } else {
    throw UsageError("unknown preset '" + preset + "' (desk | full)");
  }
  // Unset train.seed follows the top-level seed.
  d["train"].erase("seed");
  d["answers"] = {{"top_k", 3129}};
  d["eval"] = {{"rules", "japanese"}};
  return d;
}

// Dotted path into the config; numeric segments index arrays.
void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &cfg;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const bool last = i + 1 == parts.size();
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(parts[i]);
      } catch (const std::exception&) {
        throw UsageError("--set " + key + ": '" + parts[i] + "' is not an array index");
      }
      if (idx >= node->size()) throw UsageError("--set " + key + ": index " + parts[i] + " out of range");
      node = &(*node)[idx];
    } else {
      if (!node->is_object() && !node->is_null()) throw UsageError("--set " + key + ": '" + parts[i] + "' is not an object");
      node = &(*node)[parts[i]];
    }
    if (last) *node = value;
  }
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
};

json resolve(const std::string& command, const Common& c) {
  json cfg = defaults(command, c.preset);
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw IoError("cannot read config " + c.config_path);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw FormatError("config " + c.config_path + ": " + e.what());
    }
    cfg.merge_patch(file);
  }
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed) cfg["seed"] = *c.seed;
  return cfg;
}

fs::path output_dir(const std::string& command, const Common& c) {
  const char* env = std::getenv("XLKD_OUTPUT_ROOT");
  const fs::path root = env && *env ? fs::path(env) : fs::path(".");
  fs::path out = c.out.empty() ? root / command : fs::path(c.out);
  if (out.is_relative() && !c.out.empty()) out = root / out;
  fs::create_directories(out);
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

CodeMixOptions codemix_options(const json& j) {
  CodeMixOptions o;
  o.ratio = j.value("ratio", o.ratio);
  const std::string den = j.value("denominator", std::string("all_words"));
  const std::string smp = j.value("sampling", std::string("exact_count"));
  if (den == "all_words") {
    o.denominator = MixDenominator::AllWords;
  } else if (den == "eligible_words") {
    o.denominator = MixDenominator::EligibleWords;
  } else {
    throw FormatError("codemix.denominator must be all_words or eligible_words");
  }
  if (smp == "exact_count") {
    o.sampling = MixSampling::ExactCount;
  } else if (smp == "bernoulli") {
    o.sampling = MixSampling::Bernoulli;
  } else {
    throw FormatError("codemix.sampling must be exact_count or bernoulli");
  }
  return o;
}

std::optional<FeatureStore> features_from(const std::string& index) {
  if (index.empty()) return std::nullopt;
  return FeatureStore::load(index);
}

std::vector<ExampleRecord> load_task(const std::string& path, const std::optional<FeatureStore>& fs_, bool answers) {
  LoadOptions o;
  o.schema = Schema::Task;
  o.require_answers = answers;
  o.features = fs_ ? &*fs_ : nullptr;
  return load_dataset(path, o).task;
}

std::vector<ParallelRecord> load_parallel(const std::string& path, const std::optional<FeatureStore>& fs_) {
  LoadOptions o;
  o.schema = Schema::Parallel;
  o.features = fs_ ? &*fs_ : nullptr;
  return load_dataset(path, o).parallel;
}

int feature_dim_of(const ExampleRecord& r) {
  if (r.features.cols() == 0) throw ContractError("record " + r.question_id + " has no features");
  return static_cast<int>(r.features.cols());
}

ModelConfig model_config(const json& j, const SubwordVocab& vocab, int feature_dim, int classes) {
  ModelConfig m = j.get<ModelConfig>();
  if (m.vocab_size == 0) m.vocab_size = static_cast<int>(vocab.size());
  if (m.feature_dim == 0) m.feature_dim = feature_dim;
  if (m.num_classes == 0) m.num_classes = classes;
  if (static_cast<std::size_t>(m.vocab_size) != vocab.size()) {
    throw ContractError("model vocab_size " + std::to_string(m.vocab_size) + " differs from the vocabulary size " +
                        std::to_string(vocab.size()));
  }
  m.validate();
  return m;
}

// ---- commands ---------------------------------------------------------------

struct SynthArgs {
  SynthSpec spec;
};

json cmd_synth(const Common& c, const SynthArgs& a) {
  json cfg = resolve("synth", c);
  json spec{{"pairs", a.spec.pairs},
            {"tasks", a.spec.tasks},
            {"english_words", a.spec.english_words},
            {"object_classes", a.spec.object_classes},
            {"feature_dim", a.spec.feature_dim},
            {"regions_per_image", a.spec.regions_per_image},
            {"tags_per_image", a.spec.tags_per_image},
            {"min_words", a.spec.min_words},
            {"max_words", a.spec.max_words},
            {"eligibility", a.spec.eligibility},
            {"unaligned_rate", a.spec.unaligned_rate},
            {"reorder_rate", a.spec.reorder_rate},
            {"annotations", a.spec.annotations},
            {"feature_noise", a.spec.feature_noise}};
  if (cfg.contains("synth")) spec.merge_patch(cfg["synth"]);
  cfg["synth"] = spec;
  SynthSpec s;
  s.pairs = spec["pairs"];
  s.tasks = spec["tasks"];
  s.english_words = spec["english_words"];
  s.object_classes = spec["object_classes"];
  s.feature_dim = spec["feature_dim"];
  s.regions_per_image = spec["regions_per_image"];
  s.tags_per_image = spec["tags_per_image"];
  s.min_words = spec["min_words"];
  s.max_words = spec["max_words"];
  s.eligibility = spec["eligibility"];
  s.unaligned_rate = spec["unaligned_rate"];
  s.reorder_rate = spec["reorder_rate"];
  s.annotations = spec["annotations"];
  s.feature_noise = spec["feature_noise"];
  const auto corpus = synth_corpus(s, cfg["seed"].get<std::uint64_t>());
  const fs::path out = output_dir("synth", c);
  dump_vocab(corpus.teacher_vocab, out / "teacher_vocab.txt");
  dump_vocab(corpus.student_vocab, out / "student_vocab.txt");
  dump_parallel_dataset(corpus.parallel, out / "parallel.jsonl");
  dump_task_dataset(corpus.task, out / "task.jsonl");
  {
    std::ofstream tr(out / "answer_translations.tsv");
    for (const auto& [en, tg] : corpus.answer_translations) tr << en << '\t' << tg << '\n';
  }
  write_json(out / "config.json", cfg);
  return {{"command", "synth"},
          {"output", out.string()},
          {"pairs", corpus.parallel.size()},
          {"tasks", corpus.task.size()},
          {"config", cfg}};
}

struct VocabArgs {
  std::string answers_path;
  std::string translations;
  std::string schema = "task";
  std::string side = "target";
};

json cmd_vocab(const Common& c, const VocabArgs& a) {
  json cfg = resolve("vocab", c);
  std::vector<ExampleRecord> records;
  if (a.schema == "parallel") {
    LoadOptions o;
    o.schema = Schema::Parallel;
    for (auto& p : load_dataset(a.answers_path, o).parallel) records.push_back(a.side == "source" ? p.source : p.target);
  } else {
    records = load_task(a.answers_path, std::nullopt, true);
  }
  const auto occ = answer_occurrences(records);
  const std::size_t k = cfg["answers"]["top_k"].get<std::size_t>();
  AnswerVocabulary v = build_answer_vocab(occ, k);
  const std::size_t before = v.size();
  if (!a.translations.empty()) v = merge_by_translation(v, load_translations(a.translations));
  cfg["answers"]["translations"] = a.translations;
  const fs::path out = output_dir("vocab", c);
  save_answer_vocab(v, out / "answers.tsv");
  json report{{"classes", v.size()}, {"classes_before_merge", before}, {"coverage", v.coverage()}, {"config", cfg}};
  write_json(out / "vocab_report.json", report);
  report["command"] = "vocab";
  report["output"] = out.string();
  return report;
}

struct CodemixArgs {
  std::string parallel, teacher_vocab, student_vocab, features;
};

json cmd_codemix(const Common& c, const CodemixArgs& a) {
  json cfg = resolve("codemix", c);
  const auto opts = codemix_options(cfg["codemix"]);
  const auto fstore = features_from(a.features);
  const auto records = load_parallel(a.parallel, fstore);
  const auto tv = load_vocab(a.teacher_vocab);
  const auto sv = load_vocab(a.student_vocab);
  std::vector<SentencePair> pairs;
  std::vector<WordAlignment> aligns;
  for (const auto& r : records) {
    pairs.push_back(r.sentences());
    aligns.push_back(r.alignment);
  }
  const auto mixed = code_mix_corpus(pairs, aligns, sv, tv, opts, cfg["seed"].get<std::uint64_t>());
  const fs::path out = output_dir("codemix", c);
  std::ofstream f(out / "codemix.jsonl");
  std::size_t replaced = 0, words = 0;
  for (const auto& m : mixed) {
    json rep = json::array();
    for (const auto& r : m.replaced) rep.push_back({r.target_word, r.source_word});
    f << json{{"origin", m.origin}, {"question_id", records[m.origin].target.question_id}, {"text", m.text()},
              {"replaced", rep}}
             .dump()
      << '\n';
    replaced += m.replaced.size();
    words += m.words.size();
  }
  f.close();
  if (!f) throw IoError("write failed: " + (out / "codemix.jsonl").string());
  write_json(out / "config.json", cfg);
  return {{"command", "codemix"}, {"output", out.string()}, {"sentences", mixed.size()},
          {"replaced", replaced},  {"words", words},              {"config", cfg}};
}

struct DistillArgs {
  std::string parallel, validation, teacher_vocab, student_vocab, teacher, student, features;
  bool no_cls = false, no_img = false, no_tag = false, no_cm = false, last_layer_only = false;
};

std::vector<DistillationBatchItem> build_items(const std::vector<ParallelRecord>& records, const SubwordVocab& tv,
                                               const ModelConfig& tc, const SubwordVocab& sv, const ModelConfig& sc,
                                               const CodeMixOptions& mix, std::uint64_t seed, bool two_pass) {
  std::vector<DistillationBatchItem> items;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto mixed = code_mix(records[i].sentences(), records[i].alignment, sv, tv, mix, seed + i, i);
    items.push_back(make_distillation_item(records[i], mixed, tv, tc, sv, sc, {two_pass}));
  }
  return items;
}

json cmd_distill(const Common& c, const DistillArgs& a) {
  json cfg = resolve("distill", c);
  const std::uint64_t seed = cfg["seed"];
  const auto fstore = features_from(a.features);
  const auto records = load_parallel(a.parallel, fstore);
  if (records.empty()) throw ContractError("distill: empty parallel dataset");
  const auto tv = load_vocab(a.teacher_vocab);
  const auto sv = load_vocab(a.student_vocab);
  const int fdim = feature_dim_of(records.front().source);

  Model teacher, student;
  if (!a.teacher.empty()) {
    teacher = load_checkpoint(a.teacher).model;
    cfg["teacher_model"] = teacher.config();
  } else {
    const auto tc = model_config(cfg["teacher_model"], tv, fdim, 1);
    cfg["teacher_model"] = tc;
    teacher = init_model(tc, seed);
  }
  if (!a.student.empty()) {
    student = load_checkpoint(a.student).model;
    cfg["model"] = student.config();
  } else {
    const auto sc = model_config(cfg["model"], sv, fdim, 1);
    cfg["model"] = sc;
    student = init_model(sc, seed + 1);
  }
  if (static_cast<std::size_t>(teacher.config().vocab_size) != tv.size() ||
      static_cast<std::size_t>(student.config().vocab_size) != sv.size()) {
    throw ContractError("checkpoint vocabulary sizes do not match the vocabulary files");
  }

  DistillationConfig dc = cfg["distill"].get<DistillationConfig>();
  const int last = student.config().num_layers;
  if (dc.layer_set.empty()) dc.layer_set = DistillationConfig::standard(last).layer_set;
  if (a.last_layer_only) dc.layer_set = {last};
  if (a.no_cls) dc.enable_cls = false;
  if (a.no_img) dc.enable_img = false;
  if (a.no_tag) dc.enable_tag = false;
  if (a.no_cm) dc.enable_cm = false;
  dc.validate(teacher.config().num_layers, last);
  cfg["distill"] = dc;

  TrainConfig tcfg = cfg["train"].get<TrainConfig>();
  const fs::path out = output_dir("distill", c);
  if (tcfg.checkpoint_dir.empty()) tcfg.checkpoint_dir = out / "checkpoints";
  if (!cfg["train"].contains("seed")) tcfg.seed = seed;
  cfg["train"] = tcfg;
  const auto mix = codemix_options(cfg["codemix"]);
  cfg["codemix"]["ratio"] = mix.ratio;
  const bool two = dc.student_pass == StudentPass::TwoPass;

  const auto items = build_items(records, tv, teacher.config(), sv, student.config(), mix, seed, two);
  std::vector<DistillationBatchItem> val;
  if (!a.validation.empty()) {
    val = build_items(load_parallel(a.validation, fstore), tv, teacher.config(), sv, student.config(), mix, seed, two);
  }
  const double initial = kd_objective(items, teacher, student, dc).mean;
  RunRecord rec = run_kd_stage(teacher, student, items, val, dc, tcfg);
  const double final_loss = kd_objective(items, teacher, student, dc).mean;
  rec.config_echo = cfg;
  write_run_record(rec, out / "run.jsonl");
  write_breakdown_log(rec, out / "breakdown.jsonl");
  save_checkpoint(out / "student.ckpt.json", {student, rec.total_steps(), json{{"kd_loss", final_loss}}, cfg});
  if (a.teacher.empty()) save_checkpoint(out / "teacher.ckpt.json", {teacher, 0, json::array(), cfg});
  json summary{{"command", "distill"},
               {"output", out.string()},
               {"steps", rec.total_steps()},
               {"initial_loss", initial},
               {"final_loss", final_loss},
               {"validations", rec.validations.size()},
               {"config", cfg}};
  write_json(out / "summary.json", summary);
  return summary;
}

struct TaskArgs {
  std::string task, validation, vocab, answers, init, features;
};

// Copies every non-classifier parameter of `from` into a model sized for
// `classes` answers.
Model with_classes(const Model& from, int classes, std::uint64_t seed) {
  if (from.config().num_classes == classes) return from;
  ModelConfig mc = from.config();
  mc.num_classes = classes;
  Model m = init_model(mc, seed);
  for (auto& p : m.parameters()) {
    if (p.group != "classifier") p.value = from.param(p.name);
  }
  return m;
}

json cmd_task(const std::string& command, const Common& c, const TaskArgs& a) {
  json cfg = resolve(command, c);
  const std::uint64_t seed = cfg["seed"];
  const auto fstore = features_from(a.features);
  const auto train = load_task(a.task, fstore, true);
  if (train.empty()) throw ContractError(command + ": empty dataset");
  const auto vocab = load_vocab(a.vocab);
  const fs::path out = output_dir(command, c);

  AnswerVocabulary answers;
  if (!a.answers.empty()) {
    answers = load_answer_vocab(a.answers);
  } else {
    answers = build_answer_vocab(answer_occurrences(train), cfg["answers"]["top_k"].get<std::size_t>());
    save_answer_vocab(answers, out / "answers.tsv");
  }
  const int classes = static_cast<int>(answers.size());

  Model model;
  if (!a.init.empty()) {
    model = with_classes(load_checkpoint(a.init).model, classes, seed);
    if (static_cast<std::size_t>(model.config().vocab_size) != vocab.size()) {
      throw ContractError("initial checkpoint vocabulary size does not match " + a.vocab);
    }
  } else {
    model = init_model(model_config(cfg["model"], vocab, feature_dim_of(train.front()), classes), seed);
  }
  cfg["model"] = model.config();
  cfg["init"] = a.init;

  TrainConfig tcfg = cfg["train"].get<TrainConfig>();
  if (tcfg.checkpoint_dir.empty()) tcfg.checkpoint_dir = out / "checkpoints";
  if (!cfg["train"].contains("seed")) tcfg.seed = seed;
  cfg["train"] = tcfg;

  const auto examples = make_task_examples(train, vocab, answers, model.config(), tcfg.task_mode);
  std::vector<TaskExample> val;
  if (!a.validation.empty()) {
    const auto vrec = load_task(a.validation, fstore, true);
    val = make_task_examples(vrec, vocab, answers, model.config(), tcfg.task_mode);
  }
  RunRecord rec = command == "aug" ? run_aug_stage(model, examples, val, answers, tcfg)
                                   : run_finetune_stage(model, examples, val, answers, tcfg);
  rec.config_echo = cfg;
  const double acc = task_accuracy(model, examples, tcfg.task_mode);
  write_run_record(rec, out / "run.jsonl");
  save_checkpoint(out / "model.ckpt.json", {model, rec.total_steps(), json{{"train_accuracy", acc}}, cfg});
  json summary{{"command", command},
               {"output", out.string()},
               {"steps", rec.total_steps()},
               {"examples", examples.size()},
               {"skipped", train.size() - examples.size()},
               {"train_accuracy", acc},
               {"validations", rec.validations.size()},
               {"config", cfg}};
  if (rec.best) summary["best_metric"] = rec.best_metric;
  write_json(out / "summary.json", summary);
  return summary;
}

struct EvalArgs {
  std::string task, vocab, answers, model, features;
};

json cmd_eval(const Common& c, const EvalArgs& a) {
  json cfg = resolve("eval", c);
  const auto fstore = features_from(a.features);
  const auto records = load_task(a.task, fstore, true);
  const auto vocab = load_vocab(a.vocab);
  const auto answers = load_answer_vocab(a.answers);
  const Model model = load_checkpoint(a.model).model;
  const std::string rules_name = cfg["eval"].value("rules", std::string("japanese"));
  std::vector<TypeRule> rules;
  if (rules_name == "japanese") {
    rules = japanese_question_rules();
  } else if (rules_name != "none") {
    throw FormatError("eval.rules must be japanese or none");
  }
  const auto ev = evaluate(model, records, vocab, answers, rules);
  const fs::path out = output_dir("eval", c);
  write_predictions(ev.predictions, out / "predictions.jsonl");
  json report = to_json(ev.report);
  report["config"] = cfg;
  report["model"] = a.model;
  write_json(out / "report.json", report);
  report["command"] = "eval";
  report["output"] = out.string();
  return report;
}

struct ExportArgs {
  std::string task, vocab, model, tokens, features;
  int layer = 0;
};

json cmd_export(const Common& c, const ExportArgs& a) {
  json cfg = resolve("export-embeddings", c);
  const auto fstore = features_from(a.features);
  const auto records = load_task(a.task, fstore, false);
  const auto vocab = load_vocab(a.vocab);
  const Model model = load_checkpoint(a.model).model;
  std::set<std::string> filter;
  std::stringstream ss(a.tokens);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) filter.insert(tok);
  }
  const int layer = a.layer > 0 ? a.layer : model.config().num_layers;
  const fs::path out = output_dir("export-embeddings", c);
  const std::size_t rows = export_embeddings(model, records, vocab, filter, layer, out / "embeddings.tsv");
  cfg["export"] = {{"tokens", std::vector<std::string>(filter.begin(), filter.end())}, {"layer", layer}};
  write_json(out / "config.json", cfg);
  return {{"command", "export-embeddings"}, {"output", out.string()}, {"rows", rows}, {"config", cfg}};
}

void print_error(const std::string& type, const std::string& message, const std::string& command) {
  std::cerr << json{{"error", {{"type", type}, {"message", message}, {"command", command}}}}.dump() << std::endl;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "JSON config merged over the defaults");
  sub->add_option("--set", c.overrides, "Override one config value: dotted.key=value")->take_all();
  sub->add_option("--out", c.out, "Output directory (relative paths resolve under $XLKD_OUTPUT_ROOT)");
  sub->add_option("--preset", c.preset, "Schedule defaults: desk or full");
  sub->add_option("--seed", c.seed, "Random seed");
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("xlkd");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%l] %v");

  CLI::App app{"Cross-lingual distillation toolkit for fusion-encoder VQA models"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  bool quiet = false, verbose = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  Common common;
  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic bilingual corpus");
  add_common(s, common);
  s->add_option("--pairs", synth.spec.pairs);
  s->add_option("--tasks", synth.spec.tasks);
  s->add_option("--english-words", synth.spec.english_words);
  s->add_option("--object-classes", synth.spec.object_classes);
  s->add_option("--feature-dim", synth.spec.feature_dim);
  s->add_option("--regions", synth.spec.regions_per_image);
  s->add_option("--tags", synth.spec.tags_per_image);
  s->add_option("--min-words", synth.spec.min_words);
  s->add_option("--max-words", synth.spec.max_words);
  s->add_option("--eligibility", synth.spec.eligibility);
  s->add_option("--unaligned-rate", synth.spec.unaligned_rate);
  s->add_option("--reorder-rate", synth.spec.reorder_rate);
  s->add_option("--annotations", synth.spec.annotations);
  s->add_option("--feature-noise", synth.spec.feature_noise);

  VocabArgs vocab;
  auto* v = app.add_subcommand("vocab", "Build (and optionally merge) the answer vocabulary");
  add_common(v, common);
  v->add_option("--data", vocab.answers_path, "Task or parallel JSONL")->required();
  v->add_option("--schema", vocab.schema)->check(CLI::IsMember({"task", "parallel"}));
  v->add_option("--side", vocab.side, "Parallel side to read answers from")->check(CLI::IsMember({"source", "target"}));
  v->add_option("--translations", vocab.translations, "TSV english answer -> translation; merges colliding classes");

  CodemixArgs cm;
  auto* m = app.add_subcommand("codemix", "Code-switch the target side of a parallel corpus");
  add_common(m, common);
  m->add_option("--parallel", cm.parallel)->required();
  m->add_option("--teacher-vocab", cm.teacher_vocab)->required();
  m->add_option("--student-vocab", cm.student_vocab)->required();
  m->add_option("--features", cm.features, "Feature store index");

  DistillArgs da;
  auto* d = app.add_subcommand("distill", "Distill a teacher into a target-language student");
  add_common(d, common);
  d->add_option("--parallel", da.parallel)->required();
  d->add_option("--validation", da.validation);
  d->add_option("--teacher-vocab", da.teacher_vocab)->required();
  d->add_option("--student-vocab", da.student_vocab)->required();
  d->add_option("--teacher", da.teacher, "Teacher checkpoint (default: randomly initialized)");
  d->add_option("--student", da.student, "Student checkpoint to start from");
  d->add_option("--features", da.features);
  d->add_flag("--no-cls", da.no_cls, "Drop classification-token distillation");
  d->add_flag("--no-img", da.no_img, "Drop image-token distillation");
  d->add_flag("--no-tag", da.no_tag, "Drop object-tag distillation");
  d->add_flag("--no-cm", da.no_cm, "Drop code-mixed word distillation");
  d->add_flag("--last-layer-only", da.last_layer_only, "Distill the last layer only");

  TaskArgs ft, aug;
  for (auto [name, args, help] : {std::tuple{"finetune", &ft, "Classifier-only then full fine-tuning"},
                                  std::tuple{"aug", &aug, "Train on machine-translated data"}}) {
    auto* t = app.add_subcommand(name, help);
    add_common(t, common);
    t->add_option("--task", args->task)->required();
    t->add_option("--validation", args->validation);
    t->add_option("--vocab", args->vocab, "Subword vocabulary")->required();
    t->add_option("--answers", args->answers, "Answer vocabulary TSV (default: built from --task)");
    t->add_option("--init", args->init, "Checkpoint to start from");
    t->add_option("--features", args->features);
  }

  EvalArgs ea;
  auto* e = app.add_subcommand("eval", "Accuracy, BLEU and per-type breakdown");
  add_common(e, common);
  e->add_option("--task", ea.task)->required();
  e->add_option("--vocab", ea.vocab)->required();
  e->add_option("--answers", ea.answers)->required();
  e->add_option("--model", ea.model)->required();
  e->add_option("--features", ea.features);

  ExportArgs xa;
  auto* x = app.add_subcommand("export-embeddings", "Write token and region embeddings as TSV");
  add_common(x, common);
  x->add_option("--task", xa.task)->required();
  x->add_option("--vocab", xa.vocab)->required();
  x->add_option("--model", xa.model)->required();
  x->add_option("--tokens", xa.tokens, "Comma-separated subwords / object classes");
  x->add_option("--layer", xa.layer, "1-based layer (default: last)");
  x->add_option("--features", xa.features);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    print_error("usage", ex.what(), "");
    return 2;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : verbose ? spdlog::level::debug : spdlog::level::info);

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    json result;
    if (command == "synth") {
      result = cmd_synth(common, synth);
    } else if (command == "vocab") {
      result = cmd_vocab(common, vocab);
    } else if (command == "codemix") {
      result = cmd_codemix(common, cm);
    } else if (command == "distill") {
      result = cmd_distill(common, da);
    } else if (command == "finetune") {
      result = cmd_task("finetune", common, ft);
    } else if (command == "aug") {
      result = cmd_task("aug", common, aug);
    } else if (command == "eval") {
      result = cmd_eval(common, ea);
    } else {
      result = cmd_export(common, xa);
    }
    result.erase("config");
    std::cout << result.dump() << std::endl;
    return 0;
  } catch (const UsageError& ex) {
    print_error("usage", ex.what(), command);
    return 2;
  } catch (const ContractError& ex) {
    print_error("contract", ex.what(), command);
  } catch (const FormatError& ex) {
    print_error("format", ex.what(), command);
  } catch (const NumericError& ex) {
    print_error("numeric", ex.what(), command);
  } catch (const IoError& ex) {
    print_error("io", ex.what(), command);
  } catch (const json::exception& ex) {
    print_error("config", ex.what(), command);
  } catch (const std::exception& ex) {
    print_error("runtime", ex.what(), command);
  }
  return 1;
}
