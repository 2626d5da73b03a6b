#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "xlkd/answers.hpp"
#include "xlkd/codemix.hpp"
#include "xlkd/data.hpp"
#include "xlkd/distill.hpp"
#include "xlkd/errors.hpp"
#include "xlkd/metrics.hpp"
#include "xlkd/model.hpp"
#include "xlkd/tokenize.hpp"
#include "xlkd/train.hpp"

namespace py = pybind11;
using namespace xlkd;

namespace {

using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

AlignmentMatrix matrix_from(const BoolArray& a) {
  AlignmentMatrix m(static_cast<std::size_t>(a.rows()), static_cast<std::size_t>(a.cols()));
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (a(i, j)) m.set(static_cast<std::size_t>(i), static_cast<std::size_t>(j), true);
  return m;
}

BoolArray array_from(const AlignmentMatrix& m) {
  BoolArray a = BoolArray::Constant(static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()), false);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m.at(i, j);
  return a;
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

CodeMixOptions mix_options(double ratio, const std::string& denominator, const std::string& sampling) {
  CodeMixOptions o;
  o.ratio = ratio;
  if (denominator != "all_words" && denominator != "eligible_words") throw ContractError("denominator: all_words | eligible_words");
  if (sampling != "exact_count" && sampling != "bernoulli") throw ContractError("sampling: exact_count | bernoulli");
  o.denominator = denominator == "all_words" ? MixDenominator::AllWords : MixDenominator::EligibleWords;
  o.sampling = sampling == "exact_count" ? MixSampling::ExactCount : MixSampling::Bernoulli;
  return o;
}

py::dict mixed_dict(const CodeMixedSentence& m) {
  py::list rep;
  for (const auto& r : m.replaced) rep.append(py::make_tuple(r.target_word, r.source_word));
  py::dict d;
  d["words"] = m.words;
  d["text"] = m.text();
  d["replaced"] = rep;
  d["origin"] = m.origin;
  return d;
}

py::dict breakdown_dict(const DistillationLoss& loss) {
  py::list terms;
  for (const auto& t : loss.terms) {
    py::dict d;
    d["layer"] = t.layer;
    d["objective"] = objective_name(t.objective);
    d["raw"] = t.raw;
    d["value"] = t.value;
    d["enabled"] = t.enabled;
    terms.append(d);
  }
  py::dict d;
  d["total"] = loss.total;
  d["terms"] = terms;
  return d;
}

struct ItemSet {
  std::vector<DistillationBatchItem> items;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Cross-lingual distillation toolkit core";
  m.attr("__version__") = "0.1.0";

  auto base = py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  (void)base;

  // tokenize
  py::class_<SubwordVocab>(m, "SubwordVocab")
      .def(py::init<std::vector<std::string>>())
      .def("__len__", &SubwordVocab::size)
      .def("token", &SubwordVocab::token)
      .def("id_of", &SubwordVocab::id_of)
      .def("__contains__", &SubwordVocab::contains)
      .def_property_readonly("entries", &SubwordVocab::entries)
      .def_property_readonly("pad_id", &SubwordVocab::pad_id)
      .def_property_readonly("unk_id", &SubwordVocab::unk_id)
      .def_property_readonly("cls_id", &SubwordVocab::cls_id)
      .def_property_readonly("sep_id", &SubwordVocab::sep_id);
  m.def("load_vocab", &load_vocab);
  m.def("dump_vocab", &dump_vocab);

  py::class_<TokenizedText>(m, "TokenizedText")
      .def_property_readonly("subwords",
                             [](const TokenizedText& t) {
                               std::vector<std::string> s;
                               for (const auto& w : t.subwords) s.push_back(w.text);
                               return s;
                             })
      .def_property_readonly("ids",
                             [](const TokenizedText& t) {
                               std::vector<TokenId> s;
                               for (const auto& w : t.subwords) s.push_back(w.id);
                               return s;
                             })
      .def_property_readonly("word_spans",
                             [](const TokenizedText& t) {
                               py::list out;
                               for (const auto& s : t.word_spans) out.append(py::make_tuple(s.word, s.first, s.last));
                               return out;
                             })
      .def_readonly("source_words", &TokenizedText::source_words)
      .def("strings_of_word", &TokenizedText::strings_of_word)
      .def("__len__", &TokenizedText::size);
  m.def("lowercase", &lowercase);
  m.def("tokenize", &tokenize, py::arg("text"), py::arg("vocab"));
  m.def("truncate", [](const TokenizedText& t, std::size_t keep) { return xlkd::truncate(t, keep); });
  m.def(
      "match_matrix",
      [](const TokenizedText& s, const TokenizedText& t) {
        return array_from(match_matrix(s, t, same_index_scope(s.source_words.size(), t.source_words.size())));
      },
      "Binary matrix of matched, aligned subwords (same word index on both sides).");

  // codemix
  m.def("parse_alignment", [](const std::string& line) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& l : parse_alignment(line).links) out.emplace_back(l.source, l.target);
    return out;
  });
  m.def("eligible_words", [](const std::string& source, const std::string& target, const std::string& alignment,
                             const SubwordVocab& student, const SubwordVocab& teacher) {
    return eligible_words(make_sentence_pair(source, target), parse_alignment(alignment), student, teacher);
  });
  m.def(
      "code_mix",
      [](const std::string& source, const std::string& target, const std::string& alignment,
         const SubwordVocab& student, const SubwordVocab& teacher, double ratio, std::uint64_t seed,
         const std::string& denominator, const std::string& sampling) {
        return mixed_dict(code_mix(make_sentence_pair(source, target), parse_alignment(alignment), student, teacher,
                                   mix_options(ratio, denominator, sampling), seed));
      },
      py::arg("source"), py::arg("target"), py::arg("alignment"), py::arg("student_vocab"), py::arg("teacher_vocab"),
      py::arg("ratio") = 0.15, py::arg("seed") = 0, py::arg("denominator") = "all_words",
      py::arg("sampling") = "exact_count");

  // model
  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("hidden_size", &ModelConfig::hidden_size)
      .def_readwrite("num_layers", &ModelConfig::num_layers)
      .def_readwrite("num_heads", &ModelConfig::num_heads)
      .def_readwrite("intermediate_size", &ModelConfig::intermediate_size)
      .def_readwrite("feature_dim", &ModelConfig::feature_dim)
      .def_readwrite("max_text_tokens", &ModelConfig::max_text_tokens)
      .def_readwrite("max_image_tokens", &ModelConfig::max_image_tokens)
      .def_readwrite("dropout", &ModelConfig::dropout)
      .def_readwrite("attention_dropout", &ModelConfig::attention_dropout)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("num_classes", &ModelConfig::num_classes)
      .def("validate", &ModelConfig::validate)
      .def("to_dict", [](const ModelConfig& c) { return to_py(nlohmann::json(c)); });

  py::class_<Model>(m, "Model")
      .def_property_readonly("config", &Model::config)
      .def("parameter_count", &Model::parameter_count)
      .def("parameter_names",
           [](const Model& md) {
             std::vector<std::string> n;
             for (const auto& p : md.parameters()) n.push_back(p.name);
             return n;
           })
      .def("get", [](const Model& md, const std::string& name) { return Matrix(md.param(name)); })
      .def("set",
           [](Model& md, const std::string& name, const Matrix& v) {
             Matrix& p = md.param(name);
             if (p.rows() != v.rows() || p.cols() != v.cols()) throw ContractError("shape mismatch for " + name);
             p = v;
           })
      .def("save", [](const Model& md, const std::filesystem::path& path) { save_checkpoint(path, {md, 0, {}, {}}); });
  m.def("init_model", &init_model, py::arg("config"), py::arg("seed") = 0);
  m.def("load_model", [](const std::filesystem::path& p) { return load_checkpoint(p).model; });
  m.def(
      "encode",
      [](const Model& md, const SubwordVocab& vocab, const std::string& question, const std::vector<std::string>& tags,
         const Matrix& features, const std::set<int>& layers, std::size_t extra_padding) {
        ExampleRecord r;
        r.question = question;
        r.tags = tags;
        r.features = features;
        ForwardOptions o;
        o.retain_layers = layers;
        o.extra_padding = extra_padding;
        const auto out = forward(md, assemble_triple(r, vocab, md.config()), o);
        std::vector<std::string> roles;
        for (auto role : out.roles) roles.push_back(role_name(role));
        return py::make_tuple(out.layers, roles);
      },
      py::arg("model"), py::arg("vocab"), py::arg("question"), py::arg("tags"), py::arg("features"),
      py::arg("layers"), py::arg("extra_padding") = 0,
      "Retained layer embeddings (1-based) and the role of every position.");

  // distill
  m.def("mse", &mse);
  m.def("loss_cls", &loss_cls);
  m.def("loss_img", &loss_img);
  m.def("loss_tag", [](const Matrix& s, const Matrix& t, const BoolArray& a, std::size_t n) {
    return loss_tag(s, t, matrix_from(a), n);
  });
  m.def("loss_cm", [](const Matrix& s, const Matrix& t, const BoolArray& b, std::size_t n) {
    return loss_cm(s, t, matrix_from(b), n);
  });
  py::class_<DistillationConfig>(m, "DistillationConfig")
      .def(py::init<>())
      .def_static("standard", &DistillationConfig::standard)
      .def_readwrite("layer_set", &DistillationConfig::layer_set)
      .def_readwrite("layer_weights", &DistillationConfig::layer_weights)
      .def_readwrite("enable_cls", &DistillationConfig::enable_cls)
      .def_readwrite("enable_img", &DistillationConfig::enable_img)
      .def_readwrite("enable_tag", &DistillationConfig::enable_tag)
      .def_readwrite("enable_cm", &DistillationConfig::enable_cm)
      .def("to_dict", [](const DistillationConfig& c) { return to_py(nlohmann::json(c)); });

  // data
  py::class_<SynthCorpus>(m, "SynthCorpus")
      .def_readonly("teacher_vocab", &SynthCorpus::teacher_vocab)
      .def_readonly("student_vocab", &SynthCorpus::student_vocab)
      .def_readonly("dictionary", &SynthCorpus::dictionary)
      .def_readonly("answer_translations", &SynthCorpus::answer_translations)
      .def_readonly("object_classes", &SynthCorpus::object_classes)
      .def_property_readonly("parallel",
                             [](const SynthCorpus& c) {
                               py::list out;
                               for (const auto& p : c.parallel) out.append(to_py(parallel_to_json(p)));
                               return out;
                             })
      .def_property_readonly("task", [](const SynthCorpus& c) {
        py::list out;
        for (const auto& r : c.task) out.append(to_py(record_to_json(r)));
        return out;
      });
  m.def(
      "synth_corpus",
      [](std::size_t pairs, std::size_t tasks, double eligibility, int annotations, int feature_dim,
         std::uint64_t seed) {
        SynthSpec s;
        s.pairs = pairs;
        s.tasks = tasks;
        s.eligibility = eligibility;
        s.annotations = annotations;
        s.feature_dim = feature_dim;
        return synth_corpus(s, seed);
      },
      py::arg("pairs") = 64, py::arg("tasks") = 32, py::arg("eligibility") = 1.0, py::arg("annotations") = 1,
      py::arg("feature_dim") = 8, py::arg("seed") = 0);

  py::class_<ItemSet>(m, "DistillationItems").def("__len__", [](const ItemSet& s) { return s.items.size(); });
  m.def(
      "build_distillation_items",
      [](const SynthCorpus& c, const ModelConfig& teacher, const ModelConfig& student, double ratio,
         std::uint64_t seed) {
        ItemSet s;
        const auto opts = mix_options(ratio, "all_words", "exact_count");
        for (std::size_t i = 0; i < c.parallel.size(); ++i) {
          const auto& p = c.parallel[i];
          const auto mixed = code_mix(p.sentences(), p.alignment, c.student_vocab, c.teacher_vocab, opts, seed + i, i);
          s.items.push_back(make_distillation_item(p, mixed, c.teacher_vocab, teacher, c.student_vocab, student));
        }
        return s;
      },
      py::arg("corpus"), py::arg("teacher_config"), py::arg("student_config"), py::arg("ratio") = 0.15,
      py::arg("seed") = 0);
  m.def("kd_objective", [](const ItemSet& s, const Model& teacher, const Model& student, const DistillationConfig& cfg) {
    return kd_objective(s.items, teacher, student, cfg).mean;
  });
  m.def("loss_distil", [](const ItemSet& s, std::size_t index, const Model& teacher, const Model& student,
                          const DistillationConfig& cfg) {
    const auto& item = s.items.at(index);
    return breakdown_dict(loss_distil(item, forward(teacher, item.teacher_input, cfg.layers()),
                                      forward(student, item.student_input, cfg.layers()), cfg));
  });

  // train
  m.def(
      "run_kd_stage",
      [](const Model& teacher, Model& student, const ItemSet& s, const DistillationConfig& cfg, const py::object& train) {
        const TrainConfig tc = from_py(train).get<TrainConfig>();
        RunRecord rec;
        {
          py::gil_scoped_release release;
          rec = run_kd_stage(teacher, student, s.items, {}, cfg, tc);
        }
        py::list losses;
        for (const auto& st : rec.steps) losses.append(st.loss);
        py::dict d;
        d["losses"] = losses;
        d["validations"] = rec.validations.size();
        d["best_metric"] = rec.best ? py::cast(rec.best_metric) : py::none();
        return d;
      },
      py::arg("teacher"), py::arg("student"), py::arg("items"), py::arg("config"), py::arg("train"),
      "Distill in place; `train` is a dict in the train-config JSON layout.");

  // vocab
  py::class_<AnswerVocabulary>(m, "AnswerVocabulary")
      .def("__len__", &AnswerVocabulary::size)
      .def_property_readonly("classes", &AnswerVocabulary::classes)
      .def("members", &AnswerVocabulary::members)
      .def("frequency", &AnswerVocabulary::frequency)
      .def("class_of", &AnswerVocabulary::class_of)
      .def_property_readonly("coverage", &AnswerVocabulary::coverage);
  m.def("build_answer_vocab",
        [](const std::vector<std::string>& answers, std::size_t k) { return build_answer_vocab(answers, k); });
  m.def("merge_by_translation", &merge_by_translation);
  m.def("coverage", [](const std::vector<std::string>& answers, const AnswerVocabulary& v) { return coverage(answers, v); });

  // evalx
  m.def("accuracy_exact", [](const std::vector<int>& p, const std::vector<std::string>& r, const AnswerVocabulary& v) {
    return accuracy_exact(p, r, v);
  });
  m.def("vqa_soft_scores", [](const std::vector<int>& p, const std::vector<std::vector<std::string>>& a,
                              const AnswerVocabulary& v) { return vqa_soft_scores(p, a, v); });
  m.def("accuracy_vqa_soft", [](const std::vector<int>& p, const std::vector<std::vector<std::string>>& a,
                                const AnswerVocabulary& v) { return accuracy_vqa_soft(p, a, v); });
  m.def(
      "bleu",
      [](const std::vector<std::string>& p, const std::vector<std::string>& r,
         std::optional<std::function<std::vector<std::string>(std::string)>> split) {
        WordSplitter s;
        if (split) s = [f = *split](std::string_view x) { return f(std::string(x)); };
        return bleu(p, r, s);
      },
      py::arg("predictions"), py::arg("references"), py::arg("split") = py::none());
  m.def("question_type_breakdown", [](const std::vector<std::string>& q, const std::vector<double>& s,
                                      const std::vector<std::pair<std::string, std::string>>& rules) {
    std::vector<TypeRule> r;
    for (const auto& [name, trig] : rules) r.push_back({name, trig});
    py::list out;
    for (const auto& b : question_type_breakdown(q, s, r).buckets) out.append(py::make_tuple(b.name, b.count, b.accuracy));
    return out;
  });
}
