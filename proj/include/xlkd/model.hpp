#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xlkd/autodiff.hpp"
#include "xlkd/tokenize.hpp"

namespace xlkd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  int hidden_size = 768;
  int num_layers = 12;
  int num_heads = 12;
  int intermediate_size = 0;  // 0 means 4 * hidden_size
  int feature_dim = 2054;
  int max_text_tokens = 128;
  int max_image_tokens = 50;
  double dropout = 0.3;
  double attention_dropout = 0.1;
  int vocab_size = 0;
  int num_classes = 1;

  int ffn_size() const { return intermediate_size > 0 ? intermediate_size : 4 * hidden_size; }
  // Throws ContractError on an invalid configuration.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct RegionFeatures {
  Matrix vectors;  // count x feature_dim
  std::size_t count() const { return static_cast<std::size_t>(vectors.rows()); }
};

/// One fusion-encoder input. Layout on the wire:
/// [CLS] question [SEP] tags [SEP] regions, segment 0 for the
/// question part and segment 1 for tags and regions.
struct SpecialIds {
  TokenId cls = 2;
  TokenId sep = 3;
  TokenId pad = 0;
  static SpecialIds of(const SubwordVocab& vocab) { return {vocab.cls_id(), vocab.sep_id(), vocab.pad_id()}; }
};

struct WordTagImageTriple {
  SpecialIds specials;  // of the vocabulary that produced the text
  TokenizedText question;
  std::vector<TokenizedText> tags;
  RegionFeatures regions;

  std::size_t tag_token_count() const;
  std::size_t text_token_count() const { return question.size() + tag_token_count() + 3; }
};

enum class PositionRole : std::uint8_t {
  ClassificationMarker,
  QuestionWord,
  Separator,
  TagSubword,
  ImageRegion,
  Padding,
};

const char* role_name(PositionRole role);
std::vector<PositionRole> position_roles(const WordTagImageTriple& triple, std::size_t extra_padding = 0);

struct EncoderOutput {
  std::map<int, Matrix> layers;  // 1-based layer index -> positions x hidden
  std::vector<PositionRole> roles;

  bool has_layer(int layer) const { return layers.contains(layer); }
  const Matrix& layer(int index) const;
  std::vector<int> positions(PositionRole role) const;
};

struct Parameter {
  std::string name;
  std::string group;  // embeddings | encoder | classifier
  Matrix value;
};

class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig config);  // zero-initialized parameters

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  std::size_t index_of(const std::string& name) const;
  const Matrix& param(const std::string& name) const { return params_[index_of(name)].value; }
  Matrix& param(const std::string& name) { return params_[index_of(name)].value; }

 private:
  ModelConfig config_;
  std::vector<Parameter> params_;
};

Model init_model(const ModelConfig& config, std::uint64_t seed);

// Mask over parameters: false for parameters whose group or name prefix is
// listed in `frozen`.
std::vector<bool> trainable_mask(const Model& model, std::span<const std::string> frozen);

/// Lazily creates one tape leaf per parameter. With `tracked` false every
/// parameter is a constant (used for the frozen teacher).
class ModelBinding {
 public:
  ModelBinding(ad::Tape& tape, const Model& model, bool tracked, const std::vector<bool>* trainable = nullptr);
  ad::Var param(std::size_t index);
  ad::Var param(const std::string& name) { return param(model_->index_of(name)); }
  ad::Tape& tape() { return *tape_; }
  const Model& model() const { return *model_; }

 private:
  ad::Tape* tape_;
  const Model* model_;
  bool tracked_;
  const std::vector<bool>* trainable_;
  std::vector<ad::Var> leaves_;
};

struct ForwardOptions {
  std::set<int> retain_layers;
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training
  std::size_t extra_padding = 0;   // padding positions appended after the regions
};

struct ForwardGraph {
  std::map<int, ad::Var> layers;
  std::vector<PositionRole> roles;
};

// Throws ContractError when the triple exceeds the length budgets or a
// retained layer is out of range.
void check_triple(const ModelConfig& config, const WordTagImageTriple& triple);

ForwardGraph build_forward(ModelBinding& binding, const WordTagImageTriple& triple, const ForwardOptions& opts);
ad::Var build_logits(ModelBinding& binding, const ForwardGraph& graph);

EncoderOutput forward(const Model& model, const WordTagImageTriple& triple, const ForwardOptions& opts);
EncoderOutput forward(const Model& model, const WordTagImageTriple& triple, const std::set<int>& retain_layers);
Vector classify(const Model& model, const EncoderOutput& out);

struct GradientResult {
  double loss = 0.0;
  std::vector<Matrix> grads;   // aligned with model.parameters(); zero where frozen
  std::vector<bool> trainable;
};

using Objective = std::function<ad::Var(ModelBinding&)>;

// Throws NumericError on a non-finite loss.
GradientResult gradients(const Model& model, const Objective& objective,
                         std::span<const std::string> frozen = {});

struct Checkpoint {
  Model model;
  long step = 0;
  nlohmann::json metrics = nlohmann::json::array();
  nlohmann::json config_echo = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace xlkd
